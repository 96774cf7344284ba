//! Relational graph recognition with idealized multi-head QK attention:
//! graphs, embeddings, explicit constructions, scoring, verification,
//! gradient training and capacity analysis.

pub mod analysis;
pub mod attn;
pub mod construct;
pub mod embed;
pub mod error;
pub mod graph;
pub mod io;
pub mod rng;
pub mod sweep;
pub mod train;
pub mod verify;

pub use error::{Result, RgrError};
