//! On-disk formats.
//!
//! Matrices use a small container: an 8-byte little-endian header length,
//! a JSON header, then the f64 payload in little-endian column-major order.
//! Sweep logs are JSON lines. Graphs and context sets are plain JSON.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ShapeBuilder};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attn::Context;
use crate::construct::{AttentionParams, ConstructionKind, HeadBlock, SignatureKind};
use crate::embed::{EmbeddingKind, EmbeddingMatrix};
use crate::error::{Result, RgrError};
use crate::sweep::RunRecord;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(RgrError::Format(msg.into()))
}

fn write_container<H: Serialize>(w: &mut impl Write, header: &H, mats: &[&Array2<f64>]) -> Result<()> {
    let h = serde_json::to_vec(header)?;
    w.write_all(&(h.len() as u64).to_le_bytes())?;
    w.write_all(&h)?;
    for m in mats {
        // column-major: walk the transpose in logical order
        for v in m.t().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_container<H: DeserializeOwned>(r: &mut impl Read) -> Result<(H, Vec<f64>)> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 30 {
        return format_err(format!("implausible header length {len}"));
    }
    let mut h = vec![0u8; len as usize];
    r.read_exact(&mut h)?;
    let header = serde_json::from_slice(&h)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.len() % 8 != 0 {
        return format_err("payload length is not a multiple of 8 bytes");
    }
    let vals = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((header, vals))
}

/// Takes the next rows×cols column-major block off the front of `vals`.
fn take_matrix(vals: &mut std::slice::Iter<f64>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let data: Vec<f64> = vals.by_ref().take(rows * cols).copied().collect();
    if data.len() != rows * cols {
        return format_err(format!("payload too short for a {rows}x{cols} matrix"));
    }
    Ok(Array2::from_shape_vec((rows, cols).f(), data).expect("length checked").as_standard_layout().into_owned())
}

#[derive(Serialize, Deserialize)]
struct EmbeddingHeader {
    m: usize,
    d_model: usize,
    kind: String,
    #[serde(rename = "p_B")]
    p_b: Option<f64>,
    seed: Option<u64>,
}

pub fn write_embedding_to(w: &mut impl Write, x: &EmbeddingMatrix) -> Result<()> {
    let (kind, p_b) = match x.kind {
        EmbeddingKind::SparseBinary { p_b } => ("sparse-binary", Some(p_b)),
        k => (k.name(), None),
    };
    let header = EmbeddingHeader { m: x.m(), d_model: x.d_model(), kind: kind.into(), p_b, seed: x.seed };
    write_container(w, &header, &[&x.rows])
}

pub fn read_embedding_from(r: &mut impl Read) -> Result<EmbeddingMatrix> {
    let (h, vals): (EmbeddingHeader, _) = read_container(r)?;
    let kind = match (h.kind.as_str(), h.p_b) {
        ("one-hot", _) => EmbeddingKind::OneHot,
        ("gaussian-unit-norm", _) => EmbeddingKind::GaussianUnitNorm,
        ("sparse-binary", Some(p_b)) => EmbeddingKind::SparseBinary { p_b },
        (k, _) => return format_err(format!("unknown embedding kind {k:?} (or missing p_B)")),
    };
    let mut it = vals.iter();
    let rows = take_matrix(&mut it, h.m, h.d_model)?;
    if it.next().is_some() {
        return format_err("trailing payload after embedding matrix");
    }
    Ok(EmbeddingMatrix { rows, kind, seed: h.seed })
}

pub fn write_embedding(path: &Path, x: &EmbeddingMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_embedding_to(&mut w, x)?;
    w.flush()?;
    Ok(())
}

pub fn read_embedding(path: &Path) -> Result<EmbeddingMatrix> {
    read_embedding_from(&mut BufReader::new(File::open(path)?))
}

/// Header row `x0,x1,…` then one row per item.
pub fn embedding_to_csv(x: &EmbeddingMatrix) -> String {
    let mut out = (0..x.d_model()).map(|c| format!("x{c}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in x.rows.rows() {
        out.push_str(&row.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    m: usize,
    signature_kind: SignatureKind,
    mu: f64,
    blocks: Vec<HeadBlock>,
}

#[derive(Serialize, Deserialize)]
struct ParamsHeader {
    h: usize,
    d_k: usize,
    d_model: usize,
    tau: f64,
    construction: ConstructionKind,
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trace: Option<TraceHeader>,
}

/// Payload: W_Q, then W_K, then the m×d_k signatures when a trace is present.
pub fn write_params_to(w: &mut impl Write, p: &AttentionParams) -> Result<()> {
    let trace = p.trace.as_ref().map(|t| TraceHeader {
        m: t.signatures.nrows(),
        signature_kind: t.signature_kind,
        mu: t.mu,
        blocks: t.blocks.clone(),
    });
    let header = ParamsHeader {
        h: p.heads,
        d_k: p.d_k,
        d_model: p.d_model(),
        tau: p.tau,
        construction: p.construction,
        seed: p.seed,
        trace,
    };
    let mut mats = vec![&p.w_q, &p.w_k];
    if let Some(t) = &p.trace {
        mats.push(&t.signatures);
    }
    write_container(w, &header, &mats)
}

pub fn read_params_from(r: &mut impl Read) -> Result<AttentionParams> {
    let (h, vals): (ParamsHeader, _) = read_container(r)?;
    let cols = h.h * h.d_k;
    let mut it = vals.iter();
    let w_q = take_matrix(&mut it, h.d_model, cols)?;
    let w_k = take_matrix(&mut it, h.d_model, cols)?;
    let trace = match h.trace {
        Some(t) => Some(crate::construct::ConstructionTrace {
            signatures: take_matrix(&mut it, t.m, h.d_k)?,
            blocks: t.blocks,
            signature_kind: t.signature_kind,
            mu: t.mu,
        }),
        None => None,
    };
    if it.next().is_some() {
        return format_err("trailing payload after parameter matrices");
    }
    Ok(AttentionParams { w_q, w_k, heads: h.h, d_k: h.d_k, tau: h.tau, construction: h.construction, seed: h.seed, trace })
}

pub fn write_params(path: &Path, p: &AttentionParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params_to(&mut w, p)?;
    w.flush()?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<AttentionParams> {
    read_params_from(&mut BufReader::new(File::open(path)?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Context sets as JSON arrays of index lists; `m` is used for validation.
pub fn read_contexts(path: &Path, m: usize) -> Result<Vec<Context>> {
    let raw: Vec<Vec<usize>> = read_json(path)?;
    raw.into_iter().map(|c| Context::new(c, m)).collect()
}

/// Reads a JSON-lines run log; a missing file is an empty log.
pub fn read_run_log(path: &Path) -> Result<Vec<RunRecord>> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            Err(e) => return format_err(format!("{}:{}: {e}", path.display(), n + 1)),
        }
    }
    Ok(out)
}

/// Append-only writer for run logs.
pub struct RunLogWriter {
    file: File,
}

impl RunLogWriter {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(RunLogWriter { file: OpenOptions::new().create(true).append(true).open(path)? })
    }

    pub fn append(&mut self, r: &RunRecord) -> Result<()> {
        let mut line = serde_json::to_vec(r)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        Ok(())
    }
}
