//! The TOML run configuration. One file may carry sections for several
//! commands; each command reads only its own section.

use std::path::Path;

use anyhow::{anyhow, bail, Context as _, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rgr::sweep::SweepConfig;
use rgr::train::TrainConfig;
use rgr::verify::ConstructionSpec;

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub graph: Option<GraphSection>,
    pub embedding: Option<EmbeddingSection>,
    pub construct: Option<ConstructionSpec>,
    pub verify: Option<VerifySection>,
    pub train: Option<TrainSection>,
    pub sweep: Option<SweepConfig>,
    pub analyze: Option<AnalyzeSection>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GraphSection {
    /// fixed-point-free permutation on m vertices
    Permutation { m: usize },
    /// m' distinct loop-free edges, uniform
    Random { m: usize, m_prime: usize },
    /// m' edges with in- and out-degree at most `max_degree`
    Bounded { m: usize, m_prime: usize, max_degree: usize },
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmbeddingSection {
    OneHot { m: usize },
    GaussianUnitNorm { m: usize, d_model: usize },
    SparseBinary { m: usize, d_model: usize, p_b: f64 },
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub trials: usize,
    /// largest Monte-Carlo failure rate still reported as success
    pub max_failure_rate: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection { trials: 100, max_failure_rate: 0.0 }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub m: usize,
    pub d_model: usize,
    pub h: usize,
    #[serde(rename = "D_K")]
    pub dk: usize,
    #[serde(default)]
    pub options: TrainConfig,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub bar: f64,
    /// drop (d_model = 16, m > 64) points from the fits
    pub exclude_outliers: bool,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        AnalyzeSection { bar: 0.99, exclude_outliers: false }
    }
}

/// A parsed config together with the hash of its raw bytes.
pub struct Loaded {
    pub config: Config,
    pub hash: String,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let config: Config = toml::from_str(&raw).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    Ok(Loaded { config, hash: sha256_hex(raw.as_bytes()) })
}

pub fn load_opt(path: Option<&Path>) -> Result<Loaded> {
    match path {
        Some(p) => load(p),
        None => Ok(Loaded { config: Config::default(), hash: sha256_hex(b"") }),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    rgr::sweep::hex(&Sha256::digest(bytes))
}

pub fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T> {
    match s {
        Some(v) => Ok(v),
        None => bail!("config has no [{name}] section"),
    }
}
