//! Capacity calculators and sweep statistics: the counting lower bound, the
//! m log m / d_model law, t-intervals, D_K* extraction, head-count intervals
//! and scaling fits.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, Result};

/// log₂ of a positive big integer, to double precision.
fn log2_big(n: &BigUint) -> f64 {
    let bits = n.bits();
    if bits <= 64 {
        let v = n.iter_u64_digits().next().unwrap_or(0);
        return (v as f64).log2();
    }
    let shift = bits - 64;
    let top = (n >> shift).iter_u64_digits().next().unwrap_or(0);
    (top as f64).log2() + shift as f64
}

/// Exact C(n, k).
pub fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::from(0u32);
    }
    let k = k.min(n - k);
    let mut acc = BigUint::from(1u32);
    for i in 0..k {
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}

/// log₂ C(m(m−1), m') / (2·b·d_model); the additive O(1) slack is dropped.
pub fn lower_bound_dk(m: usize, m_prime: usize, d_model: usize, bits_per_param: u32) -> Result<f64> {
    let n = m as u64 * (m as u64).saturating_sub(1);
    if m_prime as u64 > n {
        return invalid(format!("m' = {m_prime} exceeds m(m-1) = {n}"));
    }
    if d_model == 0 || bits_per_param == 0 {
        return invalid("d_model and bits per parameter must be at least 1");
    }
    let c = binomial(n, m_prime as u64);
    Ok(log2_big(&c) / (2.0 * bits_per_param as f64 * d_model as f64))
}

/// C · m ln m / d_model.
pub fn predicted_dk(m: usize, d_model: usize, c: f64) -> f64 {
    let m = m as f64;
    c * m * m.ln() / d_model as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let mu = mean(v);
    v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// (mean, low, high) of the two-sided Student-t interval.
pub fn t_interval(samples: &[f64], level: f64) -> Result<(f64, f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return invalid(format!("t-interval needs at least 2 samples, got {n}"));
    }
    if !(level > 0.0 && level < 1.0) {
        return invalid(format!("confidence level must lie in (0, 1), got {level}"));
    }
    let mu = mean(samples);
    let se = (sample_var(samples) / n as f64).sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.5 + level / 2.0);
    Ok((mu, mu - t * se, mu + t * se))
}

/// Two-sided paired t-test p-value. All-zero differences give p = 1 and a
/// constant non-zero difference gives p = 0.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return invalid(format!("paired samples differ in length ({} vs {})", a.len(), b.len()));
    }
    if a.len() < 2 {
        return invalid("paired t-test needs at least 2 pairs");
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mu = mean(&d);
    let var = sample_var(&d);
    if var == 0.0 {
        return Ok(if mu == 0.0 { 1.0 } else { 0.0 });
    }
    let t = mu / (var / d.len() as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (d.len() - 1) as f64).expect("positive degrees of freedom");
    Ok((2.0 * dist.sf(t.abs())).min(1.0))
}

/// Test micro-F1 across seeds at one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub m: usize,
    pub d_model: usize,
    pub h: usize,
    #[serde(rename = "D_K")]
    pub dk: usize,
    pub seeds: usize,
    pub mean_f1: f64,
    pub f1_ci_low: f64,
    pub f1_ci_high: f64,
    pub per_seed_f1: Vec<f64>,
    /// seed ids aligned with `per_seed_f1`
    pub seed_ids: Vec<u64>,
}

impl SweepRecord {
    /// Builds the record with a 95% t-interval clipped to [0, 1]; a single
    /// seed gives a zero-width interval.
    pub fn from_seeds(m: usize, d_model: usize, h: usize, dk: usize, mut runs: Vec<(u64, f64)>) -> Result<Self> {
        if runs.is_empty() {
            return invalid("a sweep record needs at least one seed");
        }
        runs.sort_by_key(|r| r.0);
        let f1: Vec<f64> = runs.iter().map(|r| r.1).collect();
        let (mu, lo, hi) = if f1.len() >= 2 {
            t_interval(&f1, 0.95)?
        } else {
            (f1[0], f1[0], f1[0])
        };
        Ok(SweepRecord {
            m,
            d_model,
            h,
            dk,
            seeds: f1.len(),
            mean_f1: mu,
            f1_ci_low: lo.clamp(0.0, mu),
            f1_ci_high: hi.clamp(mu, 1.0),
            seed_ids: runs.iter().map(|r| r.0).collect(),
            per_seed_f1: f1,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DkStarEstimate {
    pub central: Option<usize>,
    pub optimistic: Option<usize>,
    pub conservative: Option<usize>,
    pub h_star: Option<usize>,
    pub h_interval: Option<(usize, usize)>,
}

fn min_dk(records: &[SweepRecord], ok: impl Fn(&SweepRecord) -> bool) -> Option<usize> {
    records.iter().filter(|r| ok(r)).map(|r| r.dk).min()
}

/// D_K* at one (m, d_model): smallest D_K over all h whose mean (central),
/// CI upper end (optimistic) or CI lower end (conservative) reaches `bar`.
/// h* and its interval come from [`optimal_heads_interval`] at α = 0.05.
pub fn extract_dk_star(records: &[SweepRecord], bar: f64) -> DkStarEstimate {
    let mut est = DkStarEstimate {
        central: min_dk(records, |r| r.mean_f1 >= bar),
        optimistic: min_dk(records, |r| r.f1_ci_high >= bar),
        conservative: min_dk(records, |r| r.f1_ci_low >= bar),
        ..Default::default()
    };
    if let Some(dk) = est.central {
        if let Ok((h, lo, hi)) = optimal_heads_interval(records, dk, bar, 0.05) {
            est.h_star = Some(h);
            est.h_interval = Some((lo, hi));
        }
    }
    est
}

/// (h*, h_min, h_max). h* is the best-mean head count at D_K* among those
/// reaching `bar`; the candidate pool is every record with D_K within 10% of
/// D_K*, and a candidate is kept unless a paired two-sided t-test against
/// h* on per-seed F1 gives p ≤ α.
pub fn optimal_heads_interval(records: &[SweepRecord], dk_star: usize, bar: f64, alpha: f64) -> Result<(usize, usize, usize)> {
    let best = records
        .iter()
        .filter(|r| r.dk == dk_star && r.mean_f1 >= bar)
        .max_by(|a, b| a.mean_f1.total_cmp(&b.mean_f1).then(b.h.cmp(&a.h)))
        .ok_or_else(|| crate::RgrError::InvalidArgument(format!("no record reaches {bar} at D_K = {dk_star}")))?;
    let tol = 0.1 * dk_star as f64;
    let mut kept = vec![best.h];
    for r in records.iter().filter(|r| (r.dk as f64 - dk_star as f64).abs() <= tol) {
        if std::ptr::eq(r, best) {
            continue;
        }
        if r.seed_ids != best.seed_ids {
            return invalid(format!(
                "per-seed results are not aligned (h = {}, D_K = {} vs h* = {})",
                r.h, r.dk, best.h
            ));
        }
        if r.per_seed_f1.len() < 2 || paired_t_test(&r.per_seed_f1, &best.per_seed_f1)? > alpha {
            kept.push(r.h);
        }
    }
    let lo = *kept.iter().min().expect("non-empty");
    let hi = *kept.iter().max().expect("non-empty");
    Ok((best.h, lo, hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

fn r_squared(points: &[(f64, f64)], pred: impl Fn(f64) -> f64) -> f64 {
    let ybar = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let ss_res: f64 = points.iter().map(|&(x, y)| (y - pred(x)).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|&(_, y)| (y - ybar).powi(2)).sum();
    if ss_tot == 0.0 {
        if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY }
    } else {
        1.0 - ss_res / ss_tot
    }
}

/// Through-origin least squares y ≈ slope·x; R² about the mean of y.
pub fn fit_scaling(points: &[(f64, f64)]) -> Result<Fit> {
    if points.len() < 2 {
        return invalid("scaling fit needs at least 2 points");
    }
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    if sxx == 0.0 {
        return invalid("scaling fit needs some non-zero x");
    }
    let slope = points.iter().map(|p| p.0 * p.1).sum::<f64>() / sxx;
    Ok(Fit { slope, intercept: 0.0, r_squared: r_squared(points, |x| slope * x), points: points.len() })
}

/// Ordinary least squares y ≈ slope·x + intercept.
pub fn fit_affine(points: &[(f64, f64)]) -> Result<Fit> {
    let n = points.len() as f64;
    let xbar = points.iter().map(|p| p.0).sum::<f64>() / n;
    let ybar = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - xbar).powi(2)).sum();
    if points.len() < 2 || sxx == 0.0 {
        return invalid("affine fit needs at least 2 distinct x values");
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - xbar) * (p.1 - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    Ok(Fit { slope, intercept, r_squared: r_squared(points, |x| slope * x + intercept), points: points.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub m: usize,
    pub d_model: usize,
    pub estimate: DkStarEstimate,
    pub excluded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub bar: f64,
    pub log_base: String,
    pub lower_bound_slack: String,
    pub points: Vec<PointSummary>,
    /// D_K* (central) against m ln m / d_model, through the origin
    pub capacity_fit: Option<Fit>,
    /// h* against m / d_model, with intercept
    pub head_fit: Option<Fit>,
    pub warnings: Vec<String>,
}

pub fn group_by_point(records: &[SweepRecord]) -> BTreeMap<(usize, usize), Vec<SweepRecord>> {
    let mut out: BTreeMap<(usize, usize), Vec<SweepRecord>> = BTreeMap::new();
    for r in records {
        out.entry((r.m, r.d_model)).or_default().push(r.clone());
    }
    out
}

/// Per-point D_K* estimates and both global fits. `exclude` marks points
/// kept in the table but left out of the fits.
pub fn analyze(records: &[SweepRecord], bar: f64, exclude: impl Fn(usize, usize) -> bool) -> Result<AnalysisReport> {
    if records.is_empty() {
        return invalid("no sweep records to analyze");
    }
    let mut points = Vec::new();
    let mut cap = Vec::new();
    let mut heads = Vec::new();
    let mut warnings = Vec::new();
    for ((m, d), recs) in group_by_point(records) {
        let estimate = extract_dk_star(&recs, bar);
        let excluded = exclude(m, d);
        match (estimate.central, excluded) {
            (None, _) => warnings.push(format!("m = {m}, d_model = {d}: no configuration reaches {bar}")),
            (Some(dk), false) => {
                cap.push((m as f64 * (m as f64).ln() / d as f64, dk as f64));
                if let Some(h) = estimate.h_star {
                    heads.push((m as f64 / d as f64, h as f64));
                }
            }
            _ => {}
        }
        points.push(PointSummary { m, d_model: d, estimate, excluded });
    }
    let capacity_fit = match fit_scaling(&cap) {
        Ok(f) => Some(f),
        Err(e) => {
            warnings.push(format!("capacity fit skipped: {e}"));
            None
        }
    };
    let head_fit = match fit_affine(&heads) {
        Ok(f) => Some(f),
        Err(e) => {
            warnings.push(format!("head-count fit skipped: {e}"));
            None
        }
    };
    Ok(AnalysisReport {
        bar,
        log_base: "natural".into(),
        lower_bound_slack: "additive O(1) term dropped".into(),
        points,
        capacity_fit,
        head_fit,
        warnings,
    })
}
