//! Gradient training of (W_Q, W_K, τ) with the weighted logistic pair loss,
//! one context per step, AdamW, and validation-based early stopping.

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attn::Context;
use crate::construct::AttentionParams;
use crate::embed::{gen_gaussian_unit_norm, EmbeddingMatrix};
use crate::error::{invalid, Result};
use crate::graph::{random_derangement, PermutationGraph};
use crate::rng::{child_seed, purpose, stream};
use crate::verify::{sample_context_with, sample_contexts, Scorer};

/// How to read the second argument of the N(0, 1/√d_model) initializer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitScale {
    /// standard deviation d_model^{-1/2}
    #[default]
    Std,
    /// variance d_model^{-1/2}
    Variance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub alpha: f64,
    pub ell: usize,
    /// test-time context length; defaults to `ell`
    pub ell_test: Option<usize>,
    pub rho: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub val_pass: f64,
    pub n_val: usize,
    pub n_test: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub init: InitScale,
    /// steps averaged into each loss-curve point
    pub loss_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            alpha: 10.0,
            ell: 16,
            ell_test: None,
            rho: 0.5,
            max_steps: 20_000,
            eval_every: 500,
            patience: 5,
            val_pass: 0.995,
            n_val: 500,
            n_test: 2000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            init: InitScale::Std,
            loss_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.alpha, self.eps];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return invalid("lr, alpha and eps must be positive");
        }
        if self.ell < 2 || self.ell_test.is_some_and(|l| l < 2) {
            return invalid("context lengths must be at least 2");
        }
        if [self.max_steps, self.eval_every, self.patience, self.n_val, self.n_test, self.loss_every].contains(&0) {
            return invalid("step counts and set sizes must be positive");
        }
        if !(self.val_pass > 0.0 && self.val_pass < 1.0) {
            return invalid(format!("val_pass must lie in (0, 1), got {}", self.val_pass));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return invalid(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.weight_decay < 0.0 {
            return invalid("betas must lie in [0, 1) and weight decay must be non-negative");
        }
        Ok(())
    }

    pub fn test_ell(&self) -> usize {
        self.ell_test.unwrap_or(self.ell)
    }
}

/// y_pq = 1 iff (c_p, c_q) is an edge; diagonal false.
pub fn pair_labels(pi: &PermutationGraph, c: &Context) -> Array2<bool> {
    let idx = c.indices();
    Array2::from_shape_fn((idx.len(), idx.len()), |(p, q)| p != q && pi.is_edge(idx[p], idx[q]))
}

/// max(x, 0) + log1p(exp(−|x|))
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients with the same layout as [`AttentionParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub tau: f64,
}

/// L = (1/ℓ²) Σ_pq [softplus(−z)·y·(ℓ−1) + softplus(z)·(1−y)], z = α(S^max − τ),
/// diagonal included with y = 0. The max routes gradient to its arg-max head
/// (lowest index on ties).
pub fn loss_and_grads(
    params: &AttentionParams,
    x: &EmbeddingMatrix,
    c: &Context,
    labels: &Array2<bool>,
    alpha: f64,
) -> Result<(f64, Grads)> {
    let ell = c.len();
    if labels.dim() != (ell, ell) {
        return invalid(format!("labels have shape {:?}, expected ({ell}, {ell})", labels.dim()));
    }
    if !(alpha > 0.0) {
        return invalid(format!("alpha must be positive, got {alpha}"));
    }
    if params.d_model() != x.d_model() || params.heads == 0 {
        return invalid("params and embedding disagree on d_model, or params have no heads");
    }
    let xc = x.rows.select(Axis(0), c.indices());
    let q = xc.dot(&params.w_q);
    let k = xc.dot(&params.w_k);
    let d_k = params.d_k;
    let mut gq = Array2::<f64>::zeros(q.raw_dim());
    let mut gk = Array2::<f64>::zeros(k.raw_dim());
    let norm = 1.0 / (ell * ell) as f64;
    let pos_weight = (ell - 1) as f64;
    let mut loss = 0.0;
    let mut dtau = 0.0;

    for p in 0..ell {
        let qp = q.row(p);
        let qp = qp.as_slice().expect("standard layout");
        for qi in 0..ell {
            let kq = k.row(qi);
            let kq = kq.as_slice().expect("standard layout");
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for h in 0..params.heads {
                let r = h * d_k..(h + 1) * d_k;
                let sc: f64 = qp[r.clone()].iter().zip(&kq[r]).map(|(a, b)| a * b).sum();
                if sc > best {
                    best = sc;
                    arg = h;
                }
            }
            let z = alpha * (best - params.tau);
            let y = labels[[p, qi]];
            // dL/dz per pair
            let dz = if y {
                loss += softplus(-z) * pos_weight;
                -sigmoid(-z) * pos_weight
            } else {
                loss += softplus(z);
                sigmoid(z)
            } * norm;
            let ds = dz * alpha;
            dtau -= ds;
            let r = arg * d_k..(arg + 1) * d_k;
            gq.slice_mut(s![p, r.clone()]).scaled_add(ds, &k.slice(s![qi, r.clone()]));
            gk.slice_mut(s![qi, r.clone()]).scaled_add(ds, &q.slice(s![p, r]));
        }
    }
    Ok((
        loss * norm,
        Grads { w_q: xc.t().dot(&gq), w_k: xc.t().dot(&gk), tau: dtau },
    ))
}

/// First and second moments for every trainable coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    m_q: Array2<f64>,
    v_q: Array2<f64>,
    m_k: Array2<f64>,
    v_k: Array2<f64>,
    m_tau: f64,
    v_tau: f64,
    t: u64,
}

impl AdamW {
    pub fn new(params: &AttentionParams) -> Self {
        AdamW {
            m_q: Array2::zeros(params.w_q.raw_dim()),
            v_q: Array2::zeros(params.w_q.raw_dim()),
            m_k: Array2::zeros(params.w_k.raw_dim()),
            v_k: Array2::zeros(params.w_k.raw_dim()),
            m_tau: 0.0,
            v_tau: 0.0,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected AdamW update; decay is decoupled and skips τ.
    pub fn step(&mut self, params: &mut AttentionParams, grads: &Grads, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps, wd) = (cfg.lr, cfg.eps, cfg.weight_decay);
        let update = |w: &mut f64, m: &mut f64, v: &mut f64, g: f64, decay: bool| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            if decay {
                *w -= lr * wd * *w;
            }
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        Zip::from(&mut params.w_q)
            .and(&mut self.m_q)
            .and(&mut self.v_q)
            .and(&grads.w_q)
            .for_each(|w, m, v, &g| update(w, m, v, g, true));
        Zip::from(&mut params.w_k)
            .and(&mut self.m_k)
            .and(&mut self.v_k)
            .and(&grads.w_k)
            .for_each(|w, m, v, &g| update(w, m, v, g, true));
        update(&mut params.tau, &mut self.m_tau, &mut self.v_tau, grads.tau, false);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    pub final_params: AttentionParams,
    pub test_f1: f64,
    pub steps_used: usize,
    pub stopped_early: bool,
    /// (last step of window, mean training loss over the window)
    pub loss_curve: Vec<(usize, f64)>,
    /// (step, validation micro-F1)
    pub val_curve: Vec<(usize, f64)>,
}

/// Random init W ~ N(0, σ²) with σ from `scale`, τ = 0.
pub fn init_params(d_model: usize, heads: usize, d_k: usize, scale: InitScale, seed: u64) -> AttentionParams {
    let std = match scale {
        InitScale::Std => (d_model as f64).powf(-0.5),
        InitScale::Variance => (d_model as f64).powf(-0.25),
    };
    let mut rng = stream(seed, purpose::INIT);
    let mut params = AttentionParams::zeros(d_model, heads, d_k, 0.0);
    params.w_q.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal) * std);
    params.w_k.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal) * std);
    params.seed = Some(seed);
    params
}

/// The fixed (π, X) pair of a run; depends on the seed only.
pub fn run_instance(m: usize, d_model: usize, seed: u64) -> Result<(PermutationGraph, EmbeddingMatrix)> {
    Ok((random_derangement(m, seed)?, gen_gaussian_unit_norm(m, d_model, seed)?))
}

pub fn train_run(m: usize, d_model: usize, h: usize, total_key_dim: usize, seed: u64, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if h == 0 || total_key_dim == 0 || total_key_dim % h != 0 {
        return invalid(format!("D_K = {total_key_dim} must be a positive multiple of h = {h}"));
    }
    if cfg.ell > m || cfg.test_ell() > m {
        return invalid(format!("context length exceeds m = {m}"));
    }
    let d_k = total_key_dim / h;
    let (pi, x) = run_instance(m, d_model, seed)?;
    let val = sample_contexts(&pi, cfg.ell, cfg.rho, cfg.n_val, child_seed(seed, purpose::VAL_CONTEXTS, 0))?;
    let test = sample_contexts(&pi, cfg.test_ell(), cfg.rho, cfg.n_test, child_seed(seed, purpose::TEST_CONTEXTS, 0))?;

    let mut params = init_params(d_model, h, d_k, cfg.init, seed);
    let mut opt = AdamW::new(&params);
    let mut ctx_rng = stream(seed, purpose::TRAIN_CONTEXTS);
    let mut loss_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut window = 0.0;
    let mut streak = 0;
    let mut stopped_early = false;
    let mut steps_used = 0;

    for step in 1..=cfg.max_steps {
        let c = sample_context_with(&pi, cfg.ell, cfg.rho, &mut ctx_rng)?;
        let labels = pair_labels(&pi, &c);
        let (loss, grads) = loss_and_grads(&params, &x, &c, &labels, cfg.alpha)?;
        opt.step(&mut params, &grads, cfg);
        steps_used = step;
        window += loss;
        if step % cfg.loss_every == 0 {
            loss_curve.push((step, window / cfg.loss_every as f64));
            window = 0.0;
        }
        if step % cfg.eval_every == 0 {
            let f1 = Scorer::new(&params, &x)?.pooled(&pi, &val).f1();
            val_curve.push((step, f1));
            streak = if f1 > cfg.val_pass { streak + 1 } else { 0 };
            if streak >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let test_f1 = Scorer::new(&params, &x)?.pooled(&pi, &test).f1();
    Ok(TrainResult { final_params: params, test_f1, steps_used, stopped_early, loss_curve, val_curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn labels_examples() {
        let pi = random_derangement(6, 0).unwrap();
        let c = Context::new(vec![2, pi.target(2)], 6).unwrap();
        assert_eq!(pair_labels(&pi, &c), ndarray::array![[false, true], [false, false]]);
        let full = Context::new((0..6).collect(), 6).unwrap();
        let y = pair_labels(&pi, &full);
        assert!(y.rows().into_iter().all(|r| r.iter().filter(|&&b| b).count() == 1));
        assert!((0..6).all(|i| !y[[i, i]]));
    }

    #[test]
    fn zero_params_loss_is_ln2_weighted() {
        let (pi, x) = run_instance(20, 8, 0).unwrap();
        let params = AttentionParams::zeros(8, 2, 3, 0.0);
        let c = sample_context_with(&pi, 6, 0.5, &mut stream(1, 0)).unwrap();
        let y = pair_labels(&pi, &c);
        let pos = y.iter().filter(|&&b| b).count() as f64;
        let neg = 36.0 - pos;
        let (loss, _) = loss_and_grads(&params, &x, &c, &y, 10.0).unwrap();
        assert_relative_eq!(loss, 2f64.ln() * (5.0 * pos + neg) / 36.0, max_relative = 1e-14);
    }

    #[test]
    fn positive_pair_tau_gradient_sign() {
        // Non-edges sit far below τ, so only the positive term moves the loss.
        let pi = random_derangement(10, 3).unwrap();
        let x = crate::embed::gen_one_hot(10).unwrap();
        let mut params = crate::construct::construct_onehot_permutation(&pi, 0.25, 200, 3).unwrap();
        let c = Context::new(vec![0, pi.target(0)], 10).unwrap();
        params.tau = crate::attn::pair_score(&params, &x, 0, pi.target(0), 0) - 0.1;
        let y = pair_labels(&pi, &c);
        let (l0, g) = loss_and_grads(&params, &x, &c, &y, 10.0).unwrap();
        assert!(g.tau > 0.0);
        let mut lower = params.clone();
        lower.tau -= 1e-3;
        assert!(loss_and_grads(&lower, &x, &c, &y, 10.0).unwrap().0 < l0);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert_relative_eq!(softplus(0.0), 2f64.ln());
        assert_relative_eq!(sigmoid(-800.0) + sigmoid(800.0), 1.0);
    }

    #[test]
    fn adam_zero_gradients_do_nothing() {
        let mut params = init_params(4, 2, 2, InitScale::Std, 0);
        let before = params.clone();
        let mut opt = AdamW::new(&params);
        let g = Grads { w_q: Array2::zeros((4, 4)), w_k: Array2::zeros((4, 4)), tau: 0.0 };
        for _ in 0..10 {
            opt.step(&mut params, &g, &TrainConfig::default());
        }
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let cfg = TrainConfig::default();
        let mut params = AttentionParams::zeros(1, 1, 1, 0.0);
        let mut opt = AdamW::new(&params);
        let g = Grads { w_q: ndarray::array![[0.3]], w_k: ndarray::array![[-2.0]], tau: 1e-9 };
        opt.step(&mut params, &g, &cfg);
        // m̂ = g, v̂ = g², update = −lr·g/(|g|+ε)
        assert_relative_eq!(params.w_q[[0, 0]], -1e-3 * 0.3 / (0.3 + 1e-8), max_relative = 1e-12);
        assert_relative_eq!(params.w_k[[0, 0]], 1e-3 * 2.0 / (2.0 + 1e-8), max_relative = 1e-12);
        assert_relative_eq!(params.tau, -1e-3 * 1e-9 / (1e-9 + 1e-8), max_relative = 1e-9);
    }

    #[test]
    fn adam_constant_gradient_steps_approach_lr() {
        let cfg = TrainConfig::default();
        let mut params = AttentionParams::zeros(1, 1, 1, 0.0);
        let mut opt = AdamW::new(&params);
        let g = Grads { w_q: ndarray::array![[0.7]], w_k: ndarray::array![[0.7]], tau: 0.7 };
        let mut prev = 0.0;
        for _ in 0..5000 {
            prev = params.tau;
            opt.step(&mut params, &g, &cfg);
        }
        assert_relative_eq!(prev - params.tau, 1e-3, max_relative = 1e-6);
    }

    #[test]
    fn train_run_rejects_bad_split() {
        assert!(train_run(16, 8, 3, 8, 0, &TrainConfig::default()).is_err());
    }

    #[test]
    fn short_run_is_deterministic() {
        let cfg = TrainConfig { max_steps: 300, eval_every: 100, n_val: 20, n_test: 20, ..Default::default() };
        let a = train_run(24, 8, 2, 8, 5, &cfg).unwrap();
        let b = train_run(24, 8, 2, 8, 5, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.steps_used <= 300);
        assert_eq!(a.loss_curve.len(), 3);
    }
}
