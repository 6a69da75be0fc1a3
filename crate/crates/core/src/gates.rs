//! Approximately binary gates.
//!
//! A gate vector `z` is produced from real logits `s` by
//!
//! ```text
//! z̃ = max(u(s) − β, 0)
//! z_k = (z̃_k − mean(z̃ over active)) · e^{−ζ} + 1   where z̃_k > 0
//! z_k = 0                                        elsewhere
//! ```
//!
//! Disabled gates are exactly zero; the enabled ones average exactly one
//! and deviate from one by less than `e^{−ζ}`. Positions are preserved: the
//! active/inactive split is a boolean mask, never a reordering.
//!
//! With `s ~ N(μ, σ²I)` the probability of a gate being enabled has a closed
//! form ([`prob_enabled_sigmoid`], [`prob_enabled_softmax`]). Training uses
//! the maximum-likelihood sample `s = μ`, optionally with multiplicative
//! Gaussian noise on `μ` ([`ml_sample`]).

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::special::{self, leave_one_out_logsumexp, normal_cdf};
use crate::tensor::{Tensor, TensorError};

/// Dropout-rate default `η⁽⁰⁾`. Corresponds to a noise std of about 0.42.
pub const DEFAULT_ETA0: f64 = -1.734;
/// Std of the (2σ-truncated) Normal used for `μ⁽⁰⁾`.
pub const MU_INIT_STD: f64 = 0.05;
/// `β = BETA_INIT_FACTOR · min u(μ⁽⁰⁾)`.
pub const BETA_INIT_FACTOR: f64 = 0.99;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GateError {
    #[error("a partition needs at least 2 gates, got {0}")]
    TooSmall(usize),
    #[error("beta must lie in (0, 1), got {0}")]
    BadBeta(f64),
    #[error("zeta must be >= 0, got {0}")]
    BadZeta(f64),
    #[error("sigma must be > 0, got {0}")]
    BadSigma(f64),
    #[error("lambda must be >= 0, got {0}")]
    BadLambda(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Differentiable map from gate logits into `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilityMap {
    /// Independent gates.
    Sigmoid,
    /// Competing gates sharing one normalizer.
    Softmax,
}

impl UtilityMap {
    pub fn apply(self, s: &[f64]) -> Vec<f64> {
        match self {
            Self::Sigmoid => s.iter().map(|&v| special::sigmoid(v)).collect(),
            Self::Softmax => special::softmax(s),
        }
    }

    pub fn apply_graph(self, g: &mut Graph, s: Var) -> Result<Var, TensorError> {
        match self {
            Self::Sigmoid => g.sigmoid(s),
            Self::Softmax => g.softmax(s),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sigmoid => "sigmoid",
            Self::Softmax => "softmax",
        }
    }
}

impl std::str::FromStr for UtilityMap {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "softmax" => Ok(Self::Softmax),
            other => Err(format!("unknown utility map `{other}` (sigmoid|softmax)")),
        }
    }
}

/// What one gate governs inside its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// One gate per weight entry.
    Weight,
    /// One gate per output unit (dense column, or conv channel).
    Neuron,
    /// One gate per convolution filter.
    Filter,
}

/// Result of the gate transform.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    pub z: Vec<f64>,
    /// `z̃_k > 0`.
    pub active_mask: Vec<bool>,
    pub n_active: usize,
    /// At most one active gate: the mean-centering carries no gradient.
    pub degenerate: bool,
}

impl GateOutput {
    fn from_rectified(rectified: &[f64], zeta_scale: f64) -> Self {
        let active_mask: Vec<bool> = rectified.iter().map(|&v| v > 0.0).collect();
        let n_active = active_mask.iter().filter(|&&a| a).count();
        let mean = if n_active == 0 {
            0.0
        } else {
            rectified.iter().sum::<f64>() / n_active as f64
        };
        let z = rectified
            .iter()
            .zip(&active_mask)
            .map(|(&r, &a)| {
                if a {
                    (r - mean) * zeta_scale + 1.0
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            z,
            active_mask,
            n_active,
            degenerate: n_active <= 1,
        }
    }

    /// Mean of the active gate values; `None` when nothing is active.
    pub fn active_mean(&self) -> Option<f64> {
        (self.n_active > 0).then(|| {
            self.z
                .iter()
                .zip(&self.active_mask)
                .filter(|(_, &a)| a)
                .map(|(z, _)| z)
                .sum::<f64>()
                / self.n_active as f64
        })
    }
}

fn check_transform_args(len: usize, beta: f64, zeta: f64) -> Result<(), GateError> {
    if len < 2 {
        return Err(GateError::TooSmall(len));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(GateError::BadBeta(beta));
    }
    if !(zeta >= 0.0) {
        return Err(GateError::BadZeta(zeta));
    }
    Ok(())
}

/// The gate transform on plain values. `zeta` may be `+∞`, which makes the
/// enabled gates exactly one.
pub fn gate_transform(
    s: &[f64],
    beta: f64,
    zeta: f64,
    utility: UtilityMap,
) -> Result<GateOutput, GateError> {
    check_transform_args(s.len(), beta, zeta)?;
    let rectified: Vec<f64> = utility
        .apply(s)
        .into_iter()
        .map(|u| (u - beta).max(0.0))
        .collect();
    Ok(GateOutput::from_rectified(&rectified, (-zeta).exp()))
}

/// Gate vector recorded on a graph together with its plain summary.
#[derive(Debug, Clone)]
pub struct GateVars {
    pub z: Var,
    pub output: GateOutput,
}

/// The gate transform on a graph, differentiable in `s` and in the scalar
/// `zeta` (the effective, non-negative value).
pub fn gate_transform_graph(
    g: &mut Graph,
    s: Var,
    beta: f64,
    zeta: Var,
    utility: UtilityMap,
) -> Result<GateVars, GateError> {
    let zeta_value = g.value(zeta).item();
    check_transform_args(g.value(s).numel(), beta, zeta_value)?;
    let u = utility.apply_graph(g, s)?;
    let beta_c = g.constant(Tensor::scalar(beta));
    let shifted = g.sub(u, beta_c)?;
    let rectified = g.max_with_zero(shifted)?;
    let mask: Vec<bool> = g.value(rectified).data().iter().map(|&v| v > 0.0).collect();
    let mean = g.masked_select_mean(rectified, &mask)?;
    let centered = g.sub(rectified, mean)?;
    let neg_zeta = g.neg(zeta)?;
    let scale = g.exp(neg_zeta)?;
    let scaled = g.mul(centered, scale)?;
    let one = g.constant(Tensor::scalar(1.0));
    let shifted_one = g.add(scaled, one)?;
    let mask_t = Tensor::new(
        g.value(s).shape().to_vec(),
        mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    )?;
    let mask_c = g.constant(mask_t);
    let z = g.mul(shifted_one, mask_c)?;
    let n_active = mask.iter().filter(|&&m| m).count();
    let output = GateOutput {
        z: g.value(z).data().to_vec(),
        active_mask: mask,
        n_active,
        degenerate: n_active <= 1,
    };
    Ok(GateVars { z, output })
}

/// `ζ = softplus(ζ_raw)`, keeping ζ non-negative while `ζ_raw` is unconstrained.
pub fn effective_zeta(zeta_raw: f64) -> f64 {
    special::softplus(zeta_raw)
}

/// Gaussian dropout std `√(σ(η)/(1−σ(η)))`.
pub fn dropout_rate(eta: f64) -> f64 {
    let p = special::sigmoid(eta).min(1.0 - 1e-12);
    (p / (1.0 - p)).sqrt()
}

/// `P(z_k > 0)` for a sigmoid gate with `s_k ~ N(μ_k, σ²)`.
pub fn prob_enabled_sigmoid(mu_k: f64, sigma: f64, beta: f64) -> f64 {
    // 1 − Φ((−ln(1/β − 1) − μ)/σ) = Φ((μ − logit β)/σ)
    normal_cdf((mu_k - special::logit(beta)) / sigma)
}

/// `P(z_k > 0 | s_l = μ_l, l ≠ k)` for a softmax gate with `s_k ~ N(μ_k, σ²)`.
pub fn prob_enabled_softmax(mu: &[f64], k: usize, sigma: f64, beta: f64) -> f64 {
    let lse = leave_one_out_logsumexp(mu)[k];
    normal_cdf((mu[k] - special::logit(beta) - lse) / sigma)
}

/// Enable probabilities for every gate of a partition.
pub fn prob_enabled(mu: &[f64], sigma: f64, beta: f64, utility: UtilityMap) -> Vec<f64> {
    let threshold = special::logit(beta);
    match utility {
        UtilityMap::Sigmoid => mu
            .iter()
            .map(|&m| normal_cdf((m - threshold) / sigma))
            .collect(),
        UtilityMap::Softmax => leave_one_out_logsumexp(mu)
            .into_iter()
            .zip(mu)
            .map(|(lse, &m)| normal_cdf((m - threshold - lse) / sigma))
            .collect(),
    }
}

/// Enable probabilities on a graph; differentiable in the whole `μ` vector.
pub fn prob_enabled_graph(
    g: &mut Graph,
    mu: Var,
    sigma: f64,
    beta: f64,
    utility: UtilityMap,
) -> Result<Var, TensorError> {
    let threshold = special::logit(beta);
    let margin = match utility {
        UtilityMap::Sigmoid => {
            let t = g.constant(Tensor::scalar(threshold));
            g.sub(mu, t)?
        }
        UtilityMap::Softmax => {
            let lse = g.leave_one_out_logsumexp(mu)?;
            let t = g.constant(Tensor::scalar(threshold));
            let cut = g.add(lse, t)?;
            g.sub(mu, cut)?
        }
    };
    let scaled = g.scalar_mul(margin, 1.0 / sigma)?;
    g.normal_cdf(scaled)
}

/// Draws `μ⁽⁰⁾` from `N(0, 0.05²)` truncated at ±2 std, redrawing the whole
/// vector until it holds at least one positive and one negative entry.
pub fn init_mu<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Result<Vec<f64>, GateError> {
    if size < 2 {
        return Err(GateError::TooSmall(size));
    }
    let normal = Normal::new(0.0, MU_INIT_STD).expect("valid std");
    let bound = 2.0 * MU_INIT_STD;
    loop {
        let mu: Vec<f64> = (0..size)
            .map(|_| loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= bound {
                    break v;
                }
            })
            .collect();
        if mu.iter().any(|&v| v > 0.0) && mu.iter().any(|&v| v < 0.0) {
            return Ok(mu);
        }
    }
}

/// `β = 0.99 · min u(μ⁽⁰⁾)`: every gate starts enabled.
pub fn init_beta(mu0: &[f64], utility: UtilityMap) -> Result<f64, GateError> {
    if mu0.len() < 2 {
        return Err(GateError::TooSmall(mu0.len()));
    }
    let min = utility.apply(mu0).into_iter().fold(f64::INFINITY, f64::min);
    Ok(BETA_INIT_FACTOR * min)
}

/// Location of a partition's gates inside a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateTarget {
    pub layer: usize,
    pub granularity: Granularity,
}

/// One gated group of parameters with its nuisance parameters.
///
/// `mu`, `zeta_raw` and `eta` are trained; `beta`, `lambda` and `sigma` are
/// fixed hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub id: usize,
    pub mu: Vec<f64>,
    pub zeta_raw: f64,
    pub eta: f64,
    pub beta: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub utility: UtilityMap,
    pub dropout: bool,
    pub target: GateTarget,
}

/// Per-partition settings chosen by the user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub utility: UtilityMap,
    pub lambda: f64,
    pub sigma: f64,
    pub dropout: bool,
    pub eta0: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            utility: UtilityMap::Sigmoid,
            lambda: 0.0,
            sigma: 1.0,
            dropout: false,
            eta0: DEFAULT_ETA0,
        }
    }
}

impl Partition {
    /// Initializes `μ`, derives `β` from it, and sets `ζ_raw = 0`.
    pub fn init<R: Rng + ?Sized>(
        id: usize,
        size: usize,
        config: &PartitionConfig,
        target: GateTarget,
        rng: &mut R,
    ) -> Result<Self, GateError> {
        if !(config.sigma > 0.0) {
            return Err(GateError::BadSigma(config.sigma));
        }
        if !(config.lambda >= 0.0) {
            return Err(GateError::BadLambda(config.lambda));
        }
        let mu = init_mu(size, rng)?;
        let beta = init_beta(&mu, config.utility)?;
        Ok(Self {
            id,
            mu,
            zeta_raw: 0.0,
            eta: config.eta0,
            beta,
            lambda: config.lambda,
            sigma: config.sigma,
            utility: config.utility,
            dropout: config.dropout,
            target,
        })
    }

    pub fn size(&self) -> usize {
        self.mu.len()
    }

    pub fn zeta(&self) -> f64 {
        effective_zeta(self.zeta_raw)
    }

    /// Deterministic gates from `s = μ`.
    pub fn eval_gates(&self) -> GateOutput {
        gate_transform(&self.mu, self.beta, self.zeta(), self.utility)
            .expect("partition invariants hold")
    }

    pub fn prob_enabled(&self) -> Vec<f64> {
        prob_enabled(&self.mu, self.sigma, self.beta, self.utility)
    }
}

/// Logits for a forward pass: `μ` itself, or with training dropout
/// `μ ⊙ n`, `n_k ~ N(1, rate²)`.
pub fn ml_sample<R: Rng + ?Sized>(p: &Partition, training: bool, rng: &mut R) -> Vec<f64> {
    if !(training && p.dropout) {
        return p.mu.clone();
    }
    let rate = dropout_rate(p.eta);
    p.mu.iter()
        .map(|&m| {
            let eps: f64 = StandardNormal.sample(rng);
            m + m * eps * rate
        })
        .collect()
}

/// Graph version of [`ml_sample`]: differentiable in `μ` and `η` through the
/// reparameterized noise. Draws the same noise sequence as [`ml_sample`].
pub fn ml_sample_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    mu: Var,
    eta: Var,
    p: &Partition,
    training: bool,
    rng: &mut R,
) -> Result<Var, TensorError> {
    if !(training && p.dropout) {
        return Ok(mu);
    }
    let eps: Vec<f64> = (0..p.size()).map(|_| StandardNormal.sample(rng)).collect();
    let eps = g.constant(Tensor::vector(eps));
    // √(σ(η)/(1−σ(η))) = e^{η/2}
    let half = g.scalar_mul(eta, 0.5)?;
    let rate = g.exp(half)?;
    let noise = g.mul(mu, eps)?;
    let noise = g.mul(noise, rate)?;
    g.add(mu, noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const S: [f64; 3] = [2.0, -2.0, 0.5];

    #[test]
    fn hand_example() {
        let out = gate_transform(&S, 0.3, 0.0, UtilityMap::Sigmoid).unwrap();
        let expected = [1.129169, 0.0, 0.870831];
        for (z, e) in out.z.iter().zip(expected) {
            assert!((z - e).abs() < 1e-6, "{:?}", out.z);
        }
        assert_eq!(out.n_active, 2);
        assert_eq!(out.z[1], 0.0);
        assert!(!out.degenerate);
    }

    #[test]
    fn all_below_threshold_is_degenerate_zero() {
        let out = gate_transform(&[-5.0, -4.0, -6.0], 0.3, 0.0, UtilityMap::Sigmoid).unwrap();
        assert_eq!(out.z, vec![0.0; 3]);
        assert_eq!(out.n_active, 0);
        assert!(out.degenerate);
        assert_eq!(out.active_mean(), None);
    }

    #[test]
    fn infinite_zeta_is_exactly_binary() {
        let out = gate_transform(&S, 0.3, f64::INFINITY, UtilityMap::Sigmoid).unwrap();
        assert_eq!(out.z, vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_arguments() {
        let u = UtilityMap::Sigmoid;
        assert_eq!(
            gate_transform(&[1.0], 0.3, 0.0, u),
            Err(GateError::TooSmall(1))
        );
        assert!(matches!(
            gate_transform(&S, 1.0, 0.0, u),
            Err(GateError::BadBeta(_))
        ));
        assert!(matches!(
            gate_transform(&S, 0.3, -0.1, u),
            Err(GateError::BadZeta(_))
        ));
    }

    #[test]
    fn graph_transform_matches_plain() {
        for utility in [UtilityMap::Sigmoid, UtilityMap::Softmax] {
            let s = [0.4, -0.3, 1.2, 0.05];
            let plain = gate_transform(&s, 0.2, 0.7, utility).unwrap();
            let mut g = Graph::new();
            let sv = g.leaf(Tensor::vector(s.to_vec()));
            let zv = g.leaf(Tensor::scalar(0.7));
            let out = gate_transform_graph(&mut g, sv, 0.2, zv, utility).unwrap();
            assert_eq!(out.output.active_mask, plain.active_mask);
            for (a, b) in out.output.z.iter().zip(&plain.z) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dropout_rate_examples() {
        assert!((dropout_rate(0.0) - 1.0).abs() < 1e-15);
        // σ(−1.734) = 0.150077, √(0.150077/0.849923) = 0.420210
        assert!((dropout_rate(-1.734) - 0.420_210).abs() < 1e-6);
        assert!(dropout_rate(-800.0) < 1e-100);
        assert!(dropout_rate(-1.0) < dropout_rate(-0.5));
        assert!(dropout_rate(1e6).is_finite());
    }

    #[test]
    fn effective_zeta_examples() {
        assert!((effective_zeta(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(effective_zeta(-1000.0) < 1e-300);
        assert!((effective_zeta(10.0) - 10.0000454).abs() < 1e-7);
    }

    #[test]
    fn sigmoid_probability_examples() {
        assert!((prob_enabled_sigmoid(0.0, 1.0, 0.5) - 0.5).abs() < 1e-15);
        assert!((prob_enabled_sigmoid(0.0, 1.0, 0.3) - 0.8016).abs() < 1e-4);
        assert!(prob_enabled_sigmoid(60.0, 1.0, 0.3) == 1.0);
    }

    #[test]
    fn softmax_probability_examples() {
        for k in 0..2 {
            assert!((prob_enabled_softmax(&[0.0, 0.0], k, 1.0, 0.5) - 0.5).abs() < 1e-15);
        }
        for k in 0..3 {
            let p = prob_enabled_softmax(&[0.0, 0.0, 0.0], k, 1.0, 0.5);
            assert!((p - 0.2441).abs() < 1e-4, "{p}");
        }
        assert!(prob_enabled_softmax(&[60.0, 0.0, 1.0], 0, 1.0, 0.5) == 1.0);
    }

    #[test]
    fn vector_probabilities_match_scalar_forms() {
        let mu = [0.3, -0.7, 1.1, 0.0];
        let sig = prob_enabled(&mu, 0.8, 0.35, UtilityMap::Sigmoid);
        let soft = prob_enabled(&mu, 0.8, 0.35, UtilityMap::Softmax);
        for k in 0..mu.len() {
            assert_eq!(sig[k], prob_enabled_sigmoid(mu[k], 0.8, 0.35));
            assert_eq!(soft[k], prob_enabled_softmax(&mu, k, 0.8, 0.35));
        }
    }

    #[test]
    fn init_mu_bounds_signs_determinism() {
        for seed in 0..20 {
            let a = init_mu(100, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = init_mu(100, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a, b);
            assert!(a.iter().all(|v| v.abs() <= 0.1));
            assert!(a.iter().any(|&v| v > 0.0) && a.iter().any(|&v| v < 0.0));
        }
        let tiny = init_mu(2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(tiny[0].signum() != tiny[1].signum());
    }

    #[test]
    fn init_beta_examples() {
        // u(μ⁰) = [0.4, 0.6] under sigmoid
        let mu0 = [special::logit(0.4), special::logit(0.6)];
        assert!((init_beta(&mu0, UtilityMap::Sigmoid).unwrap() - 0.396).abs() < 1e-12);
        let soft = init_beta(&[0.0; 4], UtilityMap::Softmax).unwrap();
        assert!((soft - 0.2475).abs() < 1e-15);
    }

    #[test]
    fn nothing_pruned_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for utility in [UtilityMap::Sigmoid, UtilityMap::Softmax] {
            for size in [2, 5, 300] {
                let mu = init_mu(size, &mut rng).unwrap();
                let beta = init_beta(&mu, utility).unwrap();
                let out = gate_transform(&mu, beta, 0.7, utility).unwrap();
                assert_eq!(out.n_active, size);
            }
        }
    }

    fn partition(dropout: bool, eta: f64) -> Partition {
        Partition {
            id: 0,
            mu: vec![0.1, -0.2],
            zeta_raw: 0.0,
            eta,
            beta: 0.4,
            lambda: 0.0,
            sigma: 1.0,
            utility: UtilityMap::Sigmoid,
            dropout,
            target: GateTarget {
                layer: 0,
                granularity: Granularity::Neuron,
            },
        }
    }

    #[test]
    fn ml_sample_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = partition(true, 0.0);
        assert_eq!(ml_sample(&p, false, &mut rng), vec![0.1, -0.2]);
        assert_eq!(
            ml_sample(&partition(false, 0.0), true, &mut rng),
            vec![0.1, -0.2]
        );
        assert_eq!(
            ml_sample(&partition(true, -2000.0), true, &mut rng),
            vec![0.1, -0.2]
        );

        let a = ml_sample(&p, true, &mut ChaCha8Rng::seed_from_u64(9));
        let b = ml_sample(&p, true, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_ne!(a, p.mu);
    }

    #[test]
    fn ml_sample_graph_draws_same_noise() {
        let p = partition(true, -0.4);
        let plain = ml_sample(&p, true, &mut ChaCha8Rng::seed_from_u64(21));
        let mut g = Graph::new();
        let mu = g.leaf(Tensor::vector(p.mu.clone()));
        let eta = g.leaf(Tensor::scalar(p.eta));
        let s = ml_sample_graph(
            &mut g,
            mu,
            eta,
            &p,
            true,
            &mut ChaCha8Rng::seed_from_u64(21),
        )
        .unwrap();
        for (a, b) in g.value(s).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
