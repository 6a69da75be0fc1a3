//! Monte-Carlo checks of the closed-form gate probabilities.
//!
//! Frequencies pass when they fall within three binomial standard errors
//! `3·√(p(1−p)/n)` of the closed form. Softmax enable probabilities are
//! conditional on the other logits sitting at their means, so those are
//! sampled one coordinate at a time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::gates::{self, UtilityMap};

pub const MIN_SAMPLES: usize = 10_000;

/// One partition's gate distribution: `s ~ N(μ, σ²I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub mu: Vec<f64>,
    pub sigma: f64,
    pub beta: f64,
    pub zeta: f64,
    pub utility: UtilityMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McClaim {
    pub name: String,
    pub observed: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl McClaim {
    fn new(name: String, observed: f64, expected: f64, tolerance: f64) -> Self {
        Self {
            name,
            observed,
            expected,
            tolerance,
            passed: (observed - expected).abs() <= tolerance,
        }
    }

    fn frequency(name: String, hits: usize, n: usize, p: f64) -> Self {
        let se = (p * (1.0 - p) / n as f64).sqrt();
        Self::new(name, hits as f64 / n as f64, p, 3.0 * se)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub samples: usize,
    pub seed: u64,
    pub claims: Vec<McClaim>,
    pub passed: bool,
}

impl McReport {
    pub fn claim(&self, name: &str) -> Option<&McClaim> {
        self.claims.iter().find(|c| c.name == name)
    }
}

fn in_support(z: f64, half_width: f64) -> bool {
    if z == 0.0 {
        return true;
    }
    if half_width == 0.0 {
        return z == 1.0;
    }
    z > 1.0 - half_width && z < 1.0 + half_width
}

/// Samples the gate distribution of `cfg` and checks enable frequencies,
/// joint factorization (sigmoid), the bimodal support and the unit mean.
pub fn mc_validate(cfg: &McConfig, n_samples: usize, seed: u64) -> Result<McReport, TrainError> {
    if n_samples < MIN_SAMPLES {
        return Err(TrainError::Config(format!(
            "mc-validate needs at least {MIN_SAMPLES} samples, got {n_samples}"
        )));
    }
    // Surface invalid parameters as errors rather than failed claims.
    gates::gate_transform(&cfg.mu, cfg.beta, cfg.zeta, cfg.utility)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    if !(cfg.sigma > 0.0) {
        return Err(TrainError::Config(format!(
            "sigma must be positive, got {}",
            cfg.sigma
        )));
    }
    let k = cfg.mu.len();
    let noise = Normal::new(0.0, cfg.sigma).expect("positive sigma");
    let half_width = (-cfg.zeta).exp();
    let probs = gates::prob_enabled(&cfg.mu, cfg.sigma, cfg.beta, cfg.utility);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut hits = vec![0usize; k];
    let mut pair_hits = vec![vec![0usize; k]; k];
    let mut outside = 0usize;
    let mut max_mean_dev = 0.0f64;
    let mut s = vec![0.0; k];
    for _ in 0..n_samples {
        for (si, &m) in s.iter_mut().zip(&cfg.mu) {
            *si = m + noise.sample(&mut rng);
        }
        let out = gates::gate_transform(&s, cfg.beta, cfg.zeta, cfg.utility)
            .expect("validated parameters");
        outside += out
            .z
            .iter()
            .filter(|&&z| !in_support(z, half_width))
            .count();
        if let Some(mean) = out.active_mean() {
            max_mean_dev = max_mean_dev.max((mean - 1.0).abs());
        }
        for a in 0..k {
            if out.active_mask[a] {
                hits[a] += 1;
                for b in a + 1..k {
                    if out.active_mask[b] {
                        pair_hits[a][b] += 1;
                    }
                }
            }
        }
    }

    let mut claims = Vec::new();
    match cfg.utility {
        UtilityMap::Sigmoid => {
            for a in 0..k {
                claims.push(McClaim::frequency(
                    format!("marginal[{a}]"),
                    hits[a],
                    n_samples,
                    probs[a],
                ));
            }
            for a in 0..k {
                for b in a + 1..k {
                    claims.push(McClaim::frequency(
                        format!("joint[{a},{b}]"),
                        pair_hits[a][b],
                        n_samples,
                        probs[a] * probs[b],
                    ));
                }
            }
        }
        UtilityMap::Softmax => {
            for a in 0..k {
                let mut crng = ChaCha8Rng::seed_from_u64(seed);
                crng.set_stream(1 + a as u64);
                let mut s = cfg.mu.clone();
                let mut cond_hits = 0;
                for _ in 0..n_samples {
                    s[a] = cfg.mu[a] + noise.sample(&mut crng);
                    let out = gates::gate_transform(&s, cfg.beta, cfg.zeta, cfg.utility)
                        .expect("validated parameters");
                    cond_hits += usize::from(out.active_mask[a]);
                }
                claims.push(McClaim::frequency(
                    format!("conditional[{a}]"),
                    cond_hits,
                    n_samples,
                    probs[a],
                ));
            }
        }
    }
    claims.push(McClaim::new("support".into(), outside as f64, 0.0, 0.0));
    claims.push(McClaim::new("unit_mean".into(), max_mean_dev, 0.0, 1e-12));
    let passed = claims.iter().all(|c| c.passed);
    Ok(McReport {
        samples: n_samples,
        seed,
        claims,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mu: Vec<f64>, beta: f64, utility: UtilityMap) -> McConfig {
        McConfig {
            mu,
            sigma: 1.0,
            beta,
            zeta: 0.0,
            utility,
        }
    }

    #[test]
    fn symmetric_sigmoid_is_half() {
        let r = mc_validate(&cfg(vec![0.0, 0.0], 0.5, UtilityMap::Sigmoid), 20_000, 1).unwrap();
        let m = r.claim("marginal[0]").unwrap();
        assert_eq!(m.expected, 0.5);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn sigmoid_low_threshold() {
        let r = mc_validate(
            &cfg(vec![0.0, 0.0, 0.0], 0.3, UtilityMap::Sigmoid),
            20_000,
            2,
        )
        .unwrap();
        let m = r.claim("marginal[1]").unwrap();
        assert!((m.expected - 0.8016).abs() < 1e-4);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn too_few_samples() {
        assert!(mc_validate(&cfg(vec![0.0, 0.0], 0.5, UtilityMap::Sigmoid), 100, 1).is_err());
    }

    #[test]
    fn wrong_closed_form_is_caught() {
        let claim = McClaim::frequency("x".into(), 5_500, 10_000, 0.5);
        assert!(!claim.passed);
    }
}
