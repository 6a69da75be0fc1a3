//! Scalar special functions.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Standard Normal CDF, `Φ(x)`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard Normal density, `φ(x)`.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(p / (1 - p))`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Softmax of a vector with max-shift stabilization.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `ln Σ_{l≠k} e^{v_l}` for every `k`. Requires `v.len() >= 2`.
///
/// Linear time: every sum is shifted by the largest retained entry, so each
/// shifted sum is at least one and the leave-one-out subtraction is benign.
pub fn leave_one_out_logsumexp(v: &[f64]) -> Vec<f64> {
    assert!(
        v.len() >= 2,
        "leave-one-out log-sum-exp needs at least two entries"
    );
    let mut top = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[top] {
            top = i;
        }
    }
    let m1 = v[top];
    let m2 = v
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let s1: f64 = v.iter().map(|x| (x - m1).exp()).sum();
    let s_top: f64 = v
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, x)| (x - m2).exp())
        .sum();
    v.iter()
        .enumerate()
        .map(|(k, &x)| {
            if k == top {
                m2 + s_top.ln()
            } else {
                m1 + (s1 - (x - m1).exp()).ln()
            }
        })
        .collect()
}
