/// Central finite differences `(f(p + εe_k) − f(p − εe_k)) / 2ε` for every
/// coordinate `k`. Used as the oracle for analytic gradients.
pub fn finite_difference_grad<F>(mut f: F, params: &[f64], epsilon: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(epsilon > 0.0, "finite-difference step must be positive");
    let mut p = params.to_vec();
    (0..p.len())
        .map(|k| {
            let orig = p[k];
            p[k] = orig + epsilon;
            let hi = f(&p);
            p[k] = orig - epsilon;
            let lo = f(&p);
            p[k] = orig;
            (hi - lo) / (2.0 * epsilon)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let g = finite_difference_grad(|p| p.iter().map(|x| x * x).sum(), &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_difference_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5);
        assert_eq!(g, vec![0.0; 3]);
    }
}
