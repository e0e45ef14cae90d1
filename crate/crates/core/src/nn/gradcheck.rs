//! Central finite differences, used to verify the hand-written backward
//! passes.

/// Numerical gradient of `f` at `x` by central differences with step
/// `step * max(1, |x_i|)`. `x` is restored before returning.
pub fn central_difference<F>(x: &mut [f64], step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        let h = step * orig.abs().max(1.0);
        x[i] = orig + h;
        let up = f(x);
        x[i] = orig - h;
        let down = f(x);
        x[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Largest entrywise deviation scaled by the larger of the two gradients'
/// max-magnitudes (floored at `1e-12`).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_polynomial_gradient() {
        let mut x = vec![1.5, -2.0, 0.25];
        let g = central_difference(&mut x, 1e-5, |v| v[0] * v[0] * v[1] + v[2].powi(3));
        let want = [2.0 * 1.5 * -2.0, 1.5 * 1.5, 3.0 * 0.0625];
        assert!(relative_error(&g, &want) < 1e-8);
        assert_eq!(x, vec![1.5, -2.0, 0.25]);
    }
}
