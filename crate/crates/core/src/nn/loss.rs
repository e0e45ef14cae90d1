use super::tensor::{Real, Tensor2};
use crate::error::{Error, Result};

/// Mean negative log-likelihood of `labels` under row-stochastic `probs`.
pub fn cross_entropy<F: Real>(probs: &Tensor2<F>, labels: &[usize]) -> Result<F> {
    check_labels(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -probs.get(r, y).to_f64().unwrap_or(f64::NAN).ln())
        .sum();
    Ok(F::lit(total / labels.len() as f64))
}

/// Gradient of the mean cross-entropy with respect to the logits feeding the
/// softmax: `(p - onehot) / normalizer`. `normalizer` is the full batch size,
/// which differs from `probs.rows()` when a batch is processed in chunks.
pub fn softmax_cross_entropy_backward<F: Real>(
    probs: &Tensor2<F>,
    labels: &[usize],
    normalizer: usize,
) -> Result<Tensor2<F>> {
    check_labels(probs, labels)?;
    let scale = F::lit(1.0 / normalizer as f64);
    let mut grad = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        let row = grad.row_mut(r);
        row[y] -= F::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Ok(grad)
}

fn check_labels<F: Real>(probs: &Tensor2<F>, labels: &[usize]) -> Result<()> {
    if labels.len() != probs.rows() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} labels for {} probability rows",
            labels.len(),
            probs.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= probs.cols()) {
        return Err(Error::Shape(format!(
            "label {bad} out of range for {} classes",
            probs.cols()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let mut perfect = Tensor2::<f64>::zeros(2, 3);
        perfect.set(0, 1, 1.0);
        perfect.set(1, 2, 1.0);
        assert_eq!(cross_entropy(&perfect, &[1, 2]).unwrap(), 0.0);

        let uniform = Tensor2::from_vec(1, 12, vec![1.0 / 12.0; 12]).unwrap();
        let l = cross_entropy(&uniform, &[4]).unwrap();
        assert!((l - 12f64.ln()).abs() < 1e-12);
        assert!((l - 2.4849).abs() < 1e-4);
        assert!(cross_entropy(&uniform, &[12]).is_err());
        assert!(cross_entropy(&uniform, &[0, 1]).is_err());
    }

    #[test]
    fn fused_gradient_is_p_minus_onehot_over_n() {
        let probs = Tensor2::from_vec(2, 2, vec![0.25, 0.75, 0.5, 0.5]).unwrap();
        let g = softmax_cross_entropy_backward(&probs, &[1, 0], 2).unwrap();
        assert_eq!(g.data(), &[0.125, -0.125, -0.25, 0.25]);
    }
}
