use super::model::{GradientSet, Model};
use crate::error::{invalid, Result};
use crate::linalg::Matrix;

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() == 0 {
        return Err(invalid("empty batch"));
    }
    if labels.len() != logits.rows() {
        return Err(invalid(format!(
            "{} labels for {} samples",
            labels.len(),
            logits.rows()
        )));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= logits.cols()) {
        return Err(invalid(format!(
            "label {y} of sample {i} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// Per-sample `−log softmax(z)_y`.
pub fn per_sample_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = logits.row(i);
            log_sum_exp(row) - row[y]
        })
        .collect())
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_labels(logits, labels)?;
    let b = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        total += lse - row[y];
        let g = grad.row_mut(i);
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - lse).exp() / b;
        }
        g[y] -= 1.0 / b;
    }
    Ok((total / b, grad))
}

/// Elementwise mean squared error and its gradient w.r.t. `pred`.
pub fn mse(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    pred.check_same_shape(target, "mse")?;
    if pred.is_empty() {
        return Err(invalid("empty batch"));
    }
    let n = pred.len() as f64;
    let diff = pred.sub(target)?;
    let loss = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}

/// Mean cross-entropy of `model` on a labeled batch with exact gradients.
pub fn backward_ce(model: &Model, x: &Matrix, labels: &[usize]) -> Result<(f64, GradientSet)> {
    let trace = model.forward_trace(x)?;
    let (loss, d) = softmax_cross_entropy(&trace.output, labels)?;
    let grads = model.backward(&trace, &d)?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Matrix::zeros(3, 5);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 4, 2]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_prediction_is_near_zero() {
        let logits = Matrix::from_rows(&[vec![800.0, 0.0]]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert_eq!(loss, 0.0);
        let (loss, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(loss.is_finite() && loss > 799.0);
    }

    #[test]
    fn label_out_of_range() {
        assert!(softmax_cross_entropy(&Matrix::zeros(1, 3), &[3]).is_err());
        assert!(softmax_cross_entropy(&Matrix::zeros(0, 3), &[]).is_err());
    }

    #[test]
    fn mse_gradient() {
        let p = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let t = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let (l, g) = mse(&p, &t).unwrap();
        assert_eq!(l, 2.5);
        assert_eq!(g.as_slice(), &[1.0, 2.0]);
    }
}
