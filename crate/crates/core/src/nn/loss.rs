use super::Matrix;
use crate::error::{Error, Result};

/// Row-wise softmax with max-subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Mean negative log-softmax of the labelled class over the batch, and its
/// gradient with respect to the logits, `(softmax - onehot) / batch`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::shape("cross_entropy labels", n, labels.len()));
    }
    if n == 0 {
        return Err(Error::invalid("cross_entropy on an empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, c);
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let z = logits.row(r);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - z[y];
        let g = grad.row_mut(r);
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = (z[k] - log_z).exp() * inv_n;
        }
        g[y] -= inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Fraction of rows whose argmax (first maximum on ties) equals the label.
pub fn accuracy(scores: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = scores
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let logits = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits_do_not_overflow() {
        let logits = Matrix::from_rows(&[[1000.0, 0.0]]).unwrap();
        let (loss, grad) = cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.is_finite() && loss >= 0.0 && loss < 1e-300);
        assert!(grad.all_finite());
    }

    #[test]
    fn three_class_value() {
        // -log softmax([1,2,3])[2] = log(e^-2 + e^-1 + 1)
        let expected = ((-2.0f64).exp() + (-1.0f64).exp() + 1.0).ln();
        assert!((expected - 0.407606).abs() < 1e-6);
        let logits = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[2]).unwrap();
        assert!((loss - expected).abs() < 1e-14);
    }

    #[test]
    fn gradient_is_softmax_minus_onehot_over_batch() {
        let logits = Matrix::from_rows(&[[0.5, -1.0, 2.0], [0.0, 0.0, 0.0]]).unwrap();
        let (_, grad) = cross_entropy(&logits, &[1, 0]).unwrap();
        let p = softmax(&logits);
        for r in 0..2 {
            for k in 0..3 {
                let onehot = if (r, k) == (0, 1) || (r, k) == (1, 0) { 1.0 } else { 0.0 };
                assert!((grad.get(r, k) - (p.get(r, k) - onehot) / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn label_out_of_range() {
        let logits = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        assert!(cross_entropy(&logits, &[2]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&Matrix::from_rows(&[[700.0, -700.0, 3.0]]).unwrap());
        assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
