use super::Matrix;
use crate::error::{Error, Result};

/// Binary cross entropy on logits, mean-reduced.
pub fn bce_with_logits(logits: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() {
        return Err(Error::shape("bce_with_logits", logits.len(), labels.len()));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            (super::activation::sigmoid_scalar(z) - y) / n
        })
        .collect();
    Ok((loss / n, grad))
}

fn smooth_l1_scalar(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Elementwise smooth-L1 (transition at 1), mean over all entries.
pub fn smooth_l1(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "smooth_l1",
            format!("{:?}", target.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let n = pred.data().len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let loss: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| smooth_l1_scalar(p - t).0)
        .sum();
    let grad = pred.zip_map(target, |p, t| smooth_l1_scalar(p - t).1 / n as f64);
    Ok((loss / n as f64, grad))
}

/// Smooth-L1 averaged over each row's entries, then weighted by `mask` and
/// normalized by the mask sum. An all-zero mask yields exactly zero loss.
pub fn masked_smooth_l1(pred: &Matrix, target: &Matrix, mask: &[bool]) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() || mask.len() != pred.rows() {
        return Err(Error::shape(
            "masked_smooth_l1",
            format!("{:?} with {} mask entries", target.shape(), pred.rows()),
            format!("{:?} with {} mask entries", pred.shape(), mask.len()),
        ));
    }
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let active = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Ok((0.0, grad));
    }
    let cols = pred.cols() as f64;
    let mut loss = 0.0;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (p, t) = (pred.row(i), target.row(i));
        let g = grad.row_mut(i);
        for j in 0..p.len() {
            let (l, d) = smooth_l1_scalar(p[j] - t[j]);
            loss += l / cols;
            g[j] = d / cols / active as f64;
        }
    }
    Ok((loss / active as f64, grad))
}

/// Squared L2 error per row, mean over rows.
pub fn mse(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse",
            format!("{:?}", target.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    if pred.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let b = pred.rows() as f64;
    let loss: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    let grad = pred.zip_map(target, |p, t| 2.0 * (p - t) / b);
    Ok((loss / b, grad))
}
