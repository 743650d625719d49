use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Mean softmax cross-entropy over rows, and its gradient w.r.t. the logits.
///
/// Softmax is evaluated with the row maximum subtracted, so large logits do
/// not overflow.
pub fn cross_entropy_logits(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    let (rows, classes) = logits.shape();
    if targets.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_logits",
            left: logits.shape(),
            right: (targets.len(), 1),
        });
    }
    let mut grad = Matrix::zeros(rows, classes);
    let mut total = 0.0;
    for (r, &target) in targets.iter().enumerate() {
        if target >= classes {
            return Err(Error::TargetOutOfRange {
                row: r,
                target,
                classes,
            });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        let g = grad.row_mut(r);
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = (z - max).exp();
            denom += *gi;
        }
        total += denom.ln() - (row[target] - max);
        for gi in g.iter_mut() {
            *gi /= denom;
        }
        g[target] -= 1.0;
    }
    let inv = 1.0 / rows.max(1) as f64;
    grad.scale_in_place(inv);
    Ok((total * inv, grad))
}

/// Mean squared error and its gradient.
pub fn mse(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    let diff = pred.zip_map(target, "mse", |p, t| p - t)?;
    let count = diff.len().max(1) as f64;
    let loss = diff.norm_sq() / count;
    Ok((loss, diff.scale(2.0 / count)))
}

/// Row-wise argmax, ties resolved to the lowest index.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            m.row(r)
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}
