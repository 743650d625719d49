use crate::error::{Error, Result};
use crate::norm::{inv_std, pooled_row_stats, NormGrads, NormParams};
use crate::numkit::Matrix;

/// Values saved by [`ln_forward`] for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LnCache {
    pub input: Matrix,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub epsilon: f64,
}

fn check_width(a: &Matrix, params: &NormParams, op: &'static str) -> Result<()> {
    if a.cols() != params.width() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: params.gamma.shape(),
        });
    }
    Ok(())
}

pub fn ln_forward(a: &Matrix, params: &NormParams) -> Result<(Matrix, LnCache)> {
    check_width(a, params, "ln_forward")?;
    let mut y = Matrix::zeros(a.rows(), a.cols());
    let mut means = Vec::with_capacity(a.rows());
    let mut vars = Vec::with_capacity(a.rows());
    for r in 0..a.rows() {
        let (mean, var) = pooled_row_stats(&[a], r);
        let inv = inv_std(var, params.epsilon);
        for (i, out) in y.row_mut(r).iter_mut().enumerate() {
            *out = params.gamma.data()[i] * (a.get(r, i) - mean) * inv + params.beta.data()[i];
        }
        means.push(mean);
        vars.push(var);
    }
    let cache = LnCache {
        input: a.clone(),
        mean: means,
        var: vars,
        epsilon: params.epsilon,
    };
    Ok((y, cache))
}

/// Exact vector-Jacobian product of [`ln_forward`].
pub fn ln_backward(cache: &LnCache, dy: &Matrix, params: &NormParams) -> Result<(Matrix, NormGrads)> {
    if dy.shape() != cache.input.shape() {
        return Err(Error::ShapeMismatch {
            op: "ln_backward",
            left: cache.input.shape(),
            right: dy.shape(),
        });
    }
    let n = dy.cols();
    let mut da = Matrix::zeros(dy.rows(), n);
    let mut grads = NormGrads::zeros(n);
    let gamma = params.gamma.data();
    let mut xhat = vec![0.0; n];
    let mut g = vec![0.0; n];
    for r in 0..dy.rows() {
        let inv = inv_std(cache.var[r], cache.epsilon);
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for i in 0..n {
            xhat[i] = (cache.input.get(r, i) - cache.mean[r]) * inv;
            g[i] = dy.get(r, i) * gamma[i];
            sum_g += g[i];
            sum_gx += g[i] * xhat[i];
        }
        let mean_g = sum_g / n as f64;
        let mean_gx = sum_gx / n as f64;
        for (i, out) in da.row_mut(r).iter_mut().enumerate() {
            *out = inv * (g[i] - mean_g - xhat[i] * mean_gx);
        }
        for i in 0..n {
            grads.gamma.data_mut()[i] += dy.get(r, i) * xhat[i];
            grads.beta.data_mut()[i] += dy.get(r, i);
        }
    }
    Ok((da, grads))
}
