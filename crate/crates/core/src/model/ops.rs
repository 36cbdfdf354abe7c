//! Row-wise building blocks with their backward passes (f64).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::Rng as _;

use crate::rng::Rng;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `x @ w + b` for row-major activations.
pub(crate) fn linear(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Accumulates `dW += x^T dy`, `db += sum(dy)` and returns `dx = dy W^T`.
pub(crate) fn linear_backward(
    x: &Array2<f64>,
    w: ArrayView2<f64>,
    dy: &Array2<f64>,
    mut dw: ArrayViewMut2<f64>,
    mut db: ArrayViewMut1<f64>,
) -> Array2<f64> {
    dw.scaled_add(1.0, &x.t().dot(dy));
    db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

pub(crate) struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    eps: f64,
) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + eps).sqrt();
        row *= *s;
    }
    let mut y = &xhat * &gamma;
    y += &beta;
    (y, LayerNormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(
    dy: &Array2<f64>,
    gamma: ArrayView1<f64>,
    cache: &LayerNormCache,
    mut dgamma: ArrayViewMut1<f64>,
    mut dbeta: ArrayViewMut1<f64>,
) -> Array2<f64> {
    dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    dbeta += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let dxhat = dy * &gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), s) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let sum_g = g.sum();
        let sum_gx = g.dot(&xh);
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| {
                *o = s / d * (d * gi - sum_g - xi * sum_gx);
            });
    }
    dx
}

/// Softmax over the entries of `row` whose `valid` flag is set; invalid
/// entries get probability exactly zero.
pub(crate) fn masked_softmax_row(row: ArrayView1<f64>, valid: &[bool]) -> Array1<f64> {
    let max = row
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = Array1::zeros(row.len());
    let mut sum = 0.0;
    for ((o, &x), &v) in out.iter_mut().zip(row.iter()).zip(valid) {
        if v {
            *o = (x - max).exp();
            sum += *o;
        }
    }
    out /= sum;
    out
}

pub(crate) fn log_softmax_row(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row.mapv(|x| x - lse)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverted dropout mask: entries are 0 or `1/(1-p)`.
pub(crate) fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn((rows, cols), |_| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    })
}
