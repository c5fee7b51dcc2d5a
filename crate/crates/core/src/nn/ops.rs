//! Functional building blocks with hand-written backward passes.
//!
//! Every forward returns what its backward needs; nothing is recorded on a
//! tape. Shapes follow the row-per-token convention: activations are
//! `[n, d]`, weights `[d_in, d_out]`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct LinearGrads {
    pub dx: Array2<f64>,
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
}

/// `y = x W + b`.
pub fn linear(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Result<Array2<f64>> {
    let (_, d_in) = x.dim();
    let (w_in, d_out) = w.dim();
    if d_in != w_in || b.len() != d_out {
        return Err(Error::shape(
            "linear",
            format!(
                "x is [_, {d_in}], W is [{w_in}, {d_out}], b is [{}]",
                b.len()
            ),
        ));
    }
    let mut y = x.dot(&w);
    y += &b;
    Ok(y)
}

pub fn linear_backward(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    dy: ArrayView2<f64>,
) -> LinearGrads {
    LinearGrads {
        dx: dy.dot(&w.t()),
        dw: x.t().dot(&dy),
        db: dy.sum_axis(Axis(0)),
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given its pre-activation input.
pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row normalization to zero mean and unit population variance, then
/// the affine map `gamma * xhat + beta`.
pub fn layer_norm(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    eps: f64,
) -> Result<(Array2<f64>, LayerNormCache)> {
    let (n, d) = x.dim();
    if d < 2 || gamma.len() != d || beta.len() != d {
        return Err(Error::shape(
            "layer_norm",
            format!("x is [{n}, {d}], gamma [{}], beta [{}]", gamma.len(), beta.len()),
        ));
    }
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = Array1::zeros(n);
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[i] = is;
        for (o, v) in xhat.row_mut(i).iter_mut().zip(row.iter()) {
            *o = (v - mean) * is;
        }
    }
    let y = &xhat * &gamma + &beta;
    Ok((y, LayerNormCache { xhat, inv_std }))
}

pub struct LayerNormGrads {
    pub dx: Array2<f64>,
    pub dgamma: Array1<f64>,
    pub dbeta: Array1<f64>,
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: ArrayView1<f64>,
    dy: ArrayView2<f64>,
) -> LayerNormGrads {
    let (n, d) = dy.dim();
    let dgamma = (&dy * &cache.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dxhat = &dy * &gamma;
    let mut dx = Array2::zeros((n, d));
    let df = d as f64;
    for i in 0..n {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let sum_g = g.sum();
        let sum_gx = g.dot(&xh);
        let scale = cache.inv_std[i] / df;
        for j in 0..d {
            dx[[i, j]] = scale * (df * g[j] - sum_g - xh[j] * sum_gx);
        }
    }
    LayerNormGrads { dx, dgamma, dbeta }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.outer_iter_mut() {
        softmax_in_place(row.as_slice_mut().expect("row-major"));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
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

pub fn softmax(x: ArrayView1<f64>) -> Array1<f64> {
    let mut out = x.to_owned();
    softmax_in_place(out.as_slice_mut().expect("contiguous"));
    out
}

/// Column-wise maximum over the rows selected by `mask` (all rows when
/// `None`, or when the mask selects nothing). Returns the pooled vector
/// and the winning row per column; ties go to the first row.
pub fn adaptive_max_pool(x: ArrayView2<f64>, mask: Option<&[bool]>) -> (Array1<f64>, Vec<usize>) {
    let (n, d) = x.dim();
    assert!(n >= 1, "adaptive_max_pool needs at least one row");
    let use_row = |i: usize| match mask {
        Some(m) if m.iter().any(|&b| b) => m.get(i).copied().unwrap_or(false),
        _ => true,
    };
    let mut pooled = Array1::from_elem(d, f64::NEG_INFINITY);
    let mut argmax = vec![usize::MAX; d];
    for i in (0..n).filter(|&i| use_row(i)) {
        for j in 0..d {
            let v = x[[i, j]];
            if argmax[j] == usize::MAX || v > pooled[j] {
                pooled[j] = v;
                argmax[j] = i;
            }
        }
    }
    (pooled, argmax)
}

pub fn adaptive_max_pool_backward(argmax: &[usize], n_rows: usize, dy: ArrayView1<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros((n_rows, dy.len()));
    for (j, &i) in argmax.iter().enumerate() {
        dx[[i, j]] += dy[j];
    }
    dx
}

/// Mean cross-entropy of `softmax(logits)` against class indices.
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, c) = logits.dim();
    if targets.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{n} rows of logits, {} targets", targets.len()),
        ));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::TargetOutOfRange {
            target: t,
            classes: c,
        });
    }
    let mut grad = Array2::zeros((n, c));
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        loss += log_z - row[t];
        for j in 0..c {
            let p = (row[j] - log_z).exp();
            grad[[i, j]] = (p - if j == t { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Inverted dropout. Returns the output and the scaled keep-mask used by
/// [`dropout_backward`] (`None` when the op is the identity).
pub fn dropout<R: Rng + ?Sized>(
    x: &Array2<f64>,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> (Array2<f64>, Option<Array2<f64>>) {
    if mode == Mode::Eval || p <= 0.0 {
        return (x.clone(), None);
    }
    assert!(p < 1.0, "dropout probability must be below 1");
    let scale = 1.0 / (1.0 - p);
    let mask = Array2::from_shape_fn(x.dim(), |_| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            scale
        }
    });
    (x * &mask, Some(mask))
}

pub fn dropout_backward(mask: Option<&Array2<f64>>, dy: &Array2<f64>) -> Array2<f64> {
    match mask {
        Some(m) => dy * m,
        None => dy.clone(),
    }
}
