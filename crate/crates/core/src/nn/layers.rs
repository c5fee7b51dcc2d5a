//! Parameterised layers backed by a [`ParamSet`], and the post-norm
//! transformer encoder built from them.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::ops::{self, LayerNormCache, Mode};
use super::tensor::{Gradients, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Xavier/Glorot uniform initialisation for a `[fan_in, fan_out]` matrix.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}

fn add_grad_matrix(grads: &mut Gradients, id: ParamId, g: &Array2<f64>) {
    let mut dst = grads.get_mut(id).matrix_mut();
    dst += g;
}

fn add_grad_vector(grads: &mut Gradients, id: ParamId, g: &Array1<f64>) {
    let mut dst = grads.get_mut(id).vector_mut();
    dst += g;
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(format!("{name}.weight"), xavier_uniform(rng, d_in, d_out));
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, ps: &ParamSet, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        ops::linear(x, ps.get(self.w).matrix(), ps.get(self.b).vector())
    }

    /// Accumulates weight gradients and returns the input gradient.
    pub fn backward(
        &self,
        ps: &ParamSet,
        grads: &mut Gradients,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
    ) -> Array2<f64> {
        let g = ops::linear_backward(x, ps.get(self.w).matrix(), dy);
        add_grad_matrix(grads, self.w, &g.dw);
        add_grad_vector(grads, self.b, &g.db);
        g.dx
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: ps.add(format!("{name}.gamma"), Tensor::filled(&[d], 1.0)),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[d])),
            eps: ops::LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, ps: &ParamSet, x: ArrayView2<f64>) -> Result<(Array2<f64>, LayerNormCache)> {
        ops::layer_norm(x, ps.get(self.gamma).vector(), ps.get(self.beta).vector(), self.eps)
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        grads: &mut Gradients,
        cache: &LayerNormCache,
        dy: ArrayView2<f64>,
    ) -> Array2<f64> {
        let g = ops::layer_norm_backward(cache, ps.get(self.gamma).vector(), dy);
        add_grad_vector(grads, self.gamma, &g.dgamma);
        add_grad_vector(grads, self.beta, &g.dbeta);
        g.dx
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d_model: usize,
}

pub struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per-head attention weights, each `[n, n]`.
    pub weights: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(ps, &format!("{name}.q"), d_model, d_model, rng),
            k: Linear::new(ps, &format!("{name}.k"), d_model, d_model, rng),
            v: Linear::new(ps, &format!("{name}.v"), d_model, d_model, rng),
            out: Linear::new(ps, &format!("{name}.out"), d_model, d_model, rng),
            heads,
            d_model,
        })
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Self-attention over the rows of `x`. Keys whose mask entry is false
    /// receive zero weight; an all-false mask is treated as no mask.
    pub fn forward(
        &self,
        ps: &ParamSet,
        x: ArrayView2<f64>,
        mask: Option<&[bool]>,
    ) -> Result<(Array2<f64>, AttentionCache)> {
        let (n, d) = x.dim();
        if d != self.d_model {
            return Err(Error::shape(
                "multi_head_attention",
                format!("input width {d}, model width {}", self.d_model),
            ));
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::shape(
                    "multi_head_attention",
                    format!("mask length {} for {n} rows", m.len()),
                ));
            }
        }
        let key_mask = mask.filter(|m| m.iter().any(|&b| b));
        let q = self.q.forward(ps, x)?;
        let k = self.k.forward(ps, x)?;
        let v = self.v.forward(ps, x)?;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = Array2::zeros((n, d));
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t()) * scale;
            if let Some(m) = key_mask {
                for mut row in scores.outer_iter_mut() {
                    for (j, keep) in m.iter().enumerate() {
                        if !keep {
                            row[j] = f64::NEG_INFINITY;
                        }
                    }
                }
            }
            let a = ops::softmax_rows(&scores);
            concat.slice_mut(cols).assign(&a.dot(&vh));
            weights.push(a);
        }
        let y = self.out.forward(ps, concat.view())?;
        Ok((
            y,
            AttentionCache {
                x: x.to_owned(),
                q,
                k,
                v,
                weights,
                concat,
            },
        ))
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        grads: &mut Gradients,
        cache: &AttentionCache,
        dy: ArrayView2<f64>,
    ) -> Array2<f64> {
        let (n, d) = cache.x.dim();
        let dconcat = self.out.backward(ps, grads, cache.concat.view(), dy);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let a = &cache.weights[h];
            let doh = dconcat.slice(cols);
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            let vh = cache.v.slice(cols);
            dv.slice_mut(cols).assign(&a.t().dot(&doh));
            let da = doh.dot(&vh.t());
            // Softmax Jacobian applied row by row: dS = A * (dA - <dA, A>).
            let row_dot = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = a * &(&da - &row_dot) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&kh));
            dk.slice_mut(cols).assign(&ds.t().dot(&qh));
        }
        let x = cache.x.view();
        let mut dx = self.q.backward(ps, grads, x, dq.view());
        dx += &self.k.backward(ps, grads, x, dk.view());
        dx += &self.v.backward(ps, grads, x, dv.view());
        dx
    }
}

/// Position-wise `linear -> ReLU -> linear`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

pub struct FeedForwardCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            inner: Linear::new(ps, &format!("{name}.inner"), d_model, d_ff, rng),
            outer: Linear::new(ps, &format!("{name}.outer"), d_ff, d_model, rng),
        }
    }

    pub fn forward(&self, ps: &ParamSet, x: ArrayView2<f64>) -> Result<(Array2<f64>, FeedForwardCache)> {
        let pre = self.inner.forward(ps, x)?;
        let hidden = ops::relu(&pre);
        let y = self.outer.forward(ps, hidden.view())?;
        Ok((
            y,
            FeedForwardCache {
                x: x.to_owned(),
                pre,
                hidden,
            },
        ))
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        grads: &mut Gradients,
        cache: &FeedForwardCache,
        dy: ArrayView2<f64>,
    ) -> Array2<f64> {
        let dhidden = self.outer.backward(ps, grads, cache.hidden.view(), dy);
        let dpre = ops::relu_backward(&cache.pre, &dhidden);
        self.inner.backward(ps, grads, cache.x.view(), dpre.view())
    }
}

/// One post-norm block:
/// `x = LN(x + MHA(x))`, then `x = LN(x + FFN(x))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
    /// Dropout on each sublayer output before the residual add.
    pub dropout: f64,
}

pub struct EncoderBlockCache {
    attn: AttentionCache,
    attn_mask: Option<Array2<f64>>,
    norm1: LayerNormCache,
    ffn: FeedForwardCache,
    ffn_mask: Option<Array2<f64>>,
    norm2: LayerNormCache,
}

impl EncoderBlockCache {
    pub fn attention_weights(&self) -> &[Array2<f64>] {
        &self.attn.weights
    }
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            attention: MultiHeadAttention::new(ps, &format!("{name}.attn"), d_model, heads, rng)?,
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), d_model),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), d_model, d_ff, rng),
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), d_model),
            dropout,
        })
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        ps: &ParamSet,
        x: ArrayView2<f64>,
        mask: Option<&[bool]>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Array2<f64>, EncoderBlockCache)> {
        let (a, attn) = self.attention.forward(ps, x, mask)?;
        let (a, attn_mask) = ops::dropout(&a, self.dropout, mode, rng);
        let (y1, norm1) = self.norm1.forward(ps, (&x + &a).view())?;
        let (f, ffn) = self.ffn.forward(ps, y1.view())?;
        let (f, ffn_mask) = ops::dropout(&f, self.dropout, mode, rng);
        let (y2, norm2) = self.norm2.forward(ps, (&y1 + &f).view())?;
        Ok((
            y2,
            EncoderBlockCache {
                attn,
                attn_mask,
                norm1,
                ffn,
                ffn_mask,
                norm2,
            },
        ))
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        grads: &mut Gradients,
        cache: &EncoderBlockCache,
        dy: ArrayView2<f64>,
    ) -> Array2<f64> {
        let ds2 = self.norm2.backward(ps, grads, &cache.norm2, dy);
        let df = ops::dropout_backward(cache.ffn_mask.as_ref(), &ds2);
        let dy1 = &ds2 + &self.ffn.backward(ps, grads, &cache.ffn, df.view());
        let ds1 = self.norm1.backward(ps, grads, &cache.norm1, dy1.view());
        let da = ops::dropout_backward(cache.attn_mask.as_ref(), &ds1);
        &ds1 + &self.attention.backward(ps, grads, &cache.attn, da.view())
    }
}

/// Stack of identical encoder blocks.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        n_blocks: usize,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..n_blocks)
            .map(|i| {
                EncoderBlock::new(ps, &format!("{name}.block{i}"), d_model, heads, d_ff, dropout, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Encoder { blocks })
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        ps: &ParamSet,
        x: ArrayView2<f64>,
        mask: Option<&[bool]>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Vec<EncoderBlockCache>)> {
        let mut h = x.to_owned();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(ps, h.view(), mask, mode, rng)?;
            caches.push(cache);
            h = next;
        }
        Ok((h, caches))
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        grads: &mut Gradients,
        caches: &[EncoderBlockCache],
        dy: ArrayView2<f64>,
    ) -> Array2<f64> {
        let mut g = dy.to_owned();
        for (block, cache) in self.blocks.iter().zip(caches).rev() {
            g = block.backward(ps, grads, cache, g.view());
        }
        g
    }
}
