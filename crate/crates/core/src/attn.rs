//! Attention-based time-series modeling: scaled-dot multi-head attention,
//! position-wise nonlinear layers, sinusoidal positional encoding, and
//! post-norm residual stacking into encoder and decoder.
//!
//! The model reconstructs whole windows, so no attention mask is used
//! anywhere.

use ndarray::{Array1, Array2, Array3};

use crate::autodiff::{linear, linear_t, Tape, Var};
use crate::error::{Error, Result};
use crate::graphfi::shape3;

/// Variance floor inside layer norm; keeps zero-variance positions finite
/// while leaving the normalized variance within 1e-5 of 1 for ordinary
/// inputs.
pub const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct AttentionHeadConfig {
    pub num_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub model_width: usize,
}

impl AttentionHeadConfig {
    pub fn new(num_heads: usize, d_k: usize, model_width: usize) -> Result<Self> {
        if num_heads * d_k != model_width {
            return Err(Error::Config(format!(
                "num_heads * d_k must equal the model width: {num_heads} * {d_k} != {model_width}"
            )));
        }
        Ok(AttentionHeadConfig {
            num_heads,
            d_k,
            d_v: d_k,
            model_width,
        })
    }
}

/// Position-wise two-layer ReLU map; weights stored as printed:
/// `w1` [d3, d1], `w2` [d1, d3].
#[derive(Clone, Debug)]
pub struct NonlinearLayer {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Fixed sinusoidal positional encoding, [w, d1]:
/// `P[t, 2i] = sin(t / 10000^{2i/d1})`, `P[t, 2i+1] = cos(t / 10000^{2i/d1})`.
pub fn positional_encoding(w: usize, d1: usize) -> Array2<f64> {
    Array2::from_shape_fn((w, d1), |(t, j)| {
        let i2 = (j - j % 2) as f64; // 2i
        let rate = (t as f64) / 10000f64.powf(i2 / d1 as f64);
        if j % 2 == 0 {
            rate.sin()
        } else {
            rate.cos()
        }
    })
}

/// Scaled-dot attention over 3-d stacks `[N, w_q, d_k]` / `[N, w_k, d_k]` /
/// `[N, w_k, d_v]`: softmax over the key axis of `Q·Kᵀ/√d_k`, then a
/// weighted sum of `V`.
pub fn scaled_dot_attention_var(t: &mut Tape, q: Var, k: Var, v: Var) -> Var {
    let d_k = t.value(q).shape()[2] as f64;
    let scores = t.batch_matmul(q, k, true);
    let scaled = t.affine(scores, 1.0 / d_k.sqrt(), 0.0);
    let weights = t.softmax_last(scaled);
    t.batch_matmul(weights, v, false)
}

pub fn scaled_dot_attention(
    q: &Array3<f64>,
    k: &Array3<f64>,
    v: &Array3<f64>,
) -> Result<Array3<f64>> {
    if q.shape()[2] != k.shape()[2] || k.shape()[1] != v.shape()[1] || q.shape()[0] != k.shape()[0]
    {
        return Err(Error::Shape(format!(
            "attention operands disagree: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut t = Tape::new();
    let qv = t.leaf(q.clone().into_dyn());
    let kv = t.leaf(k.clone().into_dyn());
    let vv = t.leaf(v.clone().into_dyn());
    let out = scaled_dot_attention_var(&mut t, qv, kv, vv);
    Ok(t.value(out).clone().into_dimensionality().unwrap())
}

/// The softmax weight matrix `softmax(Q·Kᵀ/√d_k)`, exposed for invariant
/// checks.
pub fn attention_weights(q: &Array3<f64>, k: &Array3<f64>) -> Result<Array3<f64>> {
    if q.shape()[2] != k.shape()[2] || q.shape()[0] != k.shape()[0] {
        return Err(Error::Shape("attention operands disagree".into()));
    }
    let mut t = Tape::new();
    let qv = t.leaf(q.clone().into_dyn());
    let kv = t.leaf(k.clone().into_dyn());
    let scores = t.batch_matmul(qv, kv, true);
    let scaled = t.affine(scores, 1.0 / (q.shape()[2] as f64).sqrt(), 0.0);
    let weights = t.softmax_last(scaled);
    Ok(t.value(weights).clone().into_dimensionality().unwrap())
}

/// `[B, w, h·d] → [B·h, w, d]`
fn split_heads(t: &mut Tape, x: Var, heads: usize) -> Var {
    let (b, w, hd) = shape3(t, x);
    let d = hd / heads;
    let r = t.reshape(x, &[b, w, heads, d]);
    let p = t.permute(r, &[0, 2, 1, 3]);
    t.reshape(p, &[b * heads, w, d])
}

/// `[B·h, w, d] → [B, w, h·d]`
fn merge_heads(t: &mut Tape, x: Var, heads: usize) -> Var {
    let sh = t.value(x).shape().to_vec();
    let (bh, w, d) = (sh[0], sh[1], sh[2]);
    let b = bh / heads;
    let r = t.reshape(x, &[b, heads, w, d]);
    let p = t.permute(r, &[0, 2, 1, 3]);
    t.reshape(p, &[b, w, heads * d])
}

/// Projection weights of one attention block, each [d1, d1] in row
/// convention (y = x·W).
pub struct AttentionProj {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

/// Project queries/keys/values, run each head independently, concatenate,
/// project out. `x_q` and `x_kv` are [B, w, d1].
pub fn multi_head_var(t: &mut Tape, p: &AttentionProj, x_q: Var, x_kv: Var, heads: usize) -> Var {
    let q = linear(t, x_q, p.w_q, None);
    let k = linear(t, x_kv, p.w_k, None);
    let v = linear(t, x_kv, p.w_v, None);
    let qh = split_heads(t, q, heads);
    let kh = split_heads(t, k, heads);
    let vh = split_heads(t, v, heads);
    let att = scaled_dot_attention_var(t, qh, kh, vh);
    let merged = merge_heads(t, att, heads);
    linear(t, merged, p.w_o, None)
}

pub fn multi_head(
    w_q: &Array2<f64>,
    w_k: &Array2<f64>,
    w_v: &Array2<f64>,
    w_o: &Array2<f64>,
    x_q: &Array3<f64>,
    x_kv: &Array3<f64>,
    heads: usize,
) -> Result<Array3<f64>> {
    let d1 = x_q.shape()[2];
    if d1 % heads != 0 {
        return Err(Error::Config(format!(
            "head count {heads} must divide the model width {d1}"
        )));
    }
    let mut t = Tape::new();
    let p = AttentionProj {
        w_q: t.leaf(w_q.clone().into_dyn()),
        w_k: t.leaf(w_k.clone().into_dyn()),
        w_v: t.leaf(w_v.clone().into_dyn()),
        w_o: t.leaf(w_o.clone().into_dyn()),
    };
    let xq = t.leaf(x_q.clone().into_dyn());
    let xkv = t.leaf(x_kv.clone().into_dyn());
    let out = multi_head_var(&mut t, &p, xq, xkv, heads);
    Ok(t.value(out).clone().into_dimensionality().unwrap())
}

/// Per-position layer norm over the last axis followed by a learned affine.
pub fn layer_norm_var(t: &mut Tape, x: Var, gamma: Var, beta: Var) -> Var {
    let n = *t.value(x).shape().last().unwrap() as f64;
    let sum = t.sum_last_keep(x);
    let mean = t.affine(sum, 1.0 / n, 0.0);
    let centered = t.sub(x, mean);
    let sq = t.mul(centered, centered);
    let var_sum = t.sum_last_keep(sq);
    let var = t.affine(var_sum, 1.0 / n, LAYER_NORM_EPS);
    let inv_std = t.powf(var, -0.5);
    let normed = t.mul(centered, inv_std);
    let scaled = t.mul(normed, gamma);
    t.add(scaled, beta)
}

pub fn nonlinear_var(t: &mut Tape, w1: Var, b1: Var, w2: Var, b2: Var, x: Var) -> Var {
    let h = linear_t(t, x, w1, Some(b1));
    let r = t.relu(h);
    linear_t(t, r, w2, Some(b2))
}

pub fn nonlinear(layer: &NonlinearLayer, x: &Array3<f64>) -> Result<Array3<f64>> {
    if layer.w1.ncols() != x.shape()[2] {
        return Err(Error::Shape(format!(
            "nonlinear layer expects width {}, input has {}",
            layer.w1.ncols(),
            x.shape()[2]
        )));
    }
    let mut t = Tape::new();
    let w1 = t.leaf(layer.w1.clone().into_dyn());
    let b1 = t.leaf(layer.b1.clone().into_dyn());
    let w2 = t.leaf(layer.w2.clone().into_dyn());
    let b2 = t.leaf(layer.b2.clone().into_dyn());
    let xv = t.leaf(x.clone().into_dyn());
    let out = nonlinear_var(&mut t, w1, b1, w2, b2, xv);
    Ok(t.value(out).clone().into_dimensionality().unwrap())
}

/// Tape variables of one encoder/decoder layer.
pub struct LayerVars {
    pub proj: AttentionProj,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub nl_w1: Var,
    pub nl_b1: Var,
    pub nl_w2: Var,
    pub nl_b2: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

/// One post-norm block: `x = LN(x + Attn(q, kv))`, then
/// `x = LN(x + NonLinear(x))`.
fn residual_block(t: &mut Tape, layer: &LayerVars, q_input: Var, kv: Var, heads: usize) -> Var {
    let att = multi_head_var(t, &layer.proj, q_input, kv, heads);
    let sum1 = t.add(q_input, att);
    let x = layer_norm_var(t, sum1, layer.ln1_gamma, layer.ln1_beta);
    let nl = nonlinear_var(t, layer.nl_w1, layer.nl_b1, layer.nl_w2, layer.nl_b2, x);
    let sum2 = t.add(x, nl);
    layer_norm_var(t, sum2, layer.ln2_gamma, layer.ln2_beta)
}

/// Self-attention stack; `x_in` must already include the positional
/// encoding.
pub fn encode_var(t: &mut Tape, layers: &[LayerVars], x_in: Var, heads: usize) -> Var {
    let mut x = x_in;
    for layer in layers {
        x = residual_block(t, layer, x, x, heads);
    }
    x
}

/// Cross-attention stack over the latent sequence: the first layer queries
/// with the positional encoding broadcast over the batch, later layers with
/// the previous output; keys and values are always `z`.
pub fn decode_var(t: &mut Tape, layers: &[LayerVars], z: Var, pos: Var, heads: usize) -> Var {
    let (b, w, d1) = shape3(t, z);
    let mut q = t.broadcast_to(pos, &[b, w, d1]);
    for layer in layers {
        q = residual_block(t, layer, q, z, heads);
    }
    q
}
