//! Standard Transformer blocks: attention, feed-forward, layer normalization,
//! token embeddings with sinusoidal positions.
//!
//! Attention follows the three-matrix form `SoftMax(X W_q (X W_k)ᵀ / √d_h) X W_v`
//! with no output projection. Heads split the `d`-wide projections into
//! `d / heads` column slices, each scaled by `√(d / heads)`; a single head is
//! the unsplit form.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{softmax_in_place, AttnLayout, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

/// Hidden width multiplier of the feed-forward block.
pub const FFN_EXPANSION: usize = 4;

/// Uniform Glorot initialization: `U(−√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out)))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide d_model {d}")));
        }
        Ok(AttentionParams {
            w_q: store.add(format!("{prefix}.w_q"), glorot_uniform(d, d, rng))?,
            w_k: store.add(format!("{prefix}.w_k"), glorot_uniform(d, d, rng))?,
            w_v: store.add(format!("{prefix}.w_v"), glorot_uniform(d, d, rng))?,
            heads,
        })
    }

    pub fn num_params(d: usize) -> usize {
        3 * d * d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Result<Self> {
        let hidden = FFN_EXPANSION * d;
        Ok(FfnParams {
            w1: store.add(format!("{prefix}.w1"), glorot_uniform(d, hidden, rng))?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?,
            w2: store.add(format!("{prefix}.w2"), glorot_uniform(hidden, d, rng))?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn num_params(d: usize) -> usize {
        let hidden = FFN_EXPANSION * d;
        d * hidden + hidden + hidden * d + d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, eps: f64) -> Result<Self> {
        if eps <= 0.0 {
            return Err(Error::Config("normalization eps must be positive".into()));
        }
        Ok(LayerNormParams {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(&[d], 1.0))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d]))?,
            eps,
        })
    }

    pub fn num_params(d: usize) -> usize {
        2 * d
    }
}

pub fn layer_norm(tape: &mut Tape, store: &ParamStore, x: Var, p: &LayerNormParams) -> Result<Var> {
    let gain = tape.param(store, p.gain);
    let bias = tape.param(store, p.bias);
    tape.layer_norm(x, gain, bias, p.eps)
}

/// Per-head attention weight matrices for a single sequence `x` of shape `[t × d]`.
pub fn attention_weights(x: &Tensor, store: &ParamStore, p: &AttentionParams) -> Result<Vec<Tensor>> {
    let (t, d) = x.dims2()?;
    let wq = store.value(p.w_q);
    if wq.shape() != [d, d] {
        return Err(Error::shape("attention_weights", x.shape(), wq.shape()));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let q = tape.param(store, p.w_q);
    let k = tape.param(store, p.w_k);
    let q = tape.matmul(xv, q)?;
    let k = tape.matmul(xv, k)?;
    let (q, k) = (tape.value(q), tape.value(k));
    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let mut w = vec![0.0; t * t];
        for i in 0..t {
            let row = &mut w[i * t..(i + 1) * t];
            for (j, s) in row.iter_mut().enumerate() {
                *s = (0..dh).map(|c| q.at(i, h * dh + c) * k.at(j, h * dh + c)).sum::<f64>() * scale;
            }
            softmax_in_place(row);
        }
        out.push(Tensor::new(vec![t, t], w)?);
    }
    Ok(out)
}

/// Multi-head attention where queries come from `xq` and keys/values from `xkv`.
pub fn attention(
    tape: &mut Tape,
    store: &ParamStore,
    xq: Var,
    xkv: Var,
    p: &AttentionParams,
    layout: &AttnLayout,
) -> Result<Var> {
    let d = tape.shape(xq).get(1).copied().unwrap_or(0);
    let wq = store.value(p.w_q).shape();
    if wq != [d, d] {
        return Err(Error::shape("mha", tape.shape(xq), wq));
    }
    if layout.heads != p.heads {
        return Err(Error::Contract("layout head count differs from parameters".into()));
    }
    let (wq, wk, wv) = (
        tape.param(store, p.w_q),
        tape.param(store, p.w_k),
        tape.param(store, p.w_v),
    );
    let q = tape.matmul(xq, wq)?;
    let k = tape.matmul(xkv, wk)?;
    let v = tape.matmul(xkv, wv)?;
    tape.attention(q, k, v, layout)
}

/// Self-attention over a batch of consecutive sequences with the given lengths.
pub fn mha(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    p: &AttentionParams,
    lengths: &[usize],
    causal: bool,
) -> Result<Var> {
    let total: usize = lengths.iter().sum();
    if tape.shape(x).first() != Some(&total) {
        return Err(Error::shape("mha", tape.shape(x), &[total]));
    }
    let layout = AttnLayout::self_attention(lengths, p.heads, causal);
    attention(tape, store, x, x, p, &layout)
}

/// `ReLU(X W₁ + b₁) W₂ + b₂`.
pub fn ffn(tape: &mut Tape, store: &ParamStore, x: Var, p: &FfnParams) -> Result<Var> {
    let w1 = tape.param(store, p.w1);
    let b1 = tape.param(store, p.b1);
    let w2 = tape.param(store, p.w2);
    let b2 = tape.param(store, p.b2);
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let y = tape.matmul(h, w2)?;
    tape.add_row(y, b2)
}

/// Fixed sinusoidal encoding: `sin(pos / 10000^(2i/d))` on even columns and
/// the matching `cos` on odd columns.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("shape matches")
}

/// Embeds a batch of sequences: each token's table row scaled by `√d`, plus
/// the positional encoding of its position within its own sequence.
pub fn embed_and_position(
    tape: &mut Tape,
    store: &ParamStore,
    table: ParamId,
    sequences: &[Vec<usize>],
) -> Result<Var> {
    let (_, d) = store.value(table).dims2()?;
    let ids: Vec<usize> = sequences.iter().flatten().copied().collect();
    let table = tape.param(store, table);
    let emb = tape.embed(table, &ids, (d as f64).sqrt())?;
    let max_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
    let pe = positional_encoding(max_len, d);
    let mut pos = Vec::with_capacity(ids.len() * d);
    for s in sequences {
        pos.extend_from_slice(&pe.data()[..s.len() * d]);
    }
    let pos = tape.constant(Tensor::new(vec![ids.len(), d], pos)?);
    tape.add(emb, pos)
}
