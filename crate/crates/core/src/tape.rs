//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs to replay the chain rule. Node inputs always precede the node, so a
//! single reverse sweep from the loss visits each node after all of its
//! consumers. A tape supports exactly one backward pass.
//!
//! Parallel work is expressed with [`Tape::branches`]: each branch records
//! into its own sub-tape, and the branch group appears on the parent tape as
//! one node whose backward pass replays the sub-tapes.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How independent branches are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    #[default]
    Sequential,
    Concurrent,
}

/// One block of rows attending to another block of rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// Layout of a batched attention call: independent segments, head count,
/// and whether queries may only see keys at or before their own position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub segments: Vec<AttnSegment>,
    pub heads: usize,
    pub causal: bool,
}

impl AttnLayout {
    /// Self-attention over consecutive sequences of the given lengths.
    pub fn self_attention(lengths: &[usize], heads: usize, causal: bool) -> Self {
        let mut start = 0;
        let segments = lengths
            .iter()
            .map(|&len| {
                let s = AttnSegment {
                    q_start: start,
                    q_len: len,
                    k_start: start,
                    k_len: len,
                };
                start += len;
                s
            })
            .collect();
        AttnLayout {
            segments,
            heads,
            causal,
        }
    }

    /// Queries from one batch of sequences attending to a paired batch.
    pub fn cross_attention(q_lengths: &[usize], k_lengths: &[usize], heads: usize) -> Self {
        let (mut qs, mut ks) = (0, 0);
        let segments = q_lengths
            .iter()
            .zip(k_lengths)
            .map(|(&ql, &kl)| {
                let s = AttnSegment {
                    q_start: qs,
                    q_len: ql,
                    k_start: ks,
                    k_len: kl,
                };
                qs += ql;
                ks += kl;
                s
            })
            .collect();
        AttnLayout {
            segments,
            heads,
            causal: false,
        }
    }
}

/// Test hook that scales the gradient one op kind passes to its inputs.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardFault {
    pub op: &'static str,
    pub factor: f64,
}

struct Branch {
    tape: Tape,
    input: Var,
    output: Var,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy {
        x: Var,
        w: Var,
        index: usize,
    },
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
        scale: f64,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Branches {
        input: Var,
        branches: Vec<Branch>,
        mode: ExecMode,
    },
    Slab(Var, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::Relu(_) => "relu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::Embed { .. } => "embed",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Branches { .. } => "branches",
            Op::Slab(..) => "slab",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass and replays them backward once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    fault: Option<BackwardFault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Option<BackwardFault>) -> Self {
        Tape {
            fault,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`, if it reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Loads a parameter; repeated loads of one id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a length-`c` vector to every row of an `[r × c]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        if self.shape(bias) != [c] {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % c])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).expect("shape preserved");
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Multiplies `x` by the scalar `w[index]`, where `w` is itself on the tape.
    pub fn scale_by(&mut self, x: Var, w: Var, index: usize) -> Result<Var> {
        let wv = self.value(w);
        if wv.rank() != 1 || index >= wv.numel() {
            return Err(Error::Contract(format!(
                "scale_by: index {index} out of range for weight shape {:?}",
                wv.shape()
            )));
        }
        let c = wv.data()[index];
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| c * v).collect())?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::ScaleBy { x, w, index }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value =
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(0.0)).collect()).expect("shape preserved");
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Row-wise softmax of a matrix, stabilized by the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        let mut data = self.value(x).data().to_vec();
        if c > 0 {
            for row in data.chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.shape(gain) != [c] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        if self.shape(bias) != [c] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(bias)));
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scaled dot-product attention over independent segments, split into heads.
    ///
    /// `q` is `[Nq × d]`, `k` and `v` are `[Nk × d]`. Head `h` uses columns
    /// `h·d/heads .. (h+1)·d/heads` and scores are divided by `√(d/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: &AttnLayout) -> Result<Var> {
        let (nq, d) = self.value(q).dims2()?;
        let (nk, dk) = self.value(k).dims2()?;
        if dk != d || self.shape(v) != self.shape(k) {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        let heads = layout.heads;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        for s in &layout.segments {
            if s.q_start + s.q_len > nq || s.k_start + s.k_len > nk {
                return Err(Error::Contract(format!(
                    "attention segment {s:?} exceeds {nq} query / {nk} key rows"
                )));
            }
            if layout.causal && s.q_len != s.k_len {
                return Err(Error::Contract("causal attention needs square segments".into()));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; nq * d];
        let mut probs = Vec::new();
        for s in &layout.segments {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..s.q_len {
                    let qrow = &qd[(s.q_start + i) * d + off..(s.q_start + i) * d + off + dh];
                    let visible = if layout.causal { i + 1 } else { s.k_len };
                    let mut scores = vec![0.0; s.k_len];
                    for (j, sc) in scores.iter_mut().enumerate().take(visible) {
                        let krow = &kd[(s.k_start + j) * d + off..(s.k_start + j) * d + off + dh];
                        *sc = dot(qrow, krow) * scale;
                    }
                    softmax_in_place(&mut scores[..visible]);
                    let orow = &mut out[(s.q_start + i) * d + off..(s.q_start + i) * d + off + dh];
                    for (j, &p) in scores.iter().enumerate().take(visible) {
                        let vrow = &vd[(s.k_start + j) * d + off..(s.k_start + j) * d + off + dh];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let value = Tensor::new(vec![nq, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let layout = layout.clone();
        Ok(self.push(value, Op::Attention { q, k, v, layout, probs }, rg))
    }

    /// Gathers rows of `table` for `ids`, multiplying each by `scale`.
    pub fn embed(&mut self, table: Var, ids: &[usize], scale: f64) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2()?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            out.extend(t[id * d..(id + 1) * d].iter().map(|v| v * scale));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
                scale,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Mean token-level cross-entropy of `[N × V]` logits against `N` targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, vocab) = self.value(logits).dims2()?;
        if n != targets.len() {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if n == 0 {
            return Err(Error::Contract("cross_entropy over zero tokens".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
            if t >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            softmax_in_place(row);
        }
        let rg = self.rg(logits);
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Evaluates `count` independent functions of `input`, each on its own
    /// sub-tape, and stacks their `[r × c]` outputs into `[count × r × c]`.
    ///
    /// In concurrent mode both the forward and the backward replay of the
    /// branches run on the rayon pool. Results are identical in both modes:
    /// each branch is computed the same way and the gradient flowing back to
    /// `input` is summed in branch order.
    pub fn branches<F>(&mut self, input: Var, count: usize, mode: ExecMode, f: F) -> Result<Var>
    where
        F: Fn(usize, &mut Tape, Var) -> Result<Var> + Sync,
    {
        if count == 0 {
            return Err(Error::Contract("branches: need at least one branch".into()));
        }
        let x = self.value(input).clone();
        let input_rg = self.rg(input);
        let fault = self.fault;
        let run = |i: usize| -> Result<Branch> {
            let mut tape = Tape::with_fault(fault);
            let inner_in = tape.leaf(x.clone(), input_rg);
            let output = f(i, &mut tape, inner_in)?;
            Ok(Branch {
                tape,
                input: inner_in,
                output,
            })
        };
        let branches: Vec<Branch> = match mode {
            ExecMode::Sequential => (0..count).map(run).collect::<Result<_>>()?,
            ExecMode::Concurrent => (0..count).into_par_iter().map(run).collect::<Result<_>>()?,
        };
        let first = branches[0].tape.shape(branches[0].output).to_vec();
        let (r, c) = match first.as_slice() {
            [r, c] => (*r, *c),
            _ => return Err(Error::Contract("branch outputs must be matrices".into())),
        };
        let mut data = Vec::with_capacity(count * r * c);
        for b in &branches {
            let out = b.tape.value(b.output);
            if out.shape() != first.as_slice() {
                return Err(Error::shape("branches", &first, out.shape()));
            }
            data.extend_from_slice(out.data());
        }
        let rg = branches.iter().any(|b| b.tape.rg(b.output));
        let value = Tensor::new(vec![count, r, c], data)?;
        Ok(self.push(value, Op::Branches { input, branches, mode }, rg))
    }

    /// Selects `x[index]` from a rank-3 tensor.
    pub fn slab(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, r, c) = match t.shape() {
            [n, r, c] => (*n, *r, *c),
            s => return Err(Error::Contract(format!("slab expects rank 3, got {s:?}"))),
        };
        if index >= n {
            return Err(Error::Contract(format!("slab index {index} out of range {n}")));
        }
        let data = t.data()[index * r * c..(index + 1) * r * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::Slab(x, index), rg))
    }

    /// Back-propagates from a one-element `loss`.
    ///
    /// Populates [`Tape::grad`] for every ancestor that requires a gradient and
    /// returns the parameter gradients. Calling it a second time is an error.
    pub fn backward(&mut self, loss: Var) -> Result<ParamGrads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a one-element loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(loss, vec![1.0])
    }

    fn backward_seeded(&mut self, root: Var, seed: Vec<f64>) -> Result<ParamGrads> {
        if self.consumed {
            return Err(Error::Contract("tape already consumed by a backward pass".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut param_grads = ParamGrads::new();
        if self.rg(root) {
            grads[root.0] = Some(seed);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let factor = match self.fault {
                Some(f) if f.op == self.nodes[i].op.name() => f.factor,
                _ => 1.0,
            };
            let g_in: Vec<f64>;
            let g_ref: &[f64] = if factor != 1.0 {
                g_in = g.iter().map(|v| v * factor).collect();
                &g_in
            } else {
                &g
            };
            let branch_results = if let Op::Branches { input, branches, mode } = &mut self.nodes[i].op {
                let per = g_ref.len() / branches.len();
                let replay = |(bi, b): (usize, &mut Branch)| -> Result<(Option<Vec<f64>>, ParamGrads)> {
                    if !b.tape.rg(b.output) {
                        return Ok((None, ParamGrads::new()));
                    }
                    let seed = g_ref[bi * per..(bi + 1) * per].to_vec();
                    let pg = b.tape.backward_seeded(b.output, seed)?;
                    Ok((b.tape.grad(b.input).map(<[f64]>::to_vec), pg))
                };
                let results: Vec<_> = match mode {
                    ExecMode::Sequential => branches.iter_mut().enumerate().map(replay).collect::<Result<_>>()?,
                    ExecMode::Concurrent => branches.par_iter_mut().enumerate().map(replay).collect::<Result<_>>()?,
                };
                Some((*input, results))
            } else {
                None
            };
            match branch_results {
                Some((input, results)) => {
                    for (gi, pg) in results {
                        if let Some(gi) = gi {
                            accumulate(&mut grads, &self.nodes, input, gi);
                        }
                        merge_param_grads(&mut param_grads, pg);
                    }
                }
                None => {
                    let contributions = self.local_backward(i, g_ref)?;
                    for (var, contrib) in contributions {
                        accumulate(&mut grads, &self.nodes, var, contrib);
                    }
                    if let Op::Param(id) = self.nodes[i].op {
                        merge_param_grads(&mut param_grads, [(id, g.clone())].into_iter().collect());
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(param_grads)
    }

    /// Gradient contributions of node `i` to its inputs, given its output gradient.
    fn local_backward(&self, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::Branches { .. } => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let (_, n) = val(*b).dims2()?;
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(m, n, k, g, val(*b).data(), &mut da);
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(m, k, n, val(*a).data(), g, &mut db);
                    out.push((*b, db));
                }
            }
            Op::MatMulNt(a, b) => {
                // out[m×n] = a[m×k] · b[n×k]ᵀ
                let (m, k) = val(*a).dims2()?;
                let (n, _) = val(*b).dims2()?;
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(m, n, k, g, val(*b).data(), &mut da);
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(m, n, k, g, val(*a).data(), &mut db);
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::AddRow(x, bias) => {
                out.push((*x, g.to_vec()));
                if self.rg(*bias) {
                    let c = val(*bias).numel();
                    let mut db = vec![0.0; c];
                    for (idx, gv) in g.iter().enumerate() {
                        db[idx % c] += gv;
                    }
                    out.push((*bias, db));
                }
            }
            Op::Mul(a, b) => {
                out.push((*a, zip_map(g, val(*b).data(), |x, y| x * y)));
                out.push((*b, zip_map(g, val(*a).data(), |x, y| x * y)));
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|v| v * c).collect())),
            Op::ScaleBy { x, w, index } => {
                let wv = val(*w);
                let c = wv.data()[*index];
                out.push((*x, g.iter().map(|v| v * c).collect()));
                if self.rg(*w) {
                    let mut dw = vec![0.0; wv.numel()];
                    dw[*index] = dot(g, val(*x).data());
                    out.push((*w, dw));
                }
            }
            Op::Relu(x) => {
                let xs = val(*x).data();
                out.push((*x, zip_map(g, xs, |gv, xv| if xv > 0.0 { gv } else { 0.0 })));
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let (_, c) = node.value.dims2()?;
                let mut dx = vec![0.0; y.len()];
                if c > 0 {
                    for ((dxr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let s = dot(gr, yr);
                        for j in 0..c {
                            dxr[j] = yr[j] * (gr[j] - s);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = node.value.dims2()?;
                let gv = val(*gain).data();
                if self.rg(*x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let hr = &xhat[i * c..(i + 1) * c];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dot(&dh, hr) / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = rstd[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.rg(*gain) {
                    let mut dg = vec![0.0; c];
                    for (idx, (gvv, h)) in g.iter().zip(xhat).enumerate() {
                        dg[idx % c] += gvv * h;
                    }
                    out.push((*gain, dg));
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; c];
                    for (idx, gvv) in g.iter().enumerate() {
                        db[idx % c] += gvv;
                    }
                    out.push((*bias, db));
                }
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (nq, d) = val(*q).dims2()?;
                let (nk, _) = val(*k).dims2()?;
                let dh = d / layout.heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![0.0; nq * d];
                let mut dk = vec![0.0; nk * d];
                let mut dv = vec![0.0; nk * d];
                let mut p_off = 0;
                for s in &layout.segments {
                    for h in 0..layout.heads {
                        let off = h * dh;
                        for i in 0..s.q_len {
                            let p = &probs[p_off..p_off + s.k_len];
                            p_off += s.k_len;
                            let qi = (s.q_start + i) * d + off;
                            let grow = &g[qi..qi + dh];
                            let visible = if layout.causal { i + 1 } else { s.k_len };
                            let mut dp = vec![0.0; visible];
                            for j in 0..visible {
                                let kj = (s.k_start + j) * d + off;
                                dp[j] = dot(grow, &vd[kj..kj + dh]);
                                for c in 0..dh {
                                    dv[kj + c] += p[j] * grow[c];
                                }
                            }
                            let pd = dot(&p[..visible], &dp);
                            for j in 0..visible {
                                let ds = p[j] * (dp[j] - pd) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = (s.k_start + j) * d + off;
                                for c in 0..dh {
                                    dq[qi + c] += ds * kd[kj + c];
                                    dk[kj + c] += ds * qd[qi + c];
                                }
                            }
                        }
                    }
                }
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dv));
            }
            Op::Embed { table, ids, scale } => {
                let (vocab, d) = val(*table).dims2()?;
                let mut dt = vec![0.0; vocab * d];
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += scale * g[row * d + c];
                    }
                }
                out.push((*table, dt));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; val(*x).numel()])),
            Op::Mean(x) => {
                let n = val(*x).numel();
                out.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (n, vocab) = val(*logits).dims2()?;
                let s = g[0] / n as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (row, &t) in targets.iter().enumerate() {
                    dl[row * vocab + t] -= s;
                }
                out.push((*logits, dl));
            }
            Op::Slab(x, index) => {
                let n = val(*x).numel();
                let mut dx = vec![0.0; n];
                dx[index * g.len()..(index + 1) * g.len()].copy_from_slice(g);
                out.push((*x, dx));
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], var: Var, contrib: Vec<f64>) {
    if !nodes[var.0].requires_grad {
        return;
    }
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn merge_param_grads(into: &mut ParamGrads, from: ParamGrads) {
    for (id, g) in from {
        match into.get_mut(&id) {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
            None => {
                into.insert(id, g);
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
