//! Multi-path sublayers.
//!
//! A sublayer with `n` paths normalizes its input once, runs `n` independent
//! attention or feed-forward functions on it, optionally builds `n` extra
//! features by averaging every size-`n−1` subset of the raw function outputs,
//! normalizes every feature with its own PathNorm, and fuses them with the
//! residual stream as `β·x + Σ αᵢ·featureᵢ`.
//!
//! Feature order is fixed: raw features by path index, then combined
//! features by omitted path index. Fusion weights, PathNorm instances and
//! checkpoint names all follow this order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, AttentionParams, FfnParams, LayerNormParams};
use crate::params::{ParamId, ParamStore};
use crate::tape::{ExecMode, Tape, Var};
use crate::tensor::Tensor;

/// Fixed fusion weights used when learnable weights are disabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedWeightMode {
    /// `αᵢ = 1/n`: plain path averaging.
    #[default]
    Mean,
    /// `αᵢ = 1/√n`: variance-preserving sum of unit-variance features.
    InvSqrt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiPathConfig {
    pub n_paths: usize,
    #[serde(default = "yes")]
    pub use_pathnorm: bool,
    #[serde(default = "yes")]
    pub use_learnable_weights: bool,
    #[serde(default)]
    pub use_more_features: bool,
    #[serde(default)]
    pub fixed_weight_mode: FixedWeightMode,
}

fn yes() -> bool {
    true
}

impl MultiPathConfig {
    /// All three mechanisms on.
    pub fn full(n_paths: usize) -> Self {
        MultiPathConfig {
            n_paths,
            use_pathnorm: true,
            use_learnable_weights: true,
            use_more_features: true,
            fixed_weight_mode: FixedWeightMode::Mean,
        }
    }

    /// Multiple paths averaged with fixed weights, no PathNorm.
    pub fn plain(n_paths: usize) -> Self {
        MultiPathConfig {
            n_paths,
            use_pathnorm: false,
            use_learnable_weights: false,
            use_more_features: false,
            fixed_weight_mode: FixedWeightMode::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::Config("n_paths must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of features entering fusion.
    pub fn feature_count(&self) -> usize {
        feature_count(self.n_paths, self.use_more_features)
    }

    /// Whether combined features are actually generated.
    pub fn has_new_features(&self) -> bool {
        self.use_more_features && self.n_paths >= 3
    }
}

/// `n` raw features, plus `n` combined ones when more-features is on and `n ≥ 3`.
/// With one or two paths no distinct subset average exists.
pub fn feature_count(n_paths: usize, more_features: bool) -> usize {
    if more_features && n_paths >= 3 {
        2 * n_paths
    } else {
        n_paths
    }
}

/// All size-`n−1` subsets of `0..n`, subset `i` omitting path `i`.
///
/// For `n = 1` this is a single empty subset, which callers treat as "no
/// combined features".
pub fn select_subsets(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|omit| (0..n).filter(|&j| j != omit).collect()).collect()
}

/// `α = 1/√(2·n_raw)` for every feature and `β = 1`.
pub fn init_weights(n_raw: usize, more_features: bool) -> (Vec<f64>, f64) {
    assert!(n_raw >= 1, "need at least one raw feature");
    let m = feature_count(n_raw, more_features);
    let a = 1.0 / ((2 * n_raw) as f64).sqrt();
    (vec![a; m], 1.0)
}

/// Weights used when learnable fusion is disabled: `1/n` or `1/√n` per
/// feature, where `n` counts raw paths, and `β = 1`.
pub fn fixed_weights(cfg: &MultiPathConfig) -> (Vec<f64>, f64) {
    let n = cfg.n_paths as f64;
    let a = match cfg.fixed_weight_mode {
        FixedWeightMode::Mean => 1.0 / n,
        FixedWeightMode::InvSqrt => 1.0 / n.sqrt(),
    };
    (vec![a; cfg.feature_count()], 1.0)
}

/// Elementwise mean of equally shaped tensors, summed in list order.
pub fn combine_avg(tape: &mut Tape, outputs: &[Var]) -> Result<Var> {
    let (first, rest) = outputs
        .split_first()
        .ok_or_else(|| Error::Contract("combine_avg: empty input list".into()))?;
    let mut acc = *first;
    for &o in rest {
        acc = tape.add(acc, o)?;
    }
    Ok(tape.scale(acc, 1.0 / outputs.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SublayerKind {
    Attention,
    FeedForward,
}

impl SublayerKind {
    /// Short name used in parameter names and reports.
    pub fn tag(self) -> &'static str {
        match self {
            SublayerKind::Attention => "attn",
            SublayerKind::FeedForward => "ffn",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "attn" => Some(SublayerKind::Attention),
            "ffn" => Some(SublayerKind::FeedForward),
            _ => None,
        }
    }
}

/// Parameters of one path function.
#[derive(Clone, Debug, PartialEq)]
pub enum PathParams {
    Attention(AttentionParams),
    FeedForward(FfnParams),
}

impl PathParams {
    /// Applies the path function to already-normalized input `x`.
    /// `lengths` gives the sequence boundaries within the batch.
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var, lengths: &[usize]) -> Result<Var> {
        match self {
            PathParams::Attention(p) => nn::mha(tape, store, x, p, lengths, false),
            PathParams::FeedForward(p) => nn::ffn(tape, store, x, p),
        }
    }

    pub fn num_params(kind: SublayerKind, d: usize) -> usize {
        match kind {
            SublayerKind::Attention => AttentionParams::num_params(d),
            SublayerKind::FeedForward => FfnParams::num_params(d),
        }
    }
}

/// Fusion weights: trainable parameters, or constants for the ablations.
#[derive(Clone, Debug, PartialEq)]
pub enum FusionWeights {
    Learnable { alpha: ParamId, beta: ParamId },
    Fixed { alpha: Vec<f64>, beta: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiPathParams {
    pub kind: SublayerKind,
    pub pre_ln: LayerNormParams,
    pub paths: Vec<PathParams>,
    /// One per feature when PathNorm is on, empty otherwise.
    pub pathnorms: Vec<LayerNormParams>,
    pub weights: FusionWeights,
}

impl MultiPathParams {
    /// Registers a sublayer's parameters under `prefix`, e.g. `enc.0.attn`.
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        kind: SublayerKind,
        d: usize,
        heads: usize,
        cfg: &MultiPathConfig,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let pre_ln = LayerNormParams::register(store, &format!("{prefix}.ln"), d, eps)?;
        let mut paths = Vec::with_capacity(cfg.n_paths);
        for i in 0..cfg.n_paths {
            let name = format!("{prefix}.path{i}");
            paths.push(match kind {
                SublayerKind::Attention => {
                    PathParams::Attention(AttentionParams::register(store, &name, d, heads, rng)?)
                }
                SublayerKind::FeedForward => PathParams::FeedForward(FfnParams::register(store, &name, d, rng)?),
            });
        }
        let m = cfg.feature_count();
        let pathnorms = if cfg.use_pathnorm {
            (0..m)
                .map(|j| LayerNormParams::register(store, &format!("{prefix}.pathnorm{j}"), d, eps))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let weights = if cfg.use_learnable_weights {
            let (alpha, beta) = init_weights(cfg.n_paths, cfg.use_more_features);
            FusionWeights::Learnable {
                alpha: store.add(format!("{prefix}.alpha"), Tensor::vector(alpha))?,
                beta: store.add(format!("{prefix}.beta"), Tensor::scalar(beta))?,
            }
        } else {
            let (alpha, beta) = fixed_weights(cfg);
            FusionWeights::Fixed { alpha, beta }
        };
        Ok(MultiPathParams {
            kind,
            pre_ln,
            paths,
            pathnorms,
            weights,
        })
    }

    /// Closed-form parameter count of one sublayer, split into
    /// (path functions, normalizations, fusion weights).
    pub fn count(kind: SublayerKind, d: usize, cfg: &MultiPathConfig) -> (usize, usize, usize) {
        let m = cfg.feature_count();
        let paths = cfg.n_paths * PathParams::num_params(kind, d);
        let norms = LayerNormParams::num_params(d) * (1 + if cfg.use_pathnorm { m } else { 0 });
        let fusion = if cfg.use_learnable_weights { m + 1 } else { 0 };
        (paths, norms, fusion)
    }

    fn check(&self, cfg: &MultiPathConfig, store: &ParamStore) -> Result<()> {
        let m = cfg.feature_count();
        let inconsistent = |what: String| Err(Error::Contract(format!("multipath params inconsistent: {what}")));
        if self.paths.len() != cfg.n_paths {
            return inconsistent(format!("{} paths for n_paths={}", self.paths.len(), cfg.n_paths));
        }
        let expected_norms = if cfg.use_pathnorm { m } else { 0 };
        if self.pathnorms.len() != expected_norms {
            return inconsistent(format!("{} PathNorms, expected {expected_norms}", self.pathnorms.len()));
        }
        let alpha_len = match &self.weights {
            FusionWeights::Learnable { alpha, .. } => store.value(*alpha).numel(),
            FusionWeights::Fixed { alpha, .. } => alpha.len(),
        };
        if alpha_len != m {
            return inconsistent(format!("alpha has {alpha_len} entries, expected {m}"));
        }
        Ok(())
    }
}

/// Where a fused feature came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FeatureOrigin {
    Path(usize),
    Subset(Vec<usize>),
}

/// Features entering fusion, already PathNorm-ed when PathNorm is enabled.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub raw: Vec<Var>,
    pub new: Vec<Var>,
    pub origins: Vec<FeatureOrigin>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.raw.len() + self.new.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Raw features first, then new features.
    pub fn iter(&self) -> impl Iterator<Item = Var> + '_ {
        self.raw.iter().chain(&self.new).copied()
    }
}

/// Fusion weights as seen by [`fuse`].
#[derive(Clone, Copy, Debug)]
pub enum Weights<'a> {
    OnTape { alpha: Var, beta: Var },
    Fixed { alpha: &'a [f64], beta: f64 },
}

/// `β·x + Σ αᵢ·featureᵢ`, accumulated left to right in feature order.
pub fn fuse(tape: &mut Tape, x: Var, features: &FeatureSet, weights: Weights<'_>) -> Result<Var> {
    let m = features.len();
    match weights {
        Weights::OnTape { alpha, beta } => {
            if tape.value(alpha).numel() != m || tape.shape(alpha).len() != 1 {
                return Err(Error::shape("fuse", tape.shape(alpha), &[m]));
            }
            let mut acc = tape.scale_by(x, beta, 0)?;
            for (i, f) in features.iter().enumerate() {
                let term = tape.scale_by(f, alpha, i)?;
                acc = tape.add(acc, term)?;
            }
            Ok(acc)
        }
        Weights::Fixed { alpha, beta } => {
            if alpha.len() != m {
                return Err(Error::shape("fuse", &[alpha.len()], &[m]));
            }
            let mut acc = tape.scale(x, beta);
            for (f, &a) in features.iter().zip(alpha) {
                let term = tape.scale(f, a);
                acc = tape.add(acc, term)?;
            }
            Ok(acc)
        }
    }
}

/// `PathNorm(func(h))` when a PathNorm is given, `func(h)` otherwise.
/// `h` is the sublayer's shared pre-normalized input.
pub fn path_forward(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    func: &PathParams,
    pathnorm: Option<&LayerNormParams>,
    lengths: &[usize],
) -> Result<Var> {
    let y = func.apply(tape, store, h, lengths)?;
    match pathnorm {
        Some(pn) => nn::layer_norm(tape, store, y, pn),
        None => Ok(y),
    }
}

/// Runs the path functions on the shared normalized input `h` and assembles
/// the feature set: raw outputs, subset averages of the raw outputs taken
/// before PathNorm, then a PathNorm on every feature.
pub fn build_features(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    params: &MultiPathParams,
    cfg: &MultiPathConfig,
    lengths: &[usize],
    mode: ExecMode,
) -> Result<FeatureSet> {
    let n = cfg.n_paths;
    let stacked = tape.branches(h, n, mode, |i, t, input| {
        params.paths[i].apply(t, store, input, lengths)
    })?;
    let funcs: Vec<Var> = (0..n).map(|i| tape.slab(stacked, i)).collect::<Result<_>>()?;

    let mut new = Vec::new();
    let mut origins: Vec<FeatureOrigin> = (0..n).map(FeatureOrigin::Path).collect();
    if cfg.has_new_features() {
        for subset in select_subsets(n) {
            let members: Vec<Var> = subset.iter().map(|&j| funcs[j]).collect();
            new.push(combine_avg(tape, &members)?);
            origins.push(FeatureOrigin::Subset(subset));
        }
    }
    let mut raw = funcs;
    if cfg.use_pathnorm {
        for (j, f) in raw.iter_mut().chain(new.iter_mut()).enumerate() {
            *f = nn::layer_norm(tape, store, *f, &params.pathnorms[j])?;
        }
    }
    Ok(FeatureSet { raw, new, origins })
}

/// Full multi-path sublayer: shared pre-LN, paths, optional combined
/// features, PathNorm, weighted fusion with the residual.
pub fn multipath_sublayer(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    params: &MultiPathParams,
    cfg: &MultiPathConfig,
    lengths: &[usize],
    mode: ExecMode,
) -> Result<Var> {
    params.check(cfg, store)?;
    let h = nn::layer_norm(tape, store, x, &params.pre_ln)?;
    let features = build_features(tape, store, h, params, cfg, lengths, mode)?;
    match &params.weights {
        FusionWeights::Learnable { alpha, beta } => {
            let alpha = tape.param(store, *alpha);
            let beta = tape.param(store, *beta);
            fuse(tape, x, &features, Weights::OnTape { alpha, beta })
        }
        FusionWeights::Fixed { alpha, beta } => fuse(tape, x, &features, Weights::Fixed { alpha, beta: *beta }),
    }
}
