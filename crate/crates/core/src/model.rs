//! Model assembly: a multi-path pre-norm encoder, an optional standard
//! pre-norm decoder, parameter accounting, checkpoints, and the fusion-weight
//! diversity report.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multipath::{self, FusionWeights, MultiPathConfig, MultiPathParams, SublayerKind};
use crate::nn::{self, glorot_uniform, AttentionParams, FfnParams, LayerNormParams, DEFAULT_NORM_EPS};
use crate::params::{ParamId, ParamStore};
use crate::tape::{AttnLayout, ExecMode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_depth: usize,
    /// Zero selects encoder-only mode: logits are read off the encoder.
    #[serde(default)]
    pub dec_depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub multipath: MultiPathConfig,
    /// Source embedding, target embedding and output projection share one table.
    #[serde(default = "default_share")]
    pub share_embeddings: bool,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_share() -> bool {
    true
}

fn default_eps() -> f64 {
    DEFAULT_NORM_EPS
}

impl ModelConfig {
    /// Encoder-only configuration with every mechanism switched on.
    pub fn encoder_only(enc_depth: usize, n_paths: usize, d_model: usize, heads: usize, vocab_size: usize) -> Self {
        ModelConfig {
            enc_depth,
            dec_depth: 0,
            d_model,
            heads,
            vocab_size,
            multipath: MultiPathConfig::full(n_paths),
            share_embeddings: true,
            norm_eps: DEFAULT_NORM_EPS,
            seed: 0,
        }
    }

    pub fn n_paths(&self) -> usize {
        self.multipath.n_paths
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_depth == 0 {
            return Err(Error::Config("enc_depth must be at least 1".into()));
        }
        if self.d_model == 0 {
            return Err(Error::Config("d_model must be positive".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if self.norm_eps.is_nan() || self.norm_eps <= 0.0 {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        self.multipath.validate()
    }

    pub fn is_seq2seq(&self) -> bool {
        self.dec_depth > 0
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiPathParams,
    pub ffn: MultiPathParams,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_ln: LayerNormParams,
    pub self_attn: AttentionParams,
    pub cross_ln: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub ffn_ln: LayerNormParams,
    pub ffn: FfnParams,
}

/// A built model: its configuration, every parameter, and the structure that
/// names them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embed_src: ParamId,
    pub embed_tgt: ParamId,
    /// `[vocab × d]` output projection; `None` reuses the target embedding.
    pub out_proj: Option<ParamId>,
    pub enc_layers: Vec<EncoderLayer>,
    pub enc_final_ln: LayerNormParams,
    pub dec_layers: Vec<DecoderLayer>,
    pub dec_final_ln: Option<LayerNormParams>,
    pub exec_mode: ExecMode,
}

/// Builds a model deterministically from `cfg.seed`.
///
/// Matrices use uniform Glorot initialization, biases start at zero,
/// normalization gains at one, and fusion weights at `α = 1/√(2n)`, `β = 1`.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let (d, v, eps) = (cfg.d_model, cfg.vocab_size, cfg.norm_eps);

    let embed_src = store.add("embed.src", glorot_uniform(v, d, &mut rng))?;
    let embed_tgt = if cfg.is_seq2seq() && !cfg.share_embeddings {
        store.add("embed.tgt", glorot_uniform(v, d, &mut rng))?
    } else {
        embed_src
    };

    let mut enc_layers = Vec::with_capacity(cfg.enc_depth);
    for l in 0..cfg.enc_depth {
        let attn = MultiPathParams::register(
            &mut store,
            &format!("enc.{l}.attn"),
            SublayerKind::Attention,
            d,
            cfg.heads,
            &cfg.multipath,
            eps,
            &mut rng,
        )?;
        let ffn = MultiPathParams::register(
            &mut store,
            &format!("enc.{l}.ffn"),
            SublayerKind::FeedForward,
            d,
            cfg.heads,
            &cfg.multipath,
            eps,
            &mut rng,
        )?;
        enc_layers.push(EncoderLayer { attn, ffn });
    }
    let enc_final_ln = LayerNormParams::register(&mut store, "enc.final_ln", d, eps)?;

    let mut dec_layers = Vec::with_capacity(cfg.dec_depth);
    for l in 0..cfg.dec_depth {
        let p = format!("dec.{l}");
        dec_layers.push(DecoderLayer {
            self_ln: LayerNormParams::register(&mut store, &format!("{p}.self_attn.ln"), d, eps)?,
            self_attn: AttentionParams::register(&mut store, &format!("{p}.self_attn"), d, cfg.heads, &mut rng)?,
            cross_ln: LayerNormParams::register(&mut store, &format!("{p}.cross_attn.ln"), d, eps)?,
            cross_attn: AttentionParams::register(&mut store, &format!("{p}.cross_attn"), d, cfg.heads, &mut rng)?,
            ffn_ln: LayerNormParams::register(&mut store, &format!("{p}.ffn.ln"), d, eps)?,
            ffn: FfnParams::register(&mut store, &format!("{p}.ffn"), d, &mut rng)?,
        });
    }
    let dec_final_ln = if cfg.is_seq2seq() {
        Some(LayerNormParams::register(&mut store, "dec.final_ln", d, eps)?)
    } else {
        None
    };
    let out_proj = if cfg.share_embeddings {
        None
    } else {
        Some(store.add("out.proj", glorot_uniform(v, d, &mut rng))?)
    };

    Ok(Model {
        config: cfg.clone(),
        store,
        embed_src,
        embed_tgt,
        out_proj,
        enc_layers,
        enc_final_ln,
        dec_layers,
        dec_final_ln,
        exec_mode: ExecMode::Sequential,
    })
}

impl Model {
    /// Encoder output after the final layer normalization, `[Σ src_len × d]`.
    pub fn encode(&self, tape: &mut Tape, src: &[Vec<usize>]) -> Result<Var> {
        let lengths: Vec<usize> = src.iter().map(Vec::len).collect();
        let mut x = nn::embed_and_position(tape, &self.store, self.embed_src, src)?;
        let mp = &self.config.multipath;
        for layer in &self.enc_layers {
            x = multipath::multipath_sublayer(tape, &self.store, x, &layer.attn, mp, &lengths, self.exec_mode)?;
            x = multipath::multipath_sublayer(tape, &self.store, x, &layer.ffn, mp, &lengths, self.exec_mode)?;
        }
        nn::layer_norm(tape, &self.store, x, &self.enc_final_ln)
    }

    /// Logits over the vocabulary for a batch.
    ///
    /// Encoder-only models return one row per source token and take no
    /// target. Sequence-to-sequence models require a target batch (decoder
    /// input, one sequence per source) and return one row per target token.
    pub fn forward_batch(&self, tape: &mut Tape, src: &[Vec<usize>], tgt: Option<&[Vec<usize>]>) -> Result<Var> {
        let enc = self.encode(tape, src)?;
        let hidden = match (&self.dec_final_ln, tgt) {
            (None, None) => enc,
            (None, Some(_)) => {
                return Err(Error::Contract(
                    "encoder-only model does not take a target sequence".into(),
                ))
            }
            (Some(_), None) => {
                return Err(Error::Contract(
                    "sequence-to-sequence model needs a target sequence".into(),
                ))
            }
            (Some(final_ln), Some(tgt)) => {
                if tgt.len() != src.len() {
                    return Err(Error::Contract(format!(
                        "{} source sequences but {} target sequences",
                        src.len(),
                        tgt.len()
                    )));
                }
                self.decode(tape, enc, src, tgt, final_ln)?
            }
        };
        let table = match self.out_proj {
            Some(id) => tape.param(&self.store, id),
            None => tape.param(&self.store, self.embed_tgt),
        };
        tape.matmul_nt(hidden, table)
    }

    fn decode(
        &self,
        tape: &mut Tape,
        enc: Var,
        src: &[Vec<usize>],
        tgt: &[Vec<usize>],
        final_ln: &LayerNormParams,
    ) -> Result<Var> {
        let src_len: Vec<usize> = src.iter().map(Vec::len).collect();
        let tgt_len: Vec<usize> = tgt.iter().map(Vec::len).collect();
        let heads = self.config.heads;
        let cross = AttnLayout::cross_attention(&tgt_len, &src_len, heads);
        let store = &self.store;
        let mut x = nn::embed_and_position(tape, store, self.embed_tgt, tgt)?;
        for layer in &self.dec_layers {
            let h = nn::layer_norm(tape, store, x, &layer.self_ln)?;
            let h = nn::mha(tape, store, h, &layer.self_attn, &tgt_len, true)?;
            x = tape.add(x, h)?;
            let h = nn::layer_norm(tape, store, x, &layer.cross_ln)?;
            let h = nn::attention(tape, store, h, enc, &layer.cross_attn, &cross)?;
            x = tape.add(x, h)?;
            let h = nn::layer_norm(tape, store, x, &layer.ffn_ln)?;
            let h = nn::ffn(tape, store, h, &layer.ffn)?;
            x = tape.add(x, h)?;
        }
        nn::layer_norm(tape, store, x, final_ln)
    }

    /// Single-sequence convenience wrapper around [`Model::forward_batch`].
    pub fn forward(&self, src: &[usize], tgt: Option<&[usize]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let src = [src.to_vec()];
        let tgt = tgt.map(|t| [t.to_vec()]);
        let logits = self.forward_batch(&mut tape, &src, tgt.as_ref().map(|t| t.as_slice()))?;
        Ok(tape.value(logits).clone())
    }

    /// Parameter counts obtained by walking the registered parameters.
    pub fn registered_breakdown(&self) -> ParamBreakdown {
        let mut b = ParamBreakdown::default();
        for (_, p) in self.store.iter() {
            let n = p.value.numel();
            let name = p.name.as_str();
            if name.starts_with("embed.") || name.starts_with("out.") {
                b.embeddings += n;
            } else if name.starts_with("dec.") {
                b.decoder += n;
            } else if name.ends_with(".alpha") || name.ends_with(".beta") {
                b.fusion += n;
            } else if name.contains(".path") && !name.contains(".pathnorm") {
                b.path_weights += n;
            } else {
                b.norms += n;
            }
        }
        b
    }

    /// Encoder sublayers in execution order with their layer index.
    pub fn sublayers(&self) -> impl Iterator<Item = (usize, &MultiPathParams)> {
        self.enc_layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| [(l, &layer.attn), (l, &layer.ffn)])
    }
}

/// Parameter counts split by role.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    /// Encoder attention and feed-forward path functions.
    pub path_weights: usize,
    /// Encoder pre-norms, PathNorms and the final encoder norm.
    pub norms: usize,
    /// Learnable fusion weights `α` and `β`.
    pub fusion: usize,
    /// Embedding tables and the output projection.
    pub embeddings: usize,
    /// Everything in the decoder stack.
    pub decoder: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.path_weights + self.norms + self.fusion + self.embeddings + self.decoder
    }

    /// PathNorm, layer norm and fusion weights: everything that is not a path
    /// function, embedding or decoder weight.
    pub fn overhead(&self) -> usize {
        self.norms + self.fusion
    }
}

impl fmt::Display for ParamBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "path_weights {:>12}", self.path_weights)?;
        writeln!(f, "norms        {:>12}", self.norms)?;
        writeln!(f, "fusion       {:>12}", self.fusion)?;
        writeln!(f, "embeddings   {:>12}", self.embeddings)?;
        writeln!(f, "decoder      {:>12}", self.decoder)?;
        write!(f, "total        {:>12}", self.total())
    }
}

/// Closed-form parameter count of the model `cfg` describes.
pub fn param_count(cfg: &ModelConfig) -> Result<ParamBreakdown> {
    cfg.validate()?;
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let mut b = ParamBreakdown::default();
    for kind in [SublayerKind::Attention, SublayerKind::FeedForward] {
        let (paths, norms, fusion) = MultiPathParams::count(kind, d, &cfg.multipath);
        b.path_weights += cfg.enc_depth * paths;
        b.norms += cfg.enc_depth * norms;
        b.fusion += cfg.enc_depth * fusion;
    }
    b.norms += LayerNormParams::num_params(d);

    let tables = if cfg.share_embeddings {
        1
    } else if cfg.is_seq2seq() {
        3
    } else {
        2
    };
    b.embeddings = tables * v * d;

    if cfg.is_seq2seq() {
        let ln = LayerNormParams::num_params(d);
        let per_layer = 3 * ln + 2 * AttentionParams::num_params(d) + FfnParams::num_params(d);
        b.decoder = cfg.dec_depth * per_layer + ln;
    }
    Ok(b)
}

/// One row of the diversity report.
#[derive(Clone, Debug, PartialEq)]
pub struct DiversityRow {
    pub layer: usize,
    pub kind: SublayerKind,
    pub alpha1: f64,
    pub alpha2: f64,
    pub d: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiversityReport {
    pub rows: Vec<DiversityRow>,
}

pub const DIVERSITY_CSV_HEADER: &str = "layer,kind,alpha1,alpha2,d";

/// `|α₁ − α₂| / |α₁ + α₂|`.
pub fn diversity(alpha1: f64, alpha2: f64) -> f64 {
    (alpha1 - alpha2).abs() / (alpha1 + alpha2).abs()
}

impl DiversityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(DIVERSITY_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.layer,
                r.kind.tag(),
                r.alpha1,
                r.alpha2,
                r.d
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(DIVERSITY_CSV_HEADER) {
            return Err(Error::Format("missing diversity CSV header".into()));
        }
        let bad = |line: &str| Error::Format(format!("bad diversity row `{line}`"));
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 5 {
                    return Err(bad(line));
                }
                Ok(DiversityRow {
                    layer: f[0].parse().map_err(|_| bad(line))?,
                    kind: SublayerKind::from_tag(f[1]).ok_or_else(|| bad(line))?,
                    alpha1: f[2].parse().map_err(|_| bad(line))?,
                    alpha2: f[3].parse().map_err(|_| bad(line))?,
                    d: f[4].parse().map_err(|_| bad(line))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DiversityReport { rows })
    }
}

/// Per-sublayer diversity of the two fusion weights of a 2-path encoder.
pub fn alpha_diversity(model: &Model) -> Result<DiversityReport> {
    if model.config.n_paths() != 2 {
        return Err(Error::Unsupported(format!(
            "diversity is defined for 2-path models, this model has {} paths",
            model.config.n_paths()
        )));
    }
    let rows = model
        .sublayers()
        .map(|(layer, sub)| {
            let alpha = match &sub.weights {
                FusionWeights::Learnable { alpha, .. } => model.store.value(*alpha).data().to_vec(),
                FusionWeights::Fixed { alpha, .. } => alpha.clone(),
            };
            DiversityRow {
                layer,
                kind: sub.kind,
                alpha1: alpha[0],
                alpha2: alpha[1],
                d: diversity(alpha[0], alpha[1]),
            }
        })
        .collect();
    Ok(DiversityReport { rows })
}

pub const CHECKPOINT_FORMAT: &str = "multipath-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

/// Serializes the model as JSON: format tag, version, the model
/// configuration, and a name → `{shape, data}` map of every parameter.
pub fn checkpoint_to_string(model: &Model) -> Result<String> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        params: model
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

/// Rebuilds a model from its configuration and loads every parameter value.
/// Missing or extra parameter names and shape changes are errors.
pub fn checkpoint_from_str(text: &str) -> Result<Model> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("not a checkpoint: format `{}`", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            file.version
        )));
    }
    let mut model = build_model(&file.config)?;
    if file.params.len() != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, model has {}",
            file.params.len(),
            model.store.len()
        )));
    }
    for (name, value) in file.params {
        model.store.set(&name, value)?;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let text = checkpoint_to_string(model)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}
