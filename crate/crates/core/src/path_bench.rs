//! Wall-clock cost of multi-path encoders as the path count grows, with the
//! paths of each sublayer run sequentially or concurrently.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::multipath::MultiPathConfig;
use crate::nn::DEFAULT_NORM_EPS;
use crate::params::ParamGrads;
use crate::tape::{ExecMode, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Sequential,
    Concurrent,
    Both,
}

impl BenchMode {
    fn exec_modes(self) -> Vec<ExecMode> {
        match self {
            BenchMode::Sequential => vec![ExecMode::Sequential],
            BenchMode::Concurrent => vec![ExecMode::Concurrent],
            BenchMode::Both => vec![ExecMode::Sequential, ExecMode::Concurrent],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub d_model: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub depth: usize,
    pub path_counts: Vec<usize>,
    pub reps: usize,
    pub warmup_reps: usize,
    pub mode: BenchMode,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_heads() -> usize {
    4
}

fn default_vocab() -> usize {
    16
}

/// Refuse configurations whose activations would exceed this many bytes.
pub const MEMORY_LIMIT_BYTES: usize = 2 << 30;

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(Error::Config("bench reps must be at least 3".into()));
        }
        if self.path_counts.is_empty() {
            return Err(Error::Config("bench path_counts must not be empty".into()));
        }
        if self.path_counts[0] == 0 || self.path_counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("bench path_counts must be positive and ascending".into()));
        }
        if self.depth == 0 || self.seq_len == 0 || self.batch == 0 {
            return Err(Error::Config("bench depth, seq_len and batch must be positive".into()));
        }
        self.model_config(1).validate()
    }

    /// Encoder-only model with `n` paths, PathNorm and learnable fusion.
    pub fn model_config(&self, n_paths: usize) -> ModelConfig {
        let mut multipath = MultiPathConfig::full(n_paths);
        multipath.use_more_features = false;
        ModelConfig {
            enc_depth: self.depth,
            dec_depth: 0,
            d_model: self.d_model,
            heads: self.heads,
            vocab_size: self.vocab_size,
            multipath,
            share_embeddings: true,
            norm_eps: DEFAULT_NORM_EPS,
            seed: self.seed,
        }
    }

    /// Rough upper bound on bytes held by one forward+backward pass.
    pub fn estimated_bytes(&self, n_paths: usize) -> usize {
        let rows = self.batch * self.seq_len;
        let per_path = rows * self.d_model * 12 + self.batch * self.heads * self.seq_len * self.seq_len;
        let per_sublayer = n_paths * per_path + (n_paths + 4) * rows * self.d_model;
        // values plus gradients, f64
        2 * 8 * 2 * self.depth * per_sublayer
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n_paths: usize,
    pub mode: ExecMode,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub ideal_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub cores: usize,
}

pub const BENCH_CSV_HEADER: &str = "n_paths,mode,median_ms,p10_ms,p90_ms,ideal_ms,cores";

fn mode_name(m: ExecMode) -> &'static str {
    match m {
        ExecMode::Sequential => "sequential",
        ExecMode::Concurrent => "concurrent",
    }
}

impl BenchResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(BENCH_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.n_paths,
                mode_name(r.mode),
                r.median_ms,
                r.p10_ms,
                r.p90_ms,
                r.ideal_ms,
                self.cores
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(BENCH_CSV_HEADER) {
            return Err(Error::Format("missing bench CSV header".into()));
        }
        let mut cores = None;
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let bad = || Error::Format(format!("bad bench row `{line}`"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let mode = match f[1] {
                "sequential" => ExecMode::Sequential,
                "concurrent" => ExecMode::Concurrent,
                _ => return Err(bad()),
            };
            let c: usize = f[6].parse().map_err(|_| bad())?;
            if cores.is_some_and(|prev| prev != c) {
                return Err(Error::Format("inconsistent core counts in bench CSV".into()));
            }
            cores = Some(c);
            rows.push(BenchRow {
                n_paths: f[0].parse().map_err(|_| bad())?,
                mode,
                median_ms: num(f[2])?,
                p10_ms: num(f[3])?,
                p90_ms: num(f[4])?,
                ideal_ms: num(f[5])?,
            });
        }
        Ok(BenchResult {
            rows,
            cores: cores.unwrap_or_else(available_cores),
        })
    }

    pub fn row(&self, n_paths: usize, mode: ExecMode) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.n_paths == n_paths && r.mode == mode)
    }
}

pub fn available_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

struct Workload {
    src: Vec<Vec<usize>>,
    targets: Vec<usize>,
}

impl Workload {
    fn new(spec: &BenchSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let src: Vec<Vec<usize>> = (0..spec.batch)
            .map(|_| {
                (0..spec.seq_len)
                    .map(|_| rng.random_range(0..spec.vocab_size))
                    .collect()
            })
            .collect();
        let targets = (0..spec.batch * spec.seq_len)
            .map(|_| rng.random_range(0..spec.vocab_size))
            .collect();
        Workload { src, targets }
    }

    /// One forward+backward pass; returns the loss and parameter gradients.
    fn step(&self, model: &Model) -> Result<(f64, ParamGrads)> {
        let mut tape = Tape::new();
        let logits = model.forward_batch(&mut tape, &self.src, None)?;
        let loss = tape.cross_entropy(logits, &self.targets)?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        Ok((value, grads))
    }
}

fn time_mode(model: &mut Model, work: &Workload, mode: ExecMode, spec: &BenchSpec) -> Result<Vec<f64>> {
    model.exec_mode = mode;
    for _ in 0..spec.warmup_reps {
        work.step(model)?;
    }
    let mut samples = Vec::with_capacity(spec.reps);
    for _ in 0..spec.reps {
        let t = Instant::now();
        std::hint::black_box(work.step(model)?);
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    samples.sort_by(f64::total_cmp);
    Ok(samples)
}

fn guard(spec: &BenchSpec, n: usize) -> Result<()> {
    let bytes = spec.estimated_bytes(n);
    if bytes > MEMORY_LIMIT_BYTES {
        return Err(Error::TooLarge(format!(
            "bench config with {n} paths (d_model={}, seq_len={}, batch={}, depth={}) needs about {} MiB, limit is {} MiB",
            spec.d_model,
            spec.seq_len,
            spec.batch,
            spec.depth,
            bytes >> 20,
            MEMORY_LIMIT_BYTES >> 20
        )));
    }
    Ok(())
}

/// Times forward+backward of a `depth`-layer multi-path encoder for every
/// path count and mode. The ideal line is the single-path sequential median.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchResult> {
    spec.validate()?;
    for &n in &spec.path_counts {
        guard(spec, n)?;
    }
    let work = Workload::new(spec);
    let mut measured = Vec::new();
    let mut ideal = None;
    for &n in &spec.path_counts {
        let mut model = build_model(&spec.model_config(n))?;
        for mode in spec.mode.exec_modes() {
            let samples = time_mode(&mut model, &work, mode, spec)?;
            if n == 1 && mode == ExecMode::Sequential {
                ideal = Some(median(&samples));
            }
            measured.push((n, mode, samples));
        }
    }
    let ideal_ms = match ideal {
        Some(v) => v,
        None => {
            let mut model = build_model(&spec.model_config(1))?;
            median(&time_mode(&mut model, &work, ExecMode::Sequential, spec)?)
        }
    };
    let rows = measured
        .into_iter()
        .map(|(n_paths, mode, s)| BenchRow {
            n_paths,
            mode,
            median_ms: median(&s),
            p10_ms: percentile(&s, 10.0),
            p90_ms: percentile(&s, 90.0),
            ideal_ms,
        })
        .collect();
    Ok(BenchResult {
        rows,
        cores: available_cores(),
    })
}

/// Whether sequential and concurrent execution give bit-identical losses and
/// gradients for an `n`-path model of this spec.
pub fn modes_bit_identical(spec: &BenchSpec, n_paths: usize) -> Result<bool> {
    let work = Workload::new(spec);
    let mut model = build_model(&spec.model_config(n_paths))?;
    model.exec_mode = ExecMode::Sequential;
    let (ls, gs) = work.step(&model)?;
    model.exec_mode = ExecMode::Concurrent;
    let (lc, gc) = work.step(&model)?;
    let same_grads = gs.len() == gc.len()
        && gs
            .iter()
            .zip(&gc)
            .all(|((ia, a), (ib, b))| ia == ib && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    Ok(ls.to_bits() == lc.to_bits() && same_grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BenchSpec {
        BenchSpec {
            d_model: 8,
            seq_len: 4,
            batch: 2,
            depth: 1,
            path_counts: vec![1, 2],
            reps: 3,
            warmup_reps: 0,
            mode: BenchMode::Both,
            heads: 2,
            vocab_size: 8,
            seed: 0,
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = tiny();
        s.reps = 2;
        assert!(s.validate().is_err());
        let mut s = tiny();
        s.path_counts = vec![2, 1];
        assert!(s.validate().is_err());
        s.path_counts.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn oversized_spec_is_refused() {
        let mut s = tiny();
        s.d_model = 4096;
        s.seq_len = 4096;
        s.batch = 64;
        s.heads = 8;
        match run_bench(&s) {
            Err(Error::TooLarge(msg)) => assert!(msg.contains("d_model=4096")),
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn percentiles() {
        let s: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&s, 10.0), 1.0);
        assert_eq!(percentile(&s, 90.0), 9.0);
        assert_eq!(median(&s), 5.5);
        assert_eq!(median(&[1.0, 2.0, 7.0]), 2.0);
    }

    #[test]
    fn rows_per_path_and_mode() {
        let r = run_bench(&tiny()).unwrap();
        assert_eq!(r.rows.len(), 4);
        let ideal = r.row(1, ExecMode::Sequential).unwrap().median_ms;
        assert!(r.rows.iter().all(|row| row.ideal_ms == ideal));
        assert_eq!(BenchResult::from_csv(&r.to_csv()).unwrap(), r);
    }
}
