//! Desk-scale training: Adam, the inverse-square-root warmup schedule,
//! synthetic copy/reverse tasks, the training loop, and a whole-model
//! gradient check against finite differences.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::relative_error;
use crate::model::{build_model, Model, ModelConfig};
use crate::tape::{BackwardFault, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Only used by the classical `d^-0.5` variant; the peak-lr form ignores it.
    #[serde(default)]
    pub d_model: Option<usize>,
}

impl ScheduleConfig {
    /// 8k warmup steps to a 0.001 peak.
    pub fn base() -> Self {
        ScheduleConfig {
            peak_lr: 0.001,
            warmup_steps: 8000,
            d_model: None,
        }
    }

    /// 16k warmup steps to a 0.002 peak, for deep and multi-path models.
    pub fn deep() -> Self {
        ScheduleConfig {
            peak_lr: 0.002,
            warmup_steps: 16000,
            d_model: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps < 1 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if self.peak_lr.is_nan() || self.peak_lr <= 0.0 {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        Ok(())
    }
}

/// `peak · min(step / warmup, √(warmup / step))`: linear warmup, then
/// inverse-square-root decay. Steps are 1-based.
pub fn lr_at(step: u64, s: &ScheduleConfig) -> Result<f64> {
    if step < 1 {
        return Err(Error::Contract("learning-rate steps start at 1".into()));
    }
    let (t, w) = (step as f64, s.warmup_steps as f64);
    Ok(s.peak_lr * (t / w).min((w / t).sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.997,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &crate::params::ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        OptimizerState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }
}

/// One bias-corrected Adam update of every parameter from its stored gradient.
pub fn adam_step(store: &mut crate::params::ParamStore, st: &mut OptimizerState, lr: f64) -> Result<()> {
    if st.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} parameters, store has {}",
            st.m.len(),
            store.len()
        )));
    }
    st.step += 1;
    let AdamConfig { beta1, beta2, eps } = st.config;
    let c1 = 1.0 - beta1.powi(st.step as i32);
    let c2 = 1.0 - beta2.powi(st.step as i32);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let grad = store.grad(id).to_vec();
        if grad.len() != st.m[i].len() {
            return Err(Error::shape("adam_step", &[grad.len()], &[st.m[i].len()]));
        }
        let (m, v) = (&mut st.m[i], &mut st.v[i]);
        let value = store.value_mut(id).data_mut();
        for j in 0..grad.len() {
            let g = grad[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            value[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales stored gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut crate::params::ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|(_, p)| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        let ids: Vec<_> = store.ids().collect();
        let mut grads = crate::params::ParamGrads::new();
        for id in ids {
            grads.insert(id, store.grad(id).iter().map(|g| g * (s - 1.0)).collect());
        }
        store.accumulate(&grads);
    }
    norm
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First id available to task symbols.
pub const FIRST_SYMBOL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Includes the three reserved ids (pad, bos, eos).
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Size of the training pool drawn once from `seed`; batches walk a
    /// fresh shuffle of the pool every epoch.
    pub samples_per_epoch: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 {
            return Err(Error::Config("task vocab must be at least 4".into()));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::Config("task lengths need 2 <= min_len <= max_len".into()));
        }
        if self.samples_per_epoch == 0 {
            return Err(Error::Config("samples_per_epoch must be positive".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let len = rng.random_range(self.min_len..=self.max_len);
        (0..len).map(|_| rng.random_range(FIRST_SYMBOL..self.vocab)).collect()
    }

    pub fn answer(&self, seq: &[usize]) -> Vec<usize> {
        match self.kind {
            TaskKind::Copy => seq.to_vec(),
            TaskKind::Reverse => seq.iter().rev().copied().collect(),
        }
    }
}

/// A batch ready for the model. `targets` is flattened in row order of the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt_in: Option<Vec<Vec<usize>>>,
    pub targets: Vec<usize>,
}

impl Batch {
    /// Encoder-only models predict the answer at each source position;
    /// sequence-to-sequence models decode `bos + answer` into `answer + eos`.
    pub fn from_sequences(task: &TaskSpec, seqs: &[Vec<usize>], seq2seq: bool) -> Self {
        let mut targets = Vec::new();
        let mut tgt_in = Vec::new();
        for s in seqs {
            let ans = task.answer(s);
            if seq2seq {
                let mut input = vec![BOS];
                input.extend_from_slice(&ans);
                tgt_in.push(input);
                targets.extend_from_slice(&ans);
                targets.push(EOS);
            } else {
                targets.extend_from_slice(&ans);
            }
        }
        Batch {
            src: seqs.to_vec(),
            tgt_in: seq2seq.then_some(tgt_in),
            targets,
        }
    }
}

/// Mean cross-entropy of the model on a batch, recorded on `tape`.
pub fn batch_loss(model: &Model, tape: &mut Tape, batch: &Batch) -> Result<crate::tape::Var> {
    let logits = model.forward_batch(tape, &batch.src, batch.tgt_in.as_deref())?;
    tape.cross_entropy(logits, &batch.targets)
}

/// Teacher-forced token accuracy and mean loss.
pub fn evaluate(model: &Model, batch: &Batch) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let logits = model.forward_batch(&mut tape, &batch.src, batch.tgt_in.as_deref())?;
    let loss = tape.cross_entropy(logits, &batch.targets)?;
    let loss = tape.value(loss).item()?;
    let lv = tape.value(logits);
    let (_, vocab) = lv.dims2()?;
    let correct = batch
        .targets
        .iter()
        .enumerate()
        .filter(|(row, &t)| {
            let r = &lv.data()[row * vocab..(row + 1) * vocab];
            let best = (0..vocab).fold(0, |b, j| if r[j] > r[b] { j } else { b });
            best == t
        })
        .count();
    Ok((correct as f64 / batch.targets.len() as f64, loss))
}

/// Metrics emitted at each logging interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub step: u64,
    /// Mean training loss over the steps since the previous record.
    pub loss: f64,
    /// Teacher-forced token accuracy on the held-out evaluation set.
    pub acc: f64,
    pub lr: f64,
    /// Milliseconds since training started; zero when wall-clock recording is off.
    pub wall_ms: u64,
}

impl RunRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn parse_jsonl(text: &str) -> Result<Vec<RunRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

/// Writes each record as one complete line and flushes, so an interrupted
/// run leaves only whole records behind.
pub struct JsonlWriter<W: Write> {
    out: W,
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(out: W) -> Self {
        JsonlWriter { out }
    }

    pub fn write(&mut self, record: &RunRecord) -> Result<()> {
        let mut line = record.to_json_line();
        line.push('\n');
        self.out.write_all(line.as_bytes())?;
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub steps: u64,
    /// Sequences per step.
    pub batch: usize,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Stop at the first record whose accuracy reaches this value.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    #[serde(default = "default_wall_clock")]
    pub wall_clock: bool,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_log_every() -> u64 {
    100
}

fn default_eval_samples() -> usize {
    256
}

fn default_wall_clock() -> bool {
    true
}

impl TrainOptions {
    pub fn new(steps: u64, batch: usize) -> Self {
        TrainOptions {
            steps,
            batch,
            log_every: default_log_every(),
            eval_samples: default_eval_samples(),
            clip_norm: None,
            target_accuracy: None,
            wall_clock: true,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub records: Vec<RunRecord>,
    /// Training loss of every step taken.
    pub step_losses: Vec<f64>,
    pub steps_taken: u64,
}

impl TrainSummary {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.acc)
    }
}

/// Trains `model` on `task` with teacher-forced cross-entropy.
///
/// Each step draws `opts.batch` sequences from the task pool, back-propagates
/// the mean token loss, optionally clips, and applies Adam at `lr_at(step)`.
/// Every `log_every` steps (and at the last step) the model is evaluated on a
/// held-out set and a record is passed to `on_record`. Everything except
/// `wall_ms` is a deterministic function of the model and task seeds.
pub fn train<F>(
    model: &mut Model,
    task: &TaskSpec,
    sched: &ScheduleConfig,
    opts: &TrainOptions,
    mut on_record: F,
) -> Result<TrainSummary>
where
    F: FnMut(&RunRecord) -> Result<()>,
{
    task.validate()?;
    sched.validate()?;
    opts.validate()?;
    if task.vocab != model.config.vocab_size {
        return Err(Error::Config(format!(
            "task vocab {} differs from model vocab {}",
            task.vocab, model.config.vocab_size
        )));
    }
    let mut summary = TrainSummary::default();
    if opts.steps == 0 {
        return Ok(summary);
    }
    let seq2seq = model.config.is_seq2seq();
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let pool: Vec<Vec<usize>> = (0..task.samples_per_epoch).map(|_| task.sample(&mut rng)).collect();
    let eval_seqs: Vec<Vec<usize>> = (0..opts.eval_samples).map(|_| task.sample(&mut rng)).collect();
    let eval_batch = Batch::from_sequences(task, &eval_seqs, seq2seq);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut opt = OptimizerState::new(&model.store, opts.adam);
    let start = Instant::now();
    let mut interval_loss = 0.0;
    let mut interval_steps = 0;
    for step in 1..=opts.steps {
        let mut seqs = Vec::with_capacity(opts.batch);
        for _ in 0..opts.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            seqs.push(pool[order[cursor]].clone());
            cursor += 1;
        }
        let batch = Batch::from_sequences(task, &seqs, seq2seq);

        let mut tape = Tape::new();
        let loss = batch_loss(model, &mut tape, &batch)?;
        let loss_value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        drop(tape);
        model.store.zero_grads();
        model.store.accumulate(&grads);
        if let Some(max) = opts.clip_norm {
            clip_grad_norm(&mut model.store, max);
        }
        let lr = lr_at(step, sched)?;
        adam_step(&mut model.store, &mut opt, lr)?;

        summary.step_losses.push(loss_value);
        summary.steps_taken = step;
        interval_loss += loss_value;
        interval_steps += 1;

        if step % opts.log_every == 0 || step == opts.steps {
            let (acc, _) = evaluate(model, &eval_batch)?;
            let record = RunRecord {
                step,
                loss: interval_loss / interval_steps as f64,
                acc,
                lr,
                wall_ms: if opts.wall_clock {
                    start.elapsed().as_millis() as u64
                } else {
                    0
                },
            };
            interval_loss = 0.0;
            interval_steps = 0;
            on_record(&record)?;
            summary.records.push(record);
            if opts.target_accuracy.is_some_and(|t| acc >= t) {
                break;
            }
        }
    }
    Ok(summary)
}

/// Gradient checks are refused above this many parameters.
pub const MAX_GRADCHECK_PARAMS: usize = 5000;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub tol: f64,
    pub h: f64,
    /// Seed of the random batch.
    pub seed: u64,
    pub batch: usize,
    #[doc(hidden)]
    pub fault: Option<BackwardFault>,
}

impl GradCheckOptions {
    pub fn new(tol: f64) -> Self {
        GradCheckOptions {
            tol,
            h: 1e-5,
            seed: 0,
            batch: 2,
            fault: None,
        }
    }
}

/// Worst relative error of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupError> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_err.is_nan() || g.max_rel_err >= self.tol)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares tape gradients with central finite differences for every
/// parameter tensor of a freshly built model on a random batch.
pub fn grad_check_model(cfg: &ModelConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut model = build_model(cfg)?;
    let n = model.store.num_scalars();
    if n > MAX_GRADCHECK_PARAMS {
        return Err(Error::TooLarge(format!(
            "gradient check needs a tiny model (at most {MAX_GRADCHECK_PARAMS} parameters), this one has {n}; \
             reduce d_model, depth, paths or vocab_size"
        )));
    }
    let task = TaskSpec {
        kind: TaskKind::Copy,
        vocab: cfg.vocab_size.max(4),
        min_len: 2,
        max_len: 4,
        samples_per_epoch: 1,
        seed: opts.seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let seqs: Vec<Vec<usize>> = (0..opts.batch)
        .map(|_| {
            let len = rng.random_range(task.min_len..=task.max_len);
            (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect()
        })
        .collect();
    let batch = Batch::from_sequences(&task, &seqs, cfg.is_seq2seq());
    let batch = Batch {
        targets: batch.targets.iter().map(|t| t % cfg.vocab_size).collect(),
        tgt_in: batch.tgt_in.map(|t| {
            t.into_iter()
                .map(|s| s.into_iter().map(|v| v % cfg.vocab_size).collect())
                .collect()
        }),
        ..batch
    };

    let mut tape = Tape::with_fault(opts.fault);
    let loss = batch_loss(&model, &mut tape, &batch)?;
    let analytic = tape.backward(loss)?;

    let loss_at = |m: &Model| -> f64 {
        let mut t = Tape::new();
        let l = batch_loss(m, &mut t, &batch).expect("forward succeeded once");
        t.value(l).data()[0]
    };
    let ids: Vec<_> = model.store.ids().collect();
    let mut groups = Vec::with_capacity(ids.len());
    for id in ids {
        let numel = model.store.value(id).numel();
        let mut numeric = vec![0.0; numel];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = model.store.value(id).data()[j];
            model.store.value_mut(id).data_mut()[j] = orig + opts.h;
            let up = loss_at(&model);
            model.store.value_mut(id).data_mut()[j] = orig - opts.h;
            let down = loss_at(&model);
            model.store.value_mut(id).data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * opts.h);
        }
        let zeros = vec![0.0; numel];
        let a = analytic.get(&id).unwrap_or(&zeros);
        groups.push(GroupError {
            name: model.store.get(id).name.clone(),
            numel,
            max_rel_err: relative_error(a, &numeric),
        });
    }
    Ok(GradCheckReport { tol: opts.tol, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_apex_and_warmup() {
        let s = ScheduleConfig::base();
        assert_eq!(lr_at(8000, &s).unwrap(), 0.001);
        assert_eq!(lr_at(4000, &s).unwrap(), 0.0005);
        assert_eq!(lr_at(32000, &s).unwrap(), 0.0005);
        assert!(lr_at(0, &s).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let mut st = OptimizerState::new(&store, AdamConfig::default());
        adam_step(&mut store, &mut st, 0.1).unwrap();
        assert_eq!(store.value(store.id("w").unwrap()).data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(0.0)).unwrap();
        store.accumulate(&[(id, vec![1.0])].into_iter().collect());
        let mut st = OptimizerState::new(&store, AdamConfig::default());
        adam_step(&mut store, &mut st, 0.01).unwrap();
        let moved = -store.value(id).data()[0];
        assert!((moved - 0.01).abs() < 1e-9, "moved {moved}");
    }

    #[test]
    fn optimizer_rejects_foreign_store() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(0.0)).unwrap();
        let mut st = OptimizerState::new(&ParamStore::new(), AdamConfig::default());
        assert!(adam_step(&mut store, &mut st, 0.1).is_err());
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.0, 0.0])).unwrap();
        store.accumulate(&[(id, vec![3.0, 4.0])].into_iter().collect());
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        let g = store.grad(id);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn task_validation() {
        let mut t = TaskSpec {
            kind: TaskKind::Copy,
            vocab: 3,
            min_len: 2,
            max_len: 4,
            samples_per_epoch: 10,
            seed: 0,
        };
        assert!(t.validate().is_err());
        t.vocab = 8;
        assert!(t.validate().is_ok());
        t.min_len = 1;
        assert!(t.validate().is_err());
    }

    #[test]
    fn seq2seq_batch_layout() {
        let t = TaskSpec {
            kind: TaskKind::Reverse,
            vocab: 8,
            min_len: 2,
            max_len: 4,
            samples_per_epoch: 10,
            seed: 0,
        };
        let b = Batch::from_sequences(&t, &[vec![3, 4, 5]], true);
        assert_eq!(b.tgt_in, Some(vec![vec![BOS, 5, 4, 3]]));
        assert_eq!(b.targets, vec![5, 4, 3, EOS]);
        let b = Batch::from_sequences(&t, &[vec![3, 4, 5]], false);
        assert_eq!(b.targets, vec![5, 4, 3]);
    }

    #[test]
    fn record_json_schema() {
        let r = RunRecord {
            step: 3,
            loss: 0.5,
            acc: 0.25,
            lr: 0.001,
            wall_ms: 12,
        };
        assert_eq!(
            r.to_json_line(),
            r#"{"step":3,"loss":0.5,"acc":0.25,"lr":0.001,"wall_ms":12}"#
        );
        assert_eq!(RunRecord::parse_jsonl(&r.to_json_line()).unwrap(), vec![r]);
    }
}
