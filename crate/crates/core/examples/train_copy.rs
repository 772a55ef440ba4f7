//! Trains a small encoder-decoder on the copy task and prints one JSON line
//! per logging interval.
//!
//! cargo run --release -p multipath-core --example train_copy -- [paths] [steps] [peak_lr] [warmup] [plain|full] [clip]

use multipath::model::{build_model, ModelConfig};
use multipath::multipath::MultiPathConfig;
use multipath::train::{train, ScheduleConfig, TaskKind, TaskSpec, TrainOptions};

fn main() -> multipath::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let paths: usize = arg(0, "2").parse().expect("path count");
    let steps: u64 = arg(1, "2000").parse().expect("step count");
    let peak_lr: f64 = arg(2, "0.0005").parse().expect("peak learning rate");
    let warmup_steps: u64 = arg(3, "400").parse().expect("warmup steps");
    let plain = arg(4, "full") == "plain";
    let clip: f64 = arg(5, "0.25").parse().expect("clip norm");

    let multipath = if plain {
        MultiPathConfig::plain(paths)
    } else {
        MultiPathConfig::full(paths)
    };
    let cfg = ModelConfig {
        enc_depth: 2,
        dec_depth: 2,
        d_model: 32,
        heads: 4,
        vocab_size: 16,
        multipath,
        share_embeddings: true,
        norm_eps: 1e-5,
        seed: 1,
    };
    let task = TaskSpec {
        kind: TaskKind::Copy,
        vocab: 16,
        min_len: 5,
        max_len: 10,
        samples_per_epoch: 20_000,
        seed: 2,
    };
    let sched = ScheduleConfig {
        peak_lr,
        warmup_steps,
        d_model: None,
    };
    let mut opts = TrainOptions::new(steps, 32);
    opts.log_every = 100;
    opts.clip_norm = Some(clip);
    let mut model = build_model(&cfg)?;
    train(&mut model, &task, &sched, &opts, |r| {
        println!("{}", r.to_json_line());
        Ok(())
    })?;
    Ok(())
}
