//! `multipath` command-line tool.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure, 3 a check ran and failed.

mod config;

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use multipath::model::{alpha_diversity, load_checkpoint, save_checkpoint};
use multipath::path_bench::{run_bench, BenchMode};
use multipath::train::{grad_check_model, train, GradCheckOptions, JsonlWriter, ScheduleConfig};
use multipath::{build_model, param_count};

use config::RunConfig;

/// Environment variable naming the default root for run directories.
const OUT_DIR_ENV: &str = "MULTIPATH_OUT_DIR";

#[derive(Parser)]
#[command(name = "multipath", version, about = "Multi-path Transformer toolkit")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output_dir`, then
    /// `$MULTIPATH_OUT_DIR/<config name>`, then `runs/<config name>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the parameter count breakdown of the configured model.
    Params,
    /// Compare backward gradients with finite differences on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train on the configured synthetic task; writes metrics.jsonl and checkpoint.json.
    Train {
        /// Use a named learning-rate schedule instead of `[schedule]`.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Print the per-sublayer fusion-weight diversity of a 2-path checkpoint as CSV.
    Diversity { checkpoint: PathBuf },
    /// Time multi-path encoders and print the results as CSV.
    Bench {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 8000 warmup steps, peak 0.001.
    Base,
    /// 16000 warmup steps, peak 0.002.
    Deep,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sequential,
    Concurrent,
    Both,
}

enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
    Check(String),
}

impl From<anyhow::Error> for Failure {
    /// Library errors caused by bad input are validation failures;
    /// I/O and anything unrecognized are runtime failures.
    fn from(e: anyhow::Error) -> Self {
        let input_error = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<multipath::Error>(),
                Some(err) if !matches!(err, multipath::Error::Io(_))
            )
        });
        if input_error {
            Failure::Validation(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<multipath::Error> for Failure {
    fn from(e: multipath::Error) -> Self {
        Failure::from(anyhow::Error::from(e))
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Params => cmd_params(&load_config(&cli)?),
        Command::Gradcheck { tol } => cmd_gradcheck(&load_config(&cli)?, *tol),
        Command::Train { preset } => {
            let cfg = load_config(&cli)?;
            let dir = output_dir(&cli, &cfg);
            cmd_train(&cfg, *preset, &dir)
        }
        Command::Diversity { checkpoint } => cmd_diversity(checkpoint),
        Command::Bench { mode } => {
            let cfg = load_config(&cli)?;
            cmd_bench(&cfg, *mode, cli.out.as_deref())
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Validation(anyhow!("this command needs --config <FILE>")))?;
    let mut cfg = RunConfig::load(path).map_err(Failure::Validation)?;
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    Ok(cfg)
}

fn output_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    if let Some(dir) = &cfg.output_dir {
        return dir.clone();
    }
    let name = cli
        .config
        .as_ref()
        .and_then(|p| p.file_stem())
        .map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    let root = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(name)
}

fn cmd_params(cfg: &RunConfig) -> Outcome {
    let counts = param_count(&cfg.model)?;
    println!("{counts}");
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, tol: f64) -> Outcome {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Failure::Validation(anyhow!("--tol must be positive")));
    }
    let mut opts = GradCheckOptions::new(tol);
    opts.seed = cfg.model.seed;
    let report = grad_check_model(&cfg.model, &opts)?;
    println!("group,numel,max_rel_err,ok");
    for g in &report.groups {
        println!("{},{},{:e},{}", g.name, g.numel, g.max_rel_err, g.max_rel_err < tol);
    }
    if report.passed() {
        eprintln!(
            "gradient check passed: worst relative error {:e} < {tol:e}",
            report.worst()
        );
        Ok(())
    } else {
        let failed: Vec<&str> = report.failures().map(|g| g.name.as_str()).collect();
        Err(Failure::Check(format!(
            "{} of {} groups at or above tolerance {tol:e}: {}",
            failed.len(),
            report.groups.len(),
            failed.join(", ")
        )))
    }
}

fn cmd_train(cfg: &RunConfig, preset: Option<Preset>, dir: &Path) -> Outcome {
    let missing = |section: &str| Failure::Validation(anyhow!("training needs a [{section}] section"));
    let schedule = match preset {
        Some(Preset::Base) => ScheduleConfig::base(),
        Some(Preset::Deep) => ScheduleConfig::deep(),
        None => cfg.schedule.clone().ok_or_else(|| missing("schedule"))?,
    };
    let task = cfg.task.as_ref().ok_or_else(|| missing("task"))?;
    let opts = cfg.training.as_ref().ok_or_else(|| missing("training"))?;

    let mut model = build_model(&cfg.model)?;
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::Runtime)?;
    let metrics_path = dir.join("metrics.jsonl");
    let file = File::create(&metrics_path)
        .with_context(|| format!("creating {}", metrics_path.display()))
        .map_err(Failure::Runtime)?;
    let mut writer = JsonlWriter::new(file);
    let summary = train(&mut model, task, &schedule, opts, |r| {
        eprintln!(
            "step {:>6}  loss {:.5}  acc {:.4}  lr {:.3e}",
            r.step, r.loss, r.acc, r.lr
        );
        writer.write(r)
    })?;
    let ckpt = dir.join("checkpoint.json");
    save_checkpoint(&model, &ckpt)?;
    eprintln!("wrote {} and {}", metrics_path.display(), ckpt.display());

    if let Some(target) = opts.target_accuracy {
        let acc = summary.final_accuracy().unwrap_or(0.0);
        if acc < target {
            return Err(Failure::Check(format!(
                "accuracy {acc:.4} after {} steps is below the target {target}",
                summary.steps_taken
            )));
        }
    }
    Ok(())
}

fn cmd_diversity(checkpoint: &Path) -> Outcome {
    let model = load_checkpoint(checkpoint).map_err(|e| match e {
        multipath::Error::Io(_) => Failure::Validation(anyhow!(e).context(format!("reading {}", checkpoint.display()))),
        other => Failure::from(other),
    })?;
    print!("{}", alpha_diversity(&model)?.to_csv());
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, mode: Option<ModeArg>, out: Option<&Path>) -> Outcome {
    let mut spec = cfg
        .bench
        .clone()
        .ok_or_else(|| Failure::Validation(anyhow!("bench needs a [bench] section")))?;
    if let Some(m) = mode {
        spec.mode = match m {
            ModeArg::Sequential => BenchMode::Sequential,
            ModeArg::Concurrent => BenchMode::Concurrent,
            ModeArg::Both => BenchMode::Both,
        };
    }
    let csv = run_bench(&spec)?.to_csv();
    print!("{csv}");
    if let Some(dir) = out {
        let write = || -> anyhow::Result<()> {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("bench.csv"), &csv)?;
            Ok(())
        };
        write().map_err(Failure::Runtime)?;
    }
    Ok(())
}
