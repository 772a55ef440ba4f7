use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use multipath::model::{save_checkpoint, DiversityReport};
use multipath::path_bench::BenchResult;
use multipath::train::RunRecord;
use multipath::{build_model, ModelConfig, Tensor};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn multipath(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multipath"))
        .args(args)
        .env_remove("MULTIPATH_OUT_DIR")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn breakdown(text: &str) -> Vec<(String, usize)> {
    text.lines()
        .map(|l| {
            let mut it = l.split_whitespace();
            (it.next().unwrap().to_string(), it.next().unwrap().parse().unwrap())
        })
        .collect()
}

#[test]
fn params_report_parity() {
    let mut path_weights = Vec::new();
    for name in ["parity-24x1", "parity-12x2", "parity-6x4"] {
        let cfg = configs().join(format!("{name}.toml"));
        let o = multipath(&["params", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let rows = breakdown(&stdout(&o));
        let (groups, total) = rows.split_at(rows.len() - 1);
        assert_eq!(total[0].0, "total");
        assert_eq!(groups.iter().map(|g| g.1).sum::<usize>(), total[0].1);
        path_weights.push(groups.iter().find(|g| g.0 == "path_weights").unwrap().1);
    }
    assert!(path_weights.iter().all(|&p| p == path_weights[0]));
}

const TINY: &str = r#"
schema_version = 1
[model]
enc_depth = 1
d_model = 8
heads = 2
vocab_size = 8
seed = 5
[model.multipath]
n_paths = 2
"#;

#[test]
fn invalid_configs_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let zero = write(dir.path(), "zero.toml", &TINY.replace("enc_depth = 1", "enc_depth = 0"));
    let o = multipath(&["params", "--config", &zero]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("enc_depth"));

    let typo = write(
        dir.path(),
        "typo.toml",
        &TINY.replace("n_paths = 2", "n_paths = 2\nuse_pathnrom = true"),
    );
    let o = multipath(&["params", "--config", &typo]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("use_pathnrom"), "{}", stderr(&o));

    assert_eq!(code(&multipath(&["params"])), 1);
    assert_eq!(code(&multipath(&["params", "--config", "/nonexistent.toml"])), 1);
}

#[test]
fn gradcheck_outcomes() {
    let tiny = configs().join("tiny-3path.toml");
    let tiny = tiny.to_str().unwrap();
    let o = multipath(&["gradcheck", "--config", tiny]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("enc.0.attn.alpha,")));
    assert!(out.lines().skip(1).all(|l| l.ends_with(",true")));

    let o = multipath(&["gradcheck", "--config", tiny, "--tol", "1e-12"]);
    assert_eq!(code(&o), 3);

    let big = configs().join("copy-2path.toml");
    let o = multipath(&["gradcheck", "--config", big.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("reduce"), "{}", stderr(&o));
}

fn train_config(steps: u64, target: Option<f64>) -> String {
    let mut text = format!(
        "{TINY}
[schedule]
peak_lr = 0.01
warmup_steps = 5
[task]
kind = \"reverse\"
vocab = 8
min_len = 2
max_len = 4
samples_per_epoch = 64
seed = 1
[training]
steps = {steps}
batch = 4
log_every = 4
eval_samples = 8
wall_clock = false
"
    );
    if let Some(t) = target {
        text.push_str(&format!("target_accuracy = {t}\n"));
    }
    text
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "reverse.toml", &train_config(10, None));
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = multipath(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (
            std::fs::read_to_string(out.join("metrics.jsonl")).unwrap(),
            std::fs::read(out.join("checkpoint.json")).unwrap(),
        )
    };
    let (ma, ca) = run("a");
    let (mb, cb) = run("b");
    assert_eq!(ma, mb);
    assert_eq!(ca, cb);
    assert!(ma.ends_with('\n'));
    let records = RunRecord::parse_jsonl(&ma).unwrap();
    assert_eq!(records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![4, 8, 10]);

    let (mc, _) = {
        let out = dir.path().join("c");
        let o = multipath(&[
            "train",
            "--config",
            &cfg,
            "--seed",
            "99",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0);
        (std::fs::read_to_string(out.join("metrics.jsonl")).unwrap(), ())
    };
    assert_ne!(ma, mc);
}

#[test]
fn training_honours_output_root_and_presets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "reverse.toml", &train_config(2, None));
    let root = dir.path().join("root");
    let o = Command::new(env!("CARGO_BIN_EXE_multipath"))
        .args(["train", "--preset", "deep", "--config", &cfg])
        .env("MULTIPATH_OUT_DIR", &root)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = std::fs::read_to_string(root.join("reverse/metrics.jsonl")).unwrap();
    let last = RunRecord::parse_jsonl(&metrics).unwrap().pop().unwrap();
    assert_eq!(last.lr, 0.002 * (2.0 / 16000.0));
    assert!(root.join("reverse/checkpoint.json").exists());
}

#[test]
fn missed_accuracy_target_is_a_check_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "reverse.toml", &train_config(1, Some(1.1)));
    let out = dir.path().join("run");
    let o = multipath(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let no_task = write(dir.path(), "no_task.toml", TINY);
    assert_eq!(
        code(&multipath(&[
            "train",
            "--config",
            &no_task,
            "--out",
            out.to_str().unwrap()
        ])),
        1
    );
}

#[test]
fn diversity_csv() {
    let dir = tempfile::tempdir().unwrap();
    let fresh = build_model(&ModelConfig::encoder_only(2, 2, 8, 2, 10)).unwrap();
    let fresh_path = dir.path().join("fresh.json");
    save_checkpoint(&fresh, &fresh_path).unwrap();
    let o = multipath(&["diversity", fresh_path.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert_eq!(out.lines().next(), Some("layer,kind,alpha1,alpha2,d"));
    assert!(out.lines().skip(1).all(|l| l.ends_with(",0")), "{out}");

    let mut fixture = fresh.clone();
    for (name, a) in [
        ("enc.0.attn.alpha", [0.3, 0.1]),
        ("enc.0.ffn.alpha", [0.5, 0.5]),
        ("enc.1.attn.alpha", [0.75, 0.25]),
        ("enc.1.ffn.alpha", [-1.0, 3.0]),
    ] {
        fixture.store.set(name, Tensor::vector(a.to_vec())).unwrap();
    }
    let fixture_path = dir.path().join("fixture.json");
    save_checkpoint(&fixture, &fixture_path).unwrap();
    let o = multipath(&["diversity", fixture_path.to_str().unwrap()]);
    let report = DiversityReport::from_csv(&stdout(&o)).unwrap();
    let expected = [(0, "attn", 0.5), (0, "ffn", 0.0), (1, "attn", 0.5), (1, "ffn", 2.0)];
    assert_eq!(report.rows.len(), expected.len());
    for (row, (layer, kind, d)) in report.rows.iter().zip(expected) {
        assert_eq!((row.layer, row.kind.tag()), (layer, kind));
        assert!((row.d - d).abs() < 1e-12, "{row:?}");
    }

    let three = build_model(&ModelConfig::encoder_only(1, 3, 8, 2, 10)).unwrap();
    let three_path = dir.path().join("three.json");
    save_checkpoint(&three, &three_path).unwrap();
    let o = multipath(&["diversity", three_path.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("2-path"), "{}", stderr(&o));

    let garbage = write(dir.path(), "garbage.json", "{\"format\":\"nope\"}");
    assert_eq!(code(&multipath(&["diversity", &garbage])), 1);
}

#[test]
fn bench_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bench.toml",
        &format!(
            "{TINY}
[bench]
d_model = 8
seq_len = 4
batch = 2
depth = 1
path_counts = [1, 2, 3]
reps = 3
warmup_reps = 0
mode = \"sequential\"
heads = 2
"
        ),
    );
    let o = multipath(&["bench", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = BenchResult::from_csv(&stdout(&o)).unwrap();
    assert_eq!(r.rows.len(), 3);

    let out = dir.path().join("out");
    let o = multipath(&[
        "bench",
        "--config",
        &cfg,
        "--mode",
        "both",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let r = BenchResult::from_csv(&text).unwrap();
    assert_eq!(r.rows.len(), 6);
    assert!(r.rows.iter().all(|row| row.ideal_ms == r.rows[0].ideal_ms));
    assert_eq!(r.to_csv(), text);
    assert_eq!(std::fs::read_to_string(out.join("bench.csv")).unwrap(), text);

    let no_bench = write(dir.path(), "none.toml", TINY);
    assert_eq!(code(&multipath(&["bench", "--config", &no_bench])), 1);
}
