mod common;

use multipath::multipath::FusionWeights;
use multipath::tape::BackwardFault;
use multipath::train::{
    adam_step, grad_check_model, lr_at, train, AdamConfig, GradCheckOptions, OptimizerState, RunRecord, ScheduleConfig,
    TaskKind, TaskSpec, TrainOptions,
};
use multipath::{build_model, Error, ModelConfig, MultiPathConfig, ParamStore, Tensor};
use rand::Rng;
use std::collections::BTreeMap;

#[test]
fn base_schedule_values() {
    let s = ScheduleConfig::base();
    assert_eq!(lr_at(8000, &s).unwrap(), 0.001);
    assert_eq!(lr_at(4000, &s).unwrap(), 0.0005);
    assert_eq!(lr_at(32000, &s).unwrap(), 0.0005);
    assert!(matches!(lr_at(0, &s), Err(Error::Contract(_))));
    let d = ScheduleConfig::deep();
    assert_eq!(lr_at(16000, &d).unwrap(), 0.002);
}

#[test]
fn schedule_is_continuous_at_apex_and_decays_after() {
    for s in [ScheduleConfig::base(), ScheduleConfig::deep()] {
        let w = s.warmup_steps;
        let peak = lr_at(w, &s).unwrap();
        assert!((lr_at(w - 1, &s).unwrap() - peak).abs() < peak * 2.0 / w as f64);
        assert!((lr_at(w + 1, &s).unwrap() - peak).abs() < peak * 2.0 / w as f64);
        let mut prev = peak;
        for step in (w + 1..w + 50_000).step_by(97) {
            let lr = lr_at(step, &s).unwrap();
            assert!(lr < prev);
            prev = lr;
        }
    }
}

fn scalar_store(w: f64) -> ParamStore {
    let mut store = ParamStore::new();
    store.add("w", Tensor::scalar(w)).unwrap();
    store
}

fn set_grad(store: &mut ParamStore, g: Vec<f64>) {
    let id = store.id("w").unwrap();
    store.zero_grads();
    store.accumulate(&BTreeMap::from([(id, g)]));
}

#[test]
fn adam_descends_a_parabola() {
    let mut store = scalar_store(1.0);
    let mut st = OptimizerState::new(&store, AdamConfig::default());
    let id = store.id("w").unwrap();
    let mut prev = 1.0;
    for _ in 0..10 {
        let w = store.value(id).data()[0];
        set_grad(&mut store, vec![2.0 * w]);
        adam_step(&mut store, &mut st, 0.01).unwrap();
        let w = store.value(id).data()[0];
        assert!(w * w < prev);
        prev = w * w;
    }
    assert_eq!(st.step, 10);
}

#[test]
fn update_opposes_first_moment() {
    let mut r = common::rng(5);
    let mut store = ParamStore::new();
    store
        .add(
            "w",
            Tensor::vector((0..16).map(|_| r.random_range(-1.0..1.0)).collect()),
        )
        .unwrap();
    let id = store.id("w").unwrap();
    let mut st = OptimizerState::new(&store, AdamConfig::default());
    for _ in 0..20 {
        let before = store.value(id).data().to_vec();
        set_grad(&mut store, (0..16).map(|_| r.random_range(-2.0..2.0)).collect());
        adam_step(&mut store, &mut st, 0.01).unwrap();
        for (j, (b, a)) in before.iter().zip(store.value(id).data()).enumerate() {
            let m = st.first_moment(id.index())[j];
            if m != 0.0 {
                assert_eq!((a - b).signum(), -m.signum());
            }
        }
    }
}

fn tiny_task(vocab: usize) -> TaskSpec {
    TaskSpec {
        kind: TaskKind::Copy,
        vocab,
        min_len: 3,
        max_len: 5,
        samples_per_epoch: 200,
        seed: 9,
    }
}

fn tiny_model(cfg: MultiPathConfig, dec_depth: usize) -> ModelConfig {
    ModelConfig {
        dec_depth,
        multipath: cfg,
        seed: 4,
        ..ModelConfig::encoder_only(1, 2, 8, 2, 8)
    }
}

fn quiet(steps: u64) -> TrainOptions {
    TrainOptions {
        log_every: 5,
        eval_samples: 16,
        wall_clock: false,
        ..TrainOptions::new(steps, 4)
    }
}

#[test]
fn zero_steps_changes_nothing() {
    let mut model = build_model(&tiny_model(MultiPathConfig::full(2), 0)).unwrap();
    let before = model.store.clone();
    let mut seen = 0;
    let summary = train(&mut model, &tiny_task(8), &ScheduleConfig::base(), &quiet(0), |_| {
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert!(summary.records.is_empty());
    assert_eq!(seen, 0);
    for ((_, a), (_, b)) in before.iter().zip(model.store.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn vocab_mismatch_is_rejected() {
    let mut model = build_model(&tiny_model(MultiPathConfig::full(2), 0)).unwrap();
    let err = train(
        &mut model,
        &tiny_task(9),
        &ScheduleConfig::base(),
        &quiet(1),
        |_| Ok(()),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn identical_seeds_give_identical_runs() {
    let run = || {
        let mut model = build_model(&tiny_model(MultiPathConfig::full(3), 1)).unwrap();
        let mut lines = String::new();
        let s = train(
            &mut model,
            &tiny_task(8),
            &ScheduleConfig {
                peak_lr: 0.01,
                warmup_steps: 5,
                d_model: None,
            },
            &quiet(12),
            |r| {
                lines.push_str(&r.to_json_line());
                lines.push('\n');
                Ok(())
            },
        )
        .unwrap();
        (s.step_losses, lines)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let records = RunRecord::parse_jsonl(&la).unwrap();
    assert_eq!(records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![5, 10, 12]);
    assert!(records.iter().all(|r| r.wall_ms == 0));
}

fn alphas(model: &multipath::Model) -> Vec<Vec<f64>> {
    model
        .sublayers()
        .map(|(_, s)| match &s.weights {
            FusionWeights::Learnable { alpha, .. } => model.store.value(*alpha).data().to_vec(),
            FusionWeights::Fixed { alpha, .. } => alpha.clone(),
        })
        .collect()
}

#[test]
fn learnable_weights_move_and_fixed_ones_do_not() {
    let sched = ScheduleConfig {
        peak_lr: 0.01,
        warmup_steps: 1,
        d_model: None,
    };
    let mut model = build_model(&tiny_model(MultiPathConfig::full(2), 0)).unwrap();
    let before = alphas(&model);
    train(&mut model, &tiny_task(8), &sched, &quiet(1), |_| Ok(())).unwrap();
    let after = alphas(&model);
    for (b, a) in before.iter().zip(&after) {
        assert!(b.iter().zip(a).all(|(x, y)| x != y), "{b:?} -> {a:?}");
    }

    let mut cfg = MultiPathConfig::full(2);
    cfg.use_learnable_weights = false;
    let mut model = build_model(&tiny_model(cfg, 0)).unwrap();
    let before = alphas(&model);
    train(&mut model, &tiny_task(8), &sched, &quiet(3), |_| Ok(())).unwrap();
    assert_eq!(before, alphas(&model));
    assert!(model
        .store
        .iter()
        .all(|(_, p)| !p.name.ends_with(".alpha") && !p.name.ends_with(".beta")));
}

fn gradcheck_config(n: usize, more: bool, dec_depth: usize) -> ModelConfig {
    ModelConfig {
        enc_depth: 1,
        dec_depth,
        d_model: 4,
        heads: 2,
        vocab_size: 6,
        multipath: MultiPathConfig {
            use_more_features: more,
            ..MultiPathConfig::full(n)
        },
        share_embeddings: true,
        norm_eps: 1e-5,
        seed: 3,
    }
}

#[test]
fn single_path_model_passes_gradient_check() {
    let report = grad_check_model(&gradcheck_config(1, false, 0), &GradCheckOptions::new(1e-4)).unwrap();
    assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
}

#[test]
fn three_path_model_with_all_mechanisms_passes_gradient_check() {
    let report = grad_check_model(&gradcheck_config(3, true, 1), &GradCheckOptions::new(1e-4)).unwrap();
    assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
    for group in ["enc.0.attn.alpha", "enc.0.attn.beta", "enc.0.ffn.pathnorm5.gain"] {
        assert!(report.groups.iter().any(|g| g.name == group), "{group} missing");
    }
}

#[test]
fn corrupted_rule_is_caught_and_named() {
    let mut opts = GradCheckOptions::new(1e-4);
    opts.fault = Some(BackwardFault {
        op: "scale_by",
        factor: 1.5,
    });
    let report = grad_check_model(&gradcheck_config(2, false, 0), &opts).unwrap();
    assert!(!report.passed());
    let failed: Vec<&str> = report.failures().map(|g| g.name.as_str()).collect();
    assert!(failed.contains(&"enc.0.attn.alpha"), "{failed:?}");
    assert!(failed.contains(&"enc.0.ffn.beta"), "{failed:?}");
}

#[test]
fn unattainable_tolerance_fails() {
    let report = grad_check_model(&gradcheck_config(1, false, 0), &GradCheckOptions::new(1e-12)).unwrap();
    assert!(!report.passed());
}

#[test]
fn oversized_gradient_check_is_refused() {
    let cfg = ModelConfig::encoder_only(2, 2, 32, 4, 16);
    assert!(matches!(
        grad_check_model(&cfg, &GradCheckOptions::new(1e-4)),
        Err(Error::TooLarge(_))
    ));
}

#[test]
fn smoothed_copy_loss_does_not_increase() {
    let cfg = ModelConfig {
        dec_depth: 1,
        seed: 1,
        ..ModelConfig::encoder_only(1, 2, 16, 4, 10)
    };
    let task = TaskSpec {
        kind: TaskKind::Copy,
        vocab: 10,
        min_len: 3,
        max_len: 6,
        samples_per_epoch: 5000,
        seed: 2,
    };
    let sched = ScheduleConfig {
        peak_lr: 3e-3,
        warmup_steps: 100,
        d_model: None,
    };
    let mut model = build_model(&cfg).unwrap();
    let opts = TrainOptions {
        log_every: 200,
        eval_samples: 32,
        wall_clock: false,
        ..TrainOptions::new(1000, 16)
    };
    let summary = train(&mut model, &task, &sched, &opts, |_| Ok(())).unwrap();
    let windows: Vec<f64> = summary
        .step_losses
        .chunks(200)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    for w in windows.windows(2) {
        assert!(w[1] <= w[0], "{windows:?}");
    }
}
