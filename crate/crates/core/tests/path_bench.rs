use multipath::path_bench::{modes_bit_identical, run_bench, BenchMode, BenchResult, BenchSpec};
use multipath::ExecMode;

fn spec(path_counts: Vec<usize>, mode: BenchMode) -> BenchSpec {
    BenchSpec {
        d_model: 16,
        seq_len: 8,
        batch: 4,
        depth: 1,
        path_counts,
        reps: 5,
        warmup_reps: 1,
        mode,
        heads: 4,
        vocab_size: 12,
        seed: 3,
    }
}

#[test]
fn one_row_per_path_count_and_mode() {
    for (mode, per) in [
        (BenchMode::Sequential, 1),
        (BenchMode::Concurrent, 1),
        (BenchMode::Both, 2),
    ] {
        let r = run_bench(&spec(vec![1, 3], mode)).unwrap();
        assert_eq!(r.rows.len(), 2 * per);
        let ideal = r.rows[0].ideal_ms;
        assert!(r
            .rows
            .iter()
            .all(|row| row.ideal_ms == ideal && row.p10_ms <= row.median_ms && row.median_ms <= row.p90_ms));
        assert_eq!(BenchResult::from_csv(&r.to_csv()).unwrap(), r);
    }
}

#[test]
fn ideal_line_is_measured_without_a_single_path_row() {
    let r = run_bench(&spec(vec![2, 4], BenchMode::Concurrent)).unwrap();
    assert!(r.row(1, ExecMode::Sequential).is_none());
    assert!(r.rows.iter().all(|row| row.ideal_ms > 0.0));
}

#[test]
fn modes_agree_bit_for_bit() {
    for n in [1, 2, 4, 6] {
        assert!(modes_bit_identical(&spec(vec![n], BenchMode::Both), n).unwrap());
    }
}

/// With a single path there is nothing to parallelize, so both modes should
/// cost about the same. Timing is noisy, so up to three measurements are taken.
#[test]
fn single_path_modes_cost_the_same() {
    let mut s = spec(vec![1], BenchMode::Both);
    s.reps = 9;
    s.warmup_reps = 2;
    s.d_model = 32;
    s.seq_len = 16;
    let mut ratios = Vec::new();
    for _ in 0..3 {
        let r = run_bench(&s).unwrap();
        let seq = r.row(1, ExecMode::Sequential).unwrap().median_ms;
        let con = r.row(1, ExecMode::Concurrent).unwrap().median_ms;
        let ratio = con / seq;
        if (ratio - 1.0).abs() <= 0.10 {
            return;
        }
        ratios.push(ratio);
    }
    panic!("concurrent/sequential ratios {ratios:?}");
}

#[test]
fn malformed_csv_is_rejected() {
    assert!(BenchResult::from_csv("n_paths,mode\n").is_err());
    let header = "n_paths,mode,median_ms,p10_ms,p90_ms,ideal_ms,cores\n";
    assert!(BenchResult::from_csv(&format!("{header}1,parallel,1,1,1,1,4\n")).is_err());
    assert!(BenchResult::from_csv(&format!("{header}1,sequential,1,1,1,1,4\n2,sequential,1,1,1,1,8\n")).is_err());
}
