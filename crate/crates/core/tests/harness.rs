use hybridattn::config::{Config, ModelShape};
use hybridattn::harness::experiment::METRICS_CSV_HEADER;
use hybridattn::harness::sweep::{sweep, sweep_csv, sweep_summary_csv, write_sweep};
use hybridattn::harness::{gen_workload, load_workload, run_experiment, save_workload, SweepAxis, SweepParam, WorkloadSpec};
use hybridattn::Error;

fn config(beta: f64) -> Config {
    let mut c = Config::default();
    c.model = ModelShape {
        layers: 2,
        heads: 4,
        head_dim: 32,
    };
    c.cache.blk_num = 4;
    c.cache.blk_size = 16;
    c.cache.beta = beta;
    c.workload = WorkloadSpec {
        steps: 300,
        prefill_len: 32,
        prefill_chunk: 16,
        append_events: vec![(150, 16)],
        ..WorkloadSpec::default()
    };
    c
}

#[test]
fn zero_beta_stays_within_tolerance_every_step() {
    let c = config(0.0);
    let w = gen_workload(&c.workload, &c.model).unwrap();
    let r = run_experiment(&c, &w, None).unwrap();
    assert_eq!(r.rows.len(), w.steps.len() * 2);
    for row in &r.rows {
        assert!(row.max_err <= 1e-5, "step {} layer {}: {}", row.step, row.layer, row.max_err);
        assert_eq!(row.eps_max, 0.0);
    }
    assert_eq!(r.summary.tolerance_exceeded, 0);
}

#[test]
fn strong_skew_keeps_most_mass_with_a_small_context() {
    let mut c = config(1.0);
    c.workload.recency_decay = 0.9;
    let w = gen_workload(&c.workload, &c.model).unwrap();
    let r = run_experiment(&c, &w, None).unwrap();
    let mut decode_rows = 0;
    for row in r.rows.iter().filter(|r| r.mode == "decode" && r.store_len >= 128) {
        assert!(row.retained_min >= 0.9, "step {}: {}", row.step, row.retained_min);
        assert!(row.context_max as f64 <= 0.5 * row.store_len as f64, "step {}", row.step);
        decode_rows += 1;
    }
    assert!(decode_rows > 100);
    assert_eq!(r.summary.bound_violations, 0);
    assert_eq!(r.summary.mass_violations, 0);
}

#[test]
fn error_never_exceeds_dropped_mass_bound() {
    for (beta, decay) in [(0.5, 0.97), (1.0, 0.99), (4.0, 0.9)] {
        let mut c = config(beta);
        c.workload.recency_decay = decay;
        let w = gen_workload(&c.workload, &c.model).unwrap();
        let r = run_experiment(&c, &w, None).unwrap();
        assert_eq!(r.summary.bound_violations, 0);
        assert!(r.rows.iter().all(|row| row.bound_ratio_max <= 1.0));
        assert!(r.summary.eps_max > 0.0);
    }
}

#[test]
fn csv_is_reproducible_and_written() {
    let c = config(0.75);
    let w = gen_workload(&c.workload, &c.model).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = run_experiment(&c, &w, Some(dir.path())).unwrap();
    let b = run_experiment(&c, &w, None).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    let written = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(written, a.to_csv());
    assert!(written.starts_with(METRICS_CSV_HEADER));
    assert!(dir.path().join("summary.csv").exists());
    assert!(std::fs::read_to_string(dir.path().join("report.txt")).unwrap().contains("bound violations"));
}

#[test]
fn output_errors_name_the_path() {
    let c = config(0.5);
    let w = gen_workload(&c.workload, &c.model).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let err = run_experiment(&c, &w, Some(&blocker.join("sub"))).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("file/sub"), "{err}");
}

#[test]
fn rejects_mismatched_workload() {
    let c = config(0.5);
    let mut other = c.clone();
    other.model.heads = 2;
    let w = gen_workload(&other.workload, &other.model).unwrap();
    assert!(run_experiment(&c, &w, None).is_err());
}

#[test]
fn workload_file_round_trip_reproduces_run() {
    let c = config(0.5);
    let w = gen_workload(&c.workload, &c.model).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.txt");
    save_workload(&w, &path).unwrap();
    let back = load_workload(&path).unwrap();
    assert_eq!(back, w);
    assert_eq!(
        run_experiment(&c, &back, None).unwrap().to_csv(),
        run_experiment(&c, &w, None).unwrap().to_csv()
    );
    assert!(load_workload(&dir.path().join("missing")).is_err());
}

#[test]
fn single_value_sweep_equals_experiment() {
    let c = config(0.5);
    let w = gen_workload(&c.workload, &c.model).unwrap();
    let axes = [SweepAxis {
        param: SweepParam::Beta,
        values: vec![0.5],
    }];
    let points = sweep(&c, &w, &axes).unwrap();
    assert_eq!(points.len(), 1);
    assert_eq!(points[0].report, run_experiment(&c, &w, None).unwrap());
    let csv = sweep_csv(&points);
    assert!(csv.starts_with(&format!("beta,{METRICS_CSV_HEADER}\n")));
    assert_eq!(csv.lines().count(), 1 + points[0].report.rows.len());
    assert!(sweep(&c, &w, &[]).is_err());
}

#[test]
fn dropped_mass_grows_with_beta() {
    let mut c = config(0.0);
    c.workload.recency_decay = 0.99;
    let w = gen_workload(&c.workload, &c.model).unwrap();
    let axes = [SweepAxis {
        param: SweepParam::Beta,
        values: vec![0.0, 0.25, 0.5, 1.0],
    }];
    let points = sweep(&c, &w, &axes).unwrap();
    let eps: Vec<f64> = points.iter().map(|p| p.report.summary.eps_mean).collect();
    assert_eq!(eps[0], 0.0);
    assert!(eps.windows(2).all(|p| p[0] <= p[1]), "{eps:?}");
    assert!(eps[3] > eps[1]);
}

#[test]
fn larger_window_does_not_raise_dropped_mass() {
    let c = config(1.0);
    let w = gen_workload(&c.workload, &c.model).unwrap();
    let axes = [SweepAxis {
        param: SweepParam::Window,
        values: vec![64.0, 256.0],
    }];
    let points = sweep(&c, &w, &axes).unwrap();
    let eps: Vec<f64> = points.iter().map(|p| p.report.summary.eps_mean).collect();
    assert!(eps[1] <= eps[0], "{eps:?}");
}

#[test]
fn two_axis_sweep_writes_keyed_grid() {
    let mut c = config(0.5);
    c.workload.steps = 60;
    c.workload.append_events.clear();
    let w = gen_workload(&c.workload, &c.model).unwrap();
    let axes = [
        SweepAxis {
            param: SweepParam::Batch,
            values: vec![1.0, 4.0],
        },
        SweepAxis {
            param: SweepParam::WindowRatio,
            values: vec![0.25, 0.5, 1.0],
        },
    ];
    let points = sweep(&c, &w, &axes).unwrap();
    let keys: Vec<String> = points
        .iter()
        .map(|p| p.settings.iter().map(|(_, v)| v.to_string()).collect::<Vec<_>>().join("/"))
        .collect();
    assert_eq!(keys, ["1/0.25", "1/0.5", "1/1", "4/0.25", "4/0.5", "4/1"]);
    let summary = sweep_summary_csv(&points);
    assert!(summary.starts_with("batch,window_ratio,rows,"));
    assert_eq!(summary.lines().count(), 7);
    let dir = tempfile::tempdir().unwrap();
    write_sweep(&points, dir.path()).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("sweep_summary.csv")).unwrap(), summary);
}
