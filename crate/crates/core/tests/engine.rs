use hybridattn::config::{Config, ModelShape};
use hybridattn::harness::{gen_workload, OracleHistory, WorkloadSpec};
use hybridattn::hybrid_engine::{drive, run_sequence, HybridEngine, StepMode, Workload};
use hybridattn::kv_cache::KvBatch;

fn small_config(blk_num: usize, blk_size: usize, beta: f64) -> Config {
    let mut c = Config::default();
    c.model = ModelShape {
        layers: 1,
        heads: 4,
        head_dim: 16,
    };
    c.cache.blk_num = blk_num;
    c.cache.blk_size = blk_size;
    c.cache.beta = beta;
    c.engine.core_count = 3;
    c.workload = WorkloadSpec {
        steps: 120,
        prefill_len: 24,
        prefill_chunk: 8,
        append_events: vec![(40, 6), (90, 12)],
        heavy_hitter_count: 4,
        ..WorkloadSpec::default()
    };
    c
}

fn workload(c: &Config) -> Workload {
    gen_workload(&c.workload, &c.model).unwrap()
}

/// Max deviation of every step's output from the oracle over `visible`
/// history entries (`None` means all of them).
fn oracle_deviation<F>(c: &Config, w: &Workload, mut visible: F) -> f64
where
    F: FnMut(usize, usize, &hybridattn::hybrid_engine::StepOutput) -> Vec<usize>,
{
    let mut engine = HybridEngine::from_config(c).unwrap();
    let (h, d) = (c.model.heads, c.model.head_dim);
    let scale = 1.0 / (d as f64).sqrt();
    let mut hist = OracleHistory::new(h, d);
    let mut worst = 0.0f64;
    drive(&mut engine, w, |ev| {
        hist.extend(&ev.input.kv_in.keys, &ev.input.kv_in.values);
        let n_q = ev.input.kv_in.len;
        for head in 0..h {
            let idx = visible(head, hist.len(), ev.output);
            let keys: Vec<f64> = idx.iter().flat_map(|&i| hist.keys(head)[i * d..(i + 1) * d].to_vec()).collect();
            let vals: Vec<f64> = idx.iter().flat_map(|&i| hist.values(head)[i * d..(i + 1) * d].to_vec()).collect();
            for row in 0..n_q {
                let q = &ev.input.queries[(head * n_q + row) * d..(head * n_q + row + 1) * d];
                let r = hybridattn::harness::full_attention_oracle(q, &keys, &vals, d, scale);
                for (o, e) in ev.output.heads[head].output_row(row).iter().zip(&r.output) {
                    worst = worst.max((f64::from(*o) - e).abs());
                }
            }
        }
        Ok(())
    })
    .unwrap();
    worst
}

#[test]
fn without_evictions_output_is_dense_attention() {
    let c = small_config(16, 32, 1.0);
    let w = workload(&c);
    assert!(w.total_tokens() <= c.cache.capacity());
    let dev = oracle_deviation(&c, &w, |_, n, out| {
        assert_eq!(out.archive_len, 0);
        (0..n).collect()
    });
    assert!(dev < 1e-5, "{dev}");
}

#[test]
fn zero_beta_matches_full_attention() {
    let c = small_config(3, 8, 0.0);
    let w = workload(&c);
    let mut saw_archive = false;
    let dev = oracle_deviation(&c, &w, |_, n, out| {
        saw_archive |= out.archive_len > 0;
        (0..n).collect()
    });
    assert!(saw_archive);
    assert!(dev < 1e-5, "{dev}");
}

#[test]
fn huge_beta_attends_window_only_in_decode() {
    let c = small_config(2, 8, 1e9);
    let w = workload(&c);
    let dev = oracle_deviation(&c, &w, |head, n, out| {
        if out.store_attended[head].is_empty() {
            (out.archive_len..n).collect()
        } else {
            // append steps read the whole archive
            (0..n).collect()
        }
    });
    assert!(dev < 1e-5, "{dev}");

    let mut engine = HybridEngine::from_config(&c).unwrap();
    drive(&mut engine, &w, |ev| {
        assert!(ev.engine.store().context().sizes().iter().all(|&s| s == 0));
        if ev.input.mode == StepMode::Decode {
            assert!(ev.output.store_attended.iter().all(Vec::is_empty));
        }
        Ok(())
    })
    .unwrap();
}

#[test]
fn attended_set_follows_context_and_reevaluation_is_fresh_selection() {
    let c = small_config(2, 8, 0.8);
    let w = workload(&c);
    let mut engine = HybridEngine::from_config(&c).unwrap();
    let mut checked = 0;
    let mut prev_ctx: Option<Vec<Vec<usize>>> = None;
    drive(&mut engine, &w, |ev| {
        let out = ev.output;
        let store = ev.engine.store();
        let ctx = store.context();
        if ev.input.mode == StepMode::Decode {
            // selected entries of the context in force are always attended
            if let Some(prev) = &prev_ctx {
                for (head, sel) in prev.iter().enumerate() {
                    assert!(sel.iter().all(|i| out.store_attended[head].contains(i)));
                }
            }
        } else if out.archive_len > 0 {
            let threshold = c.cache.beta / out.archive_len as f64;
            for head in 0..c.model.heads {
                let expected: Vec<usize> = (0..out.archive_len)
                    .filter(|&i| f64::from(out.a_cpu[head][i]) > threshold)
                    .collect();
                let got: Vec<usize> = ctx.heads[head]
                    .indices
                    .iter()
                    .copied()
                    .filter(|&i| i < out.archive_len)
                    .collect();
                assert_eq!(got, expected, "step {} head {head}", ev.step);
                let maw = &store.archive().maw(head)[..out.archive_len];
                assert_eq!(maw, &out.a_cpu[head][..]);
            }
            checked += 1;
        }
        prev_ctx = Some(ctx.heads.iter().map(|h| h.indices.clone()).collect());
        Ok(())
    })
    .unwrap();
    assert!(checked >= 2, "{checked}");
}

#[test]
fn tier_sizes_follow_block_eviction_arithmetic() {
    let mut c = small_config(2, 32, 1.0);
    c.workload = WorkloadSpec {
        steps: 200,
        prefill_len: 48,
        prefill_chunk: 16,
        append_events: vec![(100, 16)],
        ..WorkloadSpec::default()
    };
    let w = workload(&c);
    let mut engine = HybridEngine::from_config(&c).unwrap();
    let (cap, bs) = (c.cache.capacity(), c.cache.blk_size);
    let mut sim_window = 0usize;
    let mut sim_archive = 0usize;
    drive(&mut engine, &w, |ev| {
        let n = ev.input.kv_in.len;
        assert_eq!(ev.output.window_len, sim_window);
        assert_eq!(ev.output.archive_len, sim_archive);
        sim_window += n;
        while sim_window > cap {
            sim_window -= bs;
            sim_archive += bs;
        }
        let win = ev.engine.window();
        let arch = ev.engine.store().archive();
        assert_eq!(win.len(), sim_window);
        assert_eq!(arch.len(), sim_archive);
        assert_eq!(win.positions().start as usize, sim_archive);
        assert!(arch.positions().iter().enumerate().all(|(i, p)| *p == i as u64));
        assert_eq!(ev.output.evicted, arch.len() - ev.output.archive_len);
        for head in 0..c.model.heads {
            assert!(win.head_maw(head).iter().all(|m| (0.0..=1.0).contains(m)));
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(sim_window + sim_archive, 48 + 200 + 16);
}

#[test]
fn runs_are_deterministic_and_scheduling_free() {
    let c = small_config(2, 8, 0.5);
    let w = workload(&c);
    let a = run_sequence(&c, &w).unwrap();
    let b = run_sequence(&c, &w).unwrap();
    assert_eq!(a.outputs, b.outputs);
    let mut seq = c.clone();
    seq.engine.parallel = false;
    let s = run_sequence(&seq, &w).unwrap();
    assert_eq!(a.outputs, s.outputs);
    assert_eq!(a.engine.dump(), s.engine.dump());
}

#[test]
fn layers_are_independent() {
    let mut two = small_config(2, 8, 0.5);
    two.model.layers = 2;
    let w2 = workload(&two);
    let run2 = run_sequence(&two, &w2).unwrap();

    let one = small_config(2, 8, 0.5);
    let mut w1 = w2.clone();
    w1.shape.layers = 1;
    for s in &mut w1.steps {
        s.layers.remove(0);
    }
    let run1 = run_sequence(&one, &w1).unwrap();
    for (a, b) in run2.outputs.iter().zip(&run1.outputs) {
        assert_eq!(a[1], b[0]);
    }
}

#[test]
fn rejects_malformed_steps() {
    let c = small_config(2, 8, 0.5);
    let w = workload(&c);
    let mut engine = HybridEngine::from_config(&c).unwrap();
    let layer = &mut engine.layers[0];
    let first = w.step_input(0, 0).unwrap();
    assert_eq!(first.mode, StepMode::Append);
    assert!(layer.decode_step(&first).is_err());

    // gap in positions
    let mut skipped = first.clone();
    skipped.kv_in.start = 5;
    assert!(layer.append_step(&skipped).is_err());

    // query rows and new entries disagree
    let mut short = first.clone();
    short.queries.truncate(short.queries.len() / 2);
    assert!(layer.step(&short).is_err());

    // more new entries than the window holds
    let (h, d) = (c.model.heads, c.model.head_dim);
    let n = c.cache.capacity() + 1;
    let big = hybridattn::hybrid_engine::StepInput {
        mode: StepMode::Append,
        queries: vec![0.0; h * n * d],
        kv_in: KvBatch::new(0, h, d, vec![0.0; h * n * d], vec![0.0; h * n * d]).unwrap(),
    };
    assert!(layer.step(&big).is_err());

    layer.append_step(&first).unwrap();
    assert_eq!(layer.total_len(), first.kv_in.len as u64);
    assert!(w.step_input(w.steps.len(), 0).is_err());
    assert!(w.step_input(0, 1).is_err());
}
