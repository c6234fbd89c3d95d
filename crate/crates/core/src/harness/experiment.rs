//! Engine-vs-oracle runs and their metrics.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::Config;
use crate::error::{contract, io_err, Result};
use crate::harness::oracle::OracleHistory;
use crate::hybrid_engine::{drive, HybridEngine, StepEvent, Workload};
use crate::perf_model::{time_hybrid, time_offload_baseline, WorkloadShape};

/// Slack allowed in `retained + dropped = 1`.
pub const MASS_TOLERANCE: f64 = 1e-6;

/// Simulated timings assume 16-bit KV elements on the modelled hardware.
const SIM_BYTES_PER_ELEM: usize = 2;

pub const METRICS_CSV_HEADER: &str = "step,layer,mode,n_q,total_len,window_len,archive_len,attended_mean,attended_max,context_mean,context_max,store_len,max_err,mean_err,eps_mean,eps_max,retained_min,bound_ratio_max,bound_violations,t_baseline,t_hybrid";

/// Metrics of one layer at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub layer: usize,
    pub mode: &'static str,
    pub n_q: usize,
    /// Entries seen so far, including this step's.
    pub total_len: usize,
    /// Window size before admission.
    pub window_len: usize,
    /// Archive size the sparse side saw.
    pub archive_len: usize,
    /// Archive entries the sparse side attended, mean and max over heads.
    pub attended_mean: f64,
    pub attended_max: usize,
    /// Context cache size after maintenance, mean and max over heads.
    pub context_mean: f64,
    pub context_max: usize,
    /// Archive size after maintenance.
    pub store_len: usize,
    /// Largest and mean per-coordinate deviation from the oracle.
    pub max_err: f64,
    pub mean_err: f64,
    /// Dropped oracle mass over heads and query rows.
    pub eps_mean: f64,
    pub eps_max: f64,
    /// Smallest retained oracle mass over heads and query rows.
    pub retained_min: f64,
    /// Largest `err / (2·ε·max|V| + tolerance)`; above 1 is a violation.
    pub bound_ratio_max: f64,
    pub bound_violations: usize,
    /// Simulated seconds for this layer step.
    pub t_baseline: f64,
    pub t_hybrid: f64,
}

impl StepMetrics {
    fn csv_line(&self, out: &mut String) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.4},{},{:.4},{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.9},{:.6e},{},{:.6e},{:.6e}",
            self.step,
            self.layer,
            self.mode,
            self.n_q,
            self.total_len,
            self.window_len,
            self.archive_len,
            self.attended_mean,
            self.attended_max,
            self.context_mean,
            self.context_max,
            self.store_len,
            self.max_err,
            self.mean_err,
            self.eps_mean,
            self.eps_max,
            self.retained_min,
            self.bound_ratio_max,
            self.bound_violations,
            self.t_baseline,
            self.t_hybrid,
        );
    }
}

/// Run-level aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub rows: usize,
    pub max_err: f64,
    /// Percentiles (50, 90, 99) of per-row `max_err`.
    pub err_p50: f64,
    pub err_p90: f64,
    pub err_p99: f64,
    /// Dropped mass averaged over every head, query row and step.
    pub eps_mean: f64,
    pub eps_p50: f64,
    pub eps_p90: f64,
    pub eps_p99: f64,
    pub eps_max: f64,
    pub retained_min: f64,
    /// Decode rows only: mean over rows of `context_mean / store_len`.
    pub context_fraction_mean: f64,
    pub bound_violations: usize,
    /// Rows whose `max_err` exceeds the oracle tolerance.
    pub tolerance_exceeded: usize,
    /// Query/head pairs where `retained + dropped` strays from 1.
    pub mass_violations: usize,
    pub t_baseline_total: f64,
    pub t_hybrid_total: f64,
}

pub const SUMMARY_CSV_HEADER: &str = "rows,max_err,err_p50,err_p90,err_p99,eps_mean,eps_p50,eps_p90,eps_p99,eps_max,retained_min,context_fraction_mean,bound_violations,tolerance_exceeded,mass_violations,t_baseline_total,t_hybrid_total";

impl MetricsSummary {
    pub fn csv_fields(&self) -> String {
        format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.9},{:.6},{},{},{},{:.6e},{:.6e}",
            self.rows,
            self.max_err,
            self.err_p50,
            self.err_p90,
            self.err_p99,
            self.eps_mean,
            self.eps_p50,
            self.eps_p90,
            self.eps_p99,
            self.eps_max,
            self.retained_min,
            self.context_fraction_mean,
            self.bound_violations,
            self.tolerance_exceeded,
            self.mass_violations,
            self.t_baseline_total,
            self.t_hybrid_total,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<StepMetrics>,
    pub summary: MetricsSummary,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(160 * (self.rows.len() + 1));
        out.push_str(METRICS_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            r.csv_line(&mut out);
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        format!("{SUMMARY_CSV_HEADER}\n{}\n", self.summary.csv_fields())
    }

    /// Human-readable summary table.
    pub fn report_text(&self) -> String {
        let s = &self.summary;
        let speedup = if s.t_hybrid_total > 0.0 {
            s.t_baseline_total / s.t_hybrid_total
        } else {
            f64::NAN
        };
        let lines = [
            ("layer steps", s.rows.to_string()),
            ("max |err|", format!("{:.3e}", s.max_err)),
            (
                "|err| p50 / p90 / p99",
                format!("{:.3e} / {:.3e} / {:.3e}", s.err_p50, s.err_p90, s.err_p99),
            ),
            ("mean dropped mass", format!("{:.4e}", s.eps_mean)),
            (
                "dropped mass p50 / p90 / p99 / max",
                format!("{:.3e} / {:.3e} / {:.3e} / {:.3e}", s.eps_p50, s.eps_p90, s.eps_p99, s.eps_max),
            ),
            ("min retained mass", format!("{:.6}", s.retained_min)),
            ("mean context / archive (decode)", format!("{:.4}", s.context_fraction_mean)),
            ("bound violations", s.bound_violations.to_string()),
            ("rows over tolerance", s.tolerance_exceeded.to_string()),
            ("mass accounting violations", s.mass_violations.to_string()),
            ("simulated baseline time [s]", format!("{:.6e}", s.t_baseline_total)),
            ("simulated hybrid time [s]", format!("{:.6e}", s.t_hybrid_total)),
            ("simulated speedup", format!("{speedup:.3}")),
        ];
        let width = lines.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in lines {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        out
    }

    /// Writes `metrics.csv`, `summary.csv` and `report.txt` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, body) in [
            ("metrics.csv", self.to_csv()),
            ("summary.csv", self.summary_csv()),
            ("report.txt", self.report_text()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

struct Accumulator {
    eps_sum: f64,
    eps_count: usize,
    eps_all: Vec<f64>,
    mass_violations: usize,
}

fn measure(
    ev: &StepEvent<'_>,
    history: &OracleHistory,
    config: &Config,
    acc: &mut Accumulator,
) -> Result<StepMetrics> {
    let out = ev.output;
    let shape = ev.engine.shape();
    let (h, d) = (shape.num_heads, shape.head_dim);
    let n_q = ev.input.kv_in.len;
    let hist_len = history.len();
    if out.archive_len + out.window_len + n_q != hist_len {
        return Err(contract(format!(
            "tier sizes {} + {} + {} do not cover the history of {}",
            out.archive_len, out.window_len, n_q, hist_len
        )));
    }
    let tol = config.oracle.tolerance;

    let mut max_err = 0.0f64;
    let mut err_sum = 0.0f64;
    let mut eps_sum = 0.0f64;
    let mut eps_max = 0.0f64;
    let mut retained_min = f64::INFINITY;
    let mut bound_ratio_max = 0.0f64;
    let mut violations = 0usize;
    let mut attended = vec![false; out.archive_len];

    for head in 0..h {
        attended.iter_mut().for_each(|a| *a = false);
        for &i in &out.store_attended[head] {
            attended[i] = true;
        }
        let vmax = history.max_abs_value(head);
        let res = &out.heads[head];
        for row in 0..n_q {
            let q = &ev.input.queries[(head * n_q + row) * d..(head * n_q + row + 1) * d];
            let oracle = history.attend(head, q, shape.scale);
            let mut eps = 0.0;
            let mut retained = 0.0;
            for (i, w) in oracle.weights.iter().enumerate() {
                if i < out.archive_len && !attended[i] {
                    eps += w;
                } else {
                    retained += w;
                }
            }
            if (retained + eps - 1.0).abs() > MASS_TOLERANCE {
                acc.mass_violations += 1;
            }
            eps_sum += eps;
            eps_max = eps_max.max(eps);
            retained_min = retained_min.min(retained);
            acc.eps_all.push(eps);
            for (c, (o, r)) in res.output_row(row).iter().zip(&oracle.output).enumerate() {
                let err = (f64::from(*o) - r).abs();
                let bound = 2.0 * eps * vmax[c] + tol;
                max_err = max_err.max(err);
                err_sum += err;
                bound_ratio_max = bound_ratio_max.max(err / bound);
                if err > bound {
                    violations += 1;
                }
            }
        }
    }
    let pairs = h * n_q;
    acc.eps_sum += eps_sum;
    acc.eps_count += pairs;

    let attended_lens: Vec<usize> = out.store_attended.iter().map(Vec::len).collect();
    let ctx = ev.engine.store().context().sizes();
    let mean = |xs: &[usize]| xs.iter().sum::<usize>() as f64 / xs.len().max(1) as f64;
    let attended_mean = mean(&attended_lens);

    let perf = &config.perf;
    let sim = WorkloadShape {
        batch: config.engine.batch,
        heads: h,
        head_dim: d,
        n_window: out.window_len,
        n_store: out.archive_len,
        n_selected: (attended_mean.round() as usize).min(out.archive_len),
        n_q,
        bytes_per_elem: SIM_BYTES_PER_ELEM,
    };
    let t_baseline = time_offload_baseline(&sim, &perf.gpu, &perf.link).total();
    let t_hybrid = time_hybrid(&sim, &perf.gpu, &perf.cpu, &perf.link, perf.core_efficiency)?.total();

    Ok(StepMetrics {
        step: ev.step,
        layer: ev.layer,
        mode: ev.input.mode.as_str(),
        n_q,
        total_len: hist_len,
        window_len: out.window_len,
        archive_len: out.archive_len,
        attended_mean,
        attended_max: attended_lens.iter().copied().max().unwrap_or(0),
        context_mean: mean(&ctx),
        context_max: ctx.iter().copied().max().unwrap_or(0),
        store_len: ev.engine.store().archive().len(),
        max_err,
        mean_err: err_sum / (pairs * d) as f64,
        eps_mean: eps_sum / pairs as f64,
        eps_max,
        retained_min,
        bound_ratio_max,
        bound_violations: violations,
        t_baseline,
        t_hybrid,
    })
}

fn summarize(rows: &[StepMetrics], acc: &Accumulator, tolerance: f64) -> MetricsSummary {
    let errs: Vec<f64> = rows.iter().map(|r| r.max_err).collect();
    let fractions: Vec<f64> = rows
        .iter()
        .filter(|r| r.mode == "decode" && r.store_len > 0)
        .map(|r| r.context_mean / r.store_len as f64)
        .collect();
    MetricsSummary {
        rows: rows.len(),
        max_err: errs.iter().copied().fold(0.0, f64::max),
        err_p50: percentile(&errs, 50.0),
        err_p90: percentile(&errs, 90.0),
        err_p99: percentile(&errs, 99.0),
        eps_mean: acc.eps_sum / acc.eps_count.max(1) as f64,
        eps_p50: percentile(&acc.eps_all, 50.0),
        eps_p90: percentile(&acc.eps_all, 90.0),
        eps_p99: percentile(&acc.eps_all, 99.0),
        eps_max: acc.eps_all.iter().copied().fold(0.0, f64::max),
        retained_min: rows.iter().map(|r| r.retained_min).fold(f64::INFINITY, f64::min),
        context_fraction_mean: if fractions.is_empty() {
            0.0
        } else {
            fractions.iter().sum::<f64>() / fractions.len() as f64
        },
        bound_violations: rows.iter().map(|r| r.bound_violations).sum(),
        tolerance_exceeded: rows.iter().filter(|r| r.max_err > tolerance).count(),
        mass_violations: acc.mass_violations,
        t_baseline_total: rows.iter().map(|r| r.t_baseline).sum(),
        t_hybrid_total: rows.iter().map(|r| r.t_hybrid).sum(),
    }
}

/// Runs the engine and the oracle side by side over `workload`. With
/// `out_dir`, the metrics are also written there (see
/// [`MetricsReport::write_to`]).
pub fn run_experiment(config: &Config, workload: &Workload, out_dir: Option<&Path>) -> Result<MetricsReport> {
    config.validate()?;
    if workload.shape != config.model {
        return Err(contract("workload shape does not match the configured model"));
    }
    let mut engine = HybridEngine::from_config(config)?;
    let (heads, d) = (config.model.heads, config.model.head_dim);
    let mut histories: Vec<OracleHistory> = (0..config.model.layers).map(|_| OracleHistory::new(heads, d)).collect();
    let mut rows = Vec::with_capacity(workload.steps.len() * config.model.layers);
    let mut acc = Accumulator {
        eps_sum: 0.0,
        eps_count: 0,
        eps_all: Vec::new(),
        mass_violations: 0,
    };
    drive(&mut engine, workload, |ev| {
        let history = &mut histories[ev.layer];
        history.extend(&ev.input.kv_in.keys, &ev.input.kv_in.values);
        rows.push(measure(&ev, history, config, &mut acc)?);
        Ok(())
    })?;
    let summary = summarize(&rows, &acc, config.oracle.tolerance);
    let report = MetricsReport { rows, summary };
    if let Some(dir) = out_dir {
        report.write_to(dir)?;
    }
    Ok(report)
}
