//! Parameter sweeps over [`run_experiment`].

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::config::Config;
use crate::error::{contract, io_err, Error, Result};
use crate::harness::experiment::{run_experiment, MetricsReport, METRICS_CSV_HEADER, SUMMARY_CSV_HEADER};
use crate::hybrid_engine::Workload;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepParam {
    /// Selection threshold.
    Beta,
    /// Window capacity in entries (a multiple of `blk_size`).
    Window,
    /// Window capacity as a fraction of the workload's total entries,
    /// rounded to whole blocks.
    WindowRatio,
    /// Sequences per batch.
    Batch,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Beta => "beta",
            SweepParam::Window => "window",
            SweepParam::WindowRatio => "window_ratio",
            SweepParam::Batch => "batch",
        }
    }

    /// Sets `value` on `config`; `total_tokens` is the workload length.
    pub fn apply(self, config: &mut Config, value: f64, total_tokens: usize) -> Result<()> {
        let bad = || contract(format!("invalid {} value {value}", self.as_str()));
        let whole = |v: f64| (v >= 0.0 && v.fract() == 0.0).then_some(v as usize);
        match self {
            SweepParam::Beta => config.cache.beta = value,
            SweepParam::Window => {
                let n = whole(value).ok_or_else(bad)?;
                if n % config.cache.blk_size != 0 {
                    return Err(contract(format!(
                        "window {n} is not a multiple of blk_size {}",
                        config.cache.blk_size
                    )));
                }
                config.cache.blk_num = n / config.cache.blk_size;
            }
            SweepParam::WindowRatio => {
                if !(value > 0.0 && value <= 1.0) {
                    return Err(bad());
                }
                let blocks = (value * total_tokens as f64 / config.cache.blk_size as f64).round() as usize;
                config.cache.blk_num = blocks.max(2);
            }
            SweepParam::Batch => config.engine.batch = whole(value).ok_or_else(bad)?,
        }
        config.validate()
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SweepParam::Beta),
            "window" => Ok(SweepParam::Window),
            "window-ratio" | "window_ratio" => Ok(SweepParam::WindowRatio),
            "batch" => Ok(SweepParam::Batch),
            other => Err(contract(format!(
                "unknown sweep parameter {other:?} (beta, window, window-ratio, batch)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub settings: Vec<(SweepParam, f64)>,
    pub report: MetricsReport,
}

/// One experiment per point of the cartesian product of `axes` (first axis
/// outermost). Points run in parallel; results keep grid order.
pub fn sweep(config: &Config, workload: &Workload, axes: &[SweepAxis]) -> Result<Vec<SweepPoint>> {
    if axes.is_empty() || axes.iter().any(|a| a.values.is_empty()) {
        return Err(contract("a sweep needs at least one value per axis"));
    }
    let mut grid: Vec<Vec<(SweepParam, f64)>> = vec![Vec::new()];
    for axis in axes {
        grid = grid
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push((axis.param, v));
                    p
                })
            })
            .collect();
    }
    let total = workload.total_tokens();
    let configs = grid
        .iter()
        .map(|settings| {
            let mut c = config.clone();
            for &(param, v) in settings {
                param.apply(&mut c, v, total)?;
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    grid.into_par_iter()
        .zip(configs.into_par_iter())
        .map(|(settings, c)| {
            Ok(SweepPoint {
                settings,
                report: run_experiment(&c, workload, None)?,
            })
        })
        .collect()
}

fn key_header(points: &[SweepPoint]) -> String {
    points[0]
        .settings
        .iter()
        .map(|(p, _)| p.as_str())
        .collect::<Vec<_>>()
        .join(",")
}

fn key_fields(point: &SweepPoint) -> String {
    point
        .settings
        .iter()
        .map(|(_, v)| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Every run's per-step rows, prefixed with the swept settings.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    if points.is_empty() {
        return String::new();
    }
    let mut out = format!("{},{METRICS_CSV_HEADER}\n", key_header(points));
    for p in points {
        let key = key_fields(p);
        for line in p.report.to_csv().lines().skip(1) {
            let _ = writeln!(out, "{key},{line}");
        }
    }
    out
}

/// One summary row per run, prefixed with the swept settings.
pub fn sweep_summary_csv(points: &[SweepPoint]) -> String {
    if points.is_empty() {
        return String::new();
    }
    let mut out = format!("{},{SUMMARY_CSV_HEADER}\n", key_header(points));
    for p in points {
        let _ = writeln!(out, "{},{}", key_fields(p), p.report.summary.csv_fields());
    }
    out
}

/// Writes `sweep.csv` and `sweep_summary.csv` into `dir`.
pub fn write_sweep(points: &[SweepPoint], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, body) in [("sweep.csv", sweep_csv(points)), ("sweep_summary.csv", sweep_summary_csv(points))] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(io_err(&path))?;
    }
    Ok(())
}
