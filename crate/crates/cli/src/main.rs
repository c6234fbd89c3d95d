//! Command-line front end: oracle verification runs, parameter sweeps, cost
//! model tables and workload generation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hybridattn::config::Config;
use hybridattn::harness::sweep::{sweep, write_sweep, SweepAxis, SweepParam};
use hybridattn::harness::{gen_workload, load_workload, run_experiment, save_workload};
use hybridattn::hybrid_engine::Workload;
use hybridattn::perf_model::{cost_csv, speedup_heatmap, WorkloadShape};

#[derive(Parser)]
#[command(name = "hybridattn", version, about = "Two-tier KV cache attention: verification and cost model")]
struct Cli {
    /// TOML configuration file; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the workload seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Print a human-readable summary to stdout.
    #[arg(long, global = true)]
    report: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the engine against the 64-bit oracle and write metrics.
    Verify(WorkloadArg),
    /// Run one experiment per value (or per pair of values with a second axis).
    Sweep(SweepArgs),
    /// Speedup grid of the cost model over window and store sizes.
    Heatmap(HeatmapArgs),
    /// Per-component times of both strategies for one window size.
    Breakdown(BreakdownArgs),
    /// Generate the configured workload and write it to a file.
    Gen {
        /// Destination; defaults to `<out>/workload.txt`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct WorkloadArg {
    /// Read the workload from this file instead of generating it.
    #[arg(long)]
    workload: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    param: SweepParam,
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    values: Vec<f64>,
    /// Optional second axis, varied fastest.
    #[arg(long, requires = "values2")]
    param2: Option<SweepParam>,
    #[arg(long, value_delimiter = ',', num_args = 1.., requires = "param2")]
    values2: Vec<f64>,
    #[command(flatten)]
    workload: WorkloadArg,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [256usize, 512, 1024, 2048, 4096])]
    windows: Vec<usize>,
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [0usize, 1024, 4096, 16384, 65536])]
    stores: Vec<usize>,
    #[command(flatten)]
    shape: ShapeArgs,
}

#[derive(Args)]
struct BreakdownArgs {
    #[arg(long, default_value_t = 1024)]
    window: usize,
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [32usize, 1024, 4096, 16384, 65536])]
    stores: Vec<usize>,
    #[command(flatten)]
    shape: ShapeArgs,
}

/// Modelled layer; defaults to a 32-head, 128-dim FP16 decode step.
#[derive(Args)]
struct ShapeArgs {
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    head_dim: usize,
}

impl ShapeArgs {
    fn template(&self) -> WorkloadShape {
        WorkloadShape {
            batch: self.batch,
            heads: self.heads,
            head_dim: self.head_dim,
            ..WorkloadShape::decode(0, 0, 0)
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.workload.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn workload_for(config: &Config, arg: &WorkloadArg) -> Result<Workload> {
    match &arg.workload {
        Some(path) => Ok(load_workload(path)?),
        None => Ok(gen_workload(&config.workload, &config.model)?),
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: &Cli) -> Result<bool> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::Verify(arg) => {
            let workload = workload_for(&config, arg)?;
            let report = run_experiment(&config, &workload, Some(&cli.out))?;
            if cli.report {
                print!("{}", report.report_text());
            }
            let s = &report.summary;
            let mut ok = s.bound_violations == 0 && s.mass_violations == 0;
            if config.cache.beta == 0.0 && s.tolerance_exceeded > 0 {
                eprintln!(
                    "{} steps exceed the oracle tolerance {:e} with nothing dropped",
                    s.tolerance_exceeded, config.oracle.tolerance
                );
                ok = false;
            }
            if s.bound_violations > 0 {
                eprintln!("{} dropped-mass bound violations", s.bound_violations);
            }
            if s.mass_violations > 0 {
                eprintln!("{} mass accounting violations", s.mass_violations);
            }
            eprintln!("metrics written to {}", cli.out.display());
            Ok(ok)
        }
        Command::Sweep(args) => {
            let workload = workload_for(&config, &args.workload)?;
            let mut axes = vec![SweepAxis {
                param: args.param,
                values: args.values.clone(),
            }];
            if let Some(p) = args.param2 {
                if p == args.param {
                    bail!("the two sweep axes must differ");
                }
                axes.push(SweepAxis {
                    param: p,
                    values: args.values2.clone(),
                });
            }
            let points = sweep(&config, &workload, &axes)?;
            write_sweep(&points, &cli.out)?;
            if cli.report {
                for p in &points {
                    let key: Vec<String> = p.settings.iter().map(|(k, v)| format!("{}={v}", k.as_str())).collect();
                    println!("== {}", key.join(" "));
                    print!("{}", p.report.report_text());
                }
            }
            let violations: usize = points.iter().map(|p| p.report.summary.bound_violations).sum();
            if violations > 0 {
                eprintln!("{violations} dropped-mass bound violations");
            }
            Ok(violations == 0)
        }
        Command::Heatmap(args) => {
            let cells = speedup_heatmap(&args.windows, &args.stores, &args.shape.template(), &config.perf)?;
            write(&cli.out.join("heatmap.csv"), &cost_csv(&cells))?;
            if cli.report {
                print!("{:>8}", "window");
                for s in &args.stores {
                    print!(" {s:>9}");
                }
                println!();
                for row in cells.chunks(args.stores.len()) {
                    print!("{:>8}", row[0].n_window);
                    for c in row {
                        print!(" {:>9.3}", c.speedup());
                    }
                    println!();
                }
            }
            Ok(true)
        }
        Command::Breakdown(args) => {
            let cells = speedup_heatmap(&[args.window], &args.stores, &args.shape.template(), &config.perf)?;
            write(&cli.out.join("breakdown.csv"), &cost_csv(&cells))?;
            if cli.report {
                println!(
                    "{:>8} {:>12} {:>12} {:>12} {:>12} {:>12} {:>8}",
                    "n_store", "base xfer", "base comp", "hyb gpu", "hyb cpu", "merge", "speedup"
                );
                for c in &cells {
                    println!(
                        "{:>8} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>8.3}",
                        c.n_store,
                        c.baseline.transfer,
                        c.baseline.compute,
                        c.hybrid.gpu,
                        c.hybrid.cpu,
                        c.hybrid.merge,
                        c.speedup()
                    );
                }
            }
            Ok(true)
        }
        Command::Gen { output } => {
            let workload = gen_workload(&config.workload, &config.model)?;
            let path = output.clone().unwrap_or_else(|| cli.out.join("workload.txt"));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            save_workload(&workload, &path)?;
            if cli.report {
                println!(
                    "{} steps, {} entries per layer -> {}",
                    workload.steps.len(),
                    workload.total_tokens(),
                    path.display()
                );
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
