//! Verification and benchmarking harness: synthetic workloads, the 64-bit
//! oracle, engine-vs-oracle metrics and parameter sweeps.

pub mod experiment;
pub mod oracle;
pub mod sweep;
pub mod workload;

pub use experiment::{run_experiment, MetricsReport, MetricsSummary, StepMetrics};
pub use oracle::{full_attention_oracle, OracleHistory, OracleRow};
pub use sweep::{sweep, SweepAxis, SweepParam, SweepPoint};
pub use workload::{gen_workload, load_workload, save_workload, WorkloadSpec};
