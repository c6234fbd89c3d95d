//! Hybrid two-tier attention.
//!
//! Recent KV entries live in a bounded window tier and are attended densely;
//! older entries are offloaded to a store tier where a per-head salience
//! filter picks the entries worth attending sparsely. The two partial
//! results are fused exactly through their log-sum-exp statistics.
//!
//! - [`attention_math`]: attention kernels and the log-sum-exp merge
//! - [`kv_cache`]: the window tier's circular block buffer
//! - [`sparsifier`]: store-tier archive, context cache and task packing
//! - [`hybrid_engine`]: the per-layer step driver
//! - [`perf_model`]: analytical cost model of hybrid vs. offloaded attention
//! - [`harness`]: workloads, the 64-bit oracle, experiments and sweeps

pub mod attention_math;
pub mod config;
pub mod error;
pub mod harness;
pub mod hybrid_engine;
pub mod kv_cache;
pub mod perf_model;
pub mod sparsifier;

pub use error::{Error, Result};
