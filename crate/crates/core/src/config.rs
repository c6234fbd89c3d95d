//! Engine configuration file (TOML).
//!
//! ```toml
//! scale = 0.125            # optional; defaults to 1/sqrt(head_dim)
//!
//! [model]
//! layers = 2
//! heads = 8
//! head_dim = 64
//!
//! [cache]
//! blk_num = 8
//! blk_size = 32
//! alpha = 0.5
//! beta = 1.0
//!
//! [engine]
//! core_count = 8
//! batch = 1
//! parallel = true
//!
//! [oracle]
//! tolerance = 1e-5
//!
//! [perf.gpu]
//! name = "A6000"
//! peak_flops = 38.7e12
//! mem_bw = 768e9
//!
//! [workload]
//! seed = 42
//! steps = 2048
//! ```
//!
//! Every section and field is optional; missing ones take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, io_err, Error, Result};
use crate::harness::workload::WorkloadSpec;
use crate::hybrid_engine::EngineOptions;
use crate::kv_cache::CacheConfig;
use crate::perf_model::PerfSpecs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 8,
            head_dim: 64,
        }
    }
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(contract(format!(
                "model shape needs layers, heads and head_dim >= 1, got {}x{}x{}",
                self.layers, self.heads, self.head_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSettings {
    /// Allowed per-element deviation from the 64-bit oracle when nothing is
    /// dropped; also the floating-point slack of the dropped-mass bound.
    pub tolerance: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self { tolerance: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Score scale; `None` means `1/sqrt(head_dim)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    pub model: ModelShape,
    pub cache: CacheConfig,
    pub engine: EngineOptions,
    pub oracle: OracleSettings,
    pub perf: PerfSpecs,
    pub workload: WorkloadSpec,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.cache.validate()?;
        self.engine.validate()?;
        self.perf.validate()?;
        self.workload.validate()?;
        if let Some(s) = self.scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(contract(format!("scale must be positive, got {s}")));
            }
        }
        if self.oracle.tolerance.is_nan() || self.oracle.tolerance < 0.0 {
            return Err(contract("oracle tolerance must be >= 0"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
