//! Roofline-style cost model of one attention layer under two strategies:
//!
//! - *offload baseline*: copy the store-tier KV entries over the link, then
//!   run full attention on the GPU (transfer and compute serialized);
//! - *hybrid*: dense attention over the window on the GPU overlapped with
//!   sparse attention over the selected entries on the CPU, followed by a
//!   merge that ships only the CPU's partial output and LSE over the link.
//!
//! All times are seconds. Only trends are meaningful; absolute values depend
//! on the device parameters.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub name: String,
    /// Operations per second.
    pub peak_flops: f64,
    /// Bytes per second.
    pub mem_bw: f64,
}

impl DeviceSpec {
    /// RTX A6000: 38.7 TFLOPS FP16, 768 GB/s GDDR6.
    pub fn a6000() -> Self {
        Self {
            name: "A6000".into(),
            peak_flops: 38.7e12,
            mem_bw: 768e9,
        }
    }

    /// Xeon Gold 6430: 1.229 TFLOPS FP16, up to 500 GB/s with all DDR slots.
    pub fn xeon_6430() -> Self {
        Self {
            name: "Xeon-6430".into(),
            peak_flops: 1.229e12,
            mem_bw: 500e9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_flops > 0.0 && self.mem_bw > 0.0) {
            return Err(contract(format!(
                "device {} needs positive peak_flops and mem_bw",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    /// Bytes per second.
    pub bw: f64,
    /// Seconds per transfer.
    pub latency: f64,
}

impl LinkSpec {
    /// PCIe 4.0 x16: 32 GB/s unidirectional, 10 us per transfer.
    pub fn pcie4_x16() -> Self {
        Self {
            bw: 32e9,
            latency: 10e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bw > 0.0 && self.latency >= 0.0) {
            return Err(contract("link needs bw > 0 and latency >= 0"));
        }
        Ok(())
    }
}

/// Problem size of one attention layer invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkloadShape {
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub n_window: usize,
    pub n_store: usize,
    pub n_selected: usize,
    pub n_q: usize,
    pub bytes_per_elem: usize,
}

impl WorkloadShape {
    /// Single-token decode for a 32-head, 128-dim layer in FP16.
    pub fn decode(n_window: usize, n_store: usize, n_selected: usize) -> Self {
        Self {
            batch: 1,
            heads: 32,
            head_dim: 128,
            n_window,
            n_store,
            n_selected,
            n_q: 1,
            bytes_per_elem: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_selected > self.n_store {
            return Err(contract(format!(
                "n_selected {} exceeds n_store {}",
                self.n_selected, self.n_store
            )));
        }
        Ok(())
    }

    fn per_kv_bytes(&self) -> f64 {
        (2 * self.batch * self.heads * self.head_dim * self.bytes_per_elem) as f64
    }

    /// Bytes of store-tier KV the baseline moves over the link.
    pub fn baseline_transfer_bytes(&self) -> f64 {
        self.per_kv_bytes() * self.n_store as f64
    }

    /// Bytes of partial output plus one LSE scalar per query row and head.
    pub fn merge_bytes(&self) -> f64 {
        (self.batch * self.heads * self.n_q * (self.head_dim + 1) * self.bytes_per_elem) as f64
    }
}

/// Roofline time of attending `n_q` query rows to `n_kv` entries: the larger
/// of compute time (`4 * head_dim` flops per query, key and head) and memory
/// time (KV reads plus query reads and output writes).
pub fn attention_cost(n_kv: usize, shape: &WorkloadShape, device: &DeviceSpec) -> f64 {
    if n_kv == 0 {
        return 0.0;
    }
    let bhq = (shape.batch * shape.heads * shape.n_q) as f64;
    let flops = bhq * n_kv as f64 * 4.0 * shape.head_dim as f64;
    let kv_bytes = shape.per_kv_bytes() * n_kv as f64;
    let qo_bytes = 2.0 * bhq * (shape.head_dim * shape.bytes_per_elem) as f64;
    (flops / device.peak_flops).max((kv_bytes + qo_bytes) / device.mem_bw)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineBreakdown {
    pub transfer: f64,
    pub compute: f64,
}

impl BaselineBreakdown {
    pub fn total(&self) -> f64 {
        self.transfer + self.compute
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridBreakdown {
    pub gpu: f64,
    pub cpu: f64,
    pub merge: f64,
}

impl HybridBreakdown {
    /// GPU and CPU parts overlap; the merge follows both.
    pub fn total(&self) -> f64 {
        self.gpu.max(self.cpu) + self.merge
    }
}

/// Load every store-tier entry onto the GPU, then attend to everything.
pub fn time_offload_baseline(shape: &WorkloadShape, gpu: &DeviceSpec, link: &LinkSpec) -> BaselineBreakdown {
    BaselineBreakdown {
        transfer: link.latency + shape.baseline_transfer_bytes() / link.bw,
        compute: attention_cost(shape.n_window + shape.n_store + shape.n_q, shape, gpu),
    }
}

/// Dense window attention on the GPU alongside sparse attention over the
/// selected entries on the CPU (discounted by `core_efficiency`).
pub fn time_hybrid(
    shape: &WorkloadShape,
    gpu: &DeviceSpec,
    cpu: &DeviceSpec,
    link: &LinkSpec,
    core_efficiency: f64,
) -> Result<HybridBreakdown> {
    if !(core_efficiency > 0.0 && core_efficiency <= 1.0) {
        return Err(contract(format!(
            "core_efficiency must lie in (0, 1], got {core_efficiency}"
        )));
    }
    shape.validate()?;
    Ok(HybridBreakdown {
        gpu: attention_cost(shape.n_window + shape.n_q, shape, gpu),
        cpu: attention_cost(shape.n_selected, shape, cpu) / core_efficiency,
        merge: link.latency + shape.merge_bytes() / link.bw,
    })
}

/// Devices, link and the two free parameters of the hybrid estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerfSpecs {
    pub gpu: DeviceSpec,
    pub cpu: DeviceSpec,
    pub link: LinkSpec,
    /// Fraction of CPU peak reached by sparse attention.
    pub core_efficiency: f64,
    /// Fraction of store-tier entries selected for sparse attention.
    pub retention_fraction: f64,
}

impl Default for PerfSpecs {
    fn default() -> Self {
        Self {
            gpu: DeviceSpec::a6000(),
            cpu: DeviceSpec::xeon_6430(),
            link: LinkSpec::pcie4_x16(),
            core_efficiency: 0.5,
            retention_fraction: 0.2,
        }
    }
}

impl PerfSpecs {
    pub fn validate(&self) -> Result<()> {
        self.gpu.validate()?;
        self.cpu.validate()?;
        self.link.validate()?;
        if !(self.core_efficiency > 0.0 && self.core_efficiency <= 1.0) {
            return Err(contract("core_efficiency must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.retention_fraction) {
            return Err(contract("retention_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn selected_for(&self, n_store: usize) -> usize {
        ((self.retention_fraction * n_store as f64).round() as usize).min(n_store)
    }
}

/// Both strategies evaluated at one `(n_window, n_store, batch)` point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostPoint {
    pub n_window: usize,
    pub n_store: usize,
    pub batch: usize,
    pub baseline: BaselineBreakdown,
    pub hybrid: HybridBreakdown,
}

impl CostPoint {
    pub fn evaluate(shape: &WorkloadShape, specs: &PerfSpecs) -> Result<Self> {
        Ok(Self {
            n_window: shape.n_window,
            n_store: shape.n_store,
            batch: shape.batch,
            baseline: time_offload_baseline(shape, &specs.gpu, &specs.link),
            hybrid: time_hybrid(shape, &specs.gpu, &specs.cpu, &specs.link, specs.core_efficiency)?,
        })
    }

    /// Baseline time over hybrid time.
    pub fn speedup(&self) -> f64 {
        self.baseline.total() / self.hybrid.total()
    }
}

/// Speedup grid over `windows × stores` (row-major, one row per window
/// size). `template` supplies batch, heads, head_dim, n_q and element size;
/// each cell selects `retention_fraction * n_store` entries.
pub fn speedup_heatmap(
    windows: &[usize],
    stores: &[usize],
    template: &WorkloadShape,
    specs: &PerfSpecs,
) -> Result<Vec<CostPoint>> {
    if windows.is_empty() || stores.is_empty() {
        return Err(contract("heatmap grid must be non-empty"));
    }
    specs.validate()?;
    let mut cells = Vec::with_capacity(windows.len() * stores.len());
    for &n_window in windows {
        for &n_store in stores {
            let shape = WorkloadShape {
                n_window,
                n_store,
                n_selected: specs.selected_for(n_store),
                ..*template
            };
            cells.push(CostPoint::evaluate(&shape, specs)?);
        }
    }
    Ok(cells)
}

pub const COST_CSV_HEADER: &str =
    "n_window,n_store,batch,t_baseline_transfer,t_baseline_compute,t_hybrid_gpu,t_hybrid_cpu,t_merge,speedup";

pub fn cost_csv(points: &[CostPoint]) -> String {
    let mut out = String::from(COST_CSV_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6}",
            p.n_window,
            p.n_store,
            p.batch,
            p.baseline.transfer,
            p.baseline.compute,
            p.hybrid.gpu,
            p.hybrid.cpu,
            p.hybrid.merge,
            p.speedup()
        );
    }
    out
}
