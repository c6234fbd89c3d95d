//! Per-layer step driver.
//!
//! A step attends the layer's queries to two disjoint key sets and fuses the
//! results through their log-sum-exp statistics:
//!
//! 1. sparse tasks over the store tier are planned and launched first
//!    (decode: the context cache packed into head groups; append: the whole
//!    archive);
//! 2. dense attention runs over the window plus the step's new entries;
//! 3. both sides are joined and merged per head and query row;
//! 4. maintenance: MAW update, admission of the new entries into the window,
//!    re-evaluation of the context (append with a non-empty archive), and
//!    offload of evicted blocks into the store tier.
//!
//! With `parallel` set, sparse tasks run on the rayon pool concurrently with
//! each other and with the dense side. Every head's reduction runs in fixed
//! key order, so parallel and sequential runs produce identical bits.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention_math::{attend_head, merge_states, AttentionResult, HeadShape};
use crate::config::{Config, ModelShape};
use crate::error::{check_len, contract, Result};
use crate::kv_cache::{CacheConfig, KvBatch, WindowCache};
use crate::sparsifier::{ContextCache, HeadEntries, HeadGroupTask, StoreTier};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    /// One query row per step; sparse side reads the context cache.
    Decode,
    /// One or more query rows; sparse side reads the entire archive and the
    /// resulting weights drive context re-evaluation.
    Append,
}

impl StepMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StepMode::Decode => "decode",
            StepMode::Append => "append",
        }
    }
}

/// One layer's input for one step.
#[derive(Debug, Clone)]
pub struct StepInput {
    pub mode: StepMode,
    /// `[heads × n_q × head_dim]`.
    pub queries: Vec<f32>,
    /// New entries, one per query row.
    pub kv_in: KvBatch,
}

impl StepInput {
    pub fn n_queries(&self) -> usize {
        self.queries.len() / (self.kv_in.num_heads * self.kv_in.head_dim).max(1)
    }
}

/// Result of one layer step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Merged attention per head (`output` is `[n_q × head_dim]`).
    pub heads: Vec<AttentionResult<f32>>,
    /// Dense-side weights per head, averaged over query rows, covering the
    /// window (oldest first) followed by the step's new entries.
    pub a_gpu: Vec<Vec<f32>>,
    /// Sparse-side weights per head, averaged over query rows, aligned with
    /// `store_attended`.
    pub a_cpu: Vec<Vec<f32>>,
    /// Archive indices each head's sparse side attended.
    pub store_attended: Vec<Vec<usize>>,
    /// Window size before the step's entries were admitted.
    pub window_len: usize,
    /// Archive size the sparse side saw.
    pub archive_len: usize,
    /// Entries offloaded during maintenance.
    pub evicted: usize,
}

impl StepOutput {
    /// Merged output of all heads, `[heads × n_q × head_dim]`.
    pub fn flat_output(&self) -> Vec<f32> {
        self.heads.iter().flat_map(|h| h.output.iter().copied()).collect()
    }
}

/// Scheduling knobs that do not affect results.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineOptions {
    /// CPU cores available to sparse tasks; sets the head-group size.
    pub core_count: usize,
    /// Sequences served together; only affects head-group sizing.
    pub batch: usize,
    pub parallel: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            core_count: 8,
            batch: 1,
            parallel: true,
        }
    }
}

impl EngineOptions {
    pub fn validate(&self) -> Result<()> {
        if self.core_count == 0 || self.batch == 0 {
            return Err(contract("core_count and batch must be >= 1"));
        }
        Ok(())
    }
}

/// Window tier, store tier and cached task plan of one layer.
#[derive(Debug, Clone)]
pub struct LayerEngine {
    shape: HeadShape,
    cache: CacheConfig,
    options: EngineOptions,
    window: WindowCache,
    store: StoreTier,
    /// Head-group plan keyed by the store generation it was packed from.
    plan: Option<(u64, Arc<Vec<HeadGroupTask>>)>,
}

enum SparsePlan {
    Groups(Arc<Vec<HeadGroupTask>>, Arc<ContextCache>),
    FullArchive,
}

impl LayerEngine {
    pub fn new(layer_id: usize, shape: HeadShape, cache: CacheConfig, options: EngineOptions) -> Result<Self> {
        options.validate()?;
        Ok(Self {
            window: WindowCache::new(layer_id, shape.num_heads, shape.head_dim, &cache)?,
            store: StoreTier::new(layer_id, shape.num_heads, shape.head_dim),
            shape,
            cache,
            options,
            plan: None,
        })
    }

    pub fn window(&self) -> &WindowCache {
        &self.window
    }

    pub fn store(&self) -> &StoreTier {
        &self.store
    }

    pub fn shape(&self) -> &HeadShape {
        &self.shape
    }

    /// Total entries this layer has seen.
    pub fn total_len(&self) -> u64 {
        self.window.next_position()
    }

    /// Current head-group plan for decode steps.
    pub fn head_groups(&mut self) -> Result<Arc<Vec<HeadGroupTask>>> {
        let generation = self.store.generation();
        if let Some((g, plan)) = &self.plan {
            if *g == generation {
                return Ok(Arc::clone(plan));
            }
        }
        let plan = Arc::new(
            self.store
                .pack_head_groups(self.options.batch, self.options.core_count)?,
        );
        self.plan = Some((generation, Arc::clone(&plan)));
        Ok(plan)
    }

    pub fn decode_step(&mut self, input: &StepInput) -> Result<StepOutput> {
        if input.mode != StepMode::Decode {
            return Err(contract("decode_step called with an append input"));
        }
        self.step(input)
    }

    pub fn append_step(&mut self, input: &StepInput) -> Result<StepOutput> {
        if input.mode != StepMode::Append {
            return Err(contract("append_step called with a decode input"));
        }
        self.step(input)
    }

    pub fn step(&mut self, input: &StepInput) -> Result<StepOutput> {
        let h = self.shape.num_heads;
        let d = self.shape.head_dim;
        let kv = &input.kv_in;
        check_len("kv_in head count", h, kv.num_heads)?;
        check_len("kv_in head_dim", d, kv.head_dim)?;
        if !input.queries.len().is_multiple_of(h * d) {
            return Err(contract("query buffer is not a multiple of heads*head_dim"));
        }
        let n_q = input.queries.len() / (h * d);
        if n_q == 0 {
            return Err(contract("a step needs at least one query row"));
        }
        if input.mode == StepMode::Decode && n_q != 1 {
            return Err(contract(format!("decode steps carry one query row, got {n_q}")));
        }
        check_len("kv_in entries vs query rows", n_q, kv.len)?;
        if kv.start != self.window.next_position() {
            return Err(contract(format!(
                "position discontinuity: layer expects {}, step starts at {}",
                self.window.next_position(),
                kv.start
            )));
        }
        if kv.len > self.window.capacity() {
            return Err(contract(format!(
                "a step of {} entries exceeds the window capacity {}",
                kv.len,
                self.window.capacity()
            )));
        }

        let window_len = self.window.len();
        let archive_len = self.store.archive().len();
        let plan = match input.mode {
            StepMode::Decode => SparsePlan::Groups(self.head_groups()?, self.store.context()),
            StepMode::Append => SparsePlan::FullArchive,
        };

        let (sparse, dense) = if self.options.parallel {
            rayon::join(
                || self.sparse_side(&plan, &input.queries, n_q, true),
                || self.dense_side(&input.queries, kv, n_q, true),
            )
        } else {
            (
                self.sparse_side(&plan, &input.queries, n_q, false),
                self.dense_side(&input.queries, kv, n_q, false),
            )
        };
        let (mut sparse, store_attended) = sparse?;
        let mut dense = dense?;

        let mut heads = Vec::with_capacity(h);
        let mut a_cpu = Vec::with_capacity(h);
        let mut a_gpu = Vec::with_capacity(h);
        for (s, g) in sparse.iter_mut().zip(dense.iter_mut()) {
            a_cpu.push(mean_rows(s));
            a_gpu.push(mean_rows(g));
            s.weights = None;
            g.weights = None;
            heads.push(merge_states(s, g)?);
        }

        // Maintenance: MAW, admission, re-evaluation, offload.
        let window_rows: Vec<Vec<f64>> = a_gpu
            .iter()
            .map(|row| row[..window_len].iter().map(|x| f64::from(*x)).collect())
            .collect();
        self.window.update_maw(&window_rows, self.cache.alpha)?;
        let new_maw: Vec<f32> = a_gpu.iter().flat_map(|row| row[window_len..].iter().copied()).collect();
        let admitted = kv.clone().with_maw(new_maw)?;
        let evicted = self.window.admit(&admitted)?;
        let evicted_entries = evicted.iter().map(|b| b.occupancy()).sum();

        if input.mode == StepMode::Append && archive_len > 0 {
            self.store.reevaluate(&a_cpu, self.cache.beta)?;
        }
        crate::kv_cache::offload(&mut self.store, evicted, self.cache.beta, window_len + kv.len)?;

        Ok(StepOutput {
            heads,
            a_gpu,
            a_cpu,
            store_attended,
            window_len,
            archive_len,
            evicted: evicted_entries,
        })
    }

    fn head_queries<'a>(&self, queries: &'a [f32], head: usize, n_q: usize) -> &'a [f32] {
        let n = n_q * self.shape.head_dim;
        &queries[head * n..(head + 1) * n]
    }

    #[allow(clippy::type_complexity)]
    fn sparse_side(
        &self,
        plan: &SparsePlan,
        queries: &[f32],
        n_q: usize,
        parallel: bool,
    ) -> Result<(Vec<AttentionResult<f32>>, Vec<Vec<usize>>)> {
        let h = self.shape.num_heads;
        match plan {
            SparsePlan::FullArchive => {
                let archive = self.store.archive();
                let run = |head: usize| {
                    attend_head(
                        self.head_queries(queries, head, n_q),
                        archive.keys(head),
                        archive.values(head),
                        self.shape.head_dim,
                        self.shape.scale,
                        true,
                    )
                };
                let results: Result<Vec<_>> = if parallel {
                    (0..h).into_par_iter().map(run).collect()
                } else {
                    (0..h).map(run).collect()
                };
                let attended = vec![(0..archive.len()).collect::<Vec<_>>(); h];
                Ok((results?, attended))
            }
            SparsePlan::Groups(tasks, ctx) => {
                let run_task = |task: &HeadGroupTask| -> Result<Vec<(usize, AttentionResult<f32>)>> {
                    task.entries
                        .iter()
                        .map(|e| Ok((e.head, self.sparse_head(ctx, e, queries, n_q)?)))
                        .collect()
                };
                let per_task: Result<Vec<_>> = if parallel {
                    tasks.par_iter().map(run_task).collect()
                } else {
                    tasks.iter().map(run_task).collect()
                };
                let mut results: Vec<Option<AttentionResult<f32>>> = vec![None; h];
                for (head, r) in per_task?.into_iter().flatten() {
                    results[head] = Some(r);
                }
                let mut attended = vec![Vec::new(); h];
                for e in tasks.iter().flat_map(|t| &t.entries) {
                    attended[e.head] = e.indices.clone();
                }
                let results = results
                    .into_iter()
                    .map(|r| r.ok_or_else(|| contract("head-group plan does not cover every head")))
                    .collect::<Result<_>>()?;
                Ok((results, attended))
            }
        }
    }

    fn sparse_head(
        &self,
        ctx: &ContextCache,
        entries: &HeadEntries,
        queries: &[f32],
        n_q: usize,
    ) -> Result<AttentionResult<f32>> {
        let head = entries.head;
        let selected = &ctx.heads[head];
        let q = self.head_queries(queries, head, n_q);
        let (d, scale) = (self.shape.head_dim, self.shape.scale);
        if entries.padding().is_empty() {
            return attend_head(q, &selected.keys, &selected.values, d, scale, true);
        }
        let archive = self.store.archive();
        let mut keys = selected.keys.clone();
        let mut values = selected.values.clone();
        for &i in entries.padding() {
            keys.extend_from_slice(archive.key(head, i));
            values.extend_from_slice(archive.value(head, i));
        }
        attend_head(q, &keys, &values, d, scale, true)
    }

    fn dense_side(&self, queries: &[f32], kv: &KvBatch, n_q: usize, parallel: bool) -> Result<Vec<AttentionResult<f32>>> {
        let run = |head: usize| {
            let mut keys = Vec::with_capacity((self.window.len() + kv.len) * self.shape.head_dim);
            let mut values = Vec::with_capacity(keys.capacity());
            self.window.gather_head(head, &mut keys, &mut values);
            keys.extend_from_slice(kv.head_keys(head));
            values.extend_from_slice(kv.head_values(head));
            attend_head(
                self.head_queries(queries, head, n_q),
                &keys,
                &values,
                self.shape.head_dim,
                self.shape.scale,
                true,
            )
        };
        if parallel {
            (0..self.shape.num_heads).into_par_iter().map(run).collect()
        } else {
            (0..self.shape.num_heads).map(run).collect()
        }
    }
}

fn mean_rows(r: &AttentionResult<f32>) -> Vec<f32> {
    r.mean_weights()
        .unwrap_or_default()
        .into_iter()
        .map(|x| x as f32)
        .collect()
}

/// Inputs of every layer for one step of the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadStep {
    pub mode: StepMode,
    pub start: u64,
    pub len: usize,
    pub layers: Vec<LayerInputs>,
}

/// One layer's queries and new KV entries, `[heads × len × head_dim]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInputs {
    pub queries: Vec<f32>,
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

/// A full multi-layer Q/KV stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub shape: ModelShape,
    pub steps: Vec<WorkloadStep>,
}

impl Workload {
    pub fn total_tokens(&self) -> usize {
        self.steps.iter().map(|s| s.len).sum()
    }

    /// The step's input for `layer`.
    pub fn step_input(&self, step: usize, layer: usize) -> Result<StepInput> {
        let s = self
            .steps
            .get(step)
            .ok_or_else(|| contract(format!("workload has no step {step}")))?;
        let li = s.layers.get(layer).ok_or_else(|| {
            contract(format!("workload exhausted: step {step} has no data for layer {layer}"))
        })?;
        let kv_in = KvBatch::new(
            s.start,
            self.shape.heads,
            self.shape.head_dim,
            li.keys.clone(),
            li.values.clone(),
        )?;
        check_len("step entry count", s.len, kv_in.len)?;
        Ok(StepInput {
            mode: s.mode,
            queries: li.queries.clone(),
            kv_in,
        })
    }
}

/// All layers of a model.
#[derive(Debug, Clone)]
pub struct HybridEngine {
    pub layers: Vec<LayerEngine>,
}

impl HybridEngine {
    pub fn new(model: &ModelShape, cache: CacheConfig, options: EngineOptions, scale: Option<f64>) -> Result<Self> {
        model.validate()?;
        let shape = match scale {
            Some(s) => HeadShape::with_scale(model.heads, model.head_dim, s)?,
            None => HeadShape::new(model.heads, model.head_dim)?,
        };
        let layers = (0..model.layers)
            .map(|l| LayerEngine::new(l, shape, cache, options))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn from_config(config: &Config) -> Result<Self> {
        Self::new(&config.model, config.cache, config.engine, config.scale)
    }

    /// Textual state of every layer's window and store tier.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for l in &self.layers {
            out.push_str(&l.window().dump());
            out.push_str(&l.store().dump_context(None));
        }
        out
    }
}

/// Everything a per-step observer gets to see.
pub struct StepEvent<'a> {
    pub step: usize,
    pub layer: usize,
    pub input: &'a StepInput,
    pub output: &'a StepOutput,
    pub engine: &'a LayerEngine,
}

/// Drives every step of `workload` through every layer in order, calling
/// `observe` after each layer step.
pub fn drive<F>(engine: &mut HybridEngine, workload: &Workload, mut observe: F) -> Result<()>
where
    F: FnMut(StepEvent<'_>) -> Result<()>,
{
    if workload.shape.layers != engine.layers.len() {
        return Err(contract(format!(
            "workload has {} layers, engine has {}",
            workload.shape.layers,
            engine.layers.len()
        )));
    }
    for step in 0..workload.steps.len() {
        for (layer, le) in engine.layers.iter_mut().enumerate() {
            let input = workload.step_input(step, layer)?;
            let output = le.step(&input)?;
            observe(StepEvent {
                step,
                layer,
                input: &input,
                output: &output,
                engine: le,
            })?;
        }
    }
    Ok(())
}

/// Merged outputs of a whole run plus the final engine state.
#[derive(Debug, Clone)]
pub struct SequenceRun {
    /// `outputs[step][layer]` is `[heads × n_q × head_dim]`.
    pub outputs: Vec<Vec<Vec<f32>>>,
    pub engine: HybridEngine,
}

pub fn run_sequence(config: &Config, workload: &Workload) -> Result<SequenceRun> {
    if workload.shape != config.model {
        return Err(contract("workload shape does not match the configured model"));
    }
    let mut engine = HybridEngine::from_config(config)?;
    let mut outputs: Vec<Vec<Vec<f32>>> = Vec::with_capacity(workload.steps.len());
    drive(&mut engine, workload, |ev| {
        if ev.layer == 0 {
            outputs.push(Vec::new());
        }
        outputs[ev.step].push(ev.output.flat_output());
        Ok(())
    })?;
    Ok(SequenceRun { outputs, engine })
}
