//! Store tier: the growable archive of offloaded KV entries and the per-head
//! context cache of salient entries selected from it.
//!
//! An archived entry is salient for a head when its weight exceeds the
//! fraction `beta / n` of that head's attention, `n` being the number of
//! entries the weight was normalized over (the window size at ingest, the
//! archive size at re-evaluation). Non-salient entries stay archived so a
//! later re-evaluation can reinstate them.

use std::fmt::Write as _;
use std::ops::Range;
use std::sync::Arc;

use crate::error::{check_len, contract, Result};
use crate::kv_cache::KvBlock;

/// Indices `i` with `weights[h][i] > beta / divisor`, per head.
pub fn select_salient<W: AsRef<[f32]>>(weights: &[W], beta: f64, divisor: usize) -> Result<Vec<Vec<usize>>> {
    if divisor == 0 {
        return Err(contract("selection divisor must be >= 1"));
    }
    let threshold = beta / divisor as f64;
    Ok(weights
        .iter()
        .map(|w| {
            w.as_ref()
                .iter()
                .enumerate()
                .filter(|(_, x)| f64::from(**x) > threshold)
                .map(|(i, _)| i)
                .collect()
        })
        .collect())
}

/// Scales `weights` to sum to one. `None` when the set is empty or carries
/// no mass, in which case the head's context is stored empty.
pub fn renormalize(weights: &[f32]) -> Option<Vec<f32>> {
    let sum: f64 = weights.iter().map(|w| f64::from(*w)).sum();
    if weights.is_empty() || sum <= 0.0 {
        return None;
    }
    Some(weights.iter().map(|w| (f64::from(*w) / sum) as f32).collect())
}

/// Offloaded entries of one layer, in position order, stored per head.
#[derive(Debug, Clone)]
pub struct Archive {
    num_heads: usize,
    head_dim: usize,
    positions: Vec<u64>,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    maw: Vec<Vec<f32>>,
}

impl Archive {
    fn new(num_heads: usize, head_dim: usize) -> Self {
        Self {
            num_heads,
            head_dim,
            positions: Vec::new(),
            keys: vec![Vec::new(); num_heads],
            values: vec![Vec::new(); num_heads],
            maw: vec![Vec::new(); num_heads],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[u64] {
        &self.positions
    }

    /// All archived keys of `head`, `[len × head_dim]`.
    pub fn keys(&self, head: usize) -> &[f32] {
        &self.keys[head]
    }

    pub fn values(&self, head: usize) -> &[f32] {
        &self.values[head]
    }

    pub fn maw(&self, head: usize) -> &[f32] {
        &self.maw[head]
    }

    pub fn key(&self, head: usize, index: usize) -> &[f32] {
        &self.keys[head][index * self.head_dim..(index + 1) * self.head_dim]
    }

    pub fn value(&self, head: usize, index: usize) -> &[f32] {
        &self.values[head][index * self.head_dim..(index + 1) * self.head_dim]
    }

    fn push_block(&mut self, block: &KvBlock) {
        self.positions.extend(block.positions());
        for h in 0..self.num_heads {
            self.keys[h].extend_from_slice(block.keys(h));
            self.values[h].extend_from_slice(block.values(h));
            self.maw[h].extend_from_slice(block.maw(h));
        }
    }
}

/// Selected entries of one head, stored contiguously in position order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadContext {
    /// Archive indices, ascending.
    pub indices: Vec<usize>,
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    /// Selection weights rescaled to sum to one (empty for an empty head).
    pub weights: Vec<f32>,
}

impl HeadContext {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn rebuild(archive: &Archive, head: usize, indices: Vec<usize>) -> Self {
        let mut keys = Vec::with_capacity(indices.len() * archive.head_dim);
        let mut values = Vec::with_capacity(indices.len() * archive.head_dim);
        for &i in &indices {
            keys.extend_from_slice(archive.key(head, i));
            values.extend_from_slice(archive.value(head, i));
        }
        let mut ctx = Self {
            indices,
            keys,
            values,
            weights: Vec::new(),
        };
        ctx.renormalize(archive.maw(head));
        ctx
    }

    fn renormalize(&mut self, maw: &[f32]) {
        let raw: Vec<f32> = self.indices.iter().map(|&i| maw[i]).collect();
        self.weights = renormalize(&raw).unwrap_or_default();
    }
}

/// Per-head context of one layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextCache {
    pub heads: Vec<HeadContext>,
}

impl ContextCache {
    pub fn sizes(&self) -> Vec<usize> {
        self.heads.iter().map(HeadContext::len).collect()
    }
}

/// Sparse-attention work for one head inside a [`HeadGroupTask`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadEntries {
    pub head: usize,
    /// Archive indices: the selected entries in position order, followed by
    /// padding entries in descending MAW order.
    pub indices: Vec<usize>,
    /// Number of leading entries of `indices` that were selected.
    pub selected: usize,
}

impl HeadEntries {
    pub fn padding(&self) -> &[usize] {
        &self.indices[self.selected..]
    }
}

/// Adjacent heads whose sparse attention runs as one task.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGroupTask {
    pub heads: Range<usize>,
    pub entries: Vec<HeadEntries>,
}

/// Heads merged per sparse task: `round(batch * num_heads / core_count)`,
/// at least one.
pub fn group_size(batch: usize, num_heads: usize, core_count: usize) -> Result<usize> {
    if core_count == 0 {
        return Err(contract("core_count must be >= 1"));
    }
    let g = ((batch * num_heads) as f64 / core_count as f64).round() as usize;
    Ok(g.clamp(1, num_heads.max(1)))
}

/// Store tier of one layer.
#[derive(Debug, Clone)]
pub struct StoreTier {
    layer_id: usize,
    archive: Archive,
    context: Arc<ContextCache>,
    /// Divisor used by the most recent selection.
    last_divisor: usize,
    generation: u64,
}

impl StoreTier {
    pub fn new(layer_id: usize, num_heads: usize, head_dim: usize) -> Self {
        Self {
            layer_id,
            archive: Archive::new(num_heads, head_dim),
            context: Arc::new(ContextCache {
                heads: vec![HeadContext::default(); num_heads],
            }),
            last_divisor: 0,
            generation: 0,
        }
    }

    pub fn layer_id(&self) -> usize {
        self.layer_id
    }

    pub fn num_heads(&self) -> usize {
        self.archive.num_heads
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    /// Current context snapshot. A rebuild publishes a new snapshot; holders
    /// of an older one keep seeing it unchanged.
    pub fn context(&self) -> Arc<ContextCache> {
        Arc::clone(&self.context)
    }

    pub fn last_divisor(&self) -> usize {
        self.last_divisor
    }

    /// Bumped every time the context or archive changes.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Archives evicted blocks and adds their salient entries
    /// (`maw > beta / window_size`, per head) to the context.
    pub fn ingest_evicted(&mut self, blocks: Vec<KvBlock>, beta: f64, window_size: usize) -> Result<()> {
        if blocks.is_empty() {
            return Ok(());
        }
        if window_size == 0 {
            return Err(contract("window size divisor must be >= 1"));
        }
        let heads = self.archive.num_heads;
        let mut next = (*self.context).clone();
        for block in &blocks {
            check_len("evicted block head count", heads, block.num_heads())?;
            check_len("evicted block head_dim", self.archive.head_dim, block.head_dim())?;
            if !block.is_full() {
                return Err(contract("only full blocks can be offloaded"));
            }
            if let Some(&last) = self.archive.positions.last() {
                if block.positions().start != last + 1 {
                    return Err(contract(format!(
                        "offloaded block starts at {}, archive ends at {last}",
                        block.positions().start
                    )));
                }
            }
            let base = self.archive.len();
            let maws: Vec<&[f32]> = (0..heads).map(|h| block.maw(h)).collect();
            let selected = select_salient(&maws, beta, window_size)?;
            self.archive.push_block(block);
            let d = self.archive.head_dim;
            for (h, ids) in selected.into_iter().enumerate() {
                let ctx = &mut next.heads[h];
                for i in ids {
                    ctx.indices.push(base + i);
                    ctx.keys.extend_from_slice(&block.keys(h)[i * d..(i + 1) * d]);
                    ctx.values.extend_from_slice(&block.values(h)[i * d..(i + 1) * d]);
                }
            }
        }
        for (h, ctx) in next.heads.iter_mut().enumerate() {
            ctx.renormalize(self.archive.maw(h));
        }
        self.context = Arc::new(next);
        self.last_divisor = window_size;
        self.generation += 1;
        Ok(())
    }

    /// Rebuilds the context from full-archive attention weights `a_cpu`
    /// (one row per head, one weight per archived entry). The weights
    /// replace the archive's MAW, and the context becomes exactly
    /// `{ i : a_cpu[h][i] > beta / archive_len }`.
    pub fn reevaluate(&mut self, a_cpu: &[Vec<f32>], beta: f64) -> Result<()> {
        let n = self.archive.len();
        check_len("re-evaluation head count", self.archive.num_heads, a_cpu.len())?;
        for row in a_cpu {
            check_len("re-evaluation weights vs archive length", n, row.len())?;
        }
        if n == 0 {
            return Ok(());
        }
        self.archive.maw = a_cpu.to_vec();
        let selected = select_salient(&self.archive.maw, beta, n)?;
        let heads = selected
            .into_iter()
            .enumerate()
            .map(|(h, ids)| HeadContext::rebuild(&self.archive, h, ids))
            .collect();
        self.context = Arc::new(ContextCache { heads });
        self.last_divisor = n;
        self.generation += 1;
        Ok(())
    }

    /// Groups adjacent heads into sparse tasks and pads shorter heads in a
    /// group with their highest-MAW unselected archive entries. A head runs
    /// short only when its archive has nothing left to pad with.
    pub fn pack_head_groups(&self, batch: usize, core_count: usize) -> Result<Vec<HeadGroupTask>> {
        let heads = self.archive.num_heads;
        let g = group_size(batch, heads, core_count)?;
        let ctx = &self.context;
        let mut tasks = Vec::with_capacity(heads.div_ceil(g));
        for lo in (0..heads).step_by(g) {
            let hi = (lo + g).min(heads);
            let target = (lo..hi).map(|h| ctx.heads[h].len()).max().unwrap_or(0);
            let entries = (lo..hi)
                .map(|h| {
                    let sel = &ctx.heads[h].indices;
                    let mut indices = sel.clone();
                    if sel.len() < target {
                        indices.extend(self.padding_for(h, sel, target - sel.len()));
                    }
                    HeadEntries {
                        head: h,
                        indices,
                        selected: sel.len(),
                    }
                })
                .collect();
            tasks.push(HeadGroupTask { heads: lo..hi, entries });
        }
        Ok(tasks)
    }

    fn padding_for(&self, head: usize, selected: &[usize], count: usize) -> Vec<usize> {
        let maw = self.archive.maw(head);
        let mut taken = vec![false; maw.len()];
        for &i in selected {
            taken[i] = true;
        }
        let mut pool: Vec<usize> = (0..maw.len()).filter(|&i| !taken[i]).collect();
        // descending MAW, earlier position first on ties
        pool.sort_by(|&a, &b| maw[b].total_cmp(&maw[a]).then(a.cmp(&b)));
        pool.truncate(count);
        pool
    }

    /// One line per archived entry and head:
    /// `layer L head H position P maw M selected S padding X`.
    pub fn dump_context(&self, tasks: Option<&[HeadGroupTask]>) -> String {
        let mut out = String::new();
        let n = self.archive.len();
        for h in 0..self.archive.num_heads {
            let mut selected = vec![false; n];
            for &i in &self.context.heads[h].indices {
                selected[i] = true;
            }
            let mut padding = vec![false; n];
            for t in tasks.unwrap_or(&[]) {
                for e in t.entries.iter().filter(|e| e.head == h) {
                    for &i in e.padding() {
                        padding[i] = true;
                    }
                }
            }
            for i in 0..n {
                let _ = writeln!(
                    out,
                    "layer {} head {h} position {} maw {:.6e} selected {} padding {}",
                    self.layer_id,
                    self.archive.positions[i],
                    self.archive.maw(h)[i],
                    u8::from(selected[i]),
                    u8::from(padding[i]),
                );
            }
        }
        out
    }
}
