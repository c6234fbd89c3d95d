//! Window tier: a per-layer circular buffer of fixed-size KV blocks.
//!
//! New entries enter at the head; whole blocks leave from the tail once the
//! buffer would overflow. Every resident entry carries a per-head moving
//! average of the attention weight it received (MAW), which travels with
//! the block when it is offloaded to the store tier.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, contract, Result};
use crate::sparsifier::StoreTier;

/// Window geometry and the two sparsification knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheConfig {
    pub blk_num: usize,
    pub blk_size: usize,
    /// MAW smoothing factor.
    pub alpha: f64,
    /// Salience threshold factor.
    pub beta: f64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            blk_num: 8,
            blk_size: 32,
            alpha: 0.5,
            beta: 1.0,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blk_num < 2 {
            return Err(contract(format!("blk_num must be >= 2, got {}", self.blk_num)));
        }
        if self.blk_size == 0 {
            return Err(contract("blk_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(contract(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(contract(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    /// Window capacity in entries (`blk_num * blk_size`).
    pub fn capacity(&self) -> usize {
        self.blk_num * self.blk_size
    }
}

/// A run of consecutive KV entries for all heads, head-major:
/// `keys`/`values` are `[heads × len × head_dim]`, `maw` is `[heads × len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBatch {
    pub start: u64,
    pub len: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    pub maw: Vec<f32>,
}

impl KvBatch {
    /// Entries with zero MAW.
    pub fn new(
        start: u64,
        num_heads: usize,
        head_dim: usize,
        keys: Vec<f32>,
        values: Vec<f32>,
    ) -> Result<Self> {
        if num_heads == 0 || head_dim == 0 {
            return Err(contract("KV batch needs num_heads >= 1 and head_dim >= 1"));
        }
        check_len("KV batch value buffer", keys.len(), values.len())?;
        if !keys.len().is_multiple_of(num_heads * head_dim) {
            return Err(contract(format!(
                "KV buffer of {} elements is not a multiple of heads*head_dim = {}",
                keys.len(),
                num_heads * head_dim
            )));
        }
        let len = keys.len() / (num_heads * head_dim);
        Ok(Self {
            start,
            len,
            num_heads,
            head_dim,
            keys,
            values,
            maw: vec![0.0; num_heads * len],
        })
    }

    pub fn with_maw(mut self, maw: Vec<f32>) -> Result<Self> {
        check_len("KV batch MAW buffer", self.num_heads * self.len, maw.len())?;
        self.maw = maw;
        Ok(self)
    }

    pub fn positions(&self) -> Range<u64> {
        self.start..self.start + self.len as u64
    }

    pub fn head_keys(&self, head: usize) -> &[f32] {
        let n = self.len * self.head_dim;
        &self.keys[head * n..(head + 1) * n]
    }

    pub fn head_values(&self, head: usize) -> &[f32] {
        let n = self.len * self.head_dim;
        &self.values[head * n..(head + 1) * n]
    }

    pub fn head_maw(&self, head: usize) -> &[f32] {
        &self.maw[head * self.len..(head + 1) * self.len]
    }

    /// Sub-batch of entries `range` (relative to `start`).
    pub fn slice(&self, range: Range<usize>) -> KvBatch {
        let d = self.head_dim;
        let n = range.len();
        let mut keys = Vec::with_capacity(self.num_heads * n * d);
        let mut values = Vec::with_capacity(self.num_heads * n * d);
        let mut maw = Vec::with_capacity(self.num_heads * n);
        for h in 0..self.num_heads {
            keys.extend_from_slice(&self.head_keys(h)[range.start * d..range.end * d]);
            values.extend_from_slice(&self.head_values(h)[range.start * d..range.end * d]);
            maw.extend_from_slice(&self.head_maw(h)[range.clone()]);
        }
        KvBatch {
            start: self.start + range.start as u64,
            len: n,
            num_heads: self.num_heads,
            head_dim: d,
            keys,
            values,
            maw,
        }
    }
}

/// Fixed-capacity block of KV entries with per-head MAW.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBlock {
    start: u64,
    occupancy: usize,
    blk_size: usize,
    head_dim: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    maw: Vec<Vec<f32>>,
}

impl KvBlock {
    fn empty(num_heads: usize, head_dim: usize, blk_size: usize) -> Self {
        Self {
            start: 0,
            occupancy: 0,
            blk_size,
            head_dim,
            keys: (0..num_heads)
                .map(|_| Vec::with_capacity(blk_size * head_dim))
                .collect(),
            values: (0..num_heads)
                .map(|_| Vec::with_capacity(blk_size * head_dim))
                .collect(),
            maw: (0..num_heads).map(|_| Vec::with_capacity(blk_size)).collect(),
        }
    }

    pub fn positions(&self) -> Range<u64> {
        self.start..self.start + self.occupancy as u64
    }

    pub fn occupancy(&self) -> usize {
        self.occupancy
    }

    pub fn blk_size(&self) -> usize {
        self.blk_size
    }

    pub fn is_full(&self) -> bool {
        self.occupancy == self.blk_size
    }

    pub fn num_heads(&self) -> usize {
        self.keys.len()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn keys(&self, head: usize) -> &[f32] {
        &self.keys[head]
    }

    pub fn values(&self, head: usize) -> &[f32] {
        &self.values[head]
    }

    pub fn maw(&self, head: usize) -> &[f32] {
        &self.maw[head]
    }

    fn free(&self) -> usize {
        self.blk_size - self.occupancy
    }

    /// Copies entries `range` of `batch` into the block; the caller checks room.
    fn push(&mut self, batch: &KvBatch, range: Range<usize>) {
        let d = self.head_dim;
        if self.occupancy == 0 {
            self.start = batch.start + range.start as u64;
        }
        for h in 0..self.keys.len() {
            self.keys[h].extend_from_slice(&batch.head_keys(h)[range.start * d..range.end * d]);
            self.values[h]
                .extend_from_slice(&batch.head_values(h)[range.start * d..range.end * d]);
            self.maw[h].extend_from_slice(&batch.head_maw(h)[range.clone()]);
        }
        self.occupancy += range.len();
    }
}

/// The window tier of one layer.
#[derive(Debug, Clone)]
pub struct WindowCache {
    layer_id: usize,
    num_heads: usize,
    head_dim: usize,
    blk_num: usize,
    blk_size: usize,
    slots: Vec<KvBlock>,
    /// Slot holding the oldest resident block.
    tail: usize,
    /// Number of occupied slots, starting at `tail`.
    used: usize,
    len: usize,
    next_position: u64,
}

impl WindowCache {
    pub fn new(layer_id: usize, num_heads: usize, head_dim: usize, config: &CacheConfig) -> Result<Self> {
        config.validate()?;
        if num_heads == 0 || head_dim == 0 {
            return Err(contract("window cache needs num_heads >= 1 and head_dim >= 1"));
        }
        Ok(Self {
            layer_id,
            num_heads,
            head_dim,
            blk_num: config.blk_num,
            blk_size: config.blk_size,
            slots: (0..config.blk_num)
                .map(|_| KvBlock::empty(num_heads, head_dim, config.blk_size))
                .collect(),
            tail: 0,
            used: 0,
            len: 0,
            next_position: 0,
        })
    }

    pub fn layer_id(&self) -> usize {
        self.layer_id
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn blk_size(&self) -> usize {
        self.blk_size
    }

    /// Resident entry count.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `blk_num * blk_size`.
    pub fn capacity(&self) -> usize {
        self.blk_num * self.blk_size
    }

    /// Position the next appended entry must carry.
    pub fn next_position(&self) -> u64 {
        self.next_position
    }

    /// Positions currently resident (a contiguous suffix of the sequence).
    pub fn positions(&self) -> Range<u64> {
        self.next_position - self.len as u64..self.next_position
    }

    /// Resident blocks, oldest first.
    pub fn blocks(&self) -> impl Iterator<Item = &KvBlock> + '_ {
        (0..self.used).map(move |i| &self.slots[(self.tail + i) % self.blk_num])
    }

    fn full_blocks(&self) -> usize {
        self.blocks().filter(|b| b.is_full()).count()
    }

    /// Appends one head's resident keys and values, oldest first.
    pub fn gather_head(&self, head: usize, keys: &mut Vec<f32>, values: &mut Vec<f32>) {
        for b in self.blocks() {
            keys.extend_from_slice(b.keys(head));
            values.extend_from_slice(b.values(head));
        }
    }

    /// One head's MAW values, oldest first.
    pub fn head_maw(&self, head: usize) -> Vec<f32> {
        self.blocks().flat_map(|b| b.maw(head).iter().copied()).collect()
    }

    /// Inserts `kv_in` at the head. The batch must continue the position
    /// sequence and fit in the free capacity.
    pub fn append_kv(&mut self, kv_in: &KvBatch) -> Result<()> {
        if kv_in.num_heads != self.num_heads || kv_in.head_dim != self.head_dim {
            return Err(contract(format!(
                "KV batch shape {}x{} does not match window {}x{}",
                kv_in.num_heads, kv_in.head_dim, self.num_heads, self.head_dim
            )));
        }
        if kv_in.len == 0 {
            return Err(contract("append_kv needs at least one entry"));
        }
        if kv_in.start != self.next_position {
            return Err(contract(format!(
                "position discontinuity: window expects {}, batch starts at {}",
                self.next_position, kv_in.start
            )));
        }
        if self.len + kv_in.len > self.capacity() {
            return Err(contract(format!(
                "appending {} entries overflows window ({} of {} used)",
                kv_in.len,
                self.len,
                self.capacity()
            )));
        }

        let mut done = 0;
        while done < kv_in.len {
            let last = self.used.checked_sub(1).map(|i| (self.tail + i) % self.blk_num);
            let slot = match last {
                Some(s) if !self.slots[s].is_full() => s,
                _ => {
                    let s = (self.tail + self.used) % self.blk_num;
                    self.used += 1;
                    s
                }
            };
            let take = self.slots[slot].free().min(kv_in.len - done);
            self.slots[slot].push(kv_in, done..done + take);
            done += take;
        }
        self.len += kv_in.len;
        self.next_position += kv_in.len as u64;
        Ok(())
    }

    /// Blends the current step's per-head attention weights over the
    /// resident entries (oldest first) into their MAW:
    /// `maw <- (1 - alpha) * maw + alpha * a_gpu`.
    pub fn update_maw(&mut self, a_gpu: &[Vec<f64>], alpha: f64) -> Result<()> {
        check_len("MAW update head count", self.num_heads, a_gpu.len())?;
        for row in a_gpu {
            check_len("MAW update entry count", self.len, row.len())?;
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(contract(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        let mut offset = 0;
        for i in 0..self.used {
            let slot = (self.tail + i) % self.blk_num;
            let block = &mut self.slots[slot];
            for (h, row) in a_gpu.iter().enumerate() {
                for (m, a) in block.maw[h].iter_mut().zip(&row[offset..]) {
                    *m = ((1.0 - alpha) * f64::from(*m) + alpha * a) as f32;
                }
            }
            offset += block.occupancy;
        }
        Ok(())
    }

    /// Number of blocks `evict_if_full(incoming)` would remove.
    fn blocks_to_evict(&self, incoming: usize) -> usize {
        let l_max = self.capacity();
        let l_cur = self.len + incoming;
        if l_cur <= l_max {
            return 0;
        }
        (l_cur - l_max + 1).div_ceil(self.blk_size).min(self.full_blocks())
    }

    /// Makes room for `incoming` entries by removing the oldest full blocks.
    ///
    /// When `len + incoming` exceeds the capacity, evicts
    /// `ceil((len + incoming - capacity + 1) / blk_size)` blocks from the
    /// tail. The partially filled head block is never evicted, so a single
    /// call admits at most `capacity - partial_occupancy` entries; callers
    /// with larger batches go through [`WindowCache::admit`].
    pub fn evict_if_full(&mut self, incoming: usize) -> Result<Vec<KvBlock>> {
        let l_max = self.capacity();
        if incoming > l_max {
            return Err(contract(format!(
                "a step of {incoming} entries exceeds the window capacity {l_max}"
            )));
        }
        let k = self.blocks_to_evict(incoming);
        let free_after = l_max - (self.len - k * self.blk_size);
        if free_after < incoming {
            return Err(contract(format!(
                "cannot free room for {incoming} entries without evicting the partial head block"
            )));
        }
        let mut evicted = Vec::with_capacity(k);
        for _ in 0..k {
            let fresh = KvBlock::empty(self.num_heads, self.head_dim, self.blk_size);
            let block = std::mem::replace(&mut self.slots[self.tail], fresh);
            self.tail = (self.tail + 1) % self.blk_num;
            self.used -= 1;
            self.len -= block.occupancy;
            evicted.push(block);
        }
        Ok(evicted)
    }

    /// Evicts as needed and appends `kv_in`, splitting it when a single
    /// eviction round cannot make enough room. Returns evicted blocks in
    /// eviction (position) order.
    pub fn admit(&mut self, kv_in: &KvBatch) -> Result<Vec<KvBlock>> {
        if kv_in.len > self.capacity() {
            return Err(contract(format!(
                "a step of {} entries exceeds the window capacity {}",
                kv_in.len,
                self.capacity()
            )));
        }
        let mut evicted = Vec::new();
        let mut done = 0;
        while done < kv_in.len {
            let partial = self.len % self.blk_size;
            let chunk = (kv_in.len - done).min(self.capacity() - partial);
            evicted.extend(self.evict_if_full(chunk)?);
            if chunk == kv_in.len {
                self.append_kv(kv_in)?;
            } else {
                self.append_kv(&kv_in.slice(done..done + chunk))?;
            }
            done += chunk;
        }
        Ok(evicted)
    }

    /// Line-oriented state listing: one line per resident block.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, b) in self.blocks().enumerate() {
            let r = b.positions();
            let _ = write!(
                out,
                "layer {} block {} positions {}..{} occupancy {}/{} maw_mean",
                self.layer_id,
                i,
                r.start,
                r.end,
                b.occupancy,
                self.blk_size
            );
            for h in 0..self.num_heads {
                let m = b.maw(h);
                let mean = m.iter().map(|x| f64::from(*x)).sum::<f64>() / m.len().max(1) as f64;
                let _ = write!(out, " {mean:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Hands evicted blocks and their MAW to the store tier, which archives them
/// and selects the salient entries into its context cache.
pub fn offload(store: &mut StoreTier, evicted: Vec<KvBlock>, beta: f64, window_size: usize) -> Result<()> {
    store.ingest_evicted(evicted, beta, window_size)
}
