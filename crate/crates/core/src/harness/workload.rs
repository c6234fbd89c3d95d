//! Synthetic Q/KV streams with controllable attention structure, and the
//! workload file format.
//!
//! For head `h` with recency rate `λ_h`, query row `t` scores entry `p` as
//!
//! - `λ_h · p + noise` for an ordinary entry, so the oracle weight of an
//!   entry decays like `exp(-λ_h · (t - p))` with its distance to the query;
//! - `λ_h · t + gap_p + noise` for a *special* entry (sink or heavy hitter),
//!   which keeps its weight at `exp(gap_p)` times the newest entry's weight
//!   however far it falls behind.
//!
//! Three key components realise this through plain dot products:
//! component 0 carries the position ramp, component 1 the "keeps pace with
//! the query" flag of special entries and component 2 their gap. The rest
//! is isotropic noise. The construction assumes the default score scale
//! `1/sqrt(head_dim)` and needs `head_dim >= 3`.
//!
//! # File format
//!
//! Line-oriented text. The header is
//! `hybridattn-workload v1 layers=L heads=H head_dim=D steps=S`, followed by
//! one line per step: `<decode|append> <start>..<end>` and then, for every
//! layer in order, three base64 fields (standard alphabet, padded) holding
//! the little-endian `f32` queries, keys and values, each laid out
//! `[heads × (end - start) × head_dim]`.

use std::io::{BufRead, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ModelShape;
use crate::error::{contract, io_err, Error, Result};
use crate::hybrid_engine::{LayerInputs, StepMode, Workload, WorkloadStep};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    pub seed: u64,
    /// Decode steps after the prefill.
    pub steps: usize,
    pub prefill_len: usize,
    /// The prefill is fed as append steps of at most this many entries.
    pub prefill_chunk: usize,
    /// `(decode step, length)`: an append of `length` entries issued before
    /// that decode step (`step == steps` appends at the end).
    pub append_events: Vec<(usize, usize)>,
    /// Leading entries that act as attention sinks.
    pub sink_count: usize,
    /// Log-weight of a sink relative to the newest entry.
    pub sink_boost: f64,
    /// Heavy hitters planted per layer and head in the first half of the
    /// sequence; zero boost plants none.
    pub heavy_hitter_count: usize,
    /// Heavy-hitter log-weights relative to the newest entry are drawn
    /// uniformly from `[boost/2, boost]`.
    pub heavy_hitter_boost: f64,
    /// Per-position weight decay of ordinary entries (head-averaged).
    pub recency_decay: f64,
    /// Standard deviation of the score noise.
    pub noise_scale: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            steps: 2048,
            prefill_len: 64,
            prefill_chunk: 64,
            append_events: vec![(1024, 32)],
            sink_count: 4,
            sink_boost: 1.0,
            heavy_hitter_count: 8,
            heavy_hitter_boost: 3.0,
            recency_decay: 0.97,
            noise_scale: 0.5,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.recency_decay > 0.0 && self.recency_decay < 1.0) {
            return Err(contract(format!(
                "recency_decay must lie in (0, 1), got {}",
                self.recency_decay
            )));
        }
        if !(self.noise_scale >= 0.0 && self.heavy_hitter_boost >= 0.0) {
            return Err(contract("noise_scale and heavy_hitter_boost must be >= 0"));
        }
        if self.prefill_chunk == 0 {
            return Err(contract("prefill_chunk must be >= 1"));
        }
        if let Some((s, _)) = self.append_events.iter().find(|(s, _)| *s > self.steps) {
            return Err(contract(format!("append event at step {s} is past the last step")));
        }
        if self.append_events.iter().any(|(_, l)| *l == 0) {
            return Err(contract("append events need a positive length"));
        }
        if self.total_tokens() == 0 {
            return Err(contract("workload generates no tokens"));
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> usize {
        self.prefill_len + self.steps + self.append_events.iter().map(|(_, l)| l).sum::<usize>()
    }

    /// Step modes and lengths in order.
    pub fn schedule(&self) -> Vec<(StepMode, usize)> {
        let mut out = Vec::new();
        let mut left = self.prefill_len;
        while left > 0 {
            let n = left.min(self.prefill_chunk);
            out.push((StepMode::Append, n));
            left -= n;
        }
        for i in 0..=self.steps {
            for &(_, len) in self.append_events.iter().filter(|(s, _)| *s == i) {
                out.push((StepMode::Append, len));
            }
            if i < self.steps {
                out.push((StepMode::Decode, 1));
            }
        }
        out
    }

    /// Recency rate of `head`: the base rate scaled into `[0.5, 1.5]` across
    /// heads so some heads are sharp and some flat.
    pub fn recency_rate(&self, head: usize, heads: usize) -> f64 {
        let base = -self.recency_decay.ln();
        let spread = if heads > 1 {
            head as f64 / (heads - 1) as f64
        } else {
            0.5
        };
        base * (0.5 + spread)
    }

    /// Special entries of `(layer, head)`: position and log-weight gap.
    pub fn special_entries(&self, layer: usize, head: usize, heads: usize) -> Vec<(usize, f64)> {
        let total = self.total_tokens();
        let mut out: Vec<(usize, f64)> = (0..self.sink_count.min(total))
            .map(|p| (p, self.sink_boost))
            .collect();
        if self.heavy_hitter_boost > 0.0 && self.heavy_hitter_count > 0 {
            let lo = self.sink_count;
            let hi = (total / 2).max(lo + 1).min(total);
            if hi > lo {
                let mut rng = stream_rng(self.seed, layer, head, heads, 1);
                let n = self.heavy_hitter_count.min(hi - lo);
                let mut picks: Vec<usize> = sample(&mut rng, hi - lo, n).into_iter().map(|i| lo + i).collect();
                picks.sort_unstable();
                let b = self.heavy_hitter_boost;
                out.extend(picks.into_iter().map(|p| (p, rng.random_range(b / 2.0..=b))));
            }
        }
        out
    }
}

fn stream_rng(seed: u64, layer: usize, head: usize, heads: usize, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((((layer * heads + head) as u64) << 4) | tag);
    rng
}

/// Generates the full stream for `shape`; deterministic in `spec.seed`.
pub fn gen_workload(spec: &WorkloadSpec, shape: &ModelShape) -> Result<Workload> {
    spec.validate()?;
    shape.validate()?;
    if shape.head_dim < 3 {
        return Err(contract("workload generation needs head_dim >= 3"));
    }
    let (h, d) = (shape.heads, shape.head_dim);
    let total = spec.total_tokens();
    let sigma = (d as f64).sqrt();
    let key_noise = Normal::new(0.0, spec.noise_scale).map_err(|e| contract(e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    // [layer][head] -> token-major q/k/v of the whole sequence
    let mut streams = Vec::with_capacity(shape.layers);
    for layer in 0..shape.layers {
        let mut heads = Vec::with_capacity(h);
        for head in 0..h {
            let lambda = spec.recency_rate(head, h);
            let mut gap = vec![None; total];
            for (p, g) in spec.special_entries(layer, head, h) {
                gap[p] = Some(g);
            }
            let mut rng = stream_rng(spec.seed, layer, head, h, 2);
            let mut q = vec![0.0f32; total * d];
            let mut k = vec![0.0f32; total * d];
            let mut v = vec![0.0f32; total * d];
            for p in 0..total {
                let (qr, kr, vr) = (
                    &mut q[p * d..(p + 1) * d],
                    &mut k[p * d..(p + 1) * d],
                    &mut v[p * d..(p + 1) * d],
                );
                qr[0] = (sigma * lambda) as f32;
                qr[1] = (sigma * lambda * p as f64) as f32;
                qr[2] = sigma as f32;
                match gap[p] {
                    None => kr[0] = p as f32,
                    Some(g) => {
                        kr[1] = 1.0;
                        kr[2] = g as f32;
                    }
                }
                for c in 3..d {
                    qr[c] = unit.sample(&mut rng) as f32;
                    kr[c] = key_noise.sample(&mut rng) as f32;
                }
                for x in vr.iter_mut() {
                    *x = unit.sample(&mut rng) as f32;
                }
            }
            heads.push((q, k, v));
        }
        streams.push(heads);
    }

    let mut steps = Vec::new();
    let mut start = 0usize;
    for (mode, len) in spec.schedule() {
        let layers = streams
            .iter()
            .map(|heads| {
                let mut li = LayerInputs {
                    queries: Vec::with_capacity(h * len * d),
                    keys: Vec::with_capacity(h * len * d),
                    values: Vec::with_capacity(h * len * d),
                };
                for (q, k, v) in heads {
                    let r = start * d..(start + len) * d;
                    li.queries.extend_from_slice(&q[r.clone()]);
                    li.keys.extend_from_slice(&k[r.clone()]);
                    li.values.extend_from_slice(&v[r]);
                }
                li
            })
            .collect();
        steps.push(WorkloadStep {
            mode,
            start: start as u64,
            len,
            layers,
        });
        start += len;
    }
    Ok(Workload { shape: *shape, steps })
}

fn encode(xs: &[f32]) -> String {
    let bytes: Vec<u8> = xs.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(field: &str, expected: usize, line: usize) -> Result<Vec<f32>> {
    let bad = |msg: String| Error::WorkloadFormat { line, msg };
    let bytes = STANDARD.decode(field).map_err(|e| bad(e.to_string()))?;
    if bytes.len() != expected * 4 {
        return Err(bad(format!("expected {expected} floats, found {} bytes", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_workload<W: Write>(w: &Workload, mut out: W) -> std::io::Result<()> {
    let s = &w.shape;
    writeln!(
        out,
        "hybridattn-workload v1 layers={} heads={} head_dim={} steps={}",
        s.layers,
        s.heads,
        s.head_dim,
        w.steps.len()
    )?;
    for step in &w.steps {
        write!(
            out,
            "{} {}..{}",
            step.mode.as_str(),
            step.start,
            step.start + step.len as u64
        )?;
        for li in &step.layers {
            write!(
                out,
                " {} {} {}",
                encode(&li.queries),
                encode(&li.keys),
                encode(&li.values)
            )?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn header_field(tokens: &[&str], key: &str) -> Result<usize> {
    tokens
        .iter()
        .find_map(|t| t.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::WorkloadFormat {
            line: 1,
            msg: format!("header is missing {key}=<count>"),
        })
}

pub fn read_workload<R: BufRead>(input: R) -> Result<Workload> {
    let mut lines = input.lines().enumerate();
    let io = |e: std::io::Error| Error::WorkloadFormat {
        line: 0,
        msg: e.to_string(),
    };
    let header = match lines.next() {
        Some((_, l)) => l.map_err(io)?,
        None => {
            return Err(Error::WorkloadFormat {
                line: 1,
                msg: "empty file".into(),
            })
        }
    };
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.first() != Some(&"hybridattn-workload") || tokens.get(1) != Some(&"v1") {
        return Err(Error::WorkloadFormat {
            line: 1,
            msg: "not a hybridattn-workload v1 file".into(),
        });
    }
    let shape = ModelShape {
        layers: header_field(&tokens, "layers")?,
        heads: header_field(&tokens, "heads")?,
        head_dim: header_field(&tokens, "head_dim")?,
    };
    shape.validate()?;
    let n_steps = header_field(&tokens, "steps")?;

    let mut steps = Vec::with_capacity(n_steps);
    let mut next = 0u64;
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::WorkloadFormat {
            line: lineno,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 + 3 * shape.layers {
            return Err(bad("wrong number of fields"));
        }
        let mode = match fields[0] {
            "decode" => StepMode::Decode,
            "append" => StepMode::Append,
            _ => return Err(bad("mode must be decode or append")),
        };
        let (a, b) = fields[1].split_once("..").ok_or_else(|| bad("bad position range"))?;
        let start: u64 = a.parse().map_err(|_| bad("bad range start"))?;
        let end: u64 = b.parse().map_err(|_| bad("bad range end"))?;
        if end <= start || start != next {
            return Err(bad("position ranges must be non-empty and contiguous"));
        }
        let len = (end - start) as usize;
        let n = shape.heads * len * shape.head_dim;
        let layers = fields[2..]
            .chunks_exact(3)
            .map(|f| {
                Ok(LayerInputs {
                    queries: decode(f[0], n, lineno)?,
                    keys: decode(f[1], n, lineno)?,
                    values: decode(f[2], n, lineno)?,
                })
            })
            .collect::<Result<_>>()?;
        steps.push(WorkloadStep {
            mode,
            start,
            len,
            layers,
        });
        next = end;
    }
    if steps.len() != n_steps {
        return Err(Error::WorkloadFormat {
            line: 1,
            msg: format!("header announces {n_steps} steps, file has {}", steps.len()),
        });
    }
    Ok(Workload { shape, steps })
}

pub fn save_workload(w: &Workload, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut buf = std::io::BufWriter::new(file);
    write_workload(w, &mut buf).map_err(io_err(path))?;
    buf.flush().map_err(io_err(path))
}

pub fn load_workload(path: &Path) -> Result<Workload> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    read_workload(std::io::BufReader::new(file))
}
