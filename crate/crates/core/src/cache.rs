//! KV cache lifecycle: residual buffers, group flushing, prefill and decode.
//!
//! Keys are quantized per channel across groups of `G` consecutive tokens,
//! values per token across groups of `G` consecutive channels. The most
//! recent tokens stay in full precision: the key buffer flushes all `R`
//! tokens at once when it fills, the value buffer quantizes its oldest token
//! whenever it grows past `R`. The asymmetry is deliberate and mirrors how
//! the two tensors are consumed.
//!
//! Two placement modes exist for rotary embeddings: `post-rope` rotates keys
//! before they enter the cache, `pre-rope` stores raw keys and rotates on
//! materialization.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{packed_len, quantize_group, QuantParams, QuantizedGroup};
use crate::rope::{apply_rope, DEFAULT_THETA_BASE};
use crate::solver::{precompute, SolverState};
use crate::subspace::{build_subspace, concat_rows};
use crate::trace::TraceData;

/// Where quantization sits relative to the rotary embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantMode {
    #[serde(rename = "post-rope")]
    PostRope,
    #[serde(rename = "pre-rope")]
    PreRope,
}

impl std::fmt::Display for QuantMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QuantMode::PostRope => write!(f, "post-rope"),
            QuantMode::PreRope => write!(f, "pre-rope"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub bits: u8,
    /// Tokens per key quantization group / channels per value group.
    pub group_size: usize,
    /// Full-precision residual buffer length in tokens.
    pub residual_len: usize,
    /// Channels quantized per solver iteration.
    pub block: usize,
    pub lambda: f64,
    /// Query subspace rank.
    pub rank: usize,
    pub mode: QuantMode,
    pub theta_base: f64,
    /// Apply rotary position embeddings at all. Disabled for rotation-free
    /// attention and for isolation experiments; equivalent to every token
    /// sitting at position zero, which makes the two modes coincide.
    pub rotary: bool,
    /// Reuse the first sample's solver state across a batch.
    pub share_solver_state: bool,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            bits: 2,
            group_size: 32,
            residual_len: 32,
            block: 64,
            lambda: 0.001,
            rank: 5,
            mode: QuantMode::PostRope,
            theta_base: DEFAULT_THETA_BASE,
            rotary: true,
            share_solver_state: true,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self, head_dim: usize) -> Result<()> {
        if !(1..=8).contains(&self.bits) {
            return Err(Error::ConfigInvariant {
                constraint: "bits in 1..=8",
                detail: format!("bits = {}", self.bits),
            });
        }
        if self.group_size == 0 || self.residual_len == 0 {
            return Err(Error::ConfigInvariant {
                constraint: "group_size and residual_len positive",
                detail: format!("G = {}, R = {}", self.group_size, self.residual_len),
            });
        }
        if self.residual_len % self.group_size != 0 {
            return Err(Error::ConfigInvariant {
                constraint: "residual_len divisible by group_size",
                detail: format!("R = {}, G = {}", self.residual_len, self.group_size),
            });
        }
        if self.block == 0 || head_dim % self.block != 0 {
            return Err(Error::ConfigInvariant {
                constraint: "block divides head_dim",
                detail: format!("g = {}, d = {}", self.block, head_dim),
            });
        }
        if self.lambda < 0.0 {
            return Err(Error::ConfigInvariant {
                constraint: "lambda >= 0",
                detail: format!("lambda = {}", self.lambda),
            });
        }
        if self.rank == 0 || self.rank > head_dim {
            return Err(Error::ConfigInvariant {
                constraint: "rank in 1..=head_dim",
                detail: format!("r = {}, d = {}", self.rank, head_dim),
            });
        }
        Ok(())
    }
}

/// Residual buffers hold f32-precision rows (the trace interchange dtype);
/// everything entering a buffer is rounded once here.
fn round_f32(v: &DVector<f64>) -> DVector<f64> {
    v.map(|x| x as f32 as f64)
}

/// One flushed key group: `G` tokens, one quantized group per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyGroup {
    pub channels: Vec<QuantizedGroup>,
    pub tokens: usize,
}

/// One quantized value token: its channels split into groups of `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTokenGroups {
    pub groups: Vec<QuantizedGroup>,
}

/// Token ledger of one head's cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounts {
    pub token_count: usize,
    pub key_quantized: usize,
    pub key_residual: usize,
    pub value_quantized: usize,
    pub value_residual: usize,
}

/// Quantized and full-precision stores for one (layer, head).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    dim: usize,
    key_groups: Vec<KeyGroup>,
    value_tokens: Vec<ValueTokenGroups>,
    key_residual: Vec<DVector<f64>>,
    value_residual: Vec<DVector<f64>>,
    key_quantized_tokens: usize,
    token_count: usize,
}

impl HeadCache {
    fn new(dim: usize) -> Self {
        Self {
            dim,
            key_groups: Vec::new(),
            value_tokens: Vec::new(),
            key_residual: Vec::new(),
            value_residual: Vec::new(),
            key_quantized_tokens: 0,
            token_count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn key_groups(&self) -> &[KeyGroup] {
        &self.key_groups
    }

    pub fn value_tokens(&self) -> &[ValueTokenGroups] {
        &self.value_tokens
    }

    pub fn key_residual_len(&self) -> usize {
        self.key_residual.len()
    }

    pub fn value_residual_len(&self) -> usize {
        self.value_residual.len()
    }

    pub fn counts(&self) -> CacheCounts {
        CacheCounts {
            token_count: self.token_count,
            key_quantized: self.key_quantized_tokens,
            key_residual: self.key_residual.len(),
            value_quantized: self.value_tokens.len(),
            value_residual: self.value_residual.len(),
        }
    }

    fn quantize_value_row(&self, row: &DVector<f64>, cfg: &CacheConfig) -> Result<ValueTokenGroups> {
        let mut groups = Vec::with_capacity(self.dim.div_ceil(cfg.group_size));
        let mut start = 0;
        while start < self.dim {
            let len = cfg.group_size.min(self.dim - start);
            let chunk: Vec<f64> = (start..start + len).map(|c| row[c]).collect();
            groups.push(quantize_group(&chunk, cfg.bits)?);
            start += len;
        }
        Ok(ValueTokenGroups { groups })
    }

    /// Quantize `rows` (must be a multiple of `G` tokens) into key groups.
    fn quantize_key_rows(
        rows: &[DVector<f64>],
        state: &SolverState,
        cfg: &CacheConfig,
        dim: usize,
    ) -> Result<Vec<KeyGroup>> {
        debug_assert_eq!(rows.len() % cfg.group_size, 0);
        let group_count = rows.len() / cfg.group_size;
        (0..group_count)
            .into_par_iter()
            .map(|gi| {
                let slice = &rows[gi * cfg.group_size..(gi + 1) * cfg.group_size];
                let mat = DMatrix::from_fn(cfg.group_size, dim, |i, j| slice[i][j]);
                let (channels, _) = state.quantize_key_block(&mat, cfg.bits)?;
                Ok(KeyGroup {
                    channels,
                    tokens: cfg.group_size,
                })
            })
            .collect()
    }

    fn append(
        &mut self,
        key: DVector<f64>,
        value: DVector<f64>,
        state: &SolverState,
        cfg: &CacheConfig,
    ) -> Result<()> {
        if key.len() != self.dim || value.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: key.len().max(value.len()),
            });
        }
        let position = self.token_count as i64;
        let key = if cfg.rotary && cfg.mode == QuantMode::PostRope {
            apply_rope(&key, position, cfg.theta_base)?
        } else {
            key
        };
        self.key_residual.push(round_f32(&key));
        self.value_residual.push(round_f32(&value));
        self.token_count += 1;

        if self.key_residual.len() == cfg.residual_len {
            let rows = std::mem::take(&mut self.key_residual);
            let flushed = Self::quantize_key_rows(&rows, state, cfg, self.dim)?;
            self.key_quantized_tokens += rows.len();
            self.key_groups.extend(flushed);
        }
        if self.value_residual.len() == cfg.residual_len + 1 {
            let oldest = self.value_residual.remove(0);
            let quantized = self.quantize_value_row(&oldest, cfg)?;
            self.value_tokens.push(quantized);
        }
        Ok(())
    }

    fn prefill(
        keys: &DMatrix<f64>,
        values: &DMatrix<f64>,
        state: &SolverState,
        cfg: &CacheConfig,
    ) -> Result<Self> {
        let dim = keys.ncols();
        let len = keys.nrows();
        let mut head = Self::new(dim);
        head.token_count = len;

        let mut key_rows: Vec<DVector<f64>> = Vec::with_capacity(len);
        for i in 0..len {
            let row = keys.row(i).transpose();
            let row = if cfg.rotary && cfg.mode == QuantMode::PostRope {
                apply_rope(&row, i as i64, cfg.theta_base)?
            } else {
                row
            };
            key_rows.push(round_f32(&row));
        }

        let remainder = len % cfg.residual_len;
        let quantized_tokens = len - remainder;
        head.key_groups =
            Self::quantize_key_rows(&key_rows[..quantized_tokens], state, cfg, dim)?;
        head.key_quantized_tokens = quantized_tokens;
        head.key_residual = key_rows.split_off(quantized_tokens);

        // Values keep a sliding window of the most recent R tokens.
        let value_quantized = len.saturating_sub(cfg.residual_len);
        head.value_tokens = (0..value_quantized)
            .into_par_iter()
            .map(|i| head.quantize_value_row(&round_f32(&values.row(i).transpose()), cfg))
            .collect::<Result<_>>()?;
        head.value_residual = (value_quantized..len)
            .map(|i| round_f32(&values.row(i).transpose()))
            .collect();
        Ok(head)
    }

    /// Dequantize everything into `(keys, values)` of shape `token_count × d`,
    /// in token order. In pre-rope mode keys are rotated here, by position.
    pub fn materialize(&self, cfg: &CacheConfig) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let n = self.token_count;
        let d = self.dim;
        let mut keys = DMatrix::zeros(n, d);
        let mut token = 0usize;
        for group in &self.key_groups {
            if group.channels.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: group.channels.len(),
                });
            }
            for (c, channel) in group.channels.iter().enumerate() {
                let deq = channel.dequantize()?;
                for (i, &x) in deq.iter().enumerate() {
                    keys[(token + i, c)] = x;
                }
            }
            token += group.tokens;
        }
        for row in &self.key_residual {
            for c in 0..d {
                keys[(token, c)] = row[c];
            }
            token += 1;
        }
        debug_assert_eq!(token, n);

        if cfg.rotary && cfg.mode == QuantMode::PreRope {
            for i in 0..n {
                let roped = apply_rope(&keys.row(i).transpose(), i as i64, cfg.theta_base)?;
                for c in 0..d {
                    keys[(i, c)] = roped[c];
                }
            }
        }

        let mut values = DMatrix::zeros(n, d);
        let mut token = 0usize;
        for vt in &self.value_tokens {
            let mut c = 0usize;
            for group in &vt.groups {
                let deq = group.dequantize()?;
                for &x in &deq {
                    values[(token, c)] = x;
                    c += 1;
                }
            }
            if c != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: c,
                });
            }
            token += 1;
        }
        for row in &self.value_residual {
            for c in 0..d {
                values[(token, c)] = row[c];
            }
            token += 1;
        }
        debug_assert_eq!(token, n);
        Ok((keys, values))
    }
}

/// Per-(layer, head) solver states, shared read-only.
pub type SolverGrid = Vec<Vec<Arc<SolverState>>>;

/// Full cache for one sequence: one [`HeadCache`] per (layer, KV head).
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub config: CacheConfig,
    layers: usize,
    kv_heads: usize,
    dim: usize,
    heads: Vec<Vec<HeadCache>>,
}

impl KvCache {
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadCache {
        &self.heads[layer][head]
    }

    pub fn token_count(&self) -> usize {
        self.heads[0][0].token_count()
    }

    pub fn materialize_head(&self, layer: usize, head: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.heads[layer][head].materialize(&self.config)
    }

    /// Append one decode step: a key and value row per (layer, KV head).
    pub fn append_decode(
        &mut self,
        states: &SolverGrid,
        keys: &[Vec<DVector<f64>>],
        values: &[Vec<DVector<f64>>],
    ) -> Result<()> {
        if keys.len() != self.layers || values.len() != self.layers {
            return Err(Error::DimensionMismatch {
                expected: self.layers,
                actual: keys.len(),
            });
        }
        for layer in 0..self.layers {
            if keys[layer].len() != self.kv_heads || values[layer].len() != self.kv_heads {
                return Err(Error::DimensionMismatch {
                    expected: self.kv_heads,
                    actual: keys[layer].len(),
                });
            }
            for head in 0..self.kv_heads {
                self.heads[layer][head].append(
                    keys[layer][head].clone(),
                    values[layer][head].clone(),
                    &states[layer][head],
                    &self.config,
                )?;
            }
        }
        Ok(())
    }

    /// Append token `index` of a trace as one decode step.
    pub fn append_from_trace(
        &mut self,
        states: &SolverGrid,
        trace: &TraceData,
        index: usize,
    ) -> Result<()> {
        let keys: Vec<Vec<DVector<f64>>> = trace
            .keys
            .iter()
            .map(|per_layer| per_layer.iter().map(|m| m.row(index).transpose()).collect())
            .collect();
        let values: Vec<Vec<DVector<f64>>> = trace
            .values
            .iter()
            .map(|per_layer| per_layer.iter().map(|m| m.row(index).transpose()).collect())
            .collect();
        self.append_decode(states, &keys, &values)
    }
}

/// Build each (layer, KV head)'s solver state from the prompt queries.
///
/// Query heads sharing a KV head are stacked row-wise before the SVD. In
/// post-rope mode the queries are rotated by token position first, matching
/// the space the keys are quantized in.
pub fn build_solver_grid(
    trace: &TraceData,
    prompt_len: usize,
    cfg: &CacheConfig,
) -> Result<SolverGrid> {
    let m = &trace.manifest;
    let gqa = m.gqa_group();
    let rank = cfg.rank.min(m.head_dim);
    let jobs: Vec<(usize, usize)> = (0..m.layers)
        .flat_map(|l| (0..m.kv_heads).map(move |h| (l, h)))
        .collect();
    let states: Vec<Arc<SolverState>> = jobs
        .par_iter()
        .map(|&(layer, head)| {
            let mut pooled: Vec<DMatrix<f64>> = Vec::with_capacity(gqa);
            for q in 0..gqa {
                let full = &trace.queries[layer][head * gqa + q];
                let mut prompt = full.rows(0, prompt_len).clone_owned();
                if cfg.rotary && cfg.mode == QuantMode::PostRope {
                    for i in 0..prompt_len {
                        let roped =
                            apply_rope(&prompt.row(i).transpose(), i as i64, cfg.theta_base)?;
                        for c in 0..m.head_dim {
                            prompt[(i, c)] = roped[c];
                        }
                    }
                }
                pooled.push(prompt);
            }
            let refs: Vec<&DMatrix<f64>> = pooled.iter().collect();
            let stacked = concat_rows(&refs)?;
            let sub = build_subspace(&stacked, rank)?;
            Ok(Arc::new(precompute(&sub, cfg.lambda, cfg.block)?))
        })
        .collect::<Result<_>>()?;

    let mut grid: SolverGrid = Vec::with_capacity(m.layers);
    let mut iter = states.into_iter();
    for _ in 0..m.layers {
        grid.push((0..m.kv_heads).map(|_| iter.next().expect("state per head")).collect());
    }
    Ok(grid)
}

/// Run the prefill phase over the trace's prompt tokens.
pub fn prefill(trace: &TraceData, cfg: &CacheConfig) -> Result<(KvCache, SolverGrid)> {
    trace.validate()?;
    let m = &trace.manifest;
    cfg.validate(m.head_dim)?;
    let prompt_len = m.prompt_len;
    if prompt_len == 0 {
        return Err(Error::ConfigInvariant {
            constraint: "prompt length >= 1",
            detail: "trace has an empty prompt".into(),
        });
    }
    let states = build_solver_grid(trace, prompt_len, cfg)?;
    let cache = prefill_with_states(trace, prompt_len, cfg, &states)?;
    Ok((cache, states))
}

fn prefill_with_states(
    trace: &TraceData,
    prompt_len: usize,
    cfg: &CacheConfig,
    states: &SolverGrid,
) -> Result<KvCache> {
    let m = &trace.manifest;
    let jobs: Vec<(usize, usize)> = (0..m.layers)
        .flat_map(|l| (0..m.kv_heads).map(move |h| (l, h)))
        .collect();
    let heads_flat: Vec<HeadCache> = jobs
        .par_iter()
        .map(|&(layer, head)| {
            let keys = trace.keys[layer][head].rows(0, prompt_len).clone_owned();
            let values = trace.values[layer][head].rows(0, prompt_len).clone_owned();
            HeadCache::prefill(&keys, &values, &states[layer][head], cfg)
        })
        .collect::<Result<_>>()?;

    let mut heads = Vec::with_capacity(m.layers);
    let mut iter = heads_flat.into_iter();
    for _ in 0..m.layers {
        heads.push((0..m.kv_heads).map(|_| iter.next().expect("head cache")).collect());
    }
    Ok(KvCache {
        config: cfg.clone(),
        layers: m.layers,
        kv_heads: m.kv_heads,
        dim: m.head_dim,
        heads,
    })
}

/// Prefill several sequences. With `share_solver_state` set, the solver
/// matrices come from the first sequence and are shared across the batch;
/// otherwise each sequence gets its own.
pub fn prefill_batch(traces: &[&TraceData], cfg: &CacheConfig) -> Result<Vec<(KvCache, SolverGrid)>> {
    if traces.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    let mut out = Vec::with_capacity(traces.len());
    let shared: Option<SolverGrid> = if cfg.share_solver_state {
        let m = &traces[0].manifest;
        Some(build_solver_grid(traces[0], m.prompt_len, cfg)?)
    } else {
        None
    };
    for trace in traces {
        trace.validate()?;
        let m = &trace.manifest;
        cfg.validate(m.head_dim)?;
        let states = match &shared {
            Some(grid) => grid.iter().map(|row| row.to_vec()).collect(),
            None => build_solver_grid(trace, m.prompt_len, cfg)?,
        };
        let cache = prefill_with_states(trace, m.prompt_len, cfg, &states)?;
        out.push((cache, states));
    }
    Ok(out)
}

/// Full-precision KV cache bytes: `2 · batch · seq_len · layers · heads · head_dim · bytes_per_param`.
pub fn estimate_memory(
    batch: u64,
    seq_len: u64,
    layers: u64,
    heads: u64,
    head_dim: u64,
    bytes_per_param: u64,
) -> u64 {
    2 * batch * seq_len * layers * heads * head_dim * bytes_per_param
}

/// Exact serialized size of a cache's binary payload: packed codes, one f32
/// zero-point/scale pair per group, and full-precision residual rows.
pub fn estimate_quantized_size(cache: &KvCache) -> u64 {
    let mut bytes = 0u64;
    for per_layer in &cache.heads {
        for head in per_layer {
            for group in &head.key_groups {
                for channel in &group.channels {
                    bytes += channel.stored_bytes() as u64;
                }
            }
            for vt in &head.value_tokens {
                for group in &vt.groups {
                    bytes += group.stored_bytes() as u64;
                }
            }
            let d = head.dim as u64;
            bytes += head.key_residual.len() as u64 * d * 4;
            bytes += head.value_residual.len() as u64 * d * 4;
        }
    }
    bytes
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadSummary {
    token_count: usize,
    key_groups: usize,
    key_residual: usize,
    value_tokens: usize,
    value_residual: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheManifest {
    config: CacheConfig,
    layers: usize,
    kv_heads: usize,
    head_dim: usize,
    heads: Vec<Vec<HeadSummary>>,
}

fn value_group_sizes(dim: usize, group_size: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(dim.div_ceil(group_size));
    let mut start = 0;
    while start < dim {
        let len = group_size.min(dim - start);
        sizes.push(len);
        start += len;
    }
    sizes
}

fn push_group(codes: &mut Vec<u8>, params: &mut Vec<u8>, group: &QuantizedGroup) {
    codes.extend_from_slice(group.packed_bytes());
    params.extend_from_slice(&group.params().zero_point.to_le_bytes());
    params.extend_from_slice(&group.params().scale.to_le_bytes());
}

fn push_rows(bytes: &mut Vec<u8>, rows: &[DVector<f64>]) {
    for row in rows {
        for &x in row.iter() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
}

/// Serialize a cache: JSON manifest plus little-endian binary blobs.
pub fn write_cache(cache: &KvCache, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CacheManifest {
        config: cache.config.clone(),
        layers: cache.layers,
        kv_heads: cache.kv_heads,
        head_dim: cache.dim,
        heads: cache
            .heads
            .iter()
            .map(|per_layer| {
                per_layer
                    .iter()
                    .map(|h| HeadSummary {
                        token_count: h.token_count,
                        key_groups: h.key_groups.len(),
                        key_residual: h.key_residual.len(),
                        value_tokens: h.value_tokens.len(),
                        value_residual: h.value_residual.len(),
                    })
                    .collect()
            })
            .collect(),
    };
    fs::write(
        dir.join("cache.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    let mut key_codes = Vec::new();
    let mut key_params = Vec::new();
    let mut value_codes = Vec::new();
    let mut value_params = Vec::new();
    let mut key_residual = Vec::new();
    let mut value_residual = Vec::new();
    for per_layer in &cache.heads {
        for head in per_layer {
            for group in &head.key_groups {
                for channel in &group.channels {
                    push_group(&mut key_codes, &mut key_params, channel);
                }
            }
            for vt in &head.value_tokens {
                for group in &vt.groups {
                    push_group(&mut value_codes, &mut value_params, group);
                }
            }
            push_rows(&mut key_residual, &head.key_residual);
            push_rows(&mut value_residual, &head.value_residual);
        }
    }
    fs::write(dir.join("key_codes.bin"), key_codes)?;
    fs::write(dir.join("key_params.bin"), key_params)?;
    fs::write(dir.join("value_codes.bin"), value_codes)?;
    fs::write(dir.join("value_params.bin"), value_params)?;
    fs::write(dir.join("key_residual.bin"), key_residual)?;
    fs::write(dir.join("value_residual.bin"), value_residual)?;
    Ok(())
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'static str,
}

impl<'a> BlobReader<'a> {
    fn new(bytes: &'a [u8], path: &'static str) -> Self {
        Self {
            bytes,
            offset: 0,
            path,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::BlobSize {
                path: self.path.to_string(),
                expected: (self.offset + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn take_f32(&mut self) -> Result<f32> {
        let raw = self.take(4)?;
        Ok(f32::from_le_bytes(raw.try_into().expect("4 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(Error::BlobSize {
                path: self.path.to_string(),
                expected: self.offset as u64,
                actual: self.bytes.len() as u64,
            });
        }
        Ok(())
    }
}

fn read_group(
    codes: &mut BlobReader,
    params: &mut BlobReader,
    len: usize,
    bits: u8,
) -> Result<QuantizedGroup> {
    let packed = codes.take(packed_len(len, bits))?.to_vec();
    let zero_point = params.take_f32()?;
    let scale = params.take_f32()?;
    QuantizedGroup::from_parts(
        packed,
        QuantParams {
            bits,
            zero_point,
            scale,
        },
        len,
    )
}

fn read_rows(reader: &mut BlobReader, count: usize, dim: usize) -> Result<Vec<DVector<f64>>> {
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        let mut row = DVector::zeros(dim);
        for c in 0..dim {
            row[c] = reader.take_f32()? as f64;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Load a cache serialized by [`write_cache`].
pub fn read_cache(dir: &Path) -> Result<KvCache> {
    let manifest: CacheManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("cache.json"))?)?;
    let cfg = manifest.config.clone();
    cfg.validate(manifest.head_dim)?;

    let key_codes_bytes = fs::read(dir.join("key_codes.bin"))?;
    let key_params_bytes = fs::read(dir.join("key_params.bin"))?;
    let value_codes_bytes = fs::read(dir.join("value_codes.bin"))?;
    let value_params_bytes = fs::read(dir.join("value_params.bin"))?;
    let key_residual_bytes = fs::read(dir.join("key_residual.bin"))?;
    let value_residual_bytes = fs::read(dir.join("value_residual.bin"))?;

    let mut key_codes = BlobReader::new(&key_codes_bytes, "key_codes.bin");
    let mut key_params = BlobReader::new(&key_params_bytes, "key_params.bin");
    let mut value_codes = BlobReader::new(&value_codes_bytes, "value_codes.bin");
    let mut value_params = BlobReader::new(&value_params_bytes, "value_params.bin");
    let mut key_residual = BlobReader::new(&key_residual_bytes, "key_residual.bin");
    let mut value_residual = BlobReader::new(&value_residual_bytes, "value_residual.bin");

    let dim = manifest.head_dim;
    let sizes = value_group_sizes(dim, cfg.group_size);
    if manifest.heads.len() != manifest.layers {
        return Err(Error::Manifest("layer count mismatch".into()));
    }
    let mut heads = Vec::with_capacity(manifest.layers);
    for per_layer in &manifest.heads {
        if per_layer.len() != manifest.kv_heads {
            return Err(Error::Manifest("head count mismatch".into()));
        }
        let mut row = Vec::with_capacity(manifest.kv_heads);
        for summary in per_layer {
            let mut head = HeadCache::new(dim);
            head.token_count = summary.token_count;
            for _ in 0..summary.key_groups {
                let channels = (0..dim)
                    .map(|_| read_group(&mut key_codes, &mut key_params, cfg.group_size, cfg.bits))
                    .collect::<Result<_>>()?;
                head.key_groups.push(KeyGroup {
                    channels,
                    tokens: cfg.group_size,
                });
            }
            head.key_quantized_tokens = summary.key_groups * cfg.group_size;
            for _ in 0..summary.value_tokens {
                let groups = sizes
                    .iter()
                    .map(|&len| read_group(&mut value_codes, &mut value_params, len, cfg.bits))
                    .collect::<Result<_>>()?;
                head.value_tokens.push(ValueTokenGroups { groups });
            }
            head.key_residual = read_rows(&mut key_residual, summary.key_residual, dim)?;
            head.value_residual = read_rows(&mut value_residual, summary.value_residual, dim)?;

            let counts = head.counts();
            if counts.key_quantized + counts.key_residual != counts.token_count
                || counts.value_quantized + counts.value_residual != counts.token_count
            {
                return Err(Error::Manifest(format!(
                    "token ledger inconsistent: {counts:?}"
                )));
            }
            row.push(head);
        }
        heads.push(row);
    }
    for reader in [
        &key_codes,
        &key_params,
        &value_codes,
        &value_params,
        &key_residual,
        &value_residual,
    ] {
        reader.finish()?;
    }
    Ok(KvCache {
        config: cfg,
        layers: manifest.layers,
        kv_heads: manifest.kv_heads,
        dim,
        heads,
    })
}
