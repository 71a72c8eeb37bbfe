//! Bi-level KV store and decoding.
//!
//! Prefill leaves one dense KV block per chunk (visual tokens only;
//! system-prompt and timestamp KVs are held separately and always loaded
//! dense). `pool_all` mean-pools each dense block into a sparse block.
//! Given a query, a relevance oracle scores every chunk; the top-k chunks
//! are loaded dense and the rest sparse, concatenated in position order
//! into a [`MixedCache`], and greedy decoding runs against that cache.
//!
//! Both relevance oracles compare position-compensated content: stored
//! keys carry their rotary rotation, so the oracle rotates them back by
//! their recorded positions before taking dot products. For pooled keys
//! the recorded position is the floor-mean of the pooled group, which
//! makes the compensation approximate (documented trade-off; pooling
//! itself is a plain mean so `pool_factor == 1` stays bitwise identical).
//!
//! The store is immutable after prefill; scoring and assembly for
//! different queries may run concurrently against the same store.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostMeter, CostReport, Phase, BYTES_PER_FLOAT};
use crate::model::{
    forward_segment, greedy_argmax, rope_rotate, LayerKv, ModelBundle, ModelError, VisibilitySpec,
};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cannot pool an empty chunk")]
    EmptyChunk,
    #[error("pool factor must be >= 1")]
    InvalidPoolFactor,
    #[error("sparse level not populated; call pool_all first")]
    SparseMissing,
    #[error("scores must cover every chunk exactly once")]
    ScoresIncomplete,
    #[error("score for chunk {0} is not finite")]
    InvalidScore(usize),
    #[error("assembled cache has two KV entries at position {0}")]
    PositionCollision(usize),
    #[error("query must be non-empty")]
    EmptyQuery,
    #[error("probe layer {layer} out of range ({layers} layers)")]
    ProbeLayerOutOfRange { layer: usize, layers: usize },
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("store io: {0}")]
    Io(#[from] std::io::Error),
    #[error("store index: {0}")]
    Index(#[from] serde_json::Error),
    #[error("store format: {0}")]
    Format(String),
    #[error("store was built for model {index:#018x}, got {model:#018x}")]
    ModelMismatch { index: u64, model: u64 },
}

/// Per-chunk dense and pooled KVs plus the always-dense system and
/// timestamp KVs. `dense` holds only visual tokens; timestamps live in
/// `timestamp_kvs`. Together with `system_kvs` they cover every prefilled
/// token exactly once.
#[derive(Debug, Clone)]
pub struct BiLevelKvStore {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub system_kvs: Vec<LayerKv>,
    pub timestamp_kvs: Vec<LayerKv>,
    dense: BTreeMap<usize, Vec<LayerKv>>,
    sparse: BTreeMap<usize, Vec<LayerKv>>,
    pub pool_factor: Option<usize>,
    pub chunk_token_ranges: BTreeMap<usize, Range<usize>>,
    /// First position after the prefilled stream; decode starts here.
    pub next_position: usize,
    pub model_checksum: u64,
}

impl BiLevelKvStore {
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        model_checksum: u64,
    ) -> BiLevelKvStore {
        let empty = || {
            (0..num_layers)
                .map(|_| LayerKv::new(num_heads, head_dim))
                .collect()
        };
        BiLevelKvStore {
            num_layers,
            num_heads,
            head_dim,
            system_kvs: empty(),
            timestamp_kvs: empty(),
            dense: BTreeMap::new(),
            sparse: BTreeMap::new(),
            pool_factor: None,
            chunk_token_ranges: BTreeMap::new(),
            next_position: 0,
            model_checksum,
        }
    }

    pub fn n_chunks(&self) -> usize {
        self.dense.len()
    }

    pub fn chunk_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.dense.keys().copied()
    }

    pub fn dense(&self, chunk_id: usize) -> Option<&Vec<LayerKv>> {
        self.dense.get(&chunk_id)
    }

    pub fn sparse(&self, chunk_id: usize) -> Option<&Vec<LayerKv>> {
        self.sparse.get(&chunk_id)
    }

    pub fn insert_dense(&mut self, chunk_id: usize, kvs: Vec<LayerKv>, token_range: Range<usize>) {
        self.dense.insert(chunk_id, kvs);
        self.chunk_token_ranges.insert(chunk_id, token_range);
    }

    /// Pool every dense chunk into its sparse counterpart.
    pub fn pool_all(&mut self, pool_factor: usize) -> Result<(), StoreError> {
        let mut sparse = BTreeMap::new();
        for (&id, dense) in &self.dense {
            sparse.insert(id, pool_chunk(dense, pool_factor)?);
        }
        self.sparse = sparse;
        self.pool_factor = Some(pool_factor);
        Ok(())
    }

    pub fn dense_tokens(&self, chunk_id: usize) -> usize {
        self.dense.get(&chunk_id).map(|kv| kv[0].len()).unwrap_or(0)
    }

    pub fn sparse_tokens(&self, chunk_id: usize) -> usize {
        self.sparse
            .get(&chunk_id)
            .map(|kv| kv[0].len())
            .unwrap_or(0)
    }

    /// System plus timestamp tokens (always loaded dense).
    pub fn overhead_tokens(&self) -> usize {
        self.system_kvs[0].len() + self.timestamp_kvs[0].len()
    }

    pub fn visual_tokens_total(&self) -> usize {
        self.chunk_ids().map(|id| self.dense_tokens(id)).sum()
    }

    /// Bytes one cached token occupies across all layers (K and V).
    pub fn bytes_per_token(&self) -> u64 {
        self.num_layers as u64 * 2 * self.num_heads as u64 * self.head_dim as u64 * BYTES_PER_FLOAT
    }

    /// Structural invariants, including the pooled-count rule
    /// `sparse == ceil(dense / pool_factor)` per chunk.
    pub fn validate(&self) -> Result<(), StoreError> {
        if let Some(p) = self.pool_factor {
            if self.sparse.len() != self.dense.len() {
                return Err(StoreError::SparseMissing);
            }
            for (&id, dense) in &self.dense {
                let want = dense[0].len().div_ceil(p);
                if self.sparse_tokens(id) != want {
                    return Err(StoreError::Format(format!(
                        "chunk {id}: sparse count {} != ceil({} / {p})",
                        self.sparse_tokens(id),
                        dense[0].len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Mean-pool a chunk's per-layer KVs over runs of `pool_factor`
/// consecutive tokens (the final run keeps its natural size). Keys and
/// values are averaged per head coordinate; the pooled position is the
/// floor of the run's position mean.
pub fn pool_chunk(dense: &[LayerKv], pool_factor: usize) -> Result<Vec<LayerKv>, StoreError> {
    if pool_factor == 0 {
        return Err(StoreError::InvalidPoolFactor);
    }
    let mut out = Vec::with_capacity(dense.len());
    for kv in dense {
        let n = kv.len();
        if n == 0 {
            return Err(StoreError::EmptyChunk);
        }
        let (heads, d) = (kv.num_heads(), kv.head_dim());
        let mut pooled = LayerKv::new(heads, d);
        let mut key_row = vec![0.0f32; heads * d];
        let mut value_row = vec![0.0f32; heads * d];
        let mut start = 0;
        while start < n {
            let run = start..(start + pool_factor).min(n);
            let len = run.len();
            let position = run.clone().map(|i| kv.positions()[i]).sum::<usize>() / len;
            for h in 0..heads {
                for j in 0..d {
                    let mut k_acc = 0.0f64;
                    let mut v_acc = 0.0f64;
                    for i in run.clone() {
                        k_acc += kv.key(i, h)[j] as f64;
                        v_acc += kv.value(i, h)[j] as f64;
                    }
                    key_row[h * d + j] = (k_acc / len as f64) as f32;
                    value_row[h * d + j] = (v_acc / len as f64) as f32;
                }
            }
            pooled.push(position, &key_row, &value_row);
            start = run.end;
        }
        out.push(pooled);
    }
    Ok(out)
}

/// Which relevance oracle scores the chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// Cosine between the mean chunk key and the mean query key.
    Centroid,
    /// Mean over heads and query vectors of the max scaled dot product
    /// against the chunk's keys.
    AttentionScore,
}

impl std::str::FromStr for OracleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "centroid" => Ok(OracleKind::Centroid),
            "attn" => Ok(OracleKind::AttentionScore),
            other => Err(format!(
                "unknown oracle kind '{other}' (expected centroid|attn)"
            )),
        }
    }
}

/// Relevance of one chunk to one query; comparable across chunks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScore {
    pub chunk_id: usize,
    pub score: f64,
}

/// Position-free key projections of the query tokens at the probe layer.
#[derive(Debug, Clone)]
pub struct QueryKeyRepr {
    pub probe_layer: usize,
    pub rope_base: f64,
    num_heads: usize,
    head_dim: usize,
    n: usize,
    keys: Vec<f32>,
}

impl QueryKeyRepr {
    /// Build directly from position-free per-head key vectors, laid out
    /// `[token][head][dim]`.
    pub fn from_vectors(
        probe_layer: usize,
        rope_base: f64,
        num_heads: usize,
        head_dim: usize,
        keys: Vec<f32>,
    ) -> QueryKeyRepr {
        assert!(!keys.is_empty() && keys.len() % (num_heads * head_dim) == 0);
        let n = keys.len() / (num_heads * head_dim);
        QueryKeyRepr {
            probe_layer,
            rope_base,
            num_heads,
            head_dim,
            n,
            keys,
        }
    }

    pub fn n_vectors(&self) -> usize {
        self.n
    }

    pub fn key(&self, token: usize, head: usize) -> &[f32] {
        let o = (token * self.num_heads + head) * self.head_dim;
        &self.keys[o..o + self.head_dim]
    }
}

/// Encode the query standalone (positions `0..q`, plain causal) and take
/// its key projections at `probe_layer`, rotated back to position-free
/// form.
pub fn query_key_repr(
    model: &ModelBundle,
    query_token_ids: &[u32],
    probe_layer: usize,
) -> Result<QueryKeyRepr, StoreError> {
    if query_token_ids.is_empty() {
        return Err(StoreError::EmptyQuery);
    }
    if probe_layer >= model.config.num_layers {
        return Err(StoreError::ProbeLayerOutOfRange {
            layer: probe_layer,
            layers: model.config.num_layers,
        });
    }
    let positions: Vec<usize> = (0..query_token_ids.len()).collect();
    let vis = VisibilitySpec::full_causal(&[], &positions);
    // Scoring overhead is oracle plumbing, not pipeline cost; the meter is
    // a scratch one and its counts are dropped.
    let mut scratch = CostMeter::new(Phase::Decode);
    let out = forward_segment(model, query_token_ids, &positions, &[], &vis, &mut scratch)?;
    let kv = &out.new_kvs[probe_layer];
    let keys = derotated_keys(kv, model.config.rope_base);
    Ok(QueryKeyRepr {
        probe_layer,
        rope_base: model.config.rope_base,
        num_heads: kv.num_heads(),
        head_dim: kv.head_dim(),
        n: kv.len(),
        keys,
    })
}

/// Copy of the block's keys with each head row rotated back by its stored
/// position.
fn derotated_keys(kv: &LayerKv, rope_base: f64) -> Vec<f32> {
    let (heads, d) = (kv.num_heads(), kv.head_dim());
    let mut keys = kv.keys_raw().to_vec();
    for (t, &pos) in kv.positions().iter().enumerate() {
        for h in 0..heads {
            let o = (t * heads + h) * d;
            rope_rotate(&mut keys[o..o + d], -(pos as i64), rope_base);
        }
    }
    keys
}

fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Score every chunk's relevance to the query over its sparse keys.
///
/// Scores are deterministic and returned in chunk-id order.
pub fn score_chunks(
    store: &BiLevelKvStore,
    query: &QueryKeyRepr,
    oracle: OracleKind,
) -> Result<Vec<RelevanceScore>, StoreError> {
    if store.pool_factor.is_none() || store.sparse.len() != store.dense.len() {
        return Err(StoreError::SparseMissing);
    }
    if query.probe_layer >= store.num_layers {
        return Err(StoreError::ProbeLayerOutOfRange {
            layer: query.probe_layer,
            layers: store.num_layers,
        });
    }
    let (heads, d) = (store.num_heads, store.head_dim);
    let mut scores = Vec::with_capacity(store.sparse.len());
    for (&chunk_id, layers) in &store.sparse {
        let kv = &layers[query.probe_layer];
        if kv.is_empty() {
            return Err(StoreError::EmptyChunk);
        }
        let keys = derotated_keys(kv, query.rope_base);
        let key = |t: usize, h: usize| -> &[f32] {
            let o = (t * heads + h) * d;
            &keys[o..o + d]
        };
        let score = match oracle {
            OracleKind::Centroid => {
                let mut acc = 0.0f64;
                for h in 0..heads {
                    let mut centroid = vec![0.0f64; d];
                    for t in 0..kv.len() {
                        for (c, v) in centroid.iter_mut().zip(key(t, h)) {
                            *c += *v as f64;
                        }
                    }
                    let mut q_mean = vec![0.0f64; d];
                    for t in 0..query.n {
                        for (c, v) in q_mean.iter_mut().zip(query.key(t, h)) {
                            *c += *v as f64;
                        }
                    }
                    let dot: f64 = centroid.iter().zip(&q_mean).map(|(a, b)| a * b).sum();
                    let na: f64 = centroid.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb: f64 = q_mean.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if na > 0.0 && nb > 0.0 {
                        acc += dot / (na * nb);
                    }
                }
                acc / heads as f64
            }
            OracleKind::AttentionScore => {
                let scale = 1.0 / (d as f64).sqrt();
                let mut acc = 0.0f64;
                for h in 0..heads {
                    for t in 0..query.n {
                        let q_row = query.key(t, h);
                        let best = (0..kv.len())
                            .map(|i| dot_f64(q_row, key(i, h)) * scale)
                            .fold(f64::NEG_INFINITY, f64::max);
                        acc += best;
                    }
                }
                acc / (heads * query.n) as f64
            }
        };
        scores.push(RelevanceScore { chunk_id, score });
    }
    Ok(scores)
}

/// The per-layer KV list a decode runs against: system, then per chunk
/// dense or sparse, with timestamp KVs interleaved at their original
/// positions.
#[derive(Debug, Clone)]
pub struct MixedCache {
    pub layers: Vec<LayerKv>,
    /// Chunk ids loaded dense.
    pub selection: BTreeSet<usize>,
    pub loaded_tokens: usize,
    pub loaded_kv_bytes: u64,
    pub next_position: usize,
}

/// Pick the `top_k` chunks by score (ties broken toward the lower chunk
/// id), load them dense and the rest sparse, and merge everything into
/// position order.
pub fn assemble_mixed(
    store: &BiLevelKvStore,
    scores: &[RelevanceScore],
    top_k: usize,
) -> Result<MixedCache, StoreError> {
    let store_ids: Vec<usize> = store.chunk_ids().collect();
    let mut seen: Vec<usize> = scores.iter().map(|s| s.chunk_id).collect();
    seen.sort_unstable();
    if seen != store_ids {
        return Err(StoreError::ScoresIncomplete);
    }
    if let Some(bad) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(StoreError::InvalidScore(bad.chunk_id));
    }
    if store.pool_factor.is_none() && top_k < store.n_chunks() {
        return Err(StoreError::SparseMissing);
    }

    let mut order: Vec<&RelevanceScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.chunk_id.cmp(&b.chunk_id))
    });
    let selection: BTreeSet<usize> = order
        .iter()
        .take(top_k.min(store.n_chunks()))
        .map(|s| s.chunk_id)
        .collect();

    let mut layers = Vec::with_capacity(store.num_layers);
    for layer in 0..store.num_layers {
        let mut parts: Vec<&LayerKv> = vec![&store.system_kvs[layer], &store.timestamp_kvs[layer]];
        for &id in &store_ids {
            let block = if selection.contains(&id) {
                &store.dense(id).unwrap()[layer]
            } else {
                &store.sparse(id).unwrap()[layer]
            };
            parts.push(block);
        }
        if layer == 0 {
            let mut positions: Vec<usize> = parts
                .iter()
                .flat_map(|p| p.positions().iter().copied())
                .collect();
            positions.sort_unstable();
            if let Some(w) = positions.windows(2).find(|w| w[0] == w[1]) {
                return Err(StoreError::PositionCollision(w[0]));
            }
        }
        layers.push(LayerKv::merge(&parts)?);
    }

    let loaded_tokens = layers[0].len();
    let loaded_kv_bytes = loaded_tokens as u64 * store.bytes_per_token();
    Ok(MixedCache {
        layers,
        selection,
        loaded_tokens,
        loaded_kv_bytes,
        next_position: store.next_position,
    })
}

/// Greedy decoding output. `logits_rows` holds one row per decode forward
/// output: the query rows, then one row per generated token except the
/// last (whose successor is never computed).
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub generated: Vec<u32>,
    pub logits_rows: Vec<Vec<f32>>,
    pub cost: CostReport,
}

/// Run the query against the mixed cache (full visibility to every cache
/// entry, causal within the query), then greedily generate up to
/// `max_new_tokens`, appending each new token's KVs to a private cache
/// extension.
pub fn decode(
    model: &ModelBundle,
    cache: &MixedCache,
    query_token_ids: &[u32],
    max_new_tokens: usize,
) -> Result<DecodeOutput, StoreError> {
    if query_token_ids.is_empty() {
        return Err(StoreError::EmptyQuery);
    }
    let vocab = model.config.vocab_size;
    let mut meter = CostMeter::new(Phase::Decode);
    meter.record_loaded_kv_bytes(cache.loaded_kv_bytes);

    let mut context = cache.layers.clone();
    let mut ctx_positions: Vec<usize> = context[0].positions().to_vec();
    let q_len = query_token_ids.len();
    let q_positions: Vec<usize> = (cache.next_position..cache.next_position + q_len).collect();
    let vis = VisibilitySpec::full_causal(&ctx_positions, &q_positions);
    let out = forward_segment(
        model,
        query_token_ids,
        &q_positions,
        &context,
        &vis,
        &mut meter,
    )?;

    let mut logits_rows: Vec<Vec<f32>> =
        out.logits.chunks_exact(vocab).map(<[f32]>::to_vec).collect();
    for (layer, fresh) in context.iter_mut().zip(&out.new_kvs) {
        *layer = LayerKv::merge(&[layer, fresh])?;
    }
    ctx_positions.extend_from_slice(&q_positions);

    let mut generated = Vec::with_capacity(max_new_tokens);
    let mut last_row = logits_rows.last().cloned().unwrap_or_default();
    for step in 0..max_new_tokens {
        let next = greedy_argmax(&last_row);
        generated.push(next);
        if step + 1 == max_new_tokens {
            break;
        }
        let pos = cache.next_position + q_len + step;
        let vis = VisibilitySpec::full_causal(&ctx_positions, &[pos]);
        let out = forward_segment(model, &[next], &[pos], &context, &vis, &mut meter)?;
        last_row = out.logits;
        logits_rows.push(last_row.clone());
        for (layer, fresh) in context.iter_mut().zip(&out.new_kvs) {
            *layer = LayerKv::merge(&[layer, fresh])?;
        }
        ctx_positions.push(pos);
    }

    Ok(DecodeOutput {
        generated,
        logits_rows,
        cost: meter.report(),
    })
}

// ---------------------------------------------------------------------------
// Offline store format: index.json plus raw little-endian f32 tensor files,
// layer-major, head-major, token-major (K tensor then V tensor per layer).
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ChunkIndexEntry {
    id: usize,
    token_range: [usize; 2],
    dense_file: String,
    sparse_file: String,
    n_tokens: usize,
    dense_positions: Vec<usize>,
    sparse_positions: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct StoreIndex {
    chunks: Vec<ChunkIndexEntry>,
    pool_factor: usize,
    model_checksum: u64,
    num_layers: usize,
    num_heads: usize,
    head_dim: usize,
    next_position: usize,
    system_file: String,
    system_positions: Vec<usize>,
    timestamp_file: String,
    timestamp_positions: Vec<usize>,
}

fn write_blob(path: &Path, layers: &[LayerKv]) -> Result<(), StoreError> {
    let mut buf: Vec<u8> = Vec::new();
    for kv in layers {
        let (heads, n) = (kv.num_heads(), kv.len());
        for tensor in [LayerKv::key, LayerKv::value] {
            for h in 0..heads {
                for t in 0..n {
                    for &v in tensor(kv, t, h) {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_blob(
    path: &Path,
    num_layers: usize,
    heads: usize,
    d: usize,
    positions: &[usize],
) -> Result<Vec<LayerKv>, StoreError> {
    let bytes = fs::read(path)?;
    let n = positions.len();
    let per_tensor = heads * n * d;
    let expect = num_layers * 2 * per_tensor * 4;
    if bytes.len() != expect {
        return Err(StoreError::Format(format!(
            "{}: expected {expect} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut layers = Vec::with_capacity(num_layers);
    for layer in 0..num_layers {
        let base = layer * 2 * per_tensor;
        let mut keys = vec![0.0f32; per_tensor];
        let mut values = vec![0.0f32; per_tensor];
        for h in 0..heads {
            for t in 0..n {
                for j in 0..d {
                    let src = (h * n + t) * d + j;
                    let dst = (t * heads + h) * d + j;
                    keys[dst] = floats[base + src];
                    values[dst] = floats[base + per_tensor + src];
                }
            }
        }
        layers.push(LayerKv::from_parts(
            heads,
            d,
            positions.to_vec(),
            keys,
            values,
        )?);
    }
    Ok(layers)
}

/// Persist a pooled store as `index.json` plus tensor blobs in `dir`.
pub fn save_store(store: &BiLevelKvStore, dir: &Path) -> Result<(), StoreError> {
    let pool_factor = store.pool_factor.ok_or(StoreError::SparseMissing)?;
    store.validate()?;
    fs::create_dir_all(dir)?;
    let mut chunks = Vec::new();
    for id in store.chunk_ids() {
        let dense = store.dense(id).unwrap();
        let sparse = store.sparse(id).ok_or(StoreError::SparseMissing)?;
        let dense_file = format!("chunk_{id:05}_dense.bin");
        let sparse_file = format!("chunk_{id:05}_sparse.bin");
        write_blob(&dir.join(&dense_file), dense)?;
        write_blob(&dir.join(&sparse_file), sparse)?;
        let range = store.chunk_token_ranges.get(&id).cloned().unwrap_or(0..0);
        chunks.push(ChunkIndexEntry {
            id,
            token_range: [range.start, range.end],
            dense_file,
            sparse_file,
            n_tokens: dense[0].len(),
            dense_positions: dense[0].positions().to_vec(),
            sparse_positions: sparse[0].positions().to_vec(),
        });
    }
    write_blob(&dir.join("system.bin"), &store.system_kvs)?;
    write_blob(&dir.join("timestamps.bin"), &store.timestamp_kvs)?;
    let index = StoreIndex {
        chunks,
        pool_factor,
        model_checksum: store.model_checksum,
        num_layers: store.num_layers,
        num_heads: store.num_heads,
        head_dim: store.head_dim,
        next_position: store.next_position,
        system_file: "system.bin".into(),
        system_positions: store.system_kvs[0].positions().to_vec(),
        timestamp_file: "timestamps.bin".into(),
        timestamp_positions: store.timestamp_kvs[0].positions().to_vec(),
    };
    fs::write(
        dir.join("index.json"),
        serde_json::to_string_pretty(&index)?,
    )?;
    Ok(())
}

/// Load a store saved by [`save_store`].
pub fn load_store(dir: &Path) -> Result<BiLevelKvStore, StoreError> {
    let index: StoreIndex = serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)?;
    let (layers, heads, d) = (index.num_layers, index.num_heads, index.head_dim);
    let mut store = BiLevelKvStore::new(layers, heads, d, index.model_checksum);
    store.next_position = index.next_position;
    store.system_kvs = read_blob(
        &dir.join(&index.system_file),
        layers,
        heads,
        d,
        &index.system_positions,
    )?;
    store.timestamp_kvs = read_blob(
        &dir.join(&index.timestamp_file),
        layers,
        heads,
        d,
        &index.timestamp_positions,
    )?;
    for entry in &index.chunks {
        if entry.n_tokens != entry.dense_positions.len() {
            return Err(StoreError::Format(format!(
                "chunk {}: n_tokens {} != {} positions",
                entry.id,
                entry.n_tokens,
                entry.dense_positions.len()
            )));
        }
        let dense = read_blob(
            &dir.join(&entry.dense_file),
            layers,
            heads,
            d,
            &entry.dense_positions,
        )?;
        let sparse = read_blob(
            &dir.join(&entry.sparse_file),
            layers,
            heads,
            d,
            &entry.sparse_positions,
        )?;
        store.insert_dense(entry.id, dense, entry.token_range[0]..entry.token_range[1]);
        store.sparse.insert(entry.id, sparse);
    }
    store.pool_factor = Some(index.pool_factor);
    store.validate()?;
    Ok(store)
}

/// Reject a store built for different weights.
pub fn check_store_model(store: &BiLevelKvStore, model: &ModelBundle) -> Result<(), StoreError> {
    let model_sum = model.checksum();
    if store.model_checksum != model_sum {
        return Err(StoreError::ModelMismatch {
            index: store.model_checksum,
            model: model_sum,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{full_oracle, full_oracle_greedy, init_model, ModelConfig};
    use crate::prefill::{run_prefill, ChunkConfig};
    use crate::sequence::{build_layout, sample_frames, LayoutParams, SamplingPolicy, VocabLayout};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rotated(row: &[f32], pos: usize, base: f64) -> Vec<f32> {
        let mut out = row.to_vec();
        rope_rotate(&mut out, pos as i64, base);
        out
    }

    /// Store with `n_chunks` chunks of `c` contiguous-position tokens each,
    /// values drawn from the given rng.
    fn synthetic_store(
        n_chunks: usize,
        c: usize,
        layers: usize,
        heads: usize,
        d: usize,
        rng: &mut ChaCha20Rng,
    ) -> BiLevelKvStore {
        let mut store = BiLevelKvStore::new(layers, heads, d, 0);
        let mut pos = 0usize;
        for id in 0..n_chunks {
            let start = pos;
            let mut kvs = Vec::new();
            for _ in 0..layers {
                let mut kv = LayerKv::new(heads, d);
                for t in 0..c {
                    let row: Vec<f32> =
                        (0..heads * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                    let vrow: Vec<f32> =
                        (0..heads * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                    kv.push(start + t, &row, &vrow);
                }
                kvs.push(kv);
            }
            pos += c;
            store.insert_dense(id, kvs, start..pos);
        }
        store.next_position = pos;
        store
    }

    #[test]
    fn pool_factor_one_is_bitwise_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let store = synthetic_store(2, 7, 2, 2, 4, &mut rng);
        for id in store.chunk_ids() {
            let dense = store.dense(id).unwrap();
            let pooled = pool_chunk(dense, 1).unwrap();
            for (a, b) in dense.iter().zip(&pooled) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn pool_eight_tokens_by_four_matches_direct_mean() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let store = synthetic_store(1, 8, 1, 1, 4, &mut rng);
        let dense = &store.dense(0).unwrap()[0];
        let pooled = &pool_chunk(store.dense(0).unwrap(), 4).unwrap()[0];
        assert_eq!(pooled.len(), 2);
        // First pooled key is the mean of tokens 0..4, by direct summation.
        for j in 0..4 {
            let mut acc = 0.0f64;
            for t in 0..4 {
                acc += dense.key(t, 0)[j] as f64;
            }
            let want = (acc / 4.0) as f32;
            assert_eq!(pooled.key(0, 0)[j], want);
        }
        // Pooled positions: floor-mean of 0..4 is 1, of 4..8 is 5.
        assert_eq!(pooled.positions(), &[1, 5]);
    }

    #[test]
    fn pool_partial_final_run() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let store = synthetic_store(1, 7, 1, 1, 4, &mut rng);
        let dense = &store.dense(0).unwrap()[0];
        let pooled = &pool_chunk(store.dense(0).unwrap(), 4).unwrap()[0];
        assert_eq!(pooled.len(), 2);
        // Second run pools the remaining 3 tokens at natural size.
        for j in 0..4 {
            let mut acc = 0.0f64;
            for t in 4..7 {
                acc += dense.key(t, 0)[j] as f64;
            }
            assert_eq!(pooled.key(1, 0)[j], (acc / 3.0) as f32);
        }
        assert_eq!(pooled.positions()[1], (4 + 5 + 6) / 3);
    }

    #[test]
    fn pool_rejects_empty_and_zero_factor() {
        let empty = vec![LayerKv::new(1, 4)];
        assert!(matches!(pool_chunk(&empty, 2), Err(StoreError::EmptyChunk)));
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let store = synthetic_store(1, 4, 1, 1, 4, &mut rng);
        assert!(matches!(
            pool_chunk(store.dense(0).unwrap(), 0),
            Err(StoreError::InvalidPoolFactor)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn pooled_coordinates_stay_within_group_envelope(
            seed in 0u64..1_000_000,
            n in 1usize..40,
            p in 1usize..9,
        ) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let store = synthetic_store(1, n, 1, 2, 4, &mut rng);
            let dense = &store.dense(0).unwrap()[0];
            let pooled = &pool_chunk(store.dense(0).unwrap(), p).unwrap()[0];
            prop_assert_eq!(pooled.len(), n.div_ceil(p));
            for (run_idx, run_start) in (0..n).step_by(p).enumerate() {
                let run = run_start..(run_start + p).min(n);
                for h in 0..2 {
                    for j in 0..4 {
                        let lo = run.clone().map(|t| dense.key(t, h)[j]).fold(f32::INFINITY, f32::min);
                        let hi = run.clone().map(|t| dense.key(t, h)[j]).fold(f32::NEG_INFINITY, f32::max);
                        let got = pooled.key(run_idx, h)[j];
                        prop_assert!(got >= lo && got <= hi, "coordinate {} outside [{}, {}]", got, lo, hi);
                    }
                }
            }
        }
    }

    fn basis_repr(direction: usize, heads: usize, d: usize, scale: f32) -> QueryKeyRepr {
        let mut keys = vec![0.0f32; heads * d];
        for h in 0..heads {
            keys[h * d + direction] = scale;
        }
        QueryKeyRepr::from_vectors(0, 10000.0, heads, d, keys)
    }

    /// Store whose chunk `i` carries rotations of basis vector `e_{i+1}`,
    /// except the needle chunk which carries rotations of `e_0`.
    fn separable_store(n_chunks: usize, needle: usize, heads: usize, d: usize) -> BiLevelKvStore {
        let base = 10000.0;
        let mut store = BiLevelKvStore::new(1, heads, d, 0);
        let mut pos = 0usize;
        for id in 0..n_chunks {
            let direction = if id == needle { 0 } else { id + 1 };
            let mut kv = LayerKv::new(heads, d);
            for _ in 0..4 {
                let mut row = vec![0.0f32; heads * d];
                for h in 0..heads {
                    let mut unit = vec![0.0f32; d];
                    unit[direction] = 1.0;
                    row[h * d..(h + 1) * d].copy_from_slice(&rotated(&unit, pos, base));
                }
                let values = vec![0.0f32; heads * d];
                kv.push(pos, &row, &values);
                pos += 1;
            }
            store.insert_dense(id, vec![kv], pos - 4..pos);
        }
        store.next_position = pos;
        store.pool_all(1).unwrap();
        store
    }

    #[test]
    fn centroid_oracle_separates_constructed_needle() {
        let store = separable_store(4, 2, 2, 16);
        let query = basis_repr(0, 2, 16, 1.0);
        let scores = score_chunks(&store, &query, OracleKind::Centroid).unwrap();
        let best = scores
            .iter()
            .max_by(|a, b| a.score.total_cmp(&b.score))
            .unwrap();
        assert_eq!(best.chunk_id, 2);
        for s in &scores {
            if s.chunk_id != 2 {
                assert!(best.score > s.score + 0.5, "weak margin: {scores:?}");
            }
        }
    }

    #[test]
    fn attention_oracle_separates_constructed_needle() {
        let store = separable_store(5, 0, 2, 16);
        let query = basis_repr(0, 2, 16, 2.0);
        let scores = score_chunks(&store, &query, OracleKind::AttentionScore).unwrap();
        let best = scores
            .iter()
            .max_by(|a, b| a.score.total_cmp(&b.score))
            .unwrap();
        assert_eq!(best.chunk_id, 0);
    }

    #[test]
    fn identical_content_chunks_score_equal() {
        // Chunks carrying rotations of the same underlying vector are
        // identical in content space; position compensation leaves only
        // rotation round-off, so scores agree to tight tolerance rather
        // than exactly.
        let base = 10000.0;
        let heads = 2;
        let d = 8;
        let mut store = BiLevelKvStore::new(1, heads, d, 0);
        let underlying: Vec<f32> = vec![0.3, -0.7, 0.1, 0.9, -0.2, 0.5, 0.4, -0.6];
        let mut pos = 0usize;
        for id in 0..4 {
            let mut kv = LayerKv::new(heads, d);
            for _ in 0..3 {
                let mut row = vec![0.0f32; heads * d];
                for h in 0..heads {
                    row[h * d..(h + 1) * d].copy_from_slice(&rotated(&underlying, pos, base));
                }
                kv.push(pos, &row, &vec![0.0f32; heads * d]);
                pos += 1;
            }
            store.insert_dense(id, vec![kv], pos - 3..pos);
        }
        store.pool_all(1).unwrap();
        let mut keys = vec![0.0f32; heads * d];
        for h in 0..heads {
            keys[h * d..(h + 1) * d].copy_from_slice(&underlying);
        }
        let query = QueryKeyRepr::from_vectors(0, base, heads, d, keys);
        for oracle in [OracleKind::Centroid, OracleKind::AttentionScore] {
            let scores = score_chunks(&store, &query, oracle).unwrap();
            let spread = scores
                .iter()
                .map(|s| s.score)
                .fold(f64::NEG_INFINITY, f64::max)
                - scores.iter().map(|s| s.score).fold(f64::INFINITY, f64::min);
            assert!(spread < 1e-5, "{oracle:?} spread {spread}");
        }
    }

    #[test]
    fn attention_oracle_matches_brute_force_recomputation() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut store = synthetic_store(2, 6, 2, 2, 4, &mut rng);
        store.pool_all(2).unwrap();
        let probe = 1;
        let heads = 2;
        let d = 4;
        let keys: Vec<f32> = (0..2 * heads * d)
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect();
        let query = QueryKeyRepr::from_vectors(probe, 10000.0, heads, d, keys);
        let scores = score_chunks(&store, &query, OracleKind::AttentionScore).unwrap();
        for s in &scores {
            let kv = &store.sparse(s.chunk_id).unwrap()[probe];
            let mut acc = 0.0f64;
            for h in 0..heads {
                for qt in 0..2 {
                    let mut best = f64::NEG_INFINITY;
                    for t in 0..kv.len() {
                        let mut key = kv.key(t, h).to_vec();
                        rope_rotate(&mut key, -(kv.positions()[t] as i64), 10000.0);
                        let mut dot = 0.0f64;
                        for j in 0..d {
                            dot += query.key(qt, h)[j] as f64 * key[j] as f64;
                        }
                        best = best.max(dot / (d as f64).sqrt());
                    }
                    acc += best;
                }
            }
            let want = acc / (heads * 2) as f64;
            assert!((s.score - want).abs() <= 1e-6, "{} vs {}", s.score, want);
        }
    }

    #[test]
    fn assemble_all_dense_equals_full_cache() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let mut store = synthetic_store(4, 8, 2, 1, 4, &mut rng);
        store.pool_all(4).unwrap();
        let scores: Vec<RelevanceScore> = (0..4)
            .map(|chunk_id| RelevanceScore {
                chunk_id,
                score: chunk_id as f64,
            })
            .collect();
        let cache = assemble_mixed(&store, &scores, 99).unwrap();
        assert_eq!(cache.selection.len(), 4);
        assert_eq!(cache.loaded_tokens, 32);
        let expected: Vec<usize> = (0..32).collect();
        assert_eq!(cache.layers[0].positions(), expected.as_slice());
    }

    #[test]
    fn assemble_top_zero_loads_only_sparse() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut store = synthetic_store(4, 8, 2, 1, 4, &mut rng);
        store.pool_all(4).unwrap();
        let scores: Vec<RelevanceScore> = (0..4)
            .map(|chunk_id| RelevanceScore {
                chunk_id,
                score: 0.0,
            })
            .collect();
        let cache = assemble_mixed(&store, &scores, 0).unwrap();
        assert!(cache.selection.is_empty());
        // 1/pool_factor of the visual KVs.
        assert_eq!(cache.loaded_tokens, 8);
        assert_eq!(cache.loaded_kv_bytes, 8 * store.bytes_per_token());
    }

    #[test]
    fn assemble_counts_match_closed_form() {
        // 8 chunks of 64 tokens, top 2 dense, pool 4:
        // 2*64 + 6*16 = 224 visual tokens, fraction 0.4375.
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let mut store = synthetic_store(8, 64, 1, 1, 2, &mut rng);
        store.pool_all(4).unwrap();
        let scores: Vec<RelevanceScore> = (0..8)
            .map(|chunk_id| RelevanceScore {
                chunk_id,
                score: -(chunk_id as f64),
            })
            .collect();
        let cache = assemble_mixed(&store, &scores, 2).unwrap();
        assert_eq!(cache.selection, BTreeSet::from([0, 1]));
        assert_eq!(cache.loaded_tokens, 224);
        let fraction = cache.loaded_tokens as f64 / store.visual_tokens_total() as f64;
        assert_eq!(fraction, 0.4375);
        assert_eq!(
            fraction,
            crate::cost::predict_decode_kv_fraction(8, 64, 2, 4, 0)
        );
    }

    #[test]
    fn selection_is_invariant_under_positive_scaling() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut store = synthetic_store(6, 5, 1, 1, 2, &mut rng);
        store.pool_all(2).unwrap();
        let scores: Vec<RelevanceScore> = (0..6)
            .map(|chunk_id| RelevanceScore {
                chunk_id,
                score: rng.gen_range(-1.0..1.0),
            })
            .collect();
        let a = assemble_mixed(&store, &scores, 3).unwrap().selection;
        let scaled: Vec<RelevanceScore> = scores
            .iter()
            .map(|s| RelevanceScore {
                chunk_id: s.chunk_id,
                score: s.score * 37.5,
            })
            .collect();
        let b = assemble_mixed(&store, &scaled, 3).unwrap().selection;
        assert_eq!(a, b);
    }

    #[test]
    fn ties_select_lower_chunk_id() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let mut store = synthetic_store(4, 3, 1, 1, 2, &mut rng);
        store.pool_all(3).unwrap();
        let scores: Vec<RelevanceScore> = (0..4)
            .map(|chunk_id| RelevanceScore {
                chunk_id,
                score: 1.0,
            })
            .collect();
        let cache = assemble_mixed(&store, &scores, 2).unwrap();
        assert_eq!(cache.selection, BTreeSet::from([0, 1]));
    }

    #[test]
    fn assemble_rejects_incomplete_scores() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let mut store = synthetic_store(3, 4, 1, 1, 2, &mut rng);
        store.pool_all(2).unwrap();
        let scores = vec![RelevanceScore {
            chunk_id: 0,
            score: 1.0,
        }];
        assert!(matches!(
            assemble_mixed(&store, &scores, 1),
            Err(StoreError::ScoresIncomplete)
        ));
        let bad = vec![
            RelevanceScore {
                chunk_id: 0,
                score: f64::NAN,
            },
            RelevanceScore {
                chunk_id: 1,
                score: 0.0,
            },
            RelevanceScore {
                chunk_id: 2,
                score: 0.0,
            },
        ];
        assert!(matches!(
            assemble_mixed(&store, &bad, 1),
            Err(StoreError::InvalidScore(0))
        ));
    }

    fn pipeline_model(seed: u64) -> ModelBundle {
        init_model(ModelConfig {
            num_layers: 2,
            num_heads: 2,
            head_dim: 8,
            hidden_dim: 16,
            ffn_dim: 32,
            vocab_size: 256,
            max_position: 512,
            rope_base: 10000.0,
            seed,
        })
        .unwrap()
    }

    fn pipeline_layout(seed: u64) -> crate::sequence::SequenceLayout {
        let plan = sample_frames(
            12.0,
            &SamplingPolicy {
                base_fps: 1,
                max_fps: 1,
                max_frames: 16,
            },
        )
        .unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let features: Vec<Vec<f32>> = (0..12)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        build_layout(
            &plan,
            &features,
            &[40, 41, 42],
            &LayoutParams {
                system_len: 2,
                tokens_per_group: 4,
                vocab: VocabLayout::new(256).unwrap(),
                max_position: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn degenerate_chain_matches_oracle_greedy() {
        let model = pipeline_model(20);
        let layout = pipeline_layout(20);
        let cfg = ChunkConfig::covering(&layout);
        let mut out = run_prefill(&model, &layout, &cfg).unwrap();
        out.store.pool_all(2).unwrap();
        let query: Vec<u32> = layout.token_ids[layout.query_range()].to_vec();
        let repr = query_key_repr(&model, &query, 1).unwrap();
        let scores = score_chunks(&out.store, &repr, OracleKind::Centroid).unwrap();
        let cache = assemble_mixed(&out.store, &scores, out.store.n_chunks()).unwrap();
        let decoded = decode(&model, &cache, &query, 6).unwrap();
        let oracle = full_oracle_greedy(
            &model,
            &layout.token_ids[..layout.prefill_len() + query.len()],
            6,
        )
        .unwrap();
        assert_eq!(decoded.generated, oracle);

        // Logits of the final decode row agree with a fresh oracle pass.
        let mut full: Vec<u32> = layout.token_ids[..layout.prefill_len() + query.len()].to_vec();
        full.extend_from_slice(&oracle[..oracle.len() - 1]);
        let oracle_logits = full_oracle(&model, &full).unwrap();
        let vocab = model.config.vocab_size;
        let last_oracle = &oracle_logits[(full.len() - 1) * vocab..];
        let last_ours = decoded.logits_rows.last().unwrap();
        let max_err = last_ours
            .iter()
            .zip(last_oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1e-5, "max err {max_err}");
    }

    #[test]
    fn decode_zero_new_tokens_returns_logits_only() {
        let model = pipeline_model(21);
        let layout = pipeline_layout(21);
        let cfg = ChunkConfig::covering(&layout);
        let mut out = run_prefill(&model, &layout, &cfg).unwrap();
        out.store.pool_all(2).unwrap();
        let query: Vec<u32> = layout.token_ids[layout.query_range()].to_vec();
        let repr = query_key_repr(&model, &query, 0).unwrap();
        let scores = score_chunks(&out.store, &repr, OracleKind::AttentionScore).unwrap();
        let cache = assemble_mixed(&out.store, &scores, 1).unwrap();
        let decoded = decode(&model, &cache, &query, 0).unwrap();
        assert!(decoded.generated.is_empty());
        assert_eq!(decoded.logits_rows.len(), query.len());
    }

    #[test]
    fn decode_reports_loaded_and_resident_bytes() {
        let model = pipeline_model(22);
        let layout = pipeline_layout(22);
        let unit = layout.group_unit_tokens().unwrap();
        let cfg = ChunkConfig::from_groups(1, 1, unit, true);
        let mut out = run_prefill(&model, &layout, &cfg).unwrap();
        out.store.pool_all(2).unwrap();
        let query: Vec<u32> = layout.token_ids[layout.query_range()].to_vec();
        let repr = query_key_repr(&model, &query, 1).unwrap();
        let scores = score_chunks(&out.store, &repr, OracleKind::AttentionScore).unwrap();
        let top_k = 1;
        let cache = assemble_mixed(&out.store, &scores, top_k).unwrap();

        let store = &out.store;
        let expected_tokens: usize = store.overhead_tokens()
            + store
                .chunk_ids()
                .map(|id| {
                    if cache.selection.contains(&id) {
                        store.dense_tokens(id)
                    } else {
                        store.sparse_tokens(id)
                    }
                })
                .sum::<usize>();
        assert_eq!(cache.loaded_tokens, expected_tokens);

        let max_new = 3;
        let decoded = decode(&model, &cache, &query, max_new).unwrap();
        assert_eq!(decoded.cost.kv_bytes_loaded_decode, cache.loaded_kv_bytes);
        // Peak residency: cache plus query plus all appended tokens except
        // the final one (never forwarded).
        let peak_tokens = (cache.loaded_tokens + query.len() + max_new - 1) as u64;
        assert_eq!(
            decoded.cost.kv_bytes_peak_resident,
            peak_tokens * store.bytes_per_token()
        );
    }

    #[test]
    fn decode_rejects_empty_query() {
        let model = pipeline_model(23);
        let layout = pipeline_layout(23);
        let cfg = ChunkConfig::covering(&layout);
        let mut out = run_prefill(&model, &layout, &cfg).unwrap();
        out.store.pool_all(2).unwrap();
        let scores: Vec<RelevanceScore> = out
            .store
            .chunk_ids()
            .map(|chunk_id| RelevanceScore {
                chunk_id,
                score: 0.0,
            })
            .collect();
        let cache = assemble_mixed(&out.store, &scores, 1).unwrap();
        assert!(matches!(
            decode(&model, &cache, &[], 1),
            Err(StoreError::EmptyQuery)
        ));
    }

    #[test]
    fn store_roundtrips_through_disk() {
        let model = pipeline_model(24);
        let layout = pipeline_layout(24);
        let unit = layout.group_unit_tokens().unwrap();
        let cfg = ChunkConfig::from_groups(2, 1, unit, true);
        let mut out = run_prefill(&model, &layout, &cfg).unwrap();
        out.store.pool_all(3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_store(&out.store, dir.path()).unwrap();
        let loaded = load_store(dir.path()).unwrap();
        assert_eq!(loaded.n_chunks(), out.store.n_chunks());
        assert_eq!(loaded.pool_factor, Some(3));
        assert_eq!(loaded.next_position, out.store.next_position);
        check_store_model(&loaded, &model).unwrap();
        for id in out.store.chunk_ids() {
            assert_eq!(loaded.dense(id).unwrap(), out.store.dense(id).unwrap());
            assert_eq!(loaded.sparse(id).unwrap(), out.store.sparse(id).unwrap());
            assert_eq!(
                loaded.chunk_token_ranges.get(&id),
                out.store.chunk_token_ranges.get(&id)
            );
        }
        assert_eq!(loaded.system_kvs, out.store.system_kvs);
        assert_eq!(loaded.timestamp_kvs, out.store.timestamp_kvs);

        let other = pipeline_model(25);
        assert!(matches!(
            check_store_model(&loaded, &other),
            Err(StoreError::ModelMismatch { .. })
        ));
    }

    #[test]
    fn save_requires_pooled_store() {
        let mut rng = ChaCha20Rng::seed_from_u64(26);
        let store = synthetic_store(2, 4, 1, 1, 2, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            save_store(&store, dir.path()),
            Err(StoreError::SparseMissing)
        ));
    }
}
