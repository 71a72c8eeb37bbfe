//! Chunk-based prefill.
//!
//! The visual stream is encoded window by window. A window of
//! `window_tokens` slides by `step_tokens` (both whole groups); the tokens
//! not yet encoded are the chunk's *new range*, and the tail of the
//! previous window is re-attended as *overlap* context without recomputing
//! its KVs. Each new token additionally sees the system prompt and, when
//! `keep_timestamp_history` is on, every timestamp token before the
//! window. Nothing else: earlier visual detail is reachable only through
//! those timestamp and overlap KVs.
//!
//! Chunks are processed strictly sequentially; chunk `i` consumes KVs
//! produced by earlier chunks.

use std::ops::Range;

use thiserror::Error;

use crate::cost::{CostMeter, CostReport, Phase};
use crate::kv_store::BiLevelKvStore;
use crate::model::{forward_segment, LayerKv, ModelBundle, ModelError, VisibilitySpec};
use crate::sequence::{LayoutError, SequenceLayout, TokenRole};

#[derive(Debug, Error)]
pub enum PrefillError {
    #[error("window of {window} tokens is smaller than one group ({unit} tokens)")]
    WindowTooSmall { window: usize, unit: usize },
    #[error("{what} of {tokens} tokens is not a whole number of {unit}-token groups")]
    Misaligned {
        what: &'static str,
        tokens: usize,
        unit: usize,
    },
    #[error("step must satisfy 0 < step <= window")]
    InvalidStep,
    #[error("layout: {0}")]
    Layout(#[from] LayoutError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
}

/// Sliding-window geometry in tokens (always whole groups) plus the
/// timestamp-history switch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkConfig {
    pub window_tokens: usize,
    pub step_tokens: usize,
    pub keep_timestamp_history: bool,
}

impl ChunkConfig {
    /// `window_groups`/`step_groups` whole groups of `unit_tokens` each.
    pub fn from_groups(
        window_groups: usize,
        step_groups: usize,
        unit_tokens: usize,
        keep_timestamp_history: bool,
    ) -> ChunkConfig {
        ChunkConfig {
            window_tokens: window_groups * unit_tokens,
            step_tokens: step_groups * unit_tokens,
            keep_timestamp_history,
        }
    }

    /// Degenerate config: one window covering the whole stream.
    pub fn covering(layout: &SequenceLayout) -> ChunkConfig {
        let unit = layout.group_unit_tokens().unwrap_or(1);
        let groups = layout.group_count().max(1);
        ChunkConfig::from_groups(groups, groups, unit, true)
    }
}

/// One prefill step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub chunk_id: usize,
    /// Tokens encoded by this step (timestamps and visuals of its groups).
    pub new_range: Range<usize>,
    /// Tokens of the previous window re-attended as context.
    pub overlap_range: Range<usize>,
    pub new_groups: Range<usize>,
    pub overlap_groups: Range<usize>,
    /// First group index of this window; timestamps of earlier groups are
    /// the chunk's historical timestamps.
    pub window_start_group: usize,
}

/// Deterministic chunk decomposition of a layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub chunks: Vec<Chunk>,
    pub keep_timestamp_history: bool,
    pub window_tokens: usize,
    pub step_tokens: usize,
}

impl ChunkPlan {
    pub fn n_chunks(&self) -> usize {
        self.chunks.len()
    }

    /// Chunk whose new range covers the given token position.
    pub fn chunk_of_token(&self, pos: usize) -> Option<usize> {
        self.chunks
            .iter()
            .find(|c| c.new_range.contains(&pos))
            .map(|c| c.chunk_id)
    }

    /// Fill in `chunk_id` on every visual role of the layout.
    pub fn annotate_layout(&self, layout: &mut SequenceLayout) {
        for chunk in &self.chunks {
            for pos in chunk.new_range.clone() {
                if let TokenRole::Visual { chunk_id, .. } = &mut layout.roles[pos] {
                    *chunk_id = Some(chunk.chunk_id);
                }
            }
        }
    }
}

/// Slide the window over the layout's groups.
///
/// Chunk 0 encodes the whole first window; every later chunk encodes the
/// final `step` groups of its window and re-attends the rest as overlap.
/// The last chunk may be shorter. Interior overlaps are always exactly
/// `window - step` groups.
pub fn plan_chunks(layout: &SequenceLayout, cfg: &ChunkConfig) -> Result<ChunkPlan, PrefillError> {
    layout.validate()?;
    let groups = layout.groups();
    let plan = |chunks| ChunkPlan {
        chunks,
        keep_timestamp_history: cfg.keep_timestamp_history,
        window_tokens: cfg.window_tokens,
        step_tokens: cfg.step_tokens,
    };
    let Some(unit) = layout.group_unit_tokens() else {
        return Ok(plan(Vec::new()));
    };
    if cfg.window_tokens < unit {
        return Err(PrefillError::WindowTooSmall {
            window: cfg.window_tokens,
            unit,
        });
    }
    if cfg.window_tokens % unit != 0 {
        return Err(PrefillError::Misaligned {
            what: "window",
            tokens: cfg.window_tokens,
            unit,
        });
    }
    if cfg.step_tokens % unit != 0 {
        return Err(PrefillError::Misaligned {
            what: "step",
            tokens: cfg.step_tokens,
            unit,
        });
    }
    let window = cfg.window_tokens / unit;
    let step = cfg.step_tokens / unit;
    if step == 0 || step > window {
        return Err(PrefillError::InvalidStep);
    }

    let total = groups.len();
    let token_span = |range: &Range<usize>| -> Range<usize> {
        if range.is_empty() {
            let at = groups
                .get(range.start)
                .map(|g| g.start())
                .unwrap_or_else(|| groups.last().unwrap().end());
            at..at
        } else {
            groups[range.start].start()..groups[range.end - 1].end()
        }
    };

    let mut chunks = Vec::new();
    let first_new = 0..window.min(total);
    chunks.push(Chunk {
        chunk_id: 0,
        new_range: token_span(&first_new),
        overlap_range: token_span(&(0..0)),
        new_groups: first_new,
        overlap_groups: 0..0,
        window_start_group: 0,
    });
    let mut i = 1;
    loop {
        let window_start = i * step;
        let prev_end = (i - 1) * step + window;
        if prev_end >= total {
            break;
        }
        let new_groups = prev_end..(window_start + window).min(total);
        let overlap_groups = window_start..prev_end;
        chunks.push(Chunk {
            chunk_id: i,
            new_range: token_span(&new_groups),
            overlap_range: token_span(&overlap_groups),
            new_groups,
            overlap_groups,
            window_start_group: window_start,
        });
        i += 1;
    }
    Ok(plan(chunks))
}

/// Visible key positions for every new-range token of one chunk: the
/// system prompt, historical timestamps (when kept), the overlap, and the
/// causal prefix of the new range including the token itself.
///
/// `chunk_id` must index into the plan.
pub fn chunk_visibility(
    plan: &ChunkPlan,
    chunk_id: usize,
    layout: &SequenceLayout,
) -> VisibilitySpec {
    let chunk = &plan.chunks[chunk_id];
    let mut base: Vec<usize> = (0..layout.system_len()).collect();
    if plan.keep_timestamp_history {
        for group in &layout.groups()[..chunk.window_start_group] {
            if let Some(ts) = group.timestamp_pos {
                base.push(ts);
            }
        }
    }
    base.extend(chunk.overlap_range.clone());
    let entries = chunk
        .new_range
        .clone()
        .map(|pos| {
            let mut entry = base.clone();
            entry.extend(chunk.new_range.start..=pos);
            entry
        })
        .collect();
    VisibilitySpec::from_entries(entries)
}

/// The populated dense store plus diagnostics.
#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub store: BiLevelKvStore,
    pub cost: CostReport,
    /// One logits row (vocab floats) per prefilled token, in layout order.
    pub logits: Vec<Vec<f32>>,
    pub plan: ChunkPlan,
}

/// Encode the layout chunk by chunk into a dense [`BiLevelKvStore`].
///
/// Each token's KV is produced exactly once, in the chunk where the token
/// was new; overlap tokens are re-attended but never recomputed. Query
/// tokens are left for decode.
pub fn run_prefill(
    model: &ModelBundle,
    layout: &SequenceLayout,
    cfg: &ChunkConfig,
) -> Result<PrefillOutput, PrefillError> {
    let config = &model.config;
    let plan = plan_chunks(layout, cfg)?;
    let mut meter = CostMeter::new(Phase::Prefill);
    let mut store = BiLevelKvStore::new(
        config.num_layers,
        config.num_heads,
        config.head_dim,
        model.checksum(),
    );
    store.next_position = layout.prefill_len();
    let mut logits: Vec<Vec<f32>> = Vec::with_capacity(layout.prefill_len());
    let vocab = config.vocab_size;

    let push_rows = |logits: &mut Vec<Vec<f32>>, flat: &[f32]| {
        for row in flat.chunks_exact(vocab) {
            logits.push(row.to_vec());
        }
    };

    // System prompt first: plain causal self-attention.
    let system_len = layout.system_len();
    if system_len > 0 {
        let positions: Vec<usize> = (0..system_len).collect();
        let vis = VisibilitySpec::full_causal(&[], &positions);
        let out = forward_segment(
            model,
            &layout.token_ids[..system_len],
            &positions,
            &[],
            &vis,
            &mut meter,
        )?;
        push_rows(&mut logits, &out.logits);
        store.system_kvs = out.new_kvs;
    } else {
        store.system_kvs = empty_layers(config);
    }
    store.timestamp_kvs = empty_layers(config);

    // All stream KVs encoded so far, used to slice overlap context.
    let mut stream_acc = empty_layers(config);
    let groups = layout.groups();

    for chunk in &plan.chunks {
        let window_start_token = groups[chunk.window_start_group].start();
        let mut context: Vec<LayerKv> = Vec::with_capacity(config.num_layers);
        for layer in 0..config.num_layers {
            let historical = if plan.keep_timestamp_history {
                store.timestamp_kvs[layer].slice_by_position(0..window_start_token)
            } else {
                LayerKv::new(config.num_heads, config.head_dim)
            };
            let overlap = stream_acc[layer].slice_by_position(chunk.overlap_range.clone());
            context.push(LayerKv::merge(&[
                &store.system_kvs[layer],
                &historical,
                &overlap,
            ])?);
        }

        let vis = chunk_visibility(&plan, chunk.chunk_id, layout);
        let positions: Vec<usize> = chunk.new_range.clone().collect();
        let out = forward_segment(
            model,
            &layout.token_ids[chunk.new_range.clone()],
            &positions,
            &context,
            &vis,
            &mut meter,
        )?;
        push_rows(&mut logits, &out.logits);

        // Split the fresh KVs: timestamps persist as cross-chunk context,
        // visual tokens become this chunk's dense block.
        let ts_indices: Vec<usize> = positions
            .iter()
            .enumerate()
            .filter(|(_, &p)| matches!(layout.roles[p], TokenRole::Timestamp { .. }))
            .map(|(i, _)| i)
            .collect();
        let visual_indices: Vec<usize> = positions
            .iter()
            .enumerate()
            .filter(|(_, &p)| matches!(layout.roles[p], TokenRole::Visual { .. }))
            .map(|(i, _)| i)
            .collect();

        let mut dense = Vec::with_capacity(config.num_layers);
        for (layer, fresh) in out.new_kvs.iter().enumerate() {
            if !ts_indices.is_empty() {
                let ts_block = fresh.select(&ts_indices);
                store.timestamp_kvs[layer] =
                    LayerKv::merge(&[&store.timestamp_kvs[layer], &ts_block])?;
            }
            dense.push(fresh.select(&visual_indices));
            stream_acc[layer] = LayerKv::merge(&[&stream_acc[layer], fresh])?;
        }
        store.insert_dense(chunk.chunk_id, dense, chunk.new_range.clone());
    }

    Ok(PrefillOutput {
        store,
        cost: meter.report(),
        logits,
        plan,
    })
}

fn empty_layers(config: &crate::model::ModelConfig) -> Vec<LayerKv> {
    (0..config.num_layers)
        .map(|_| LayerKv::new(config.num_heads, config.head_dim))
        .collect()
}
