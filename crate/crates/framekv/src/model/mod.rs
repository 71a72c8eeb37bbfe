//! Minimal decoder-only transformer with per-token visibility sets.
//!
//! The same weights serve two computation paths: [`forward_segment`] runs
//! any consecutive segment against cached context KVs under an explicit
//! [`VisibilitySpec`], and [`full_oracle`] runs plain one-pass causal
//! attention with no caching machinery. The oracle is the ground-truth
//! comparator for every equivalence test in the crate.
//!
//! All arithmetic is f32. Rotary position embeddings are indexed by global
//! position so cached KVs stay valid across forwards. Operations are pure
//! functions of (weights, inputs) and run single-threaded.

mod checkpoint;
mod forward;

pub use checkpoint::{load_model, save_model, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{full_oracle, full_oracle_greedy, forward_segment, greedy_argmax, SegmentOutput};
pub(crate) use forward::rope_rotate;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence end {end} exceeds max_position {max}")]
    PositionOverflow { end: usize, max: usize },
    #[error("segment position {pos} does not come after context (max context position {ctx_max})")]
    PositionCollision { pos: usize, ctx_max: usize },
    #[error("visibility references unknown position {0}")]
    UnknownVisibilityPosition(usize),
    #[error("visibility entry for position {0} is non-causal, unsorted, or missing self")]
    InvalidVisibility(usize),
    #[error("token id {0} outside vocabulary")]
    TokenOutOfRange(u32),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
}

/// Dimensions and seeding of the toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    pub rope_base: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.num_layers == 0
            || self.num_heads == 0
            || self.head_dim == 0
            || self.hidden_dim == 0
            || self.ffn_dim == 0
            || self.vocab_size == 0
            || self.max_position == 0
        {
            return err("all dimensions must be nonzero".into());
        }
        if self.hidden_dim != self.num_heads * self.head_dim {
            return err(format!(
                "hidden_dim ({}) must equal num_heads ({}) * head_dim ({})",
                self.hidden_dim, self.num_heads, self.head_dim
            ));
        }
        if self.head_dim % 2 != 0 {
            return err("head_dim must be even for rotary embeddings".into());
        }
        if !self.rope_base.is_finite() || self.rope_base <= 0.0 {
            return err("rope_base must be positive and finite".into());
        }
        Ok(())
    }
}

/// Dense row-major f32 matrix; `x @ W` maps `rows` inputs to `cols` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    fn uniform(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Matrix {
        // Weight scheme v1: per-matrix uniform(-l, l), l = sqrt(6/(rows+cols)).
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-limit..limit) as f32)
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn from_data(rows: usize, cols: usize, data: Vec<f32>) -> Matrix {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }
}

/// Attention and FFN weights for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm_gain: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm_gain: Vec<f32>,
    pub w1: Matrix,
    pub w2: Matrix,
}

/// Immutable weights plus config; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm_gain: Vec<f32>,
    pub unembedding: Matrix,
}

impl ModelBundle {
    /// CRC-64 over the checkpoint serialization of config and weights.
    pub fn checksum(&self) -> u64 {
        checkpoint::checksum(self)
    }

    pub fn weights_finite(&self) -> bool {
        let finite = |m: &Matrix| m.data.iter().all(|v| v.is_finite());
        finite(&self.embedding)
            && finite(&self.unembedding)
            && self.final_norm_gain.iter().all(|v| v.is_finite())
            && self.layers.iter().all(|l| {
                finite(&l.wq)
                    && finite(&l.wk)
                    && finite(&l.wv)
                    && finite(&l.wo)
                    && finite(&l.w1)
                    && finite(&l.w2)
                    && l.attn_norm_gain.iter().all(|v| v.is_finite())
                    && l.ffn_norm_gain.iter().all(|v| v.is_finite())
            })
    }
}

/// Build deterministic weights from `config.seed`.
///
/// Matrices are drawn in checkpoint declaration order from a single
/// ChaCha20 stream; norm gains start at 1. Identical (config, seed) pairs
/// produce bit-identical weights.
pub fn init_model(config: ModelConfig) -> Result<ModelBundle, ModelError> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let h = config.hidden_dim;
    let embedding = Matrix::uniform(&mut rng, config.vocab_size, h);
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            attn_norm_gain: vec![1.0; h],
            wq: Matrix::uniform(&mut rng, h, h),
            wk: Matrix::uniform(&mut rng, h, h),
            wv: Matrix::uniform(&mut rng, h, h),
            wo: Matrix::uniform(&mut rng, h, h),
            ffn_norm_gain: vec![1.0; h],
            w1: Matrix::uniform(&mut rng, h, config.ffn_dim),
            w2: Matrix::uniform(&mut rng, config.ffn_dim, h),
        })
        .collect();
    let final_norm_gain = vec![1.0; h];
    let unembedding = Matrix::uniform(&mut rng, h, config.vocab_size);
    let bundle = ModelBundle {
        config,
        embedding,
        layers,
        final_norm_gain,
        unembedding,
    };
    debug_assert!(bundle.weights_finite());
    Ok(bundle)
}

/// Cached keys and values for one layer.
///
/// Stored token-major in memory (`[token][head][dim]`); positions are the
/// global indices the keys were rotated at and are strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    num_heads: usize,
    head_dim: usize,
    positions: Vec<usize>,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl LayerKv {
    pub fn new(num_heads: usize, head_dim: usize) -> LayerKv {
        LayerKv {
            num_heads,
            head_dim,
            positions: Vec::new(),
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn from_parts(
        num_heads: usize,
        head_dim: usize,
        positions: Vec<usize>,
        keys: Vec<f32>,
        values: Vec<f32>,
    ) -> Result<LayerKv, ModelError> {
        let expect = positions.len() * num_heads * head_dim;
        if keys.len() != expect || values.len() != expect {
            return Err(ModelError::ShapeMismatch(format!(
                "kv block expects {} floats per tensor, got keys {} values {}",
                expect,
                keys.len(),
                values.len()
            )));
        }
        if !positions.windows(2).all(|w| w[0] < w[1]) {
            return Err(ModelError::ShapeMismatch(
                "kv positions must be strictly increasing".into(),
            ));
        }
        Ok(LayerKv {
            num_heads,
            head_dim,
            positions,
            keys,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn keys_raw(&self) -> &[f32] {
        &self.keys
    }

    pub fn values_raw(&self) -> &[f32] {
        &self.values
    }

    fn row_offset(&self, token: usize, head: usize) -> usize {
        (token * self.num_heads + head) * self.head_dim
    }

    pub fn key(&self, token: usize, head: usize) -> &[f32] {
        let o = self.row_offset(token, head);
        &self.keys[o..o + self.head_dim]
    }

    pub fn value(&self, token: usize, head: usize) -> &[f32] {
        let o = self.row_offset(token, head);
        &self.values[o..o + self.head_dim]
    }

    /// Append one token's rows (`[head][dim]` layout, `num_heads * head_dim`
    /// floats each). The position must exceed the current maximum.
    pub fn push(&mut self, position: usize, key_row: &[f32], value_row: &[f32]) {
        debug_assert_eq!(key_row.len(), self.num_heads * self.head_dim);
        debug_assert_eq!(value_row.len(), self.num_heads * self.head_dim);
        debug_assert!(self.positions.last().is_none_or(|&p| p < position));
        self.positions.push(position);
        self.keys.extend_from_slice(key_row);
        self.values.extend_from_slice(value_row);
    }

    /// Merge blocks into one position-sorted block. Positions must be
    /// globally unique; duplicates are an error.
    pub fn merge(parts: &[&LayerKv]) -> Result<LayerKv, ModelError> {
        let (num_heads, head_dim) = parts
            .iter()
            .find(|p| !p.is_empty())
            .map(|p| (p.num_heads, p.head_dim))
            .or_else(|| parts.first().map(|p| (p.num_heads, p.head_dim)))
            .unwrap_or((0, 0));
        let mut entries: Vec<(usize, &LayerKv, usize)> = Vec::new();
        for part in parts {
            if !part.is_empty() && (part.num_heads != num_heads || part.head_dim != head_dim) {
                return Err(ModelError::ShapeMismatch(
                    "kv blocks disagree on head shape".into(),
                ));
            }
            for (i, &pos) in part.positions.iter().enumerate() {
                entries.push((pos, part, i));
            }
        }
        entries.sort_by_key(|e| e.0);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(ModelError::ShapeMismatch(
                "kv merge found duplicate positions".into(),
            ));
        }
        let mut out = LayerKv::new(num_heads, head_dim);
        let row = num_heads * head_dim;
        for (pos, part, i) in entries {
            out.positions.push(pos);
            out.keys.extend_from_slice(&part.keys[i * row..(i + 1) * row]);
            out.values
                .extend_from_slice(&part.values[i * row..(i + 1) * row]);
        }
        Ok(out)
    }

    /// Sub-block of all tokens whose position falls in `range`.
    pub fn slice_by_position(&self, range: std::ops::Range<usize>) -> LayerKv {
        let lo = self.positions.partition_point(|&p| p < range.start);
        let hi = self.positions.partition_point(|&p| p < range.end);
        let indices: Vec<usize> = (lo..hi).collect();
        self.select(&indices)
    }

    /// Sub-block holding the given token indices (must be ascending).
    pub fn select(&self, indices: &[usize]) -> LayerKv {
        let mut out = LayerKv::new(self.num_heads, self.head_dim);
        let row = self.num_heads * self.head_dim;
        for &i in indices {
            out.positions.push(self.positions[i]);
            out.keys.extend_from_slice(&self.keys[i * row..(i + 1) * row]);
            out.values
                .extend_from_slice(&self.values[i * row..(i + 1) * row]);
        }
        out
    }
}

/// Per-query ordered sets of visible key positions.
///
/// Entry `i` lists the global positions segment token `i` may attend to:
/// always causal and always including the token itself.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilitySpec {
    entries: Vec<Vec<usize>>,
}

impl VisibilitySpec {
    pub fn from_entries(entries: Vec<Vec<usize>>) -> VisibilitySpec {
        VisibilitySpec { entries }
    }

    /// Every segment token sees all context positions and every segment
    /// position up to and including itself.
    pub fn full_causal(context_positions: &[usize], segment_positions: &[usize]) -> VisibilitySpec {
        let entries = segment_positions
            .iter()
            .enumerate()
            .map(|(i, _)| {
                context_positions
                    .iter()
                    .copied()
                    .chain(segment_positions[..=i].iter().copied())
                    .collect()
            })
            .collect();
        VisibilitySpec { entries }
    }

    pub fn entries(&self) -> &[Vec<usize>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of (query, key) pairs.
    pub fn pair_count(&self) -> u64 {
        self.entries.iter().map(|e| e.len() as u64).sum()
    }
}
