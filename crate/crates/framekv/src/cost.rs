//! FLOP and KV-byte accounting.
//!
//! Two sides of the same ledger: [`CostMeter`] counts what the forward
//! passes actually execute, and the `predict_*` functions compute the same
//! counts in closed form from a chunk plan. The two must agree exactly —
//! that equality is asserted by the test suite, not assumed.
//!
//! Counting conventions (applied uniformly on both sides):
//!
//! * one multiply-accumulate = [`FLOPS_PER_MAC`] FLOPs;
//! * an attention score or weighted-sum contribution over one (query, key)
//!   pair costs `2 * head_dim` FLOPs per head per layer;
//! * softmax costs [`SOFTMAX_FLOPS_PER_SCORE`] FLOPs per attention score
//!   and rms-norm costs [`RMSNORM_FLOPS_PER_ELEM`] FLOPs per element; both
//!   are reported in the `other` bucket, never in the headline ratios;
//! * activations, residual adds, rotary rotations and embedding lookups
//!   are not counted;
//! * one cached token costs `layers * 2 * heads * head_dim * 4` bytes.

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::prefill::{ChunkConfig, ChunkPlan};
use crate::sequence::SequenceLayout;

/// One multiply-accumulate counts as two floating point operations.
pub const FLOPS_PER_MAC: u64 = 2;
/// Per attention score: max-subtract, exp, sum-accumulate, divide.
pub const SOFTMAX_FLOPS_PER_SCORE: u64 = 4;
/// Per normalized element: square-accumulate (2), scale, gain multiply.
pub const RMSNORM_FLOPS_PER_ELEM: u64 = 4;
/// f32 storage.
pub const BYTES_PER_FLOAT: u64 = 4;

/// Which inference phase a report covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

/// Cost counters for one phase.
///
/// `total_flops` is always the sum of the five FLOP buckets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub phase: Phase,
    pub attn_score_flops: u64,
    pub attn_weighted_sum_flops: u64,
    pub projection_flops: u64,
    pub ffn_flops: u64,
    pub other_flops: u64,
    pub kv_bytes_peak_resident: u64,
    pub kv_bytes_loaded_decode: u64,
}

impl CostReport {
    pub fn zero(phase: Phase) -> Self {
        CostReport {
            phase,
            attn_score_flops: 0,
            attn_weighted_sum_flops: 0,
            projection_flops: 0,
            ffn_flops: 0,
            other_flops: 0,
            kv_bytes_peak_resident: 0,
            kv_bytes_loaded_decode: 0,
        }
    }

    pub fn total_flops(&self) -> u64 {
        self.attn_score_flops
            + self.attn_weighted_sum_flops
            + self.projection_flops
            + self.ffn_flops
            + self.other_flops
    }

    /// Merge another report of the same phase. Counters add, peaks take
    /// the maximum; the operation is associative and commutative.
    pub fn merge(&mut self, other: &CostReport) {
        debug_assert_eq!(self.phase, other.phase);
        self.attn_score_flops += other.attn_score_flops;
        self.attn_weighted_sum_flops += other.attn_weighted_sum_flops;
        self.projection_flops += other.projection_flops;
        self.ffn_flops += other.ffn_flops;
        self.other_flops += other.other_flops;
        self.kv_bytes_peak_resident = self.kv_bytes_peak_resident.max(other.kv_bytes_peak_resident);
        self.kv_bytes_loaded_decode += other.kv_bytes_loaded_decode;
    }
}

/// Accumulates counts while forwards run.
#[derive(Debug, Clone)]
pub struct CostMeter {
    report: CostReport,
}

impl CostMeter {
    pub fn new(phase: Phase) -> Self {
        CostMeter {
            report: CostReport::zero(phase),
        }
    }

    /// Record attention over `pairs` (query, key) pairs, replicated across
    /// `layers * heads`. Covers scores, weighted sums and softmax.
    pub fn record_attention(&mut self, pairs: u64, layers: u64, heads: u64, head_dim: u64) {
        let per_pair = layers * heads * pairs;
        self.report.attn_score_flops += per_pair * FLOPS_PER_MAC * head_dim;
        self.report.attn_weighted_sum_flops += per_pair * FLOPS_PER_MAC * head_dim;
        self.report.other_flops += per_pair * SOFTMAX_FLOPS_PER_SCORE;
    }

    /// Record a dense projection of `tokens` rows from `in_dim` to `out_dim`.
    pub fn record_projection(&mut self, tokens: u64, in_dim: u64, out_dim: u64) {
        self.report.projection_flops += tokens * in_dim * out_dim * FLOPS_PER_MAC;
    }

    /// Record the two FFN matmuls for `tokens` rows in one layer.
    pub fn record_ffn(&mut self, tokens: u64, hidden_dim: u64, ffn_dim: u64) {
        self.report.ffn_flops += tokens * 2 * hidden_dim * ffn_dim * FLOPS_PER_MAC;
    }

    /// Record `count` rms-norm applications over `tokens` rows of `elems`.
    pub fn record_rmsnorm(&mut self, tokens: u64, elems: u64, count: u64) {
        self.report.other_flops += tokens * elems * count * RMSNORM_FLOPS_PER_ELEM;
    }

    /// Observe the KV tokens resident during one forward (context + fresh).
    pub fn observe_resident_kv_tokens(&mut self, tokens: u64, bytes_per_token: u64) {
        let bytes = tokens * bytes_per_token;
        if bytes > self.report.kv_bytes_peak_resident {
            self.report.kv_bytes_peak_resident = bytes;
        }
    }

    /// Record bytes loaded from the offline store into the decode cache.
    pub fn record_loaded_kv_bytes(&mut self, bytes: u64) {
        self.report.kv_bytes_loaded_decode += bytes;
    }

    pub fn report(&self) -> CostReport {
        self.report.clone()
    }
}

/// Bytes one cached token occupies across all layers (K and V).
pub fn kv_token_bytes(config: &ModelConfig) -> u64 {
    config.num_layers as u64
        * 2
        * config.num_heads as u64
        * config.head_dim as u64
        * BYTES_PER_FLOAT
}

/// Per-token linear cost shared by every forward: Q/K/V/O projections and
/// the FFN per layer, the vocabulary projection, and the norm bucket.
fn predict_token_linear(report: &mut CostReport, tokens: u64, config: &ModelConfig) {
    let layers = config.num_layers as u64;
    let hidden = config.hidden_dim as u64;
    let ffn = config.ffn_dim as u64;
    let vocab = config.vocab_size as u64;
    report.projection_flops += tokens * layers * 4 * hidden * hidden * FLOPS_PER_MAC;
    report.projection_flops += tokens * hidden * vocab * FLOPS_PER_MAC;
    report.ffn_flops += tokens * layers * 2 * hidden * ffn * FLOPS_PER_MAC;
    // Two pre-norms per layer plus the final norm.
    report.other_flops += tokens * (2 * layers + 1) * hidden * RMSNORM_FLOPS_PER_ELEM;
}

fn predict_attention(report: &mut CostReport, pairs: u64, config: &ModelConfig) {
    let lh = config.num_layers as u64 * config.num_heads as u64;
    let d = config.head_dim as u64;
    report.attn_score_flops += lh * pairs * FLOPS_PER_MAC * d;
    report.attn_weighted_sum_flops += lh * pairs * FLOPS_PER_MAC * d;
    report.other_flops += lh * pairs * SOFTMAX_FLOPS_PER_SCORE;
}

/// Closed-form prediction of the full prefill cost for `layout` under
/// `plan`, mirroring exactly what the meter counts when `run_prefill`
/// executes the same plan: the system forward, then per chunk the
/// new-token attention over (system + historical timestamps + overlap +
/// causal-within-chunk) plus the per-token linear work.
pub fn predict_prefill_cost(
    layout: &SequenceLayout,
    plan: &ChunkPlan,
    config: &ModelConfig,
) -> CostReport {
    let mut report = CostReport::zero(Phase::Prefill);
    let bytes_per_token = kv_token_bytes(config);
    let system_len = layout.system_len() as u64;

    if system_len > 0 {
        // Causal self-attention over the system prompt.
        predict_attention(&mut report, system_len * (system_len + 1) / 2, config);
        predict_token_linear(&mut report, system_len, config);
        let resident = system_len * bytes_per_token;
        report.kv_bytes_peak_resident = report.kv_bytes_peak_resident.max(resident);
    }

    let groups = layout.groups();
    for chunk in &plan.chunks {
        let new_tokens = chunk.new_range.len() as u64;
        let overlap_tokens = chunk.overlap_range.len() as u64;
        let historical_ts = if plan.keep_timestamp_history {
            groups[..chunk.window_start_group]
                .iter()
                .filter(|g| g.timestamp_pos.is_some())
                .count() as u64
        } else {
            0
        };
        let context = system_len + historical_ts + overlap_tokens;
        let pairs = new_tokens * context + new_tokens * (new_tokens + 1) / 2;
        predict_attention(&mut report, pairs, config);
        predict_token_linear(&mut report, new_tokens, config);
        let resident = (context + new_tokens) * bytes_per_token;
        report.kv_bytes_peak_resident = report.kv_bytes_peak_resident.max(resident);
    }
    report
}

/// Prediction for the degenerate single-window plan, used as the
/// full-attention baseline. Splitting the system prompt from the stream
/// does not change the pair count: it equals N(N+1)/2 for N prefilled
/// tokens either way.
pub fn predict_full_prefill_cost(layout: &SequenceLayout, config: &ModelConfig) -> CostReport {
    let degenerate = ChunkConfig::covering(layout);
    let plan =
        crate::prefill::plan_chunks(layout, &degenerate).expect("degenerate window always plans");
    predict_prefill_cost(layout, &plan, config)
}

/// Fraction of decode-time visual KV bytes loaded relative to all-dense,
/// for `n_chunks` equal chunks of `chunk_tokens` tokens with `top_k`
/// selected dense, pooling factor `pool_factor`, and `overhead_tokens`
/// always-dense tokens (system prompt + timestamps).
pub fn predict_decode_kv_fraction(
    n_chunks: usize,
    chunk_tokens: usize,
    top_k: usize,
    pool_factor: usize,
    overhead_tokens: usize,
) -> f64 {
    assert!(n_chunks > 0 && chunk_tokens > 0 && pool_factor > 0);
    let k = top_k.min(n_chunks);
    let sparse_tokens = chunk_tokens.div_ceil(pool_factor);
    let loaded = k * chunk_tokens + (n_chunks - k) * sparse_tokens + overhead_tokens;
    let dense = n_chunks * chunk_tokens + overhead_tokens;
    loaded as f64 / dense as f64
}

/// Same fraction for a concrete plan whose chunks may be unequal (the last
/// chunk of a sliding window is usually shorter).
pub fn predict_decode_kv_fraction_plan(
    chunk_tokens: &[usize],
    selected: &[usize],
    pool_factor: usize,
    overhead_tokens: usize,
) -> f64 {
    let mut loaded = overhead_tokens;
    let mut dense = overhead_tokens;
    for (id, &c) in chunk_tokens.iter().enumerate() {
        dense += c;
        loaded += if selected.contains(&id) {
            c
        } else {
            c.div_ceil(pool_factor)
        };
    }
    loaded as f64 / dense as f64
}

/// Ordinary least-squares fit of y against x; returns (slope, intercept, r2).
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    assert!(points.len() >= 2);
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for &(x, y) in points {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy) / (sxx * syy)
    };
    (slope, intercept, r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_fraction_all_dense_is_one() {
        assert_eq!(predict_decode_kv_fraction(8, 64, 8, 4, 0), 1.0);
        assert_eq!(predict_decode_kv_fraction(3, 10, 7, 2, 5), 1.0);
    }

    #[test]
    fn kv_fraction_closed_form_case() {
        // 2 dense chunks of 64, 6 sparse at 64/4 = 16 each: (128+96)/512.
        let f = predict_decode_kv_fraction(8, 64, 2, 4, 0);
        assert_eq!(f, 0.4375);
    }

    #[test]
    fn kv_fraction_top_zero_is_pool_reciprocal_plus_overhead() {
        let f = predict_decode_kv_fraction(4, 16, 0, 4, 0);
        assert_eq!(f, 0.25);
        let with_overhead = predict_decode_kv_fraction(4, 16, 0, 4, 36);
        assert_eq!(with_overhead, (4.0 * 4.0 + 36.0) / (64.0 + 36.0));
    }

    #[test]
    fn merge_adds_counters_and_maxes_peak() {
        let mut a = CostReport::zero(Phase::Prefill);
        a.attn_score_flops = 10;
        a.kv_bytes_peak_resident = 100;
        let mut b = CostReport::zero(Phase::Prefill);
        b.attn_score_flops = 5;
        b.kv_bytes_peak_resident = 120;
        a.merge(&b);
        assert_eq!(a.attn_score_flops, 15);
        assert_eq!(a.kv_bytes_peak_resident, 120);
        assert_eq!(a.total_flops(), 15);
    }

    #[test]
    fn linear_fit_recovers_exact_line() {
        let pts: Vec<(f64, f64)> = (1..6).map(|i| (i as f64, 3.0 * i as f64 + 2.0)).collect();
        let (slope, intercept, r2) = linear_fit(&pts);
        assert!((slope - 3.0).abs() < 1e-12);
        assert!((intercept - 2.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }
}
