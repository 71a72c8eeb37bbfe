//! Segment forward pass and the full-attention oracle.
//!
//! Both paths share the low-level primitives (matmul, rms-norm, rotary
//! rotation, softmax) and iterate keys in ascending position order, so a
//! single full-causal `forward_segment` call reproduces `full_oracle`
//! bit-for-bit. Re-partitioned computations (chunked prefill, cached
//! decode) agree with the oracle to 1e-5 absolute per logit.

use super::{LayerKv, ModelBundle, ModelError, VisibilitySpec};
use crate::cost::{kv_token_bytes, CostMeter};

const RMSNORM_EPS: f32 = 1e-5;

/// Logits and freshly produced per-layer KVs for one segment.
#[derive(Debug, Clone)]
pub struct SegmentOutput {
    /// Row-major `[n_tokens][vocab]`.
    pub logits: Vec<f32>,
    /// One block per layer, carrying the segment's global positions.
    pub new_kvs: Vec<LayerKv>,
}

/// Rotate one head vector to (or from, with negative `pos`) a position.
pub(crate) fn rope_rotate(vec: &mut [f32], pos: i64, base: f64) {
    let d = vec.len();
    let half = d / 2;
    for i in 0..half {
        let freq = base.powf(-2.0 * i as f64 / d as f64);
        let (sin, cos) = (pos as f64 * freq).sin_cos();
        let (s, c) = (sin as f32, cos as f32);
        let a = vec[i];
        let b = vec[i + half];
        vec[i] = a * c - b * s;
        vec[i + half] = a * s + b * c;
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_inplace(scores: &mut [f32]) {
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

fn rmsnorm_rows(x: &[f32], n: usize, dim: usize, gain: &[f32], out: &mut [f32]) {
    for t in 0..n {
        let row = &x[t * dim..(t + 1) * dim];
        let ss: f32 = row.iter().map(|v| v * v).sum();
        let inv = 1.0 / (ss / dim as f32 + RMSNORM_EPS).sqrt();
        let out_row = &mut out[t * dim..(t + 1) * dim];
        for j in 0..dim {
            out_row[j] = row[j] * inv * gain[j];
        }
    }
}

/// `out[n][cols] = x[n][rows] @ w`; accumulation runs over `rows` ascending.
fn matmul_rows(x: &[f32], n: usize, w: &super::Matrix, out: &mut Vec<f32>) {
    let (rows, cols) = (w.rows(), w.cols());
    out.clear();
    out.resize(n * cols, 0.0);
    let wd = w.data();
    for t in 0..n {
        let x_row = &x[t * rows..(t + 1) * rows];
        let out_row = &mut out[t * cols..(t + 1) * cols];
        for (r, &xv) in x_row.iter().enumerate() {
            let w_row = &wd[r * cols..(r + 1) * cols];
            for c in 0..cols {
                out_row[c] += xv * w_row[c];
            }
        }
    }
}

fn silu_inplace(x: &mut [f32]) {
    for v in x.iter_mut() {
        *v *= 1.0 / (1.0 + (-*v).exp());
    }
}

/// Greedy pick: highest logit, ties broken toward the lowest token id.
pub fn greedy_argmax(logits_row: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits_row.iter().enumerate() {
        if v > logits_row[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Clone, Copy)]
enum KeyRef {
    Ctx(usize),
    Seg(usize),
}

struct Resolved {
    refs: Vec<Vec<KeyRef>>,
    pairs: u64,
}

fn validate_and_resolve(
    model: &ModelBundle,
    token_ids: &[u32],
    positions: &[usize],
    context: &[LayerKv],
    visibility: &VisibilitySpec,
) -> Result<Resolved, ModelError> {
    let cfg = &model.config;
    if token_ids.len() != positions.len() || visibility.len() != token_ids.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "segment has {} ids, {} positions, {} visibility entries",
            token_ids.len(),
            positions.len(),
            visibility.len()
        )));
    }
    if let Some(&id) = token_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange(id));
    }
    if !positions.windows(2).all(|w| w[0] < w[1]) {
        return Err(ModelError::ShapeMismatch(
            "segment positions must be strictly increasing".into(),
        ));
    }
    if let Some(&last) = positions.last() {
        if last >= cfg.max_position {
            return Err(ModelError::PositionOverflow {
                end: last + 1,
                max: cfg.max_position,
            });
        }
    }
    if !context.is_empty() && context.len() != cfg.num_layers {
        return Err(ModelError::ShapeMismatch(format!(
            "context has {} layers, model has {}",
            context.len(),
            cfg.num_layers
        )));
    }
    let ctx_positions: &[usize] = context.first().map(|c| c.positions()).unwrap_or(&[]);
    for layer_kv in context {
        if layer_kv.positions() != ctx_positions {
            return Err(ModelError::ShapeMismatch(
                "context layers disagree on positions".into(),
            ));
        }
        if layer_kv.num_heads() != cfg.num_heads || layer_kv.head_dim() != cfg.head_dim {
            return Err(ModelError::ShapeMismatch(
                "context head shape does not match model".into(),
            ));
        }
    }
    if let (Some(&ctx_max), Some(&seg_min)) = (ctx_positions.last(), positions.first()) {
        if seg_min <= ctx_max {
            return Err(ModelError::PositionCollision {
                pos: seg_min,
                ctx_max,
            });
        }
    }

    let mut refs = Vec::with_capacity(token_ids.len());
    let mut pairs = 0u64;
    for (i, entry) in visibility.entries().iter().enumerate() {
        let self_pos = positions[i];
        if !entry.windows(2).all(|w| w[0] < w[1]) {
            return Err(ModelError::InvalidVisibility(self_pos));
        }
        let mut resolved = Vec::with_capacity(entry.len());
        let mut saw_self = false;
        for &p in entry {
            if p > self_pos {
                return Err(ModelError::InvalidVisibility(self_pos));
            }
            saw_self |= p == self_pos;
            if let Ok(idx) = ctx_positions.binary_search(&p) {
                resolved.push(KeyRef::Ctx(idx));
            } else if let Ok(idx) = positions[..=i].binary_search(&p) {
                resolved.push(KeyRef::Seg(idx));
            } else {
                return Err(ModelError::UnknownVisibilityPosition(p));
            }
        }
        if !saw_self {
            return Err(ModelError::InvalidVisibility(self_pos));
        }
        pairs += resolved.len() as u64;
        refs.push(resolved);
    }
    Ok(Resolved { refs, pairs })
}

/// Run one consecutive segment against cached context KVs.
///
/// Rotary encoding uses the given global positions, so the returned KVs
/// can be carried as context into later forwards. `visibility` gates
/// attention per query; information flows only along visible edges.
pub fn forward_segment(
    model: &ModelBundle,
    token_ids: &[u32],
    positions: &[usize],
    context: &[LayerKv],
    visibility: &VisibilitySpec,
    meter: &mut CostMeter,
) -> Result<SegmentOutput, ModelError> {
    let cfg = &model.config;
    let resolved = validate_and_resolve(model, token_ids, positions, context, visibility)?;
    let n = token_ids.len();
    let (hidden, heads, d) = (cfg.hidden_dim, cfg.num_heads, cfg.head_dim);

    if n == 0 {
        return Ok(SegmentOutput {
            logits: Vec::new(),
            new_kvs: (0..cfg.num_layers).map(|_| LayerKv::new(heads, d)).collect(),
        });
    }

    let ctx_len = context.first().map(|c| c.len()).unwrap_or(0);
    meter.observe_resident_kv_tokens((ctx_len + n) as u64, kv_token_bytes(cfg));

    let mut x = vec![0.0f32; n * hidden];
    for (t, &id) in token_ids.iter().enumerate() {
        x[t * hidden..(t + 1) * hidden].copy_from_slice(model.embedding.row(id as usize));
    }

    let scale = 1.0 / (d as f32).sqrt();
    let mut normed = vec![0.0f32; n * hidden];
    let mut q = Vec::new();
    let mut k = Vec::new();
    let mut v = Vec::new();
    let mut attn_out = vec![0.0f32; n * hidden];
    let mut proj = Vec::new();
    let mut ff = Vec::new();
    let mut scores: Vec<f32> = Vec::new();
    let mut new_kvs = Vec::with_capacity(cfg.num_layers);

    for (layer_idx, layer) in model.layers.iter().enumerate() {
        rmsnorm_rows(&x, n, hidden, &layer.attn_norm_gain, &mut normed);
        meter.record_rmsnorm(n as u64, hidden as u64, 1);
        matmul_rows(&normed, n, &layer.wq, &mut q);
        matmul_rows(&normed, n, &layer.wk, &mut k);
        matmul_rows(&normed, n, &layer.wv, &mut v);
        meter.record_projection(3 * n as u64, hidden as u64, hidden as u64);

        for (t, &pos) in positions.iter().enumerate() {
            for h in 0..heads {
                let o = t * hidden + h * d;
                rope_rotate(&mut q[o..o + d], pos as i64, cfg.rope_base);
                rope_rotate(&mut k[o..o + d], pos as i64, cfg.rope_base);
            }
        }

        let ctx_kv = context.get(layer_idx);
        attn_out.iter_mut().for_each(|o| *o = 0.0);
        for t in 0..n {
            let refs = &resolved.refs[t];
            for h in 0..heads {
                let q_row = &q[t * hidden + h * d..t * hidden + (h + 1) * d];
                scores.clear();
                for r in refs {
                    let k_row = match *r {
                        KeyRef::Ctx(i) => ctx_kv.expect("ctx ref implies context").key(i, h),
                        KeyRef::Seg(i) => &k[i * hidden + h * d..i * hidden + (h + 1) * d],
                    };
                    scores.push(dot(q_row, k_row) * scale);
                }
                softmax_inplace(&mut scores);
                let out_row_base = t * hidden + h * d;
                for (w, r) in scores.iter().zip(refs) {
                    let v_row = match *r {
                        KeyRef::Ctx(i) => ctx_kv.expect("ctx ref implies context").value(i, h),
                        KeyRef::Seg(i) => &v[i * hidden + h * d..i * hidden + (h + 1) * d],
                    };
                    for j in 0..d {
                        attn_out[out_row_base + j] += w * v_row[j];
                    }
                }
            }
        }
        meter.record_attention(resolved.pairs, 1, heads as u64, d as u64);

        matmul_rows(&attn_out, n, &layer.wo, &mut proj);
        meter.record_projection(n as u64, hidden as u64, hidden as u64);
        for (xv, pv) in x.iter_mut().zip(&proj) {
            *xv += pv;
        }

        rmsnorm_rows(&x, n, hidden, &layer.ffn_norm_gain, &mut normed);
        meter.record_rmsnorm(n as u64, hidden as u64, 1);
        matmul_rows(&normed, n, &layer.w1, &mut ff);
        silu_inplace(&mut ff);
        matmul_rows(&ff, n, &layer.w2, &mut proj);
        meter.record_ffn(n as u64, hidden as u64, cfg.ffn_dim as u64);
        for (xv, pv) in x.iter_mut().zip(&proj) {
            *xv += pv;
        }

        let mut layer_out = LayerKv::new(heads, d);
        for (t, &pos) in positions.iter().enumerate() {
            layer_out.push(
                pos,
                &k[t * hidden..(t + 1) * hidden],
                &v[t * hidden..(t + 1) * hidden],
            );
        }
        new_kvs.push(layer_out);
    }

    rmsnorm_rows(&x, n, hidden, &model.final_norm_gain, &mut normed);
    meter.record_rmsnorm(n as u64, hidden as u64, 1);
    let mut logits = Vec::new();
    matmul_rows(&normed, n, &model.unembedding, &mut logits);
    meter.record_projection(n as u64, hidden as u64, cfg.vocab_size as u64);

    Ok(SegmentOutput { logits, new_kvs })
}

/// Ground-truth comparator: plain one-pass causal attention over the whole
/// sequence, positions `0..n`, no cache, no visibility machinery.
pub fn full_oracle(model: &ModelBundle, token_ids: &[u32]) -> Result<Vec<f32>, ModelError> {
    let cfg = &model.config;
    let n = token_ids.len();
    if n > cfg.max_position {
        return Err(ModelError::PositionOverflow {
            end: n,
            max: cfg.max_position,
        });
    }
    if let Some(&id) = token_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange(id));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let (hidden, heads, d) = (cfg.hidden_dim, cfg.num_heads, cfg.head_dim);

    let mut x = vec![0.0f32; n * hidden];
    for (t, &id) in token_ids.iter().enumerate() {
        x[t * hidden..(t + 1) * hidden].copy_from_slice(model.embedding.row(id as usize));
    }

    let scale = 1.0 / (d as f32).sqrt();
    let mut normed = vec![0.0f32; n * hidden];
    let mut q = Vec::new();
    let mut k = Vec::new();
    let mut v = Vec::new();
    let mut attn_out = vec![0.0f32; n * hidden];
    let mut proj = Vec::new();
    let mut ff = Vec::new();
    let mut scores: Vec<f32> = Vec::new();

    for layer in &model.layers {
        rmsnorm_rows(&x, n, hidden, &layer.attn_norm_gain, &mut normed);
        matmul_rows(&normed, n, &layer.wq, &mut q);
        matmul_rows(&normed, n, &layer.wk, &mut k);
        matmul_rows(&normed, n, &layer.wv, &mut v);

        for t in 0..n {
            for h in 0..heads {
                let o = t * hidden + h * d;
                rope_rotate(&mut q[o..o + d], t as i64, cfg.rope_base);
                rope_rotate(&mut k[o..o + d], t as i64, cfg.rope_base);
            }
        }

        attn_out.iter_mut().for_each(|o| *o = 0.0);
        for t in 0..n {
            for h in 0..heads {
                let q_row = &q[t * hidden + h * d..t * hidden + (h + 1) * d];
                scores.clear();
                for key in 0..=t {
                    let k_row = &k[key * hidden + h * d..key * hidden + (h + 1) * d];
                    scores.push(dot(q_row, k_row) * scale);
                }
                softmax_inplace(&mut scores);
                let out_row_base = t * hidden + h * d;
                for (key, w) in scores.iter().enumerate() {
                    let v_row = &v[key * hidden + h * d..key * hidden + (h + 1) * d];
                    for j in 0..d {
                        attn_out[out_row_base + j] += w * v_row[j];
                    }
                }
            }
        }

        matmul_rows(&attn_out, n, &layer.wo, &mut proj);
        for (xv, pv) in x.iter_mut().zip(&proj) {
            *xv += pv;
        }
        rmsnorm_rows(&x, n, hidden, &layer.ffn_norm_gain, &mut normed);
        matmul_rows(&normed, n, &layer.w1, &mut ff);
        silu_inplace(&mut ff);
        matmul_rows(&ff, n, &layer.w2, &mut proj);
        for (xv, pv) in x.iter_mut().zip(&proj) {
            *xv += pv;
        }
    }

    rmsnorm_rows(&x, n, hidden, &model.final_norm_gain, &mut normed);
    let mut logits = Vec::new();
    matmul_rows(&normed, n, &model.unembedding, &mut logits);
    Ok(logits)
}

/// Greedy continuation computed entirely through the oracle: re-encodes the
/// whole growing sequence each step. Slow by design; reference only.
pub fn full_oracle_greedy(
    model: &ModelBundle,
    prompt: &[u32],
    max_new_tokens: usize,
) -> Result<Vec<u32>, ModelError> {
    let vocab = model.config.vocab_size;
    let mut sequence = prompt.to_vec();
    let mut generated = Vec::with_capacity(max_new_tokens);
    for _ in 0..max_new_tokens {
        let logits = full_oracle(model, &sequence)?;
        let last = &logits[(sequence.len() - 1) * vocab..sequence.len() * vocab];
        let next = greedy_argmax(last);
        generated.push(next);
        sequence.push(next);
    }
    Ok(generated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{CostMeter, Phase};
    use crate::model::{init_model, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn test_model(seed: u64) -> ModelBundle {
        init_model(ModelConfig {
            num_layers: 2,
            num_heads: 2,
            head_dim: 8,
            hidden_dim: 16,
            ffn_dim: 32,
            vocab_size: 64,
            max_position: 256,
            rope_base: 10000.0,
            seed,
        })
        .unwrap()
    }

    fn random_ids(rng: &mut ChaCha20Rng, n: usize, vocab: usize) -> Vec<u32> {
        (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
    }

    fn meter() -> CostMeter {
        CostMeter::new(Phase::Prefill)
    }

    #[test]
    fn single_token_shapes() {
        let model = test_model(1);
        let vis = VisibilitySpec::full_causal(&[], &[0]);
        let out = forward_segment(&model, &[5], &[0], &[], &vis, &mut meter()).unwrap();
        assert_eq!(out.logits.len(), model.config.vocab_size);
        assert_eq!(out.new_kvs.len(), 2);
        assert_eq!(out.new_kvs[0].len(), 1);
    }

    #[test]
    fn oracle_single_token_row() {
        let model = test_model(1);
        let logits = full_oracle(&model, &[3]).unwrap();
        assert_eq!(logits.len(), model.config.vocab_size);
    }

    #[test]
    fn oracle_is_deterministic() {
        let model = test_model(2);
        let ids = [1u32, 9, 40, 7];
        let a = full_oracle(&model, &ids).unwrap();
        let b = full_oracle(&model, &ids).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_causal_segment_matches_oracle_exactly() {
        let model = test_model(3);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let ids = random_ids(&mut rng, 24, model.config.vocab_size);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let vis = VisibilitySpec::full_causal(&[], &positions);
        let seg = forward_segment(&model, &ids, &positions, &[], &vis, &mut meter()).unwrap();
        let oracle = full_oracle(&model, &ids).unwrap();
        assert_eq!(seg.logits, oracle, "same computation path must be bit-identical");
    }

    #[test]
    fn two_segment_split_matches_oracle() {
        let model = test_model(4);
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let ids = random_ids(&mut rng, 20, model.config.vocab_size);
        let oracle = full_oracle(&model, &ids).unwrap();

        let split = 8;
        let pos_a: Vec<usize> = (0..split).collect();
        let vis_a = VisibilitySpec::full_causal(&[], &pos_a);
        let a = forward_segment(&model, &ids[..split], &pos_a, &[], &vis_a, &mut meter()).unwrap();

        let pos_b: Vec<usize> = (split..ids.len()).collect();
        let vis_b = VisibilitySpec::full_causal(&pos_a, &pos_b);
        let b =
            forward_segment(&model, &ids[split..], &pos_b, &a.new_kvs, &vis_b, &mut meter())
                .unwrap();

        let vocab = model.config.vocab_size;
        for (i, (&got, &want)) in a
            .logits
            .iter()
            .chain(b.logits.iter())
            .zip(oracle.iter())
            .enumerate()
        {
            assert!(
                (got - want).abs() <= 1e-5,
                "logit {} differs: {} vs {} (row {})",
                i,
                got,
                want,
                i / vocab
            );
        }
    }

    #[test]
    fn random_partition_matches_oracle() {
        let model = test_model(5);
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        for case in 0..10 {
            let n = rng.gen_range(4..=48);
            let ids = random_ids(&mut rng, n, model.config.vocab_size);
            let oracle = full_oracle(&model, &ids).unwrap();
            let mut cuts: Vec<usize> = vec![0, n];
            for _ in 0..rng.gen_range(0..4) {
                cuts.push(rng.gen_range(1..n));
            }
            cuts.sort_unstable();
            cuts.dedup();

            let mut context: Vec<LayerKv> = Vec::new();
            let mut all_logits: Vec<f32> = Vec::new();
            for w in cuts.windows(2) {
                let (lo, hi) = (w[0], w[1]);
                let pos: Vec<usize> = (lo..hi).collect();
                let ctx_pos: Vec<usize> = (0..lo).collect();
                let vis = VisibilitySpec::full_causal(&ctx_pos, &pos);
                let out =
                    forward_segment(&model, &ids[lo..hi], &pos, &context, &vis, &mut meter())
                        .unwrap();
                all_logits.extend_from_slice(&out.logits);
                if context.is_empty() {
                    context = out.new_kvs;
                } else {
                    for (c, fresh) in context.iter_mut().zip(&out.new_kvs) {
                        *c = LayerKv::merge(&[c, fresh]).unwrap();
                    }
                }
            }
            let max_err = all_logits
                .iter()
                .zip(&oracle)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_err <= 1e-5, "case {}: max err {}", case, max_err);
        }
    }

    #[test]
    fn causal_mask_brute_force() {
        let model = test_model(6);
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let n = 12;
        let ids = random_ids(&mut rng, n, model.config.vocab_size);
        let base = full_oracle(&model, &ids).unwrap();
        let vocab = model.config.vocab_size;
        for j in 0..n {
            let mut perturbed = ids.clone();
            perturbed[j] = (perturbed[j] + 1) % model.config.vocab_size as u32;
            let got = full_oracle(&model, &perturbed).unwrap();
            for row in 0..j {
                assert_eq!(
                    &got[row * vocab..(row + 1) * vocab],
                    &base[row * vocab..(row + 1) * vocab],
                    "perturbing {} changed earlier row {}",
                    j,
                    row
                );
            }
        }
    }

    /// Reachability closure of a visibility DAG: information flows to a
    /// query from every position reachable through visible edges, because
    /// each layer re-reads the KVs of visible tokens.
    fn closure(entries: &[Vec<usize>]) -> Vec<Vec<usize>> {
        let n = entries.len();
        let mut reach: Vec<Vec<bool>> = vec![vec![false; n]; n];
        for (i, entry) in entries.iter().enumerate() {
            for &p in entry {
                reach[i][p] = true;
            }
        }
        // Causal edges only: a single upward sweep closes the relation.
        for i in 0..n {
            for p in 0..i {
                if reach[i][p] {
                    for q in 0..=p {
                        if reach[p][q] {
                            reach[i][q] = true;
                        }
                    }
                }
            }
        }
        reach
            .into_iter()
            .map(|row| (0..n).filter(|&p| row[p]).collect())
            .collect()
    }

    #[test]
    fn visibility_blocks_non_reachable_positions_exactly() {
        let model = test_model(7);
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        for _ in 0..8 {
            let n = rng.gen_range(4..=16);
            let ids = random_ids(&mut rng, n, model.config.vocab_size);
            let positions: Vec<usize> = (0..n).collect();
            let entries: Vec<Vec<usize>> = (0..n)
                .map(|i| {
                    let mut set: Vec<usize> =
                        (0..i).filter(|_| rng.gen_bool(0.4)).collect();
                    set.push(i);
                    set
                })
                .collect();
            let closed = closure(&entries);
            let vis = VisibilitySpec::from_entries(closed.clone());
            let base =
                forward_segment(&model, &ids, &positions, &[], &vis, &mut meter()).unwrap();
            let vocab = model.config.vocab_size;
            for j in 0..n {
                let mut perturbed = ids.clone();
                perturbed[j] = (perturbed[j] + 1) % model.config.vocab_size as u32;
                let got =
                    forward_segment(&model, &perturbed, &positions, &[], &vis, &mut meter())
                        .unwrap();
                for (q, seen) in closed.iter().enumerate() {
                    if !seen.contains(&j) {
                        assert_eq!(
                            &got.logits[q * vocab..(q + 1) * vocab],
                            &base.logits[q * vocab..(q + 1) * vocab],
                            "row {} leaked from non-visible {}",
                            q,
                            j
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_position_collision_with_context() {
        let model = test_model(8);
        let pos_a: Vec<usize> = (0..4).collect();
        let vis_a = VisibilitySpec::full_causal(&[], &pos_a);
        let a = forward_segment(&model, &[1, 2, 3, 4], &pos_a, &[], &vis_a, &mut meter()).unwrap();
        let vis_b = VisibilitySpec::full_causal(&pos_a, &[3]);
        let err = forward_segment(&model, &[5], &[3], &a.new_kvs, &vis_b, &mut meter());
        assert!(matches!(err, Err(ModelError::PositionCollision { .. })));
    }

    #[test]
    fn rejects_unknown_visibility_position() {
        let model = test_model(8);
        // Position 3 is causal for the query at 5 but belongs to no one.
        let vis = VisibilitySpec::from_entries(vec![vec![0], vec![0, 3, 5]]);
        let err = forward_segment(&model, &[1, 2], &[0, 5], &[], &vis, &mut meter());
        assert!(matches!(err, Err(ModelError::UnknownVisibilityPosition(3))));
    }

    #[test]
    fn rejects_sequence_past_max_position() {
        let model = test_model(8);
        let n = model.config.max_position + 1;
        let ids = vec![0u32; n];
        assert!(matches!(
            full_oracle(&model, &ids),
            Err(ModelError::PositionOverflow { .. })
        ));
        let positions: Vec<usize> = (0..n).collect();
        let vis = VisibilitySpec::full_causal(&[], &positions);
        assert!(matches!(
            forward_segment(&model, &ids, &positions, &[], &vis, &mut meter()),
            Err(ModelError::PositionOverflow { .. })
        ));
    }

    #[test]
    fn rejects_missing_self_visibility() {
        let model = test_model(8);
        let vis = VisibilitySpec::from_entries(vec![vec![0], vec![0]]);
        let err = forward_segment(&model, &[1, 2], &[0, 1], &[], &vis, &mut meter());
        assert!(matches!(err, Err(ModelError::InvalidVisibility(1))));
    }

    #[test]
    fn greedy_argmax_breaks_ties_low() {
        assert_eq!(greedy_argmax(&[0.5, 1.0, 1.0, 0.2]), 1);
        assert_eq!(greedy_argmax(&[2.0]), 0);
    }

    #[test]
    fn meter_counts_single_pair() {
        // 1 query, 1 key, 1 head, d=8: one score dot = 2*8 = 16 FLOPs.
        let model = init_model(ModelConfig {
            num_layers: 1,
            num_heads: 1,
            head_dim: 8,
            hidden_dim: 8,
            ffn_dim: 16,
            vocab_size: 32,
            max_position: 64,
            rope_base: 10000.0,
            seed: 0,
        })
        .unwrap();
        let mut m = meter();
        let vis = VisibilitySpec::full_causal(&[], &[0]);
        forward_segment(&model, &[1], &[0], &[], &vis, &mut m).unwrap();
        assert_eq!(m.report().attn_score_flops, 16);
        assert_eq!(m.report().attn_weighted_sum_flops, 16);
    }
}
