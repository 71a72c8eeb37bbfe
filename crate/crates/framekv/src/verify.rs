//! The equivalence and property suite behind `framekv verify` and the
//! acceptance test target.
//!
//! Each criterion is a self-contained deterministic check returning a
//! pass/fail outcome with a one-line detail. Tolerances are fixed here,
//! not configurable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::cli::{pattern_zone, run_needle_grid, NeedleParams};
use crate::cost::{linear_fit, predict_decode_kv_fraction, predict_prefill_cost};
use crate::kv_store::{
    assemble_mixed, decode, pool_chunk, query_key_repr, score_chunks, BiLevelKvStore, OracleKind,
    RelevanceScore,
};
use crate::model::{
    full_oracle, full_oracle_greedy, init_model, LayerKv, ModelBundle, ModelConfig,
};
use crate::prefill::{chunk_visibility, plan_chunks, run_prefill, ChunkConfig};
use crate::sequence::{
    build_layout, sample_frames, FramePlan, LayoutParams, SamplingPolicy, SequenceLayout,
    TokenRole, VocabLayout,
};

/// Result of one acceptance criterion.
#[derive(Debug, Clone)]
pub struct CriterionOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn run_all() -> Vec<Result<CriterionOutcome, String>> {
    (1..=8).map(run_criterion).collect()
}

pub fn run_criterion(id: usize) -> Result<CriterionOutcome, String> {
    match id {
        1 => Ok(criterion_1_degenerate_equivalence()),
        2 => Ok(criterion_2_visibility_soundness()),
        3 => Ok(criterion_3_cost_exactness()),
        4 => Ok(criterion_4_scaling()),
        5 => Ok(criterion_5_reduction_representability()),
        6 => Ok(criterion_6_bilevel_fidelity()),
        7 => Ok(criterion_7_needle()),
        8 => Ok(criterion_8_frame_sampler()),
        other => Err(format!("no criterion {other} (expected 1..=8)")),
    }
}

fn outcome(id: usize, name: &'static str, passed: bool, detail: String) -> CriterionOutcome {
    CriterionOutcome {
        id,
        name,
        passed,
        detail,
    }
}

fn tiny_model(rng: &mut ChaCha20Rng, vocab_choices: &[usize]) -> ModelBundle {
    let num_heads = rng.gen_range(1..=2usize);
    let head_dim = *[4usize, 8].get(rng.gen_range(0..2)).unwrap();
    let hidden = num_heads * head_dim;
    init_model(ModelConfig {
        num_layers: rng.gen_range(1..=3),
        num_heads,
        head_dim,
        hidden_dim: hidden,
        ffn_dim: 2 * hidden,
        vocab_size: vocab_choices[rng.gen_range(0..vocab_choices.len())],
        max_position: 8192,
        rope_base: 10000.0,
        seed: rng.gen(),
    })
    .expect("valid random config")
}

fn random_layout(
    rng: &mut ChaCha20Rng,
    vocab_size: usize,
    groups: std::ops::RangeInclusive<usize>,
    tokens_per_group: std::ops::RangeInclusive<usize>,
    system: std::ops::RangeInclusive<usize>,
    query: std::ops::RangeInclusive<usize>,
) -> (SequenceLayout, Vec<u32>) {
    let vocab = VocabLayout::new(vocab_size).unwrap();
    let n_groups = rng.gen_range(groups);
    let tpg = rng.gen_range(tokens_per_group);
    let n_frames = n_groups * 4;
    let plan = FramePlan {
        timestamps: (0..n_frames).map(|k| k as f64).collect(),
        effective_fps: 1.0,
    };
    let spatial = tpg * 2;
    let features: Vec<Vec<f32>> = (0..n_frames)
        .map(|_| (0..spatial).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        .collect();
    let q_len = rng.gen_range(query);
    let q_ids: Vec<u32> = (0..q_len)
        .map(|_| rng.gen_range(vocab.query_range()))
        .collect();
    let params = LayoutParams {
        system_len: rng.gen_range(system),
        tokens_per_group: tpg,
        vocab,
        max_position: None,
    };
    let layout = build_layout(&plan, &features, &q_ids, &params).unwrap();
    (layout, q_ids)
}

// ---------------------------------------------------------------------------
// 1. Degenerate equivalence
// ---------------------------------------------------------------------------

/// window >= sequence and top_k = all chunks: the chunked pipeline must
/// reproduce oracle greedy decoding token for token on 100 seeded layouts
/// of <= 64 tokens, with logits within 1e-5.
pub fn criterion_1_degenerate_equivalence() -> CriterionOutcome {
    let name = "degenerate-equivalence";
    let mut max_err = 0.0f32;
    for seed in 0..100u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(1000 + seed);
        let model = tiny_model(&mut rng, &[64, 96, 128]);
        let (layout, query) = random_layout(
            &mut rng,
            model.config.vocab_size,
            1..=4,
            2..=6,
            1..=3,
            1..=4,
        );
        assert!(layout.len() <= 64, "layout too long: {}", layout.len());
        let max_new = rng.gen_range(1..=4usize);
        let pool = rng.gen_range(1..=4usize);
        let probe = rng.gen_range(0..model.config.num_layers);
        let oracle_kind = if seed % 2 == 0 {
            OracleKind::AttentionScore
        } else {
            OracleKind::Centroid
        };

        let cfg = ChunkConfig::covering(&layout);
        let mut out = match run_prefill(&model, &layout, &cfg) {
            Ok(out) => out,
            Err(e) => return outcome(1, name, false, format!("seed {seed}: prefill failed: {e}")),
        };
        if out.plan.n_chunks() > 1 {
            return outcome(1, name, false, format!("seed {seed}: not a single chunk"));
        }
        out.store.pool_all(pool).unwrap();

        // Prefill logits against the oracle.
        let prefix = &layout.token_ids[..layout.prefill_len()];
        let oracle_prefix = full_oracle(&model, prefix).unwrap();
        let vocab = model.config.vocab_size;
        for (row, oracle_row) in out.logits.iter().zip(oracle_prefix.chunks_exact(vocab)) {
            for (a, b) in row.iter().zip(oracle_row) {
                max_err = max_err.max((a - b).abs());
            }
        }

        let repr = query_key_repr(&model, &query, probe).unwrap();
        let scores = score_chunks(&out.store, &repr, oracle_kind).unwrap();
        let cache = assemble_mixed(&out.store, &scores, out.store.n_chunks()).unwrap();
        let decoded = decode(&model, &cache, &query, max_new).unwrap();

        let mut prompt = prefix.to_vec();
        prompt.extend_from_slice(&query);
        let oracle_tokens = full_oracle_greedy(&model, &prompt, max_new).unwrap();
        if decoded.generated != oracle_tokens {
            return outcome(
                1,
                name,
                false,
                format!(
                    "seed {seed}: tokens diverge: {:?} vs oracle {:?}",
                    decoded.generated, oracle_tokens
                ),
            );
        }

        // Decode-path logits row by row against per-step oracle passes.
        let mut sequence = prompt.clone();
        sequence.extend_from_slice(&oracle_tokens);
        for (i, row) in decoded.logits_rows.iter().enumerate() {
            let upto = layout.prefill_len() + i + 1;
            let oracle_logits = full_oracle(&model, &sequence[..upto]).unwrap();
            let oracle_row = &oracle_logits[(upto - 1) * vocab..];
            for (a, b) in row.iter().zip(oracle_row) {
                max_err = max_err.max((a - b).abs());
            }
        }
        if max_err > 1e-5 {
            return outcome(
                1,
                name,
                false,
                format!("seed {seed}: logits diverged, max err {max_err}"),
            );
        }
    }
    outcome(
        1,
        name,
        true,
        format!("100/100 layouts match oracle greedy decode; max |dlogit| = {max_err:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 2. Visibility soundness
// ---------------------------------------------------------------------------

/// Direct visibility edges of the whole prefill, as the plan declares them.
fn prefill_visibility_edges(layout: &SequenceLayout, cfg: &ChunkConfig) -> Vec<Vec<usize>> {
    let plan = plan_chunks(layout, cfg).unwrap();
    let mut edges: Vec<Vec<usize>> = Vec::with_capacity(layout.prefill_len());
    for q in 0..layout.system_len() {
        edges.push((0..=q).collect());
    }
    for chunk in &plan.chunks {
        let vis = chunk_visibility(&plan, chunk.chunk_id, layout);
        for entry in vis.entries() {
            edges.push(entry.clone());
        }
    }
    edges
}

/// Transitive closure of causal visibility edges: information reaches a
/// query from everything its visible keys themselves read, because cached
/// KVs embed their own context at every layer.
fn reachability(edges: &[Vec<usize>]) -> Vec<Vec<bool>> {
    let n = edges.len();
    let mut reach = vec![vec![false; n]; n];
    for (q, entry) in edges.iter().enumerate() {
        for &p in entry {
            reach[q][p] = true;
        }
        // Edges point backwards, so smaller indices are already closed.
        for p in 0..q {
            if reach[q][p] {
                for x in 0..=p {
                    if reach[p][x] {
                        reach[q][x] = true;
                    }
                }
            }
        }
    }
    reach
}

fn perturb_token(layout: &SequenceLayout, vocab: &VocabLayout, pos: usize) -> SequenceLayout {
    let mut out = layout.clone();
    let id = out.token_ids[pos];
    out.token_ids[pos] = match out.roles[pos] {
        TokenRole::System => 1 + (id % 15),
        TokenRole::Timestamp { .. } => 16 + ((id - 16 + 1) % 16),
        TokenRole::Visual { .. } => {
            let range = vocab.visual_range();
            let span = range.end - range.start;
            range.start + ((id - range.start + 1) % span)
        }
        TokenRole::Query => id,
    };
    assert_ne!(out.token_ids[pos], id);
    out
}

/// Exhaustive perturbation on layouts <= 48 tokens across 20 random chunk
/// configs: zero logit change for any query that cannot reach the
/// perturbed token through the visibility graph, bit for bit.
pub fn criterion_2_visibility_soundness() -> CriterionOutcome {
    let name = "visibility-soundness";
    let mut checks = 0u64;
    for case in 0..20u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(2000 + case);
        let num_heads = rng.gen_range(1..=2usize);
        let model = init_model(ModelConfig {
            num_layers: rng.gen_range(1..=2),
            num_heads,
            head_dim: 4,
            hidden_dim: 4 * num_heads,
            ffn_dim: 16,
            vocab_size: 64,
            max_position: 1024,
            rope_base: 10000.0,
            seed: rng.gen(),
        })
        .unwrap();
        let vocab = VocabLayout::new(model.config.vocab_size).unwrap();
        let (layout, _) = random_layout(&mut rng, model.config.vocab_size, 3..=8, 2..=3, 1..=2, 0..=2);
        assert!(layout.len() <= 48, "layout too long: {}", layout.len());
        let unit = layout.group_unit_tokens().unwrap();
        let window = rng.gen_range(1..=layout.group_count().min(4));
        let step = rng.gen_range(1..=window);
        let cfg = ChunkConfig::from_groups(window, step, unit, case % 2 == 0);

        let base = run_prefill(&model, &layout, &cfg).unwrap();
        let edges = prefill_visibility_edges(&layout, &cfg);
        let reach = reachability(&edges);
        let n = layout.prefill_len();

        for j in 0..n {
            let perturbed_layout = perturb_token(&layout, &vocab, j);
            let perturbed = run_prefill(&model, &perturbed_layout, &cfg).unwrap();
            for q in 0..n {
                if q == j || reach[q][j] {
                    continue;
                }
                if base.logits[q] != perturbed.logits[q] {
                    return outcome(
                        2,
                        name,
                        false,
                        format!(
                            "case {case}: perturbing {j} leaked into row {q} \
                             (window {window}, step {step})"
                        ),
                    );
                }
                checks += 1;
            }
        }
    }
    outcome(
        2,
        name,
        true,
        format!("{checks} (query, non-visible key) pairs show zero leakage across 20 configs"),
    )
}

// ---------------------------------------------------------------------------
// 3. Cost-model exactness
// ---------------------------------------------------------------------------

/// Metered prefill counters equal the closed-form prediction (integer
/// equality) on 50 random configurations up to 4096 tokens, and assembled
/// decode caches match the KV-fraction formula on randomized (n, c, k, p).
pub fn criterion_3_cost_exactness() -> CriterionOutcome {
    let name = "cost-model-exactness";
    for case in 0..50u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(3000 + case);
        let model = tiny_model(&mut rng, &[64]);
        let tpg = *[4usize, 8, 16].get(rng.gen_range(0..3)).unwrap();
        let max_groups = (4096 - 16) / (tpg + 1);
        let n_groups = rng.gen_range(1..=max_groups.min(96));
        let (layout, _) = random_layout(
            &mut rng,
            model.config.vocab_size,
            n_groups..=n_groups,
            tpg..=tpg,
            1..=8,
            0..=4,
        );
        assert!(layout.len() <= 4096);
        let unit = layout.group_unit_tokens().unwrap();
        let window = rng.gen_range(1..=layout.group_count().min(16));
        let step = rng.gen_range(1..=window);
        let cfg = ChunkConfig::from_groups(window, step, unit, rng.gen_bool(0.5));

        let plan = plan_chunks(&layout, &cfg).unwrap();
        let out = run_prefill(&model, &layout, &cfg).unwrap();
        let predicted = predict_prefill_cost(&layout, &plan, &model.config);
        if out.cost != predicted {
            return outcome(
                3,
                name,
                false,
                format!(
                    "case {case}: measured {:?} != predicted {:?} (window {window}, step {step})",
                    out.cost, predicted
                ),
            );
        }
    }

    // Decode-side fraction formula against assembled caches.
    for case in 0..30u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(3500 + case);
        let n = rng.gen_range(1..=10usize);
        let c = rng.gen_range(1..=100usize);
        let k = rng.gen_range(0..=n + 2);
        let p = rng.gen_range(1..=8usize);
        let mut store = synthetic_store(n, c, 1, 1, 2, &mut rng);
        store.pool_all(p).unwrap();
        let scores: Vec<RelevanceScore> = (0..n)
            .map(|chunk_id| RelevanceScore {
                chunk_id,
                score: rng.gen_range(-1.0..1.0),
            })
            .collect();
        let cache = assemble_mixed(&store, &scores, k).unwrap();
        let k_eff = k.min(n);
        let expected_tokens = k_eff * c + (n - k_eff) * c.div_ceil(p);
        if cache.loaded_tokens != expected_tokens {
            return outcome(
                3,
                name,
                false,
                format!(
                    "fraction case {case}: loaded {} != k*c + (n-k)*ceil(c/p) = {expected_tokens} \
                     (n={n}, c={c}, k={k}, p={p})",
                    cache.loaded_tokens
                ),
            );
        }
        let formula = predict_decode_kv_fraction(n, c, k, p, 0);
        let measured = cache.loaded_tokens as f64 / (n * c) as f64;
        if formula != measured {
            return outcome(3, name, false, format!("fraction mismatch in case {case}"));
        }
        if cache.loaded_kv_bytes != cache.loaded_tokens as u64 * store.bytes_per_token() {
            return outcome(3, name, false, format!("byte count mismatch in case {case}"));
        }
    }
    outcome(
        3,
        name,
        true,
        "50/50 prefill predictions exact; 30/30 decode caches match the fraction formula".into(),
    )
}

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
                let row: Vec<f32> = (0..heads * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                let vrow: Vec<f32> = (0..heads * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
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

// ---------------------------------------------------------------------------
// 4. Scaling reproduction
// ---------------------------------------------------------------------------

/// Measured prefill FLOPs grow linearly in the token count (R^2 >= 0.99
/// over a 32x range) at a fixed window, and the peak resident KV stays
/// exactly constant. Timestamp history is off so the per-chunk context is
/// size-invariant.
pub fn criterion_4_scaling() -> CriterionOutcome {
    let name = "scaling-linearity";
    let model = init_model(ModelConfig {
        num_layers: 2,
        num_heads: 2,
        head_dim: 8,
        hidden_dim: 16,
        ffn_dim: 32,
        vocab_size: 64,
        max_position: 1 << 16,
        rope_base: 10000.0,
        seed: 4040,
    })
    .unwrap();
    let vocab = VocabLayout::new(model.config.vocab_size).unwrap();
    let tpg = 16;
    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut peaks: Vec<u64> = Vec::new();
    for &n_groups in &[32usize, 64, 128, 256, 512, 1024] {
        let n_frames = n_groups * 4;
        let plan = FramePlan {
            timestamps: (0..n_frames).map(|k| k as f64).collect(),
            effective_fps: 1.0,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(4000 + n_groups as u64);
        let features: Vec<Vec<f32>> = (0..n_frames)
            .map(|_| (0..tpg * 2).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let layout = build_layout(
            &plan,
            &features,
            &[],
            &LayoutParams {
                system_len: 8,
                tokens_per_group: tpg,
                vocab,
                max_position: None,
            },
        )
        .unwrap();
        let unit = layout.group_unit_tokens().unwrap();
        let cfg = ChunkConfig::from_groups(8, 4, unit, false);
        let plan_chunks_out = plan_chunks(&layout, &cfg).unwrap();
        let out = run_prefill(&model, &layout, &cfg).unwrap();
        let predicted = predict_prefill_cost(&layout, &plan_chunks_out, &model.config);
        if out.cost != predicted {
            return outcome(4, name, false, format!("{n_groups} groups: meter != prediction"));
        }
        points.push((layout.len() as f64, out.cost.total_flops() as f64));
        peaks.push(out.cost.kv_bytes_peak_resident);
    }
    let (slope, _, r2) = linear_fit(&points);
    if r2 < 0.99 {
        return outcome(4, name, false, format!("R^2 = {r2:.6} < 0.99"));
    }
    if peaks.iter().any(|&p| p != peaks[0]) {
        return outcome(4, name, false, format!("peak resident KV varies: {peaks:?}"));
    }
    outcome(
        4,
        name,
        true,
        format!(
            "R^2 = {r2:.6} over 32x token range (slope {slope:.1} flops/token); \
             peak resident KV constant at {} bytes",
            peaks[0]
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Reduction representability
// ---------------------------------------------------------------------------

/// A sweep finds a configuration with chunked prefill at <= 0.50 of the
/// full-attention FLOPs (both measured), and a (k, p) whose decode KV
/// fraction lands within 0.05 of 0.612.
pub fn criterion_5_reduction_representability() -> CriterionOutcome {
    let name = "reduction-representability";
    let model = init_model(ModelConfig {
        num_layers: 2,
        num_heads: 2,
        head_dim: 8,
        hidden_dim: 16,
        ffn_dim: 32,
        vocab_size: 64,
        max_position: 1 << 15,
        rope_base: 10000.0,
        seed: 5050,
    })
    .unwrap();
    let vocab = VocabLayout::new(model.config.vocab_size).unwrap();
    let tpg = 16;
    let n_groups = 256;
    let n_frames = n_groups * 4;
    let plan = FramePlan {
        timestamps: (0..n_frames).map(|k| k as f64).collect(),
        effective_fps: 1.0,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(5000);
    let features: Vec<Vec<f32>> = (0..n_frames)
        .map(|_| (0..tpg * 2).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        .collect();
    let layout = build_layout(
        &plan,
        &features,
        &[],
        &LayoutParams {
            system_len: 8,
            tokens_per_group: tpg,
            vocab,
            max_position: None,
        },
    )
    .unwrap();
    let unit = layout.group_unit_tokens().unwrap();

    let full = run_prefill(&model, &layout, &ChunkConfig::covering(&layout)).unwrap();
    let full_flops = full.cost.total_flops();

    let mut best_ratio = f64::INFINITY;
    let mut best_cfg = (0usize, 0usize);
    let mut chunked_store = None;
    for (w, s) in [(8usize, 8usize), (8, 4), (16, 8), (4, 4)] {
        let cfg = ChunkConfig::from_groups(w, s, unit, true);
        let out = run_prefill(&model, &layout, &cfg).unwrap();
        let ratio = out.cost.total_flops() as f64 / full_flops as f64;
        if ratio < best_ratio {
            best_ratio = ratio;
            best_cfg = (w, s);
        }
        if (w, s) == (8, 8) {
            chunked_store = Some(out.store);
        }
    }
    if best_ratio > 0.50 {
        return outcome(
            5,
            name,
            false,
            format!("no configuration reached a flops ratio <= 0.50 (best {best_ratio:.4})"),
        );
    }

    // Equal chunks from the (8, 8) run: 32 chunks of 128 visual tokens.
    let mut store = chunked_store.expect("(8,8) ran");
    let n = store.n_chunks();
    let c = store.dense_tokens(0);
    let overhead = store.overhead_tokens();
    let target = 0.612;
    let mut found = None;
    'search: for k in 0..=n {
        for p in [1usize, 2, 4, 8, 16, 32] {
            let f = predict_decode_kv_fraction(n, c, k, p, overhead);
            if (f - target).abs() <= 0.05 {
                found = Some((k, p, f));
                break 'search;
            }
        }
    }
    let Some((k, p, fraction)) = found else {
        return outcome(
            5,
            name,
            false,
            format!("no (k, p) within 0.05 of {target} for n={n}, c={c}, overhead={overhead}"),
        );
    };
    // Cross-check the found operating point against a real assembly.
    store.pool_all(p).unwrap();
    let scores: Vec<RelevanceScore> = store
        .chunk_ids()
        .map(|chunk_id| RelevanceScore {
            chunk_id,
            score: -(chunk_id as f64),
        })
        .collect();
    let cache = assemble_mixed(&store, &scores, k).unwrap();
    let metered = cache.loaded_tokens as f64 / (store.visual_tokens_total() + overhead) as f64;
    if (metered - fraction).abs() > 1e-12 {
        return outcome(5, name, false, "formula and meter disagree at the operating point".into());
    }
    outcome(
        5,
        name,
        true,
        format!(
            "window {} step {} gives flops ratio {best_ratio:.4} <= 0.50; \
             (k={k}, p={p}) gives kv fraction {fraction:.4} within 0.05 of {target}",
            best_cfg.0, best_cfg.1
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Bi-level fidelity
// ---------------------------------------------------------------------------

/// Pooled KVs contract into their group envelope on 1000 random chunks,
/// pool_factor 1 is bitwise identity, and the cache-size formula holds.
pub fn criterion_6_bilevel_fidelity() -> CriterionOutcome {
    let name = "bilevel-fidelity";
    let mut rng = ChaCha20Rng::seed_from_u64(6000);
    for case in 0..1000u64 {
        let n = rng.gen_range(1..=64usize);
        let p = rng.gen_range(1..=8usize);
        let heads = rng.gen_range(1..=2usize);
        let d = *[2usize, 4, 8].get(rng.gen_range(0..3)).unwrap();
        let store = synthetic_store(1, n, 1, heads, d, &mut rng);
        let dense = &store.dense(0).unwrap()[0];
        let pooled_layers = pool_chunk(store.dense(0).unwrap(), p).unwrap();
        let pooled = &pooled_layers[0];
        if pooled.len() != n.div_ceil(p) {
            return outcome(6, name, false, format!("case {case}: count mismatch"));
        }
        type Proj = fn(&LayerKv, usize, usize) -> &[f32];
        let tensors: [(&str, Proj); 2] = [("key", LayerKv::key), ("value", LayerKv::value)];
        for (run_idx, run_start) in (0..n).step_by(p).enumerate() {
            let run = run_start..(run_start + p).min(n);
            for h in 0..heads {
                for j in 0..d {
                    for (label, proj) in tensors {
                        let lo = run
                            .clone()
                            .map(|t| proj(dense, t, h)[j])
                            .fold(f32::INFINITY, f32::min);
                        let hi = run
                            .clone()
                            .map(|t| proj(dense, t, h)[j])
                            .fold(f32::NEG_INFINITY, f32::max);
                        let got = proj(pooled, run_idx, h)[j];
                        if got < lo || got > hi {
                            return outcome(
                                6,
                                name,
                                false,
                                format!("case {case}: {label} coord {got} outside [{lo}, {hi}]"),
                            );
                        }
                    }
                }
            }
        }
        if p == 1 {
            for (a, b) in store.dense(0).unwrap().iter().zip(&pooled_layers) {
                if a != b {
                    return outcome(6, name, false, format!("case {case}: pool 1 not bitwise"));
                }
            }
        }
    }
    // pool_factor 1 identity asserted explicitly as well.
    let store = synthetic_store(3, 9, 2, 2, 4, &mut rng);
    for id in store.chunk_ids() {
        let dense = store.dense(id).unwrap();
        if &pool_chunk(dense, 1).unwrap() != dense {
            return outcome(6, name, false, "pool_factor 1 is not the identity".into());
        }
    }
    // Cache-size formula on randomized assemblies.
    for case in 0..50u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(6500 + case);
        let n = rng.gen_range(1..=12usize);
        let c = rng.gen_range(1..=64usize);
        let k = rng.gen_range(0..=n);
        let p = rng.gen_range(1..=8usize);
        let mut store = synthetic_store(n, c, 1, 1, 2, &mut rng);
        store.pool_all(p).unwrap();
        let scores: Vec<RelevanceScore> = (0..n)
            .map(|chunk_id| RelevanceScore {
                chunk_id,
                score: rng.gen_range(-1.0..1.0),
            })
            .collect();
        let cache = assemble_mixed(&store, &scores, k).unwrap();
        if cache.loaded_tokens != k * c + (n - k) * c.div_ceil(p) {
            return outcome(6, name, false, format!("formula case {case} failed"));
        }
    }
    outcome(
        6,
        name,
        true,
        "1000 pooled chunks contract; pool 1 bitwise; k*c + (n-k)*ceil(c/p) holds on 50 assemblies"
            .into(),
    )
}

// ---------------------------------------------------------------------------
// 7. Needle harness
// ---------------------------------------------------------------------------

/// With the constructed separable needle (pattern ids disjoint from
/// filler), both relevance oracles select the needle chunk dense in every
/// one of the 64 grid cells; with top_k = 0 selection is 0% by
/// construction.
pub fn criterion_7_needle() -> CriterionOutcome {
    let name = "needle-harness";
    let model = init_model(ModelConfig {
        num_layers: 2,
        num_heads: 2,
        head_dim: 16,
        hidden_dim: 32,
        ffn_dim: 64,
        vocab_size: 256,
        max_position: 8192,
        rope_base: 10000.0,
        seed: 7070,
    })
    .unwrap();
    let vocab = VocabLayout::new(model.config.vocab_size).unwrap();
    let pattern = vec![pattern_zone(&vocab).start + 3];
    let lengths = [8usize, 16, 24, 32, 40, 48, 56, 64];
    let mut params = NeedleParams {
        tokens_per_group: 16,
        system_len: 4,
        window_groups: 1,
        step_groups: 1,
        top_k: 2,
        pool_factor: 4,
        oracle: OracleKind::AttentionScore,
        probe_layer: 0,
        seed: 7700,
    };

    for oracle in [OracleKind::AttentionScore, OracleKind::Centroid] {
        params.oracle = oracle;
        let report = match run_needle_grid(&model, &lengths, 8, &pattern, &params) {
            Ok(r) => r,
            Err(e) => return outcome(7, name, false, format!("{oracle:?}: grid failed: {e}")),
        };
        if report.cells.len() < 64 {
            return outcome(7, name, false, format!("only {} cells", report.cells.len()));
        }
        if report.selection_rate != 1.0 {
            let missed: Vec<_> = report
                .cells
                .iter()
                .filter(|c| !c.selected_dense)
                .map(|c| (c.haystack_groups, c.needle_group_index))
                .collect();
            return outcome(
                7,
                name,
                false,
                format!("{oracle:?}: selection rate {} < 1.0; missed {missed:?}", report.selection_rate),
            );
        }
    }

    params.oracle = OracleKind::AttentionScore;
    params.top_k = 0;
    let zero = match run_needle_grid(&model, &lengths, 8, &pattern, &params) {
        Ok(r) => r,
        Err(e) => return outcome(7, name, false, format!("top_k 0 grid failed: {e}")),
    };
    if zero.selection_rate != 0.0 {
        return outcome(
            7,
            name,
            false,
            format!("top_k 0 should select nothing, got rate {}", zero.selection_rate),
        );
    }
    outcome(
        7,
        name,
        true,
        "both oracles select the needle dense in 64/64 cells; top_k 0 selects 0/64".into(),
    )
}

// ---------------------------------------------------------------------------
// 8. Frame sampler conformance
// ---------------------------------------------------------------------------

/// The three named sampler cases plus a 200-case randomized sweep over
/// bounds, rate caps and monotonicity.
pub fn criterion_8_frame_sampler() -> CriterionOutcome {
    let name = "frame-sampler-conformance";
    let policy = |max_frames: usize, max_fps: u32| SamplingPolicy {
        base_fps: 1,
        max_fps,
        max_frames,
    };
    let a = sample_frames(30.0, &policy(120, 4)).unwrap();
    if a.len() != 120 || a.effective_fps != 4.0 {
        return outcome(8, name, false, format!("case A: {} frames at {}", a.len(), a.effective_fps));
    }
    let b = sample_frames(30.0, &policy(120, 2)).unwrap();
    if b.len() != 60 || b.effective_fps != 2.0 {
        return outcome(8, name, false, format!("case B: {} frames at {}", b.len(), b.effective_fps));
    }
    let c = sample_frames(600.0, &policy(150, 4)).unwrap();
    if c.len() != 150 || c.timestamps[1] != 4.0 || c.timestamps[149] != 596.0 {
        return outcome(8, name, false, "case C: subsampling mismatch".into());
    }

    let mut rng = ChaCha20Rng::seed_from_u64(8000);
    for case in 0..200u64 {
        let duration = rng.gen_range(0.2..2000.0);
        let pol = SamplingPolicy {
            base_fps: rng.gen_range(1..=3),
            max_fps: rng.gen_range(3..=8),
            max_frames: rng.gen_range(4..=512),
        };
        let plan = match sample_frames(duration, &pol) {
            Ok(p) => p,
            Err(e) => return outcome(8, name, false, format!("case {case}: {e}")),
        };
        let monotone_ok = {
            let looser = SamplingPolicy {
                max_frames: pol.max_frames + rng.gen_range(1..=64),
                ..pol.clone()
            };
            sample_frames(duration, &looser).unwrap().len() >= plan.len()
        };
        let ok = plan.len() <= pol.max_frames
            && plan.effective_fps <= pol.max_fps as f64 + 1e-12
            && plan.timestamps.windows(2).all(|w| w[0] < w[1])
            && plan.timestamps.iter().all(|&t| (0.0..duration + 1e-9).contains(&t))
            && monotone_ok;
        if !ok {
            return outcome(
                8,
                name,
                false,
                format!("case {case}: property violated (duration {duration:.2}, {pol:?})"),
            );
        }
    }
    outcome(
        8,
        name,
        true,
        "3 named cases and 200 randomized properties hold".into(),
    )
}
