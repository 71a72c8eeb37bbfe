//! Batch command-line front end.
//!
//! Five subcommands tie the pipeline together:
//!
//! * `build`  — construct a sequence layout and write the JSON interchange
//!   file;
//! * `run`    — plan, prefill, pool, score, assemble and decode, writing a
//!   machine-readable report;
//! * `needle` — synthetic needle-in-a-haystack grid over (length, depth);
//! * `sweep`  — cost-model sweeps as plot-ready CSV;
//! * `verify` — the full equivalence and property suite.
//!
//! Everything is deterministic under fixed seeds; reports carry a hash of
//! the resolved configuration. Exit codes: 0 success, 2 usage, 3 config,
//! 4 runtime.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cost::{
    predict_decode_kv_fraction_plan, predict_full_prefill_cost, predict_prefill_cost, CostReport,
};
use crate::kv_store::{
    assemble_mixed, check_store_model, decode, load_store, query_key_repr, save_store,
    score_chunks, OracleKind, RelevanceScore, StoreError,
};
use crate::model::{
    full_oracle_greedy, init_model, load_model, save_model, ModelBundle, ModelConfig, ModelError,
};
use crate::prefill::{plan_chunks, run_prefill, ChunkConfig, PrefillError};
use crate::sequence::{
    build_layout, sample_frames, FrameFeature, FramePlan, LayoutError, LayoutParams,
    SamplingPolicy, SequenceLayout, VocabLayout,
};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "FRAMEKV_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("layout: {0}")]
    Layout(#[from] LayoutError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("prefill: {0}")]
    Prefill(#[from] PrefillError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 3 for configuration problems, 4 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Layout(_) => 3,
            CliError::Model(ModelError::InvalidConfig(_)) => 3,
            CliError::Prefill(PrefillError::Layout(_)) => 3,
            _ => 4,
        }
    }
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

/// Model dimensions, or a checkpoint to load instead.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelSection {
    pub checkpoint: Option<PathBuf>,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    pub rope_base: f64,
    pub weight_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            checkpoint: None,
            num_layers: 4,
            num_heads: 4,
            head_dim: 16,
            ffn_dim: 128,
            vocab_size: 512,
            max_position: 32768,
            rope_base: 10000.0,
            weight_seed: 42,
        }
    }
}

impl ModelSection {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            hidden_dim: self.num_heads * self.head_dim,
            ffn_dim: self.ffn_dim,
            vocab_size: self.vocab_size,
            max_position: self.max_position,
            rope_base: self.rope_base,
            seed: self.weight_seed,
        }
    }

    pub fn build(&self) -> Result<ModelBundle, CliError> {
        match &self.checkpoint {
            Some(path) => Ok(load_model(path)?),
            None => Ok(init_model(self.config())?),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SamplingSection {
    pub duration_s: Option<f64>,
    /// Number of single images instead of a video.
    pub images: Option<usize>,
    pub base_fps: u32,
    pub max_fps: u32,
    pub max_frames: usize,
    pub spatial_len: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection {
            duration_s: Some(256.0),
            images: None,
            base_fps: 1,
            max_fps: 4,
            max_frames: 1024,
            spatial_len: 64,
        }
    }
}

impl SamplingSection {
    pub fn policy(&self) -> SamplingPolicy {
        SamplingPolicy {
            base_fps: self.base_fps,
            max_fps: self.max_fps,
            max_frames: self.max_frames,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LayoutSection {
    pub system_len: usize,
    pub tokens_per_group: usize,
    pub query_len: usize,
    /// Explicit query ids; overrides `query_len` when set.
    pub query_tokens: Option<Vec<u32>>,
}

impl Default for LayoutSection {
    fn default() -> Self {
        LayoutSection {
            system_len: 8,
            tokens_per_group: 16,
            query_len: 8,
            query_tokens: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ChunkSection {
    pub window_groups: usize,
    pub step_groups: usize,
    pub timestamp_history: bool,
}

impl Default for ChunkSection {
    fn default() -> Self {
        ChunkSection {
            window_groups: 8,
            step_groups: 4,
            timestamp_history: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BilevelSection {
    pub top_k: usize,
    pub pool_factor: usize,
    pub oracle: OracleKind,
    /// Probe layer for the relevance oracle; the middle layer when unset.
    pub probe_layer: Option<usize>,
}

impl Default for BilevelSection {
    fn default() -> Self {
        BilevelSection {
            top_k: 2,
            pool_factor: 4,
            oracle: OracleKind::AttentionScore,
            probe_layer: None,
        }
    }
}

/// One experiment, fully deterministic given this document.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub sampling: SamplingSection,
    pub layout: LayoutSection,
    pub chunking: ChunkSection,
    pub bilevel: BilevelSection,
    /// Seed for feature and query synthesis.
    pub seed: u64,
    pub max_new_tokens: usize,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        format!("{digest:x}")
    }
}

// ---------------------------------------------------------------------------
// Shared synthesis helpers
// ---------------------------------------------------------------------------

pub fn synth_features(n_frames: usize, spatial_len: usize, seed: u64) -> Vec<FrameFeature> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n_frames)
        .map(|_| {
            (0..spatial_len)
                .map(|_| rng.gen_range(-1.0f32..1.0))
                .collect()
        })
        .collect()
}

fn synth_query(vocab: &VocabLayout, query_len: usize, seed: u64) -> Vec<u32> {
    let range = vocab.query_range();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x51ceb00c);
    (0..query_len)
        .map(|_| rng.gen_range(range.clone()))
        .collect()
}

/// Frame plan for `n` images: each image forms one 4-frame group at one
/// frame per second of synthetic time.
fn image_plan(n_images: usize) -> FramePlan {
    FramePlan {
        timestamps: (0..n_images * 4).map(|k| k as f64).collect(),
        effective_fps: 1.0,
    }
}

fn image_features(n_images: usize, spatial_len: usize, seed: u64) -> Vec<FrameFeature> {
    let singles = synth_features(n_images, spatial_len, seed);
    singles
        .iter()
        .flat_map(crate::sequence::align_image)
        .collect()
}

fn build_experiment_layout(
    cfg: &ExperimentConfig,
) -> Result<(SequenceLayout, Vec<u32>), CliError> {
    let vocab = VocabLayout::new(cfg.model.vocab_size)?;
    let query = match &cfg.layout.query_tokens {
        Some(ids) => ids.clone(),
        None => synth_query(&vocab, cfg.layout.query_len, cfg.seed),
    };
    let params = LayoutParams {
        system_len: cfg.layout.system_len,
        tokens_per_group: cfg.layout.tokens_per_group,
        vocab,
        max_position: Some(cfg.model.max_position),
    };
    let layout = match (cfg.sampling.images, cfg.sampling.duration_s) {
        (Some(n), _) => {
            let plan = image_plan(n);
            let features = image_features(n, cfg.sampling.spatial_len, cfg.seed);
            build_layout(&plan, &features, &query, &params)?
        }
        (None, Some(duration)) => {
            let plan = sample_frames(duration, &cfg.sampling.policy())?;
            let features = synth_features(plan.len(), cfg.sampling.spatial_len, cfg.seed);
            build_layout(&plan, &features, &query, &params)?
        }
        (None, None) => {
            return Err(CliError::Config(
                "either sampling.duration_s or sampling.images is required".into(),
            ))
        }
    };
    Ok((layout, query))
}

fn resolve_out_dir(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

// ---------------------------------------------------------------------------
// clap surface
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "framekv",
    version,
    about = "Toy long-stream inference engine: chunked prefill and bi-level KV decoding"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Construct a sequence layout and write it as JSON.
    Build(BuildArgs),
    /// Run the full pipeline and write a report.
    Run(RunArgs),
    /// Needle-in-a-haystack grid evaluation.
    Needle(NeedleArgs),
    /// Cost-model sweeps as CSV.
    Sweep(SweepArgs),
    /// Run the equivalence and property suite.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    /// Video duration in seconds.
    #[arg(long, conflicts_with = "images", required_unless_present = "images")]
    pub duration: Option<f64>,
    /// Build from this many single images instead of a video.
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub base_fps: u32,
    #[arg(long, default_value_t = 4)]
    pub max_fps: u32,
    #[arg(long, default_value_t = 1024)]
    pub max_frames: usize,
    #[arg(long, default_value_t = 8)]
    pub system_len: usize,
    #[arg(long, default_value_t = 16)]
    pub tokens_per_group: usize,
    #[arg(long, default_value_t = 64)]
    pub spatial_len: usize,
    #[arg(long, default_value_t = 512)]
    pub vocab_size: usize,
    /// Comma-separated query token ids; random query ids when omitted.
    #[arg(long, value_delimiter = ',')]
    pub query_tokens: Option<Vec<u32>>,
    #[arg(long, default_value_t = 8)]
    pub query_len: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output file (default: <out-dir>/layout.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// Experiment config JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use a prebuilt layout file instead of synthesizing one.
    #[arg(long)]
    pub layout: Option<PathBuf>,
    #[arg(long)]
    pub window_groups: Option<usize>,
    #[arg(long)]
    pub step_groups: Option<usize>,
    #[arg(long, value_parser = ["on", "off"])]
    pub timestamp_history: Option<String>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub pool_factor: Option<usize>,
    /// Relevance oracle: centroid | attn.
    #[arg(long)]
    pub oracle: Option<OracleKind>,
    #[arg(long)]
    pub probe_layer: Option<usize>,
    #[arg(long)]
    pub max_new: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Persist the bi-level KV store under <out-dir>/store.
    #[arg(long, default_value_t = false)]
    pub save_store: bool,
    /// Save the model checkpoint under <out-dir>/model.bin.
    #[arg(long, default_value_t = false)]
    pub save_model: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct NeedleArgs {
    /// Comma-separated haystack lengths in groups.
    #[arg(long, value_delimiter = ',', default_value = "8,16,24,32,40,48,56,64")]
    pub lengths: Vec<usize>,
    /// Number of evenly spaced needle depths per length.
    #[arg(long, default_value_t = 8)]
    pub depths: usize,
    /// Pattern token ids (defaults to one id from the pattern zone).
    #[arg(long, value_delimiter = ',')]
    pub pattern: Option<Vec<u32>>,
    #[arg(long, default_value_t = 2)]
    pub top_k: usize,
    #[arg(long, default_value_t = 4)]
    pub pool_factor: usize,
    #[arg(long, default_value = "attn")]
    pub oracle: OracleKind,
    #[arg(long, default_value_t = 0)]
    pub probe_layer: usize,
    #[arg(long, default_value_t = 1)]
    pub window_groups: usize,
    #[arg(long, default_value_t = 1)]
    pub step_groups: usize,
    #[arg(long, default_value_t = 16)]
    pub tokens_per_group: usize,
    #[arg(long, default_value_t = 4)]
    pub system_len: usize,
    #[arg(long, default_value_t = 99)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Comma-separated stream lengths in groups (may be empty).
    #[arg(long, value_delimiter = ',', num_args = 0.., default_value = "32,64,128,256,512,1024")]
    pub groups: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub window_groups: usize,
    #[arg(long, default_value_t = 4)]
    pub step_groups: usize,
    #[arg(long, value_parser = ["on", "off"], default_value = "off")]
    pub timestamp_history: String,
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub top_k_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "4")]
    pub pool_list: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub tokens_per_group: usize,
    #[arg(long, default_value_t = 8)]
    pub system_len: usize,
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
    /// Small model keeps long sweeps fast.
    #[arg(long, default_value_t = 2)]
    pub num_layers: usize,
    #[arg(long, default_value_t = 2)]
    pub num_heads: usize,
    #[arg(long, default_value_t = 8)]
    pub head_dim: usize,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Run a single criterion by number (1..=8).
    #[arg(long)]
    pub only: Option<usize>,
}

/// Entry point for the binary: returns the process exit code.
pub fn dispatch(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Build(args) => cmd_build(&args),
        Command::Run(args) => cmd_run(&args).map(|_| ()),
        Command::Needle(args) => cmd_needle(&args).map(|_| ()),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Verify(args) => return cmd_verify(&args),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

// ---------------------------------------------------------------------------
// build
// ---------------------------------------------------------------------------

pub fn cmd_build(args: &BuildArgs) -> Result<(), CliError> {
    let vocab = VocabLayout::new(args.vocab_size)?;
    let query = match &args.query_tokens {
        Some(ids) => ids.clone(),
        None => synth_query(&vocab, args.query_len, args.seed),
    };
    let params = LayoutParams {
        system_len: args.system_len,
        tokens_per_group: args.tokens_per_group,
        vocab,
        max_position: None,
    };
    let layout = match (args.images, args.duration) {
        (Some(n), _) => {
            let plan = image_plan(n);
            let features = image_features(n, args.spatial_len, args.seed);
            build_layout(&plan, &features, &query, &params)?
        }
        (None, Some(duration)) => {
            let policy = SamplingPolicy {
                base_fps: args.base_fps,
                max_fps: args.max_fps,
                max_frames: args.max_frames,
            };
            let plan = sample_frames(duration, &policy)?;
            let features = synth_features(plan.len(), args.spatial_len, args.seed);
            build_layout(&plan, &features, &query, &params)?
        }
        (None, None) => unreachable!("clap enforces duration|images"),
    };

    let out_dir = resolve_out_dir(&args.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| out_dir.join("layout.json"));
    std::fs::write(&path, layout.to_json()?)?;
    println!(
        "layout: {} tokens ({} frames, {} groups, effective_fps {}), written to {}",
        layout.len(),
        layout.n_frames,
        layout.group_count(),
        layout.effective_fps,
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub layout: LayoutSummary,
    pub plan: PlanSummary,
    pub scores: Vec<RelevanceScore>,
    pub selection: Vec<usize>,
    pub generated: Vec<u32>,
    pub prefill_cost: CostReport,
    pub predicted_prefill_cost: CostReport,
    pub decode_cost: CostReport,
    pub flops_ratio_vs_full: f64,
    pub kv_fraction: f64,
    pub oracle_equivalent: Option<bool>,
}

#[derive(Debug, Serialize)]
pub struct LayoutSummary {
    pub n_tokens: usize,
    pub n_frames: usize,
    pub n_groups: usize,
    pub effective_fps: f64,
    pub system_len: usize,
    pub query_len: usize,
}

#[derive(Debug, Serialize)]
pub struct PlanSummary {
    pub n_chunks: usize,
    pub window_tokens: usize,
    pub step_tokens: usize,
    pub timestamp_history: bool,
}

fn apply_run_overrides(cfg: &mut ExperimentConfig, args: &RunArgs) {
    if let Some(v) = args.window_groups {
        cfg.chunking.window_groups = v;
    }
    if let Some(v) = args.step_groups {
        cfg.chunking.step_groups = v;
    }
    if let Some(v) = &args.timestamp_history {
        cfg.chunking.timestamp_history = v == "on";
    }
    if let Some(v) = args.top_k {
        cfg.bilevel.top_k = v;
    }
    if let Some(v) = args.pool_factor {
        cfg.bilevel.pool_factor = v;
    }
    if let Some(v) = args.oracle {
        cfg.bilevel.oracle = v;
    }
    if let Some(v) = args.probe_layer {
        cfg.bilevel.probe_layer = Some(v);
    }
    if let Some(v) = args.max_new {
        cfg.max_new_tokens = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
}

pub fn cmd_run(args: &RunArgs) -> Result<RunReport, CliError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig {
            max_new_tokens: 8,
            ..ExperimentConfig::default()
        },
    };
    apply_run_overrides(&mut cfg, args);

    let model = cfg.model.build()?;
    let (layout, query) = match &args.layout {
        Some(path) => {
            let layout = SequenceLayout::from_json(&std::fs::read_to_string(path)?)?;
            let query = layout.token_ids[layout.query_range()].to_vec();
            (layout, query)
        }
        None => build_experiment_layout(&cfg)?,
    };
    if query.is_empty() {
        return Err(CliError::Config("run requires a non-empty query".into()));
    }

    let out_dir = resolve_out_dir(&args.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let report = run_pipeline(&model, &layout, &query, &cfg)?;

    if args.save_model {
        save_model(&model, &out_dir.join("model.bin"))?;
    }
    if args.save_store {
        // The pipeline consumed its own store; rebuild it for persistence.
        let unit = layout.group_unit_tokens().unwrap_or(1);
        let chunk_cfg = ChunkConfig::from_groups(
            cfg.chunking.window_groups,
            cfg.chunking.step_groups,
            unit,
            cfg.chunking.timestamp_history,
        );
        let mut out = run_prefill(&model, &layout, &chunk_cfg)?;
        out.store.pool_all(cfg.bilevel.pool_factor)?;
        save_store(&out.store, &out_dir.join("store"))?;
        let reloaded = load_store(&out_dir.join("store"))?;
        check_store_model(&reloaded, &model)?;
    }

    let path = out_dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "run: {} chunks, selection {:?}, generated {:?}, flops ratio {:.4}, kv fraction {:.4} -> {}",
        report.plan.n_chunks,
        report.selection,
        report.generated,
        report.flops_ratio_vs_full,
        report.kv_fraction,
        path.display()
    );
    Ok(report)
}

/// plan -> prefill -> pool -> score -> assemble -> decode.
pub fn run_pipeline(
    model: &ModelBundle,
    layout: &SequenceLayout,
    query: &[u32],
    cfg: &ExperimentConfig,
) -> Result<RunReport, CliError> {
    let unit = layout.group_unit_tokens().unwrap_or(1);
    let chunk_cfg = ChunkConfig::from_groups(
        cfg.chunking.window_groups,
        cfg.chunking.step_groups,
        unit,
        cfg.chunking.timestamp_history,
    );
    let mut out = run_prefill(model, layout, &chunk_cfg)?;
    out.store.pool_all(cfg.bilevel.pool_factor)?;

    let probe = cfg
        .bilevel
        .probe_layer
        .unwrap_or(model.config.num_layers / 2);
    let repr = query_key_repr(model, query, probe)?;
    let scores = score_chunks(&out.store, &repr, cfg.bilevel.oracle)?;
    let cache = assemble_mixed(&out.store, &scores, cfg.bilevel.top_k)?;
    let selection: Vec<usize> = cache.selection.iter().copied().collect();
    let decoded = decode(model, &cache, query, cfg.max_new_tokens)?;

    let predicted = predict_prefill_cost(layout, &out.plan, &model.config);
    let full = predict_full_prefill_cost(layout, &model.config);
    let flops_ratio = out.cost.total_flops() as f64 / full.total_flops() as f64;

    let chunk_tokens: Vec<usize> = out
        .store
        .chunk_ids()
        .map(|id| out.store.dense_tokens(id))
        .collect();
    let kv_fraction = predict_decode_kv_fraction_plan(
        &chunk_tokens,
        &selection,
        cfg.bilevel.pool_factor,
        out.store.overhead_tokens(),
    );
    // The formula and the meter must describe the same cache.
    let metered_fraction = cache.loaded_tokens as f64
        / (out.store.visual_tokens_total() + out.store.overhead_tokens()) as f64;
    debug_assert!((kv_fraction - metered_fraction).abs() < 1e-12);

    // In the degenerate regime the whole pipeline must reproduce the
    // oracle; the report carries the check's outcome.
    let oracle_equivalent =
        if out.plan.n_chunks() <= 1 && cfg.bilevel.top_k >= out.store.n_chunks() {
            let mut prompt = layout.token_ids[..layout.prefill_len()].to_vec();
            prompt.extend_from_slice(query);
            let oracle = full_oracle_greedy(model, &prompt, cfg.max_new_tokens)?;
            Some(oracle == decoded.generated)
        } else {
            None
        };

    Ok(RunReport {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        layout: LayoutSummary {
            n_tokens: layout.len(),
            n_frames: layout.n_frames,
            n_groups: layout.group_count(),
            effective_fps: layout.effective_fps,
            system_len: layout.system_len(),
            query_len: query.len(),
        },
        plan: PlanSummary {
            n_chunks: out.plan.n_chunks(),
            window_tokens: out.plan.window_tokens,
            step_tokens: out.plan.step_tokens,
            timestamp_history: out.plan.keep_timestamp_history,
        },
        scores,
        selection,
        generated: decoded.generated,
        prefill_cost: out.cost,
        predicted_prefill_cost: predicted,
        decode_cost: decoded.cost,
        flops_ratio_vs_full: flops_ratio,
        kv_fraction,
        oracle_equivalent,
    })
}

// ---------------------------------------------------------------------------
// needle
// ---------------------------------------------------------------------------

/// A planted needle: one group of pattern tokens inside filler groups.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeedleSpec {
    pub haystack_groups: usize,
    pub needle_group_index: usize,
    /// Drawn from the pattern zone, disjoint from haystack filler ids.
    pub needle_token_pattern: Vec<u32>,
}

impl NeedleSpec {
    pub fn validate(&self, vocab: &VocabLayout) -> Result<(), CliError> {
        if self.needle_group_index >= self.haystack_groups {
            return Err(CliError::Config(format!(
                "needle group {} out of range ({} groups)",
                self.needle_group_index, self.haystack_groups
            )));
        }
        if self.needle_token_pattern.is_empty() {
            return Err(CliError::Config("needle pattern must be non-empty".into()));
        }
        let zone = pattern_zone(vocab);
        if let Some(&bad) = self
            .needle_token_pattern
            .iter()
            .find(|id| !zone.contains(id))
        {
            return Err(CliError::Config(format!(
                "pattern id {bad} outside the pattern zone {zone:?}"
            )));
        }
        Ok(())
    }
}

/// Upper half of the visual range: reserved for needle patterns.
pub fn pattern_zone(vocab: &VocabLayout) -> std::ops::Range<u32> {
    let visual = vocab.visual_range();
    let mid = visual.start + (visual.end - visual.start) / 2;
    mid..visual.end
}

/// Lower half of the visual range: haystack filler.
pub fn filler_zone(vocab: &VocabLayout) -> std::ops::Range<u32> {
    let visual = vocab.visual_range();
    let mid = visual.start + (visual.end - visual.start) / 2;
    visual.start..mid
}

#[derive(Debug, Clone)]
pub struct NeedleParams {
    pub tokens_per_group: usize,
    pub system_len: usize,
    pub window_groups: usize,
    pub step_groups: usize,
    pub top_k: usize,
    pub pool_factor: usize,
    pub oracle: OracleKind,
    pub probe_layer: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NeedleCellResult {
    pub haystack_groups: usize,
    pub needle_group_index: usize,
    pub needle_chunk: usize,
    /// The needle chunk was loaded dense.
    pub selected_dense: bool,
    /// Greedy decode over the mixed cache emitted the token the all-dense
    /// reference run emits.
    pub answer_match: bool,
}

/// Layout whose visual ids are overwritten: filler groups draw from the
/// filler zone, the needle group cycles the pattern.
pub fn needle_layout(
    spec: &NeedleSpec,
    vocab: &VocabLayout,
    tokens_per_group: usize,
    system_len: usize,
    seed: u64,
) -> Result<SequenceLayout, CliError> {
    spec.validate(vocab)?;
    let n_frames = spec.haystack_groups * 4;
    let plan = FramePlan {
        timestamps: (0..n_frames).map(|k| k as f64).collect(),
        effective_fps: 1.0,
    };
    let features = synth_features(n_frames, tokens_per_group.max(4) * 2, seed);
    let params = LayoutParams {
        system_len,
        tokens_per_group,
        vocab: *vocab,
        max_position: None,
    };
    let mut layout = build_layout(&plan, &features, &[], &params)?;

    let filler = filler_zone(vocab);
    let filler_span = (filler.end - filler.start) as usize;
    for group in layout.groups() {
        let g = group.group_id;
        for (offset, pos) in group.visual_range.clone().enumerate() {
            layout.token_ids[pos] = if g == spec.needle_group_index {
                spec.needle_token_pattern[offset % spec.needle_token_pattern.len()]
            } else {
                // Distinct filler id per group, deterministic.
                filler.start + ((g * 31 + 7) % filler_span) as u32
            };
        }
    }
    Ok(layout)
}

/// Run one grid cell: plant the needle, run the bi-level pipeline, report
/// whether the oracle selected the needle chunk dense and whether the
/// mixed-cache decode reproduces the all-dense answer token.
pub fn run_needle_cell(
    model: &ModelBundle,
    spec: &NeedleSpec,
    params: &NeedleParams,
) -> Result<NeedleCellResult, CliError> {
    let vocab = VocabLayout::new(model.config.vocab_size)?;
    let layout = needle_layout(
        spec,
        &vocab,
        params.tokens_per_group,
        params.system_len,
        params.seed,
    )?;
    let unit = layout.group_unit_tokens().unwrap_or(1);
    let chunk_cfg = ChunkConfig::from_groups(params.window_groups, params.step_groups, unit, true);
    let mut out = run_prefill(model, &layout, &chunk_cfg)?;
    out.store.pool_all(params.pool_factor)?;

    // Query derived from the pattern.
    let query: Vec<u32> = (0..4)
        .map(|i| spec.needle_token_pattern[i % spec.needle_token_pattern.len()])
        .collect();
    let repr = query_key_repr(model, &query, params.probe_layer)?;
    let scores = score_chunks(&out.store, &repr, params.oracle)?;

    let groups = layout.groups();
    let needle_pos = groups[spec.needle_group_index].visual_range.start;
    let needle_chunk = out
        .plan
        .chunk_of_token(needle_pos)
        .expect("needle token is planned");

    let mixed = assemble_mixed(&out.store, &scores, params.top_k)?;
    let selected_dense = mixed.selection.contains(&needle_chunk);

    let all_dense = assemble_mixed(&out.store, &scores, out.store.n_chunks())?;
    let answer = decode(model, &all_dense, &query, 1)?.generated[0];
    let mixed_answer = decode(model, &mixed, &query, 1)?.generated[0];

    Ok(NeedleCellResult {
        haystack_groups: spec.haystack_groups,
        needle_group_index: spec.needle_group_index,
        needle_chunk,
        selected_dense,
        answer_match: mixed_answer == answer,
    })
}

#[derive(Debug, Serialize)]
pub struct NeedleReport {
    pub oracle: OracleKind,
    pub top_k: usize,
    pub pool_factor: usize,
    pub selection_rate: f64,
    pub answer_rate: f64,
    pub cells: Vec<NeedleCellResult>,
}

pub fn run_needle_grid(
    model: &ModelBundle,
    lengths: &[usize],
    depths: usize,
    pattern: &[u32],
    params: &NeedleParams,
) -> Result<NeedleReport, CliError> {
    let mut specs = Vec::new();
    for &groups in lengths {
        for depth in 0..depths {
            let idx = if depths <= 1 {
                0
            } else {
                (depth * (groups - 1)) / (depths - 1)
            };
            specs.push(NeedleSpec {
                haystack_groups: groups,
                needle_group_index: idx,
                needle_token_pattern: pattern.to_vec(),
            });
        }
    }
    // Independent cells over an immutable model.
    let cells: Result<Vec<NeedleCellResult>, CliError> = specs
        .par_iter()
        .map(|spec| run_needle_cell(model, spec, params))
        .collect();
    let cells = cells?;
    let n = cells.len().max(1) as f64;
    let selection_rate = cells.iter().filter(|c| c.selected_dense).count() as f64 / n;
    let answer_rate = cells.iter().filter(|c| c.answer_match).count() as f64 / n;
    Ok(NeedleReport {
        oracle: params.oracle,
        top_k: params.top_k,
        pool_factor: params.pool_factor,
        selection_rate,
        answer_rate,
        cells,
    })
}

pub fn cmd_needle(args: &NeedleArgs) -> Result<NeedleReport, CliError> {
    let model_section = ModelSection {
        num_layers: 2,
        num_heads: 2,
        head_dim: 16,
        ffn_dim: 64,
        vocab_size: 256,
        max_position: 8192,
        ..ModelSection::default()
    };
    let model = model_section.build()?;
    let vocab = VocabLayout::new(model.config.vocab_size)?;
    let pattern = match &args.pattern {
        Some(ids) => ids.clone(),
        None => vec![pattern_zone(&vocab).start + 3],
    };
    let params = NeedleParams {
        tokens_per_group: args.tokens_per_group,
        system_len: args.system_len,
        window_groups: args.window_groups,
        step_groups: args.step_groups,
        top_k: args.top_k,
        pool_factor: args.pool_factor,
        oracle: args.oracle,
        probe_layer: args.probe_layer,
        seed: args.seed,
    };
    let report = run_needle_grid(&model, &args.lengths, args.depths, &pattern, &params)?;

    let out_dir = resolve_out_dir(&args.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(
        out_dir.join("needle.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let mut csv =
        String::from("haystack_groups,needle_group_index,needle_chunk,selected_dense,answer_match\n");
    for c in &report.cells {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            c.haystack_groups,
            c.needle_group_index,
            c.needle_chunk,
            c.selected_dense as u8,
            c.answer_match as u8
        ));
    }
    std::fs::write(out_dir.join("needle.csv"), csv)?;
    println!(
        "needle: {} cells, selection rate {:.3}, answer rate {:.3} -> {}",
        report.cells.len(),
        report.selection_rate,
        report.answer_rate,
        out_dir.join("needle.csv").display()
    );
    Ok(report)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub n_tokens: usize,
    pub window_tokens: usize,
    pub step_tokens: usize,
    pub top_k: usize,
    pub pool_factor: usize,
    pub flops_total: u64,
    pub flops_predicted: u64,
    pub flops_ratio: f64,
    pub kv_fraction: f64,
    pub peak_kv_bytes: u64,
    pub wall_ms: f64,
}

pub const SWEEP_HEADER: &str =
    "n_tokens,window,step,k,p,flops_total,flops_predicted,flops_ratio,kv_fraction,peak_kv_bytes,wall_ms";

/// Measure prefill cost for each stream length and derive the decode KV
/// fraction for each (k, p); rows come back in input order. The fraction
/// column assumes the first k chunks are the selected ones, which only
/// matters when chunks are unequal.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    model: &ModelBundle,
    groups_list: &[usize],
    tokens_per_group: usize,
    system_len: usize,
    window_groups: usize,
    step_groups: usize,
    timestamp_history: bool,
    top_k_list: &[usize],
    pool_list: &[usize],
    seed: u64,
) -> Result<Vec<SweepRow>, CliError> {
    let vocab = VocabLayout::new(model.config.vocab_size)?;
    type Measured = (
        usize,
        ChunkConfig,
        crate::prefill::PrefillOutput,
        CostReport,
        CostReport,
        Vec<usize>,
        usize,
        f64,
    );
    let measured: Result<Vec<Measured>, CliError> = groups_list
        .par_iter()
        .map(|&n_groups| {
            let n_frames = n_groups * 4;
            let plan = FramePlan {
                timestamps: (0..n_frames).map(|k| k as f64).collect(),
                effective_fps: 1.0,
            };
            let features =
                synth_features(n_frames, tokens_per_group.max(4) * 2, seed ^ n_groups as u64);
            let params = LayoutParams {
                system_len,
                tokens_per_group,
                vocab,
                max_position: Some(model.config.max_position),
            };
            let layout = build_layout(&plan, &features, &[], &params)?;
            let unit = layout.group_unit_tokens().unwrap_or(1);
            let cfg = ChunkConfig::from_groups(window_groups, step_groups, unit, timestamp_history);
            let chunk_plan = plan_chunks(&layout, &cfg)?;
            let started = Instant::now();
            let out = run_prefill(model, &layout, &cfg)?;
            let wall_ms = started.elapsed().as_secs_f64() * 1e3;
            let predicted = predict_prefill_cost(&layout, &chunk_plan, &model.config);
            let full = predict_full_prefill_cost(&layout, &model.config);
            let chunk_tokens: Vec<usize> = out
                .store
                .chunk_ids()
                .map(|id| out.store.dense_tokens(id))
                .collect();
            let overhead = out.store.overhead_tokens();
            Ok((
                layout.len(),
                cfg,
                out,
                predicted,
                full,
                chunk_tokens,
                overhead,
                wall_ms,
            ))
        })
        .collect();

    let mut rows = Vec::new();
    for (n_tokens, cfg, out, predicted, full, chunk_tokens, overhead, wall_ms) in measured? {
        for &k in top_k_list {
            for &p in pool_list {
                let selected: Vec<usize> = (0..k.min(chunk_tokens.len())).collect();
                let kv_fraction =
                    predict_decode_kv_fraction_plan(&chunk_tokens, &selected, p.max(1), overhead);
                rows.push(SweepRow {
                    n_tokens,
                    window_tokens: cfg.window_tokens,
                    step_tokens: cfg.step_tokens,
                    top_k: k,
                    pool_factor: p,
                    flops_total: out.cost.total_flops(),
                    flops_predicted: predicted.total_flops(),
                    flops_ratio: out.cost.total_flops() as f64 / full.total_flops() as f64,
                    kv_fraction,
                    peak_kv_bytes: out.cost.kv_bytes_peak_resident,
                    wall_ms,
                });
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{:.6},{:.6},{},{:.3}\n",
            r.n_tokens,
            r.window_tokens,
            r.step_tokens,
            r.top_k,
            r.pool_factor,
            r.flops_total,
            r.flops_predicted,
            r.flops_ratio,
            r.kv_fraction,
            r.peak_kv_bytes,
            r.wall_ms
        ));
    }
    csv
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let hidden = args.num_heads * args.head_dim;
    let section = ModelSection {
        num_layers: args.num_layers,
        num_heads: args.num_heads,
        head_dim: args.head_dim,
        ffn_dim: 4 * hidden,
        vocab_size: 64.max(4 * hidden),
        max_position: 1 << 16,
        ..ModelSection::default()
    };
    let model = section.build()?;
    let rows = run_sweep(
        &model,
        &args.groups,
        args.tokens_per_group,
        args.system_len,
        args.window_groups,
        args.step_groups,
        args.timestamp_history == "on",
        &args.top_k_list,
        &args.pool_list,
        args.seed,
    )?;
    let out_dir = resolve_out_dir(&args.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let path = out_dir.join("sweep.csv");
    std::fs::write(&path, sweep_csv(&rows))?;
    println!("sweep: {} rows -> {}", rows.len(), path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

pub fn cmd_verify(args: &VerifyArgs) -> i32 {
    let outcomes = match args.only {
        Some(id) => vec![crate::verify::run_criterion(id)],
        None => crate::verify::run_all(),
    };
    let mut ok = true;
    for outcome in &outcomes {
        match outcome {
            Ok(c) => {
                println!(
                    "{} criterion {}: {} — {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.id,
                    c.name,
                    c.detail
                );
                ok &= c.passed;
            }
            Err(msg) => {
                println!("FAIL — {msg}");
                ok = false;
            }
        }
    }
    if ok {
        0
    } else {
        4
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelSection {
                num_layers: 2,
                num_heads: 2,
                head_dim: 8,
                ffn_dim: 32,
                vocab_size: 128,
                max_position: 8192,
                ..ModelSection::default()
            },
            sampling: SamplingSection {
                duration_s: Some(32.0),
                max_fps: 1,
                max_frames: 64,
                spatial_len: 16,
                ..SamplingSection::default()
            },
            layout: LayoutSection {
                system_len: 2,
                tokens_per_group: 4,
                query_len: 3,
                query_tokens: None,
            },
            chunking: ChunkSection {
                window_groups: 4,
                step_groups: 2,
                timestamp_history: true,
            },
            bilevel: BilevelSection::default(),
            seed: 5,
            max_new_tokens: 4,
        }
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::default();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig {
            seed: 1234,
            ..ExperimentConfig::default()
        };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn run_reports_are_byte_identical_across_runs() {
        let cfg = small_cfg();
        let model = cfg.model.build().unwrap();
        let (layout, query) = build_experiment_layout(&cfg).unwrap();
        let a = run_pipeline(&model, &layout, &query, &cfg).unwrap();
        let b = run_pipeline(&model, &layout, &query, &cfg).unwrap();
        let ja = serde_json::to_string_pretty(&a).unwrap();
        let jb = serde_json::to_string_pretty(&b).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn degenerate_run_reports_oracle_equivalent() {
        let mut cfg = small_cfg();
        cfg.sampling.duration_s = Some(8.0);
        cfg.sampling.max_frames = 8;
        cfg.chunking.window_groups = 64;
        cfg.chunking.step_groups = 64;
        cfg.bilevel.top_k = 64;
        cfg.seed = 6;
        let model = cfg.model.build().unwrap();
        let (layout, query) = build_experiment_layout(&cfg).unwrap();
        let report = run_pipeline(&model, &layout, &query, &cfg).unwrap();
        assert_eq!(report.plan.n_chunks, 1);
        assert_eq!(report.oracle_equivalent, Some(true));
    }

    #[test]
    fn run_kv_fraction_matches_equal_chunk_formula() {
        // window == step and groups divisible: all chunks equal, so the
        // generalized fraction equals the closed form.
        let mut cfg = small_cfg();
        cfg.sampling.duration_s = Some(64.0);
        cfg.chunking.window_groups = 4;
        cfg.chunking.step_groups = 4;
        cfg.bilevel.top_k = 1;
        cfg.bilevel.pool_factor = 2;
        cfg.seed = 7;
        let model = cfg.model.build().unwrap();
        let (layout, query) = build_experiment_layout(&cfg).unwrap();
        assert_eq!(layout.group_count(), 16);
        let report = run_pipeline(&model, &layout, &query, &cfg).unwrap();
        // 16 groups -> 4 chunks of 16 visual tokens; overhead 2 + 16.
        let expected = crate::cost::predict_decode_kv_fraction(4, 16, 1, 2, 18);
        assert_eq!(report.kv_fraction, expected);
    }

    #[test]
    fn sweep_rows_empty_input_gives_header_only() {
        let rows: Vec<SweepRow> = Vec::new();
        let csv = sweep_csv(&rows);
        assert_eq!(csv, format!("{SWEEP_HEADER}\n"));
    }

    #[test]
    fn needle_spec_validation() {
        let vocab = VocabLayout::new(256).unwrap();
        let zone = pattern_zone(&vocab);
        let ok = NeedleSpec {
            haystack_groups: 8,
            needle_group_index: 3,
            needle_token_pattern: vec![zone.start],
        };
        assert!(ok.validate(&vocab).is_ok());
        let out_of_range = NeedleSpec {
            haystack_groups: 8,
            needle_group_index: 8,
            needle_token_pattern: vec![zone.start],
        };
        assert!(out_of_range.validate(&vocab).is_err());
        let filler_id = NeedleSpec {
            haystack_groups: 8,
            needle_group_index: 0,
            needle_token_pattern: vec![filler_zone(&vocab).start],
        };
        assert!(filler_id.validate(&vocab).is_err());
    }

    #[test]
    fn needle_layout_plants_pattern_and_disjoint_filler() {
        let vocab = VocabLayout::new(256).unwrap();
        let pattern = vec![pattern_zone(&vocab).start + 1];
        let spec = NeedleSpec {
            haystack_groups: 6,
            needle_group_index: 2,
            needle_token_pattern: pattern.clone(),
        };
        let layout = needle_layout(&spec, &vocab, 4, 2, 9).unwrap();
        for group in layout.groups() {
            for pos in group.visual_range.clone() {
                let id = layout.token_ids[pos];
                if group.group_id == 2 {
                    assert_eq!(id, pattern[0]);
                } else {
                    assert!(filler_zone(&vocab).contains(&id));
                }
            }
        }
    }
}
