//! Construction of the model input stream.
//!
//! A video of `duration_s` seconds is sampled into frames (oversampling up
//! to a frame bound), frames are grouped four at a time, each group is
//! compressed into `tokens_per_group` visual tokens by a deterministic
//! pooling stand-in, and a timestamp token carrying the group's first
//! frame time is prepended to every group. Single images are repeated four
//! times so they flow through the same pipeline. The resulting
//! [`SequenceLayout`] is ordered
//!
//! ```text
//! [System x system_len] [(Timestamp, Visual x tokens_per_group) x groups] [Query]
//! ```
//!
//! and serializes to the JSON interchange document used between CLI steps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frames per group; images are repeated to this count.
pub const GROUP_SIZE: usize = 4;

/// Synthetic per-frame feature vector (spatial positions of one channel).
pub type FrameFeature = Vec<f32>;

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("invalid sampling policy: {0}")]
    InvalidPolicy(String),
    #[error("duration must be positive and finite, got {0}")]
    InvalidDuration(f64),
    #[error("a group holds exactly {GROUP_SIZE} frames, got {0}")]
    GroupSize(usize),
    #[error("feature shape: {0}")]
    FeatureShape(String),
    #[error("plan and features disagree: {0}")]
    PlanMismatch(String),
    #[error("vocabulary of {0} is too small to partition (need at least 64)")]
    VocabTooSmall(usize),
    #[error("layout of {len} tokens exceeds max_position {max}")]
    LayoutTooLong { len: usize, max: usize },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("layout json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Frame sampling bounds. Rates are integer frames per second.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub base_fps: u32,
    pub max_fps: u32,
    pub max_frames: usize,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy {
            base_fps: 1,
            max_fps: 4,
            max_frames: 1024,
        }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<(), LayoutError> {
        if self.base_fps == 0 {
            return Err(LayoutError::InvalidPolicy("base_fps must be >= 1".into()));
        }
        if self.base_fps > self.max_fps {
            return Err(LayoutError::InvalidPolicy(format!(
                "base_fps {} exceeds max_fps {}",
                self.base_fps, self.max_fps
            )));
        }
        if self.max_frames < GROUP_SIZE {
            return Err(LayoutError::InvalidPolicy(format!(
                "max_frames must be at least {GROUP_SIZE}"
            )));
        }
        Ok(())
    }
}

/// The chosen frame times, strictly increasing, within `[0, duration)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePlan {
    pub timestamps: Vec<f64>,
    pub effective_fps: f64,
}

impl FramePlan {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn group_count(&self) -> usize {
        self.timestamps.len().div_ceil(GROUP_SIZE)
    }
}

/// Pick frame times for a video.
///
/// Frames land at `k / rate`. When 1x-base sampling already meets or
/// exceeds the bound, the base-rate candidates are uniformly subsampled
/// down to exactly `max_frames`; otherwise the largest integer rate in
/// `[base_fps, max_fps]` whose frame count stays within the bound is used.
pub fn sample_frames(duration_s: f64, policy: &SamplingPolicy) -> Result<FramePlan, LayoutError> {
    policy.validate()?;
    if !duration_s.is_finite() || duration_s <= 0.0 {
        return Err(LayoutError::InvalidDuration(duration_s));
    }
    let base_count = (duration_s * policy.base_fps as f64).floor() as u64;
    if base_count >= policy.max_frames as u64 {
        let m = policy.max_frames as u64;
        let timestamps = (0..m)
            .map(|i| {
                let idx = (i as u128 * base_count as u128 / m as u128) as u64;
                idx as f64 / policy.base_fps as f64
            })
            .collect();
        return Ok(FramePlan {
            timestamps,
            effective_fps: policy.max_frames as f64 / duration_s,
        });
    }
    let mut rate = policy.base_fps;
    for r in (policy.base_fps..=policy.max_fps).rev() {
        if (duration_s * r as f64).floor() as u64 <= policy.max_frames as u64 {
            rate = r;
            break;
        }
    }
    let count = (duration_s * rate as f64).floor() as u64;
    let timestamps = (0..count).map(|k| k as f64 / rate as f64).collect();
    Ok(FramePlan {
        timestamps,
        effective_fps: rate as f64,
    })
}

/// Repeat a single image four times: one static, video-like group.
pub fn align_image(image_feature: &FrameFeature) -> [FrameFeature; GROUP_SIZE] {
    [
        image_feature.clone(),
        image_feature.clone(),
        image_feature.clone(),
        image_feature.clone(),
    ]
}

/// Compress one 4-frame group into `tokens_per_group` scalar token
/// features: temporal mean over the four frames, then mean over each of
/// `tokens_per_group` contiguous spatial windows.
pub fn compress_group(
    group: &[FrameFeature],
    tokens_per_group: usize,
) -> Result<Vec<f32>, LayoutError> {
    if group.len() != GROUP_SIZE {
        return Err(LayoutError::GroupSize(group.len()));
    }
    let spatial = group[0].len();
    if group.iter().any(|f| f.len() != spatial) {
        return Err(LayoutError::FeatureShape(
            "frames in a group must share a shape".into(),
        ));
    }
    if tokens_per_group == 0 || spatial < tokens_per_group {
        return Err(LayoutError::FeatureShape(format!(
            "spatial length {spatial} cannot pool to {tokens_per_group} tokens"
        )));
    }
    let mut temporal = vec![0.0f32; spatial];
    for frame in group {
        for (acc, v) in temporal.iter_mut().zip(frame) {
            *acc += v;
        }
    }
    for acc in temporal.iter_mut() {
        *acc /= GROUP_SIZE as f32;
    }
    Ok((0..tokens_per_group)
        .map(|j| {
            let lo = j * spatial / tokens_per_group;
            let hi = (j + 1) * spatial / tokens_per_group;
            temporal[lo..hi].iter().sum::<f32>() / (hi - lo) as f32
        })
        .collect())
}

/// Fixed partition of the synthetic vocabulary.
///
/// `[0, 16)` special/system ids (0 reserved), `[16, 32)` timestamp ids
/// (coarse time buckets), `[32, vocab/2)` query text ids, `[vocab/2,
/// vocab)` visual ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub vocab_size: usize,
}

impl VocabLayout {
    pub fn new(vocab_size: usize) -> Result<VocabLayout, LayoutError> {
        if vocab_size < 64 {
            return Err(LayoutError::VocabTooSmall(vocab_size));
        }
        Ok(VocabLayout { vocab_size })
    }

    pub fn query_range(&self) -> std::ops::Range<u32> {
        32..(self.vocab_size / 2) as u32
    }

    pub fn visual_range(&self) -> std::ops::Range<u32> {
        (self.vocab_size / 2) as u32..self.vocab_size as u32
    }

    pub fn system_token_id(&self, index: usize) -> u32 {
        1 + (index % 15) as u32
    }

    pub fn timestamp_token_id(&self, time_s: f64) -> u32 {
        16 + (time_s.floor() as i64).rem_euclid(16) as u32
    }

    /// Bucket a feature value (clamped to [-1, 1]) into the visual range.
    pub fn quantize_visual(&self, value: f32) -> u32 {
        let range = self.visual_range();
        let span = (range.end - range.start) as f32;
        let t = (value.clamp(-1.0, 1.0) + 1.0) / 2.0;
        let bucket = ((t * span) as u32).min(span as u32 - 1);
        range.start + bucket
    }
}

/// What one token is for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenRole {
    System,
    Timestamp {
        time_s: f64,
    },
    Visual {
        #[serde(skip_serializing_if = "Option::is_none", default)]
        chunk_id: Option<usize>,
        group_id: usize,
    },
    Query,
}

/// One group's span inside a layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpan {
    pub group_id: usize,
    pub timestamp_pos: Option<usize>,
    pub visual_range: std::ops::Range<usize>,
}

impl GroupSpan {
    pub fn start(&self) -> usize {
        self.timestamp_pos.unwrap_or(self.visual_range.start)
    }

    pub fn end(&self) -> usize {
        self.visual_range.end
    }

    pub fn token_count(&self) -> usize {
        self.end() - self.start()
    }
}

/// The fully constructed token stream. Token `i` sits at global position
/// `i`; roles describe the stream structure.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLayout {
    pub token_ids: Vec<u32>,
    pub roles: Vec<TokenRole>,
    pub n_frames: usize,
    pub effective_fps: f64,
    pub tokens_per_group: usize,
}

#[derive(Serialize, Deserialize)]
struct LayoutMeta {
    n_frames: usize,
    effective_fps: f64,
    tokens_per_group: usize,
}

#[derive(Serialize, Deserialize)]
struct LayoutFile {
    tokens: Vec<u32>,
    roles: Vec<TokenRole>,
    meta: LayoutMeta,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn system_len(&self) -> usize {
        self.roles
            .iter()
            .take_while(|r| matches!(r, TokenRole::System))
            .count()
    }

    pub fn query_len(&self) -> usize {
        self.roles
            .iter()
            .rev()
            .take_while(|r| matches!(r, TokenRole::Query))
            .count()
    }

    /// Tokens encoded during prefill: everything before the query.
    pub fn prefill_len(&self) -> usize {
        self.len() - self.query_len()
    }

    pub fn query_range(&self) -> std::ops::Range<usize> {
        self.prefill_len()..self.len()
    }

    /// Group spans in order, derived from the roles.
    pub fn groups(&self) -> Vec<GroupSpan> {
        let mut spans: Vec<GroupSpan> = Vec::new();
        for (pos, role) in self.roles.iter().enumerate() {
            match role {
                TokenRole::Timestamp { .. } => spans.push(GroupSpan {
                    group_id: spans.len(),
                    timestamp_pos: Some(pos),
                    visual_range: pos + 1..pos + 1,
                }),
                TokenRole::Visual { group_id, .. } => match spans.last_mut() {
                    Some(span) if span.group_id == *group_id => {
                        span.visual_range.end = pos + 1;
                    }
                    _ => spans.push(GroupSpan {
                        group_id: *group_id,
                        timestamp_pos: None,
                        visual_range: pos..pos + 1,
                    }),
                },
                TokenRole::System | TokenRole::Query => {}
            }
        }
        spans
    }

    /// Tokens per group span (uniform across groups after padding).
    pub fn group_unit_tokens(&self) -> Option<usize> {
        self.groups().first().map(|g| g.token_count())
    }

    pub fn group_count(&self) -> usize {
        self.groups().len()
    }

    /// Structural invariants: ordering, group consistency, uniform spans.
    pub fn validate(&self) -> Result<(), LayoutError> {
        if self.token_ids.len() != self.roles.len() {
            return Err(LayoutError::InvalidLayout(
                "token and role counts differ".into(),
            ));
        }
        #[derive(PartialEq, PartialOrd)]
        enum Zone {
            System,
            Stream,
            Query,
        }
        let mut zone = Zone::System;
        for role in &self.roles {
            let next = match role {
                TokenRole::System => Zone::System,
                TokenRole::Timestamp { .. } | TokenRole::Visual { .. } => Zone::Stream,
                TokenRole::Query => Zone::Query,
            };
            if next < zone {
                return Err(LayoutError::InvalidLayout(
                    "roles must be ordered system, stream, query".into(),
                ));
            }
            zone = next;
        }
        let groups = self.groups();
        for (i, span) in groups.iter().enumerate() {
            if span.group_id != i {
                return Err(LayoutError::InvalidLayout(format!(
                    "group id {} out of order (expected {})",
                    span.group_id, i
                )));
            }
            if span.visual_range.is_empty() {
                return Err(LayoutError::InvalidLayout(format!(
                    "group {i} has no visual tokens"
                )));
            }
        }
        if let Some(first) = groups.first() {
            let unit = first.token_count();
            let with_ts = first.timestamp_pos.is_some();
            for span in &groups {
                if span.token_count() != unit || span.timestamp_pos.is_some() != with_ts {
                    return Err(LayoutError::InvalidLayout(
                        "group spans must be uniform".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, LayoutError> {
        let file = LayoutFile {
            tokens: self.token_ids.clone(),
            roles: self.roles.clone(),
            meta: LayoutMeta {
                n_frames: self.n_frames,
                effective_fps: self.effective_fps,
                tokens_per_group: self.tokens_per_group,
            },
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<SequenceLayout, LayoutError> {
        let file: LayoutFile = serde_json::from_str(text)?;
        let layout = SequenceLayout {
            token_ids: file.tokens,
            roles: file.roles,
            n_frames: file.meta.n_frames,
            effective_fps: file.meta.effective_fps,
            tokens_per_group: file.meta.tokens_per_group,
        };
        layout.validate()?;
        Ok(layout)
    }
}

/// Inputs to [`build_layout`] besides the plan and features.
#[derive(Debug, Clone)]
pub struct LayoutParams {
    pub system_len: usize,
    pub tokens_per_group: usize,
    pub vocab: VocabLayout,
    /// When set, reject layouts longer than this.
    pub max_position: Option<usize>,
}

/// Assemble the token stream for a frame plan.
///
/// The last incomplete group is zero-padded to four frames (padding
/// contributes to the group mean). Visual token ids come from quantizing
/// each compressed feature into the visual id range.
pub fn build_layout(
    plan: &FramePlan,
    frame_features: &[FrameFeature],
    query_token_ids: &[u32],
    params: &LayoutParams,
) -> Result<SequenceLayout, LayoutError> {
    if frame_features.len() != plan.len() {
        return Err(LayoutError::PlanMismatch(format!(
            "{} features for {} planned frames",
            frame_features.len(),
            plan.len()
        )));
    }
    if params.system_len == 0 {
        return Err(LayoutError::InvalidLayout(
            "system prompt must hold at least one token".into(),
        ));
    }
    if let Some(&bad) = query_token_ids
        .iter()
        .find(|&&id| id as usize >= params.vocab.vocab_size)
    {
        return Err(LayoutError::InvalidLayout(format!(
            "query token id {bad} outside vocabulary"
        )));
    }

    let n_groups = frame_features.len().div_ceil(GROUP_SIZE);
    let total =
        params.system_len + n_groups * (1 + params.tokens_per_group) + query_token_ids.len();
    if let Some(max) = params.max_position {
        if total > max {
            return Err(LayoutError::LayoutTooLong { len: total, max });
        }
    }

    let mut token_ids = Vec::with_capacity(total);
    let mut roles = Vec::with_capacity(total);
    for i in 0..params.system_len {
        token_ids.push(params.vocab.system_token_id(i));
        roles.push(TokenRole::System);
    }
    for g in 0..n_groups {
        let start = g * GROUP_SIZE;
        let end = (start + GROUP_SIZE).min(frame_features.len());
        let spatial = frame_features[start].len();
        let mut group: Vec<FrameFeature> = frame_features[start..end].to_vec();
        group.resize(GROUP_SIZE, vec![0.0; spatial]);
        let compressed = compress_group(&group, params.tokens_per_group)?;

        let time_s = plan.timestamps[start];
        token_ids.push(params.vocab.timestamp_token_id(time_s));
        roles.push(TokenRole::Timestamp { time_s });
        for value in compressed {
            token_ids.push(params.vocab.quantize_visual(value));
            roles.push(TokenRole::Visual {
                chunk_id: None,
                group_id: g,
            });
        }
    }
    for &id in query_token_ids {
        token_ids.push(id);
        roles.push(TokenRole::Query);
    }

    let layout = SequenceLayout {
        token_ids,
        roles,
        n_frames: frame_features.len(),
        effective_fps: plan.effective_fps,
        tokens_per_group: params.tokens_per_group,
    };
    debug_assert!(layout.validate().is_ok());
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn policy(max_frames: usize, max_fps: u32) -> SamplingPolicy {
        SamplingPolicy {
            base_fps: 1,
            max_fps,
            max_frames,
        }
    }

    #[test]
    fn sampler_oversamples_to_max_fps() {
        let plan = sample_frames(30.0, &policy(120, 4)).unwrap();
        assert_eq!(plan.len(), 120);
        assert_eq!(plan.effective_fps, 4.0);
        assert_eq!(plan.timestamps[1], 0.25);
    }

    #[test]
    fn sampler_is_capped_by_max_fps() {
        let plan = sample_frames(30.0, &policy(120, 2)).unwrap();
        assert_eq!(plan.len(), 60);
        assert_eq!(plan.effective_fps, 2.0);
    }

    #[test]
    fn sampler_subsamples_over_bound() {
        let plan = sample_frames(600.0, &policy(150, 4)).unwrap();
        assert_eq!(plan.len(), 150);
        // Uniform over the 600 one-per-second candidates: every 4th second.
        assert_eq!(plan.timestamps[0], 0.0);
        assert_eq!(plan.timestamps[1], 4.0);
        assert_eq!(plan.timestamps[149], 596.0);
        assert!(plan.effective_fps <= 4.0);
    }

    #[test]
    fn sampler_rejects_bad_duration() {
        assert!(sample_frames(0.0, &policy(16, 4)).is_err());
        assert!(sample_frames(-3.0, &policy(16, 4)).is_err());
        assert!(sample_frames(f64::NAN, &policy(16, 4)).is_err());
    }

    #[test]
    fn sampler_property_sweep() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for _ in 0..200 {
            let duration = rng.gen_range(0.2..2000.0);
            let pol = SamplingPolicy {
                base_fps: rng.gen_range(1..=3),
                max_fps: rng.gen_range(3..=8),
                max_frames: rng.gen_range(4..=512),
            };
            let plan = sample_frames(duration, &pol).unwrap();
            assert!(plan.len() <= pol.max_frames, "bound violated");
            assert!(
                plan.effective_fps <= pol.max_fps as f64 + 1e-12,
                "rate cap violated"
            );
            assert!(
                plan.timestamps.windows(2).all(|w| w[0] < w[1]),
                "timestamps must increase"
            );
            assert!(plan
                .timestamps
                .iter()
                .all(|&t| t >= 0.0 && t < duration + 1e-9));

            // Monotonicity: a looser frame bound never yields fewer frames.
            let mut looser = pol.clone();
            looser.max_frames = pol.max_frames + rng.gen_range(1..=64);
            let plan2 = sample_frames(duration, &looser).unwrap();
            assert!(plan2.len() >= plan.len(), "monotonicity violated");
        }
    }

    #[test]
    fn align_image_repeats_four_times() {
        let feature = vec![0.25, -0.5, 0.75];
        let group = align_image(&feature);
        assert_eq!(group.len(), GROUP_SIZE);
        assert!(group.iter().all(|f| *f == feature));
        // Definitional: compressing the aligned group equals compressing
        // four explicit copies.
        let a = compress_group(&group, 3).unwrap();
        let b = compress_group(
            &[
                feature.clone(),
                feature.clone(),
                feature.clone(),
                feature.clone(),
            ],
            3,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn align_image_preserves_order_of_distinct_images() {
        let a = vec![0.1, 0.2];
        let b = vec![-0.3, 0.4];
        let ga = align_image(&a);
        let gb = align_image(&b);
        assert_ne!(ga[0], gb[0]);
        assert_eq!(ga[3], a);
        assert_eq!(gb[0], b);
    }

    #[test]
    fn compress_identical_frames_is_spatial_pool_of_one() {
        let f: FrameFeature = (0..8).map(|i| i as f32 / 8.0).collect();
        let out = compress_group(&align_image(&f), 4).unwrap();
        let expected: Vec<f32> = (0..4).map(|j| (f[2 * j] + f[2 * j + 1]) / 2.0).collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn compress_alternating_frames_cancel() {
        let f: FrameFeature = vec![0.5; 6];
        let neg: FrameFeature = f.iter().map(|v| -v).collect();
        let out = compress_group(&[f.clone(), neg.clone(), f, neg], 3).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compress_matches_brute_force_windows() {
        // tokens_per_group 16 over spatial length 64: each output token is
        // the mean of a 4-wide window of the temporal mean.
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let group: Vec<FrameFeature> = (0..4)
            .map(|_| (0..64).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let out = compress_group(&group, 16).unwrap();
        assert_eq!(out.len(), 16);
        for (j, &got) in out.iter().enumerate() {
            let mut acc = 0.0f64;
            for s in 4 * j..4 * (j + 1) {
                for frame in &group {
                    acc += frame[s] as f64;
                }
            }
            let want = acc / 16.0;
            assert!(
                (got as f64 - want).abs() < 1e-5,
                "token {j}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn compress_rejects_mismatched_shapes() {
        let group = vec![vec![0.0; 4], vec![0.0; 4], vec![0.0; 5], vec![0.0; 4]];
        assert!(compress_group(&group, 2).is_err());
        assert!(compress_group(&[vec![0.0; 4]], 2).is_err());
    }

    fn params(system_len: usize, tokens_per_group: usize) -> LayoutParams {
        LayoutParams {
            system_len,
            tokens_per_group,
            vocab: VocabLayout::new(256).unwrap(),
            max_position: None,
        }
    }

    fn features(n: usize, spatial: usize, seed: u64) -> Vec<FrameFeature> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..spatial).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect()
    }

    #[test]
    fn layout_length_arithmetic() {
        // 8 frames, tokens_per_group 4, system 2, 3 query tokens:
        // 2 + 2*(1+4) + 3 = 15.
        let plan = sample_frames(8.0, &policy(16, 1)).unwrap();
        assert_eq!(plan.len(), 8);
        let layout = build_layout(&plan, &features(8, 8, 1), &[40, 41, 42], &params(2, 4)).unwrap();
        assert_eq!(layout.len(), 15);
        assert_eq!(layout.system_len(), 2);
        assert_eq!(layout.query_len(), 3);
        assert_eq!(layout.group_count(), 2);
        assert_eq!(layout.group_unit_tokens(), Some(5));
    }

    #[test]
    fn layout_without_query_ends_with_visual() {
        let plan = sample_frames(4.0, &policy(16, 1)).unwrap();
        let layout = build_layout(&plan, &features(4, 8, 2), &[], &params(1, 4)).unwrap();
        assert!(matches!(
            layout.roles.last(),
            Some(TokenRole::Visual { .. })
        ));
        assert_eq!(layout.query_len(), 0);
    }

    #[test]
    fn second_group_timestamp_is_four_seconds_at_one_fps() {
        let plan = sample_frames(8.0, &policy(16, 1)).unwrap();
        let layout = build_layout(&plan, &features(8, 8, 3), &[], &params(1, 4)).unwrap();
        let groups = layout.groups();
        let ts_pos = groups[1].timestamp_pos.unwrap();
        match layout.roles[ts_pos] {
            TokenRole::Timestamp { time_s } => assert_eq!(time_s, 4.0),
            ref other => panic!("expected timestamp role, got {other:?}"),
        }
    }

    #[test]
    fn group_count_is_ceil_of_frames_over_four() {
        for n_frames in 1..=13usize {
            let plan = FramePlan {
                timestamps: (0..n_frames).map(|k| k as f64).collect(),
                effective_fps: 1.0,
            };
            let layout =
                build_layout(&plan, &features(n_frames, 8, 4), &[], &params(1, 2)).unwrap();
            assert_eq!(layout.group_count(), n_frames.div_ceil(4));
        }
    }

    #[test]
    fn layout_rejects_overflow_of_max_position() {
        let plan = sample_frames(8.0, &policy(16, 1)).unwrap();
        let mut p = params(2, 4);
        p.max_position = Some(10);
        let err = build_layout(&plan, &features(8, 8, 5), &[40], &p);
        assert!(matches!(err, Err(LayoutError::LayoutTooLong { .. })));
    }

    #[test]
    fn json_round_trip_preserves_structure() {
        let plan = sample_frames(10.0, &policy(16, 1)).unwrap();
        let layout = build_layout(&plan, &features(10, 12, 6), &[40, 50], &params(2, 3)).unwrap();
        let text = layout.to_json().unwrap();
        let back = SequenceLayout::from_json(&text).unwrap();
        assert_eq!(layout, back);
        assert_eq!(layout.groups(), back.groups());
    }

    #[test]
    fn vocab_partition_is_disjoint_and_in_range() {
        let vocab = VocabLayout::new(128).unwrap();
        assert!(VocabLayout::new(32).is_err());
        assert_eq!(vocab.query_range(), 32..64);
        assert_eq!(vocab.visual_range(), 64..128);
        assert_eq!(vocab.quantize_visual(-1.0), 64);
        assert_eq!(vocab.quantize_visual(1.0), 127);
        assert_eq!(vocab.quantize_visual(-5.0), 64);
        let mid = vocab.quantize_visual(0.0);
        assert!(vocab.visual_range().contains(&mid));
        assert!(vocab.system_token_id(0) < 16);
        assert!((16..32).contains(&vocab.timestamp_token_id(123.7)));
    }
}
