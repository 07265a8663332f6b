//! Frame-by-frame inference over a sequence.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate, AggregationMode};
use super::metrics::{ConfusionCounts, MiouReport};
use super::scheduler::{validate_gammas, Role, SchedulerState, DEFAULT_GAMMA1, DEFAULT_GAMMA2};
use crate::backbone::{predict_labels, Backbone, BlockMask, FeatureMap};
use crate::error::{Error, Result};
use crate::maskgen::{mask_magnitude, spatial_mask, ExtractedFeature, MaskGenerator, SpatialMask};
use crate::synthdata::{FrameSequence, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Policy {
    /// Threshold scheduling on the spatial-mask magnitude.
    DistortionAware { gamma1: f64, gamma2: f64 },
    /// Every `interval`-th frame is a key frame.
    Fixed { interval: usize },
    /// Every frame runs the full network.
    AlwaysFull,
    /// Every frame after the first is pruned; no feature reuse.
    PerFramePruning,
}

impl Default for Policy {
    fn default() -> Self {
        Policy::DistortionAware {
            gamma1: DEFAULT_GAMMA1,
            gamma2: DEFAULT_GAMMA2,
        }
    }
}

impl Policy {
    /// Short name used on the command line and in summaries.
    pub fn label(&self) -> &'static str {
        match self {
            Policy::DistortionAware { .. } => "da",
            Policy::Fixed { .. } => "fixed",
            Policy::AlwaysFull => "full",
            Policy::PerFramePruning => "pfp",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Policy::DistortionAware { gamma1, gamma2 } => validate_gammas(gamma1, gamma2),
            Policy::Fixed { interval } if interval == 0 => Err(Error::config("policy.interval", "must be >= 1")),
            _ => Ok(()),
        }
    }

    fn needs_generator(&self) -> bool {
        !matches!(self, Policy::AlwaysFull)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamOptions {
    pub policy: Policy,
    pub aggregation: AggregationMode,
    /// Blend key-frame features with the cache as well.
    pub fam_on_key: bool,
    /// Seed for random aggregation.
    pub seed: u64,
}

impl Default for StreamOptions {
    fn default() -> Self {
        StreamOptions {
            policy: Policy::default(),
            aggregation: AggregationMode::Stmg,
            fam_on_key: false,
            seed: 0,
        }
    }
}

/// What the next frame reuses.
#[derive(Clone, Debug)]
pub struct CachedState {
    pub prev_feature: FeatureMap,
    pub prev_extracted: Option<ExtractedFeature>,
    pub prev_frame_index: usize,
}

#[derive(Clone, Debug)]
pub struct FrameResult {
    pub index: usize,
    pub role: Role,
    /// Absent for frame 0 and when no generator runs.
    pub mask_magnitude: Option<f64>,
    pub spatial_mask: Option<SpatialMask>,
    pub eta: Option<f64>,
    pub keep_prob: Option<Vec<f64>>,
    /// Absent on key frames, which run the full network.
    pub block_mask: Option<BlockMask>,
    pub flops: u64,
    pub latency_ms: f64,
    pub predicted: LabelMap,
    pub feature_mean: f64,
    pub feature_abs_max: f64,
}

impl FrameResult {
    /// The mask that was executed: all ones on key frames.
    pub fn effective_mask(&self, blocks: usize) -> BlockMask {
        self.block_mask.clone().unwrap_or_else(|| BlockMask::ones(blocks))
    }
}

/// One line of the per-frame metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub role: Role,
    pub magnitude: Option<f64>,
    pub eta: Option<f64>,
    pub keep_prob: Option<Vec<f64>>,
    pub mask_bits: String,
    pub flops: u64,
    pub latency_ms: f64,
    pub feature_mean: f64,
    pub feature_abs_max: f64,
    pub running_iou: Vec<Option<f64>>,
    pub running_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub policy: String,
    pub aggregation: String,
    pub frames: usize,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_flops: f64,
    pub full_flops: u64,
    pub flops_ratio: f64,
    pub mean_latency_ms: f64,
    pub max_latency_ms: f64,
    pub key_ratio: f64,
    /// Mean fraction of executed prunable blocks over non-key frames.
    pub mean_keep_ratio: Option<f64>,
    /// Mean fraction of skipped prunable blocks over non-key frames.
    pub mean_sparsity: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StreamResult {
    pub frames: Vec<FrameResult>,
    pub records: Vec<FrameRecord>,
    pub summary: StreamSummary,
    pub miou: MiouReport,
}

fn feature_stats(f: &FeatureMap) -> (f64, f64) {
    let mean = f.values.mean().unwrap_or(0.0);
    let max = f.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (mean, max)
}

pub fn run_stream(
    backbone: &Backbone,
    generator: Option<&MaskGenerator>,
    seq: &FrameSequence,
    options: &StreamOptions,
) -> Result<StreamResult> {
    if seq.is_empty() {
        return Err(Error::invalid("cannot stream an empty sequence"));
    }
    options.policy.validate()?;
    options.aggregation.validate()?;
    let generator = match (options.policy.needs_generator(), generator) {
        (true, None) => return Err(Error::invalid(format!("policy `{}` needs a mask generator", options.policy.label()))),
        (true, Some(g)) => Some(g),
        (false, _) => None,
    };
    if let Some(g) = generator {
        if g.blocks() != backbone.prunable_blocks() {
            return Err(Error::shape(format!(
                "generator has {} gates, backbone {} prunable blocks",
                g.blocks(),
                backbone.prunable_blocks()
            )));
        }
    }

    let k = backbone.prunable_blocks();
    let ledger = backbone.ledger();
    let full_flops = ledger.full();
    let num_classes = backbone.config().num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut scheduler = match options.policy {
        Policy::DistortionAware { gamma1, gamma2 } => Some(SchedulerState::new(gamma1, gamma2)?),
        _ => None,
    };
    let mut cache: Option<CachedState> = None;
    let mut counts = ConfusionCounts::new(num_classes);
    let mut frames = Vec::with_capacity(seq.len());
    let mut records = Vec::with_capacity(seq.len());

    for (i, frame) in seq.frames.iter().enumerate() {
        let start = Instant::now();
        let e = generator.map(|g| g.extract(frame)).transpose()?;
        let mut magnitude = None;
        let mut spatial = None;
        let mut decision = None;
        let (role, feature) = match (&cache, &e) {
            (Some(c), Some(e)) => {
                let t = c.prev_extracted.as_ref().expect("cached alongside the generator");
                let m = spatial_mask(t, e)?;
                let mag = mask_magnitude(&m);
                let role = match options.policy {
                    Policy::DistortionAware { .. } => scheduler.as_mut().expect("created above").step(mag)?.role,
                    Policy::Fixed { interval } => {
                        if i % interval == 0 {
                            Role::Key
                        } else {
                            Role::Nonkey
                        }
                    }
                    Policy::PerFramePruning => Role::Nonkey,
                    Policy::AlwaysFull => Role::Key,
                };
                let feature = match role {
                    Role::Key => {
                        let full = backbone.forward_full(frame)?;
                        if options.fam_on_key {
                            aggregate(&c.prev_feature, &full, &m, options.aggregation, &mut rng)?
                        } else {
                            full
                        }
                    }
                    Role::Nonkey => {
                        let d = generator.expect("present with features").decide(t, e, &m)?;
                        let cur = backbone.forward_masked(frame, &d.mask)?;
                        decision = Some(d);
                        if options.policy == Policy::PerFramePruning {
                            cur
                        } else {
                            aggregate(&c.prev_feature, &cur, &m, options.aggregation, &mut rng)?
                        }
                    }
                };
                magnitude = Some(mag);
                spatial = Some(m);
                (role, feature)
            }
            _ => (Role::Key, backbone.forward_full(frame)?),
        };
        let scores = backbone.segmentation_head(&feature)?;
        let predicted = predict_labels(&scores);
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;

        if !feature.is_finite() {
            return Err(Error::NonFinite(format!("feature of frame {i}")));
        }
        let block_mask = decision.as_ref().map(|d| d.mask.clone());
        let flops = ledger.count(&block_mask.clone().unwrap_or_else(|| BlockMask::ones(k)))?;
        counts.add(&predicted, &seq.labels[i])?;
        let running = counts.report();
        let (feature_mean, feature_abs_max) = feature_stats(&feature);

        let result = FrameResult {
            index: i,
            role,
            mask_magnitude: magnitude,
            spatial_mask: spatial,
            eta: decision.as_ref().map(|d| d.eta),
            keep_prob: decision.as_ref().map(|d| d.keep_prob.clone()),
            block_mask,
            flops,
            latency_ms,
            predicted,
            feature_mean,
            feature_abs_max,
        };
        records.push(FrameRecord {
            index: i,
            role,
            magnitude,
            eta: result.eta,
            keep_prob: result.keep_prob.clone(),
            mask_bits: result.effective_mask(k).bit_string(),
            flops,
            latency_ms,
            feature_mean,
            feature_abs_max,
            running_iou: running.per_class,
            running_miou: running.miou,
        });
        frames.push(result);
        cache = Some(CachedState {
            prev_feature: feature,
            prev_extracted: e,
            prev_frame_index: i,
        });
    }

    let miou = counts.report();
    let summary = summarize(&frames, options, full_flops, k, &miou);
    Ok(StreamResult {
        frames,
        records,
        summary,
        miou,
    })
}

fn summarize(frames: &[FrameResult], options: &StreamOptions, full_flops: u64, k: usize, miou: &MiouReport) -> StreamSummary {
    let n = frames.len() as f64;
    let mean_flops = frames.iter().map(|f| f.flops as f64).sum::<f64>() / n;
    let latencies: Vec<f64> = frames.iter().map(|f| f.latency_ms).collect();
    let keep: Vec<f64> = frames.iter().filter_map(|f| f.block_mask.as_ref()).map(|m| m.kept_count() as f64 / k as f64).collect();
    let mean_keep_ratio = (!keep.is_empty()).then(|| keep.iter().sum::<f64>() / keep.len() as f64);
    StreamSummary {
        policy: options.policy.label().to_string(),
        aggregation: options.aggregation.to_string(),
        frames: frames.len(),
        miou: miou.miou,
        per_class_iou: miou.per_class.clone(),
        mean_flops,
        full_flops,
        flops_ratio: mean_flops / full_flops as f64,
        mean_latency_ms: latencies.iter().sum::<f64>() / n,
        max_latency_ms: latencies.iter().copied().fold(0.0, f64::max),
        key_ratio: frames.iter().filter(|f| f.role == Role::Key).count() as f64 / n,
        mean_keep_ratio,
        mean_sparsity: mean_keep_ratio.map(|r| 1.0 - r),
    }
}

/// Pearson correlation; `None` when either series is constant or too short.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
