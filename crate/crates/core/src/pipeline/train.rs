//! Joint training of the backbone, head and mask generator on frame pairs.
//!
//! Two phases run back to back:
//!
//! * warm-up: both frames of a pair go through the full network (task loss on
//!   both); the generator learns only the spatial mask (reconstruction loss);
//! * joint: the previous frame takes the key path (full network), the current
//!   frame runs with relaxed block gates and is blended with the previous
//!   feature through the spatial mask before the head; the sparsity term is
//!   added.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::aggregate::aggregate_graph;
use crate::autograd::{Tape, Var};
use crate::backbone::{batch_of, Backbone, BlockGate};
use crate::error::{Error, Result};
use crate::losses::{bce_graph, dice_graph, kl_graph, task_graph, LossReport, LossWeights};
use crate::maskgen::{spatial_mask_graph, relaxed_bernoulli_graph, MaskGenerator};
use crate::nn::{NormMode, Sgd};
use crate::synthdata::{oracle_distortion_map_at, DistortionResolution, Frame, FrameSequence, LabelMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub warmup_steps: usize,
    pub joint_steps: usize,
    /// Frame pairs per step.
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Exponent of the polynomial learning-rate decay within each phase.
    pub poly_power: f64,
    /// Treat the previous-frame path as fixed during the joint phase.
    pub freeze_key_path: bool,
    /// How pixel-level distortion is pooled into feature-resolution targets.
    pub target_pooling: TargetPooling,
    pub log_every: usize,
}

/// Pooling rule for the feature-resolution reconstruction target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPooling {
    /// Any distorted pixel marks its bin.
    #[default]
    Any,
    /// At least half the bin must be distorted.
    Majority,
}

impl TargetPooling {
    pub fn resolution(self, stride: usize) -> DistortionResolution {
        match self {
            TargetPooling::Any => DistortionResolution::FeatureAny { stride },
            TargetPooling::Majority => DistortionResolution::Feature { stride },
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_steps: 300,
            joint_steps: 600,
            batch_size: 4,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            freeze_key_path: false,
            target_pooling: TargetPooling::Any,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if !(self.poly_power >= 0.0) {
            return Err(Error::config("train.poly_power", "must be >= 0"));
        }
        if self.log_every == 0 {
            return Err(Error::config("train.log_every", "must be >= 1"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.warmup_steps + self.joint_steps
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Joint,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss: LossReport,
    pub mean_keep_prob: f64,
    pub mean_magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_total: f64,
    pub final_total: f64,
    pub final_keep_prob: f64,
}

/// Learning rate at `step` of a phase with `total` steps.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step as f64 / total as f64).max(0.0).powf(power)
}

/// Adjacent-frame pairs `(sequence, index)` with `index >= 1`.
fn all_pairs(data: &[FrameSequence]) -> Vec<(usize, usize)> {
    data.iter()
        .enumerate()
        .flat_map(|(s, seq)| (1..seq.len()).map(move |i| (s, i)))
        .collect()
}

struct Batch<'a> {
    prev: Vec<&'a Frame>,
    cur: Vec<&'a Frame>,
    prev_labels: Vec<&'a LabelMap>,
    cur_labels: Vec<&'a LabelMap>,
    target: Array3<f64>,
}

fn make_batch<'a>(data: &'a [FrameSequence], picks: &[(usize, usize)], resolution: DistortionResolution) -> Result<Batch<'a>> {
    let mut b = Batch {
        prev: Vec::new(),
        cur: Vec::new(),
        prev_labels: Vec::new(),
        cur_labels: Vec::new(),
        target: Array3::zeros((0, 0, 0)),
    };
    let mut targets = Vec::new();
    for &(s, i) in picks {
        let seq = &data[s];
        b.prev.push(&seq.frames[i - 1]);
        b.cur.push(&seq.frames[i]);
        b.prev_labels.push(&seq.labels[i - 1]);
        b.cur_labels.push(&seq.labels[i]);
        let map = oracle_distortion_map_at(&seq.labels[i - 1], &seq.labels[i], resolution)?;
        targets.push(map.mapv(f64::from));
    }
    let views: Vec<_> = targets.iter().map(|t| t.view()).collect();
    b.target = ndarray::stack(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
    Ok(b)
}

fn check_finite(report: &LossReport, step: usize) -> Result<()> {
    if !report.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at step {step}: task {} kl {} bce {} dice {}",
            report.task, report.kl, report.bce, report.dice
        )));
    }
    Ok(())
}

/// Trains in place, calling `on_step` every `log_every` steps and on the last step.
pub fn train(
    backbone: &mut Backbone,
    generator: &mut MaskGenerator,
    data: &[FrameSequence],
    config: &TrainConfig,
    weights: &LossWeights,
    seed: u64,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<TrainSummary> {
    config.validate()?;
    if generator.blocks() != backbone.prunable_blocks() {
        return Err(Error::shape("generator and backbone disagree on the number of prunable blocks"));
    }
    let pairs = all_pairs(data);
    if pairs.is_empty() {
        return Err(Error::invalid("training data has no frame pairs"));
    }
    let stride = backbone.config().feature_stride;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sgd_backbone = Sgd::new(config.momentum, config.weight_decay);
    let mut sgd_generator = Sgd::new(config.momentum, config.weight_decay);
    let mut summary = TrainSummary {
        steps: config.total_steps(),
        first_total: f64::NAN,
        final_total: f64::NAN,
        final_keep_prob: f64::NAN,
    };

    for step in 0..config.total_steps() {
        let (phase, phase_step, phase_len) = if step < config.warmup_steps {
            (Phase::Warmup, step, config.warmup_steps)
        } else {
            (Phase::Joint, step - config.warmup_steps, config.joint_steps)
        };
        let lr = poly_lr(config.lr, phase_step, phase_len, config.poly_power);
        let picks: Vec<(usize, usize)> = pairs.choose_multiple(&mut rng, config.batch_size.min(pairs.len())).copied().collect();
        let batch = make_batch(data, &picks, config.target_pooling.resolution(stride))?;
        let n = picks.len();
        let k = generator.blocks();

        let mut tape = Tape::new();
        let bb = backbone.params.bind(&mut tape);
        let gb = generator.params.bind(&mut tape);
        let mut obs = Vec::new();

        let x_prev = tape.constant(batch_of(&batch.prev));
        let x_cur = tape.constant(batch_of(&batch.cur));

        // Generator: features, spatial mask, logits.
        let t = generator.extract_graph(&mut tape, &gb, x_prev);
        let e = generator.extract_graph(&mut tape, &gb, x_cur);
        let m = spatial_mask_graph(&mut tape, t, e);
        let logits = generator.logits_graph(&mut tape, &gb, t, e);
        let logits_value: Array2<f64> = tape.value(logits).clone().into_dimensionality().expect("[N, K]");
        let magnitudes: Array1<f64> = tape
            .value(m)
            .axis_iter(Axis(0))
            .map(|s| s.mean().unwrap_or(0.0))
            .collect();

        let bce = bce_graph(&mut tape, m, &batch.target.clone().into_dyn(), generator.config().tau);
        let dice = dice_graph(&mut tape, m, &batch.target);

        let (task, kl_sum, keep_mean, effective) = match phase {
            Phase::Warmup => {
                let both: Vec<&Frame> = batch.prev.iter().chain(&batch.cur).copied().collect();
                let labels: Vec<&LabelMap> = batch.prev_labels.iter().chain(&batch.cur_labels).copied().collect();
                let x = tape.constant(batch_of(&both));
                let f = backbone.forward_graph(&mut tape, &bb, x, &vec![BlockGate::Execute; k], NormMode::Train, &mut obs)?;
                let s = backbone.head_graph(&mut tape, &bb, f);
                let task = task_graph(&mut tape, s, &labels)?;
                let eta = generator.config().distortion_bias.then(|| magnitudes.mapv(|v| 0.5 - v));
                let phi = generator.probabilities_graph(&mut tape, &gb, logits, eta.as_ref(), None);
                let keep = generator.keep_graph(&mut tape, phi);
                let keep_mean = tape.value(keep).mean().unwrap_or(0.0);
                let weights = LossWeights { kl: 0.0, ..*weights };
                (task, None, keep_mean, weights)
            }
            Phase::Joint => {
                let f_prev = backbone.forward_graph(&mut tape, &bb, x_prev, &vec![BlockGate::Execute; k], NormMode::Train, &mut obs)?;
                let f_prev = if config.freeze_key_path { tape.detach(f_prev) } else { f_prev };

                let eta = generator.config().distortion_bias.then(|| magnitudes.mapv(|v| 0.5 - v));
                let eps = Array2::from_shape_simple_fn((n, k), || rng.sample::<f64, _>(StandardNormal));
                let u = Array2::from_shape_simple_fn((n, k), || rng.gen_range(f64::EPSILON..1.0));
                let phi = generator.probabilities_graph(&mut tape, &gb, logits, eta.as_ref(), Some(&eps));
                let keep = generator.keep_graph(&mut tape, phi);
                let keep_mean = tape.value(keep).mean().unwrap_or(0.0);
                let z = relaxed_bernoulli_graph(&mut tape, keep, &u, generator.config().temperature);
                let gates: Vec<BlockGate> = (0..k).map(|j| BlockGate::Scale(tape.select_column(z, j))).collect();

                let f_cur = backbone.forward_graph(&mut tape, &bb, x_cur, &gates, NormMode::Train, &mut obs)?;
                let blended = aggregate_graph(&mut tape, f_prev, f_cur, m);
                let s_cur = backbone.head_graph(&mut tape, &bb, blended);
                let task_cur = task_graph(&mut tape, s_cur, &batch.cur_labels)?;
                let task = if config.freeze_key_path {
                    task_cur
                } else {
                    let s_prev = backbone.head_graph(&mut tape, &bb, f_prev);
                    let task_prev = task_graph(&mut tape, s_prev, &batch.prev_labels)?;
                    let sum = tape.add(task_cur, task_prev);
                    tape.scale(sum, 0.5)
                };
                let (beta_bn, delta_uc) = generator.gate_vars(&gb);
                let kl = kl_graph(&mut tape, beta_bn, delta_uc, generator.config().beta_p, generator.config().rho);
                let kl_sum = tape.sum(kl);
                (task, Some(kl_sum), keep_mean, *weights)
            }
        };

        let report = LossReport::new(
            tape.item(task),
            kl_sum.map_or(0.0, |v| tape.item(v)),
            tape.item(bce),
            tape.item(dice),
            effective,
        );
        check_finite(&report, step)?;

        let mut total: Var = tape.scale(task, effective.task);
        let recon = tape.add(bce, dice);
        let recon = tape.scale(recon, effective.recon);
        total = tape.add(total, recon);
        if let Some(kl) = kl_sum {
            let kl = tape.scale(kl, effective.kl);
            total = tape.add(total, kl);
        }
        let grads = tape.backward(total);
        sgd_backbone.step(&mut backbone.params, &bb, &grads, lr);
        sgd_generator.step(&mut generator.params, &gb, &grads, lr);
        backbone.params.update_running(&obs, 0.1);
        // Statistics track the gate input, which includes the distortion bias.
        let mut gate_input = logits_value;
        if generator.config().distortion_bias {
            gate_input += &magnitudes.mapv(|v| 0.5 - v).insert_axis(Axis(1));
        }
        generator.update_statistics(&gate_input);

        if step == 0 {
            summary.first_total = report.total;
        }
        summary.final_total = report.total;
        summary.final_keep_prob = keep_mean;
        if step % config.log_every == 0 || step + 1 == config.total_steps() {
            on_step(&StepLog {
                step,
                phase,
                lr,
                loss: report,
                mean_keep_prob: keep_mean,
                mean_magnitude: magnitudes.mean().unwrap_or(0.0),
            })?;
        }
    }
    Ok(summary)
}
