//! Spatial-temporal mask generator.
//!
//! From a pair of frames the generator produces two things:
//!
//! * a block mask: features `t` (previous) and `e` (current) from the shared
//!   encoder are concatenated, passed through a small convolutional head and
//!   pooled to one logit `g_k` per prunable block; logits are normalized with
//!   running statistics, shifted by a learned (and, in training, noisy) offset
//!   and clamped to `[tau, 1 - tau]`;
//! * a spatial mask `m = 0.5 - 0.5 * cos(t_i, e_i)` per feature pixel.
//!
//! With the distortion bias enabled, `eta = 0.5 - mean(m)` is added to every
//! logit before normalization.

mod graph;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{batch_of, batch_of_one, BackboneConfig, BlockMask};
use crate::error::{Error, Result};
use crate::nn::{self, Bindings, ParamId, ParamKind, ParamStore};
use crate::synthdata::Frame;

pub use graph::{relaxed_bernoulli_graph, spatial_mask_graph};

pub const DEFAULT_TAU: f64 = 1e-10;

/// Which event the gate probability describes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// `phi` is the probability of executing the block.
    Keep,
    /// `phi` is the probability of skipping the block.
    #[default]
    Prune,
}

impl Polarity {
    pub fn keep_probability(self, phi: f64) -> f64 {
        match self {
            Polarity::Keep => phi,
            Polarity::Prune => 1.0 - phi,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskGenConfig {
    /// Output channels of each stride-2 encoder convolution. The number of
    /// entries must equal `log2(feature_stride)`.
    pub extractor_channels: Vec<usize>,
    pub gate_channels: usize,
    pub tau: f64,
    /// Prior mean of the gate shift.
    pub beta_p: f64,
    /// Prior standard deviation of the gate shift.
    pub rho: f64,
    pub temperature: f64,
    pub polarity: Polarity,
    pub distortion_bias: bool,
    /// Momentum of the running logit statistics.
    pub stats_momentum: f64,
    pub init_gamma: f64,
    pub init_beta: f64,
    /// Initial noise scale `softplus(delta_uc)`.
    pub init_delta: f64,
}

impl Default for MaskGenConfig {
    fn default() -> Self {
        MaskGenConfig {
            extractor_channels: vec![8, 16, 16],
            gate_channels: 16,
            tau: DEFAULT_TAU,
            beta_p: 2.0,
            rho: 0.1,
            temperature: 0.1,
            polarity: Polarity::Prune,
            distortion_bias: true,
            stats_momentum: 0.1,
            init_gamma: 0.25,
            init_beta: 0.4,
            init_delta: 0.05,
        }
    }
}

impl MaskGenConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        let depth = backbone.feature_stride.trailing_zeros() as usize;
        if self.extractor_channels.len() != depth {
            return Err(Error::config(
                "maskgen.extractor_channels",
                format!("needs {depth} entries to reach feature stride {}", backbone.feature_stride),
            ));
        }
        if self.extractor_channels.iter().any(|&c| c == 0) || self.gate_channels == 0 {
            return Err(Error::config("maskgen.extractor_channels", "channel counts must be >= 1"));
        }
        if !(self.tau > 0.0 && self.tau < 0.5) {
            return Err(Error::config("maskgen.tau", "must lie in (0, 0.5)"));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::config("maskgen.rho", "must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("maskgen.temperature", "must be positive"));
        }
        if !(self.stats_momentum > 0.0 && self.stats_momentum <= 1.0) {
            return Err(Error::config("maskgen.stats_momentum", "must lie in (0, 1]"));
        }
        if !(self.init_delta > 0.0) {
            return Err(Error::config("maskgen.init_delta", "must be positive"));
        }
        if !self.beta_p.is_finite() || !self.init_gamma.is_finite() || !self.init_beta.is_finite() {
            return Err(Error::config("maskgen", "non-finite hyperparameter"));
        }
        Ok(())
    }
}

/// Encoder output `[c_f, h_f, w_f]` at the backbone feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractedFeature {
    pub values: Array3<f64>,
}

/// Per-pixel distortion estimate in `[0, 1]`: 0 reuses the cached feature,
/// 1 takes the current one.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMask {
    pub values: Array2<f64>,
}

impl SpatialMask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("spatial mask entries must lie in [0, 1]"));
        }
        Ok(SpatialMask { values })
    }

    pub fn magnitude(&self) -> f64 {
        mask_magnitude(self)
    }
}

/// Gate parameters and statistics, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalPruningState {
    pub beta_bn: Array1<f64>,
    pub delta_uc: Array1<f64>,
    pub gamma: Array1<f64>,
    pub mu: Array1<f64>,
    /// Running standard deviation of the logits.
    pub sigma: Array1<f64>,
    pub beta_p: f64,
    pub rho: f64,
    pub tau: f64,
}

impl VariationalPruningState {
    /// Neutral state: `gamma = 1`, `mu = 0`, `sigma = 1`, `beta_bn = beta`.
    pub fn neutral(k: usize, beta: f64) -> Self {
        VariationalPruningState {
            beta_bn: Array1::from_elem(k, beta),
            delta_uc: Array1::zeros(k),
            gamma: Array1::ones(k),
            mu: Array1::zeros(k),
            sigma: Array1::ones(k),
            beta_p: -1.0,
            rho: 1.0,
            tau: DEFAULT_TAU,
        }
    }

    pub fn len(&self) -> usize {
        self.beta_bn.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta_bn.is_empty()
    }

    /// Noise scale `softplus(delta_uc)`.
    pub fn delta(&self) -> Array1<f64> {
        self.delta_uc.mapv(softplus)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.len();
        for (name, v) in [("delta_uc", &self.delta_uc), ("gamma", &self.gamma), ("mu", &self.mu), ("sigma", &self.sigma)] {
            if v.len() != k {
                return Err(Error::shape(format!("{name} has {} entries, expected {k}", v.len())));
            }
        }
        if self.sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("sigma must be positive"));
        }
        if !(self.rho > 0.0) {
            return Err(Error::invalid("rho must be positive"));
        }
        if !(self.tau > 0.0 && self.tau < 0.5) {
            return Err(Error::invalid("tau must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `min(1 - tau, max(tau, x))`.
pub fn clamp_probability(x: f64, tau: f64) -> f64 {
    x.max(tau).min(1.0 - tau)
}

/// Value before clamping. `eps` supplies the training-mode noise on the shift;
/// `None` uses the mean shift.
pub fn pre_clamp_probabilities(
    logits: &[f64],
    state: &VariationalPruningState,
    eta: f64,
    eps: Option<&[f64]>,
) -> Result<Vec<f64>> {
    state.validate()?;
    if logits.len() != state.len() {
        return Err(Error::shape(format!("{} logits for {} gates", logits.len(), state.len())));
    }
    if let Some(eps) = eps {
        if eps.len() != state.len() {
            return Err(Error::shape(format!("{} noise draws for {} gates", eps.len(), state.len())));
        }
    }
    Ok((0..state.len())
        .map(|k| {
            let beta = state.beta_bn[k] + eps.map_or(0.0, |e| e[k] * softplus(state.delta_uc[k]));
            state.gamma[k] * (logits[k] + eta - state.mu[k]) / state.sigma[k] + beta
        })
        .collect())
}

/// Clamped gate probabilities `phi_k` in `[tau, 1 - tau]`.
pub fn pruning_probabilities(
    logits: &[f64],
    state: &VariationalPruningState,
    eta: f64,
    eps: Option<&[f64]>,
) -> Result<Vec<f64>> {
    Ok(pre_clamp_probabilities(logits, state, eta, eps)?
        .into_iter()
        .map(|x| clamp_probability(x, state.tau))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Relaxed Bernoulli draws in `(0, 1)`.
    Train,
    /// Deterministic `keep = 1[p >= 0.5]`.
    Inference,
}

/// One relaxed Bernoulli draw from fixed uniform noise `u`.
pub fn relaxed_bernoulli(p: f64, u: f64, temperature: f64) -> f64 {
    let logistic = u.ln() - (-u).ln_1p();
    sigmoid((p.ln() - (-p).ln_1p() + logistic) / temperature)
}

/// Turns keep probabilities into a block mask.
pub fn sample_block_mask<R: Rng + ?Sized>(
    keep_prob: &[f64],
    mode: SampleMode,
    temperature: f64,
    rng: &mut R,
) -> Result<BlockMask> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    if keep_prob.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::invalid("probabilities must lie in (0, 1)"));
    }
    let keep = match mode {
        SampleMode::Inference => return Ok(hard_mask(keep_prob)),
        SampleMode::Train => keep_prob
            .iter()
            .map(|&p| {
                let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                relaxed_bernoulli(p, u, temperature)
            })
            .collect(),
    };
    BlockMask::new(keep)
}

/// Executes block k iff `keep_prob[k] >= 0.5`.
pub fn hard_mask(keep_prob: &[f64]) -> BlockMask {
    BlockMask::from_bits(&keep_prob.iter().map(|&p| p >= 0.5).collect::<Vec<_>>())
}

fn check_pair(t: &ExtractedFeature, e: &ExtractedFeature) -> Result<()> {
    if t.values.dim() != e.values.dim() {
        return Err(Error::shape(format!(
            "features differ: {:?} vs {:?}",
            t.values.dim(),
            e.values.dim()
        )));
    }
    Ok(())
}

/// `0.5 - 0.5 * cos(t_i, e_i)` per pixel; a pixel where either vector is zero gets 0.5.
pub fn spatial_mask(t: &ExtractedFeature, e: &ExtractedFeature) -> Result<SpatialMask> {
    check_pair(t, e)?;
    let (_, h, w) = t.values.dim();
    let values = Array2::from_shape_fn((h, w), |(y, x)| {
        let a = t.values.slice(ndarray::s![.., y, x]);
        let b = e.values.slice(ndarray::s![.., y, x]);
        let norm = (a.dot(&a) * b.dot(&b)).sqrt();
        let cos = if norm > 0.0 { (a.dot(&b) / norm).clamp(-1.0, 1.0) } else { 0.0 };
        0.5 - 0.5 * cos
    });
    Ok(SpatialMask { values })
}

pub fn mask_magnitude(mask: &SpatialMask) -> f64 {
    mask.values.mean().unwrap_or(0.0)
}

/// `eta = 0.5 - mean(m)`.
pub fn distortion_bias(mask: &SpatialMask) -> f64 {
    0.5 - mask_magnitude(mask)
}

/// Everything the generator decides for one non-key frame.
#[derive(Clone, Debug)]
pub struct GateDecision {
    pub logits: Vec<f64>,
    pub eta: f64,
    pub phi: Vec<f64>,
    pub keep_prob: Vec<f64>,
    pub mask: BlockMask,
}

#[derive(Clone, Debug)]
struct GateIds {
    gamma: ParamId,
    beta_bn: ParamId,
    delta_uc: ParamId,
    mu: ParamId,
    sigma: ParamId,
}

#[derive(Clone, Debug)]
pub struct MaskGenerator {
    config: MaskGenConfig,
    input_shape: [usize; 3],
    blocks: usize,
    pub params: ParamStore,
    encoder: Vec<(ParamId, ParamId)>,
    head_conv: (ParamId, ParamId),
    head_linear: (ParamId, ParamId),
    gate: GateIds,
}

/// Floor for the running logit standard deviation.
const MIN_SIGMA: f64 = 1e-3;

impl MaskGenerator {
    pub fn new(config: MaskGenConfig, backbone: &BackboneConfig, seed: u64) -> Result<Self> {
        backbone.validate()?;
        config.validate(backbone)?;
        let k = backbone.prunable_blocks();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();

        let mut encoder = Vec::new();
        let mut cin = backbone.input_channels;
        for (i, &c) in config.extractor_channels.iter().enumerate() {
            let w = p.add(format!("enc.conv{i}"), nn::kaiming(&[c, cin, 3, 3], cin * 9, &mut rng), ParamKind::Weight);
            let b = p.add(format!("enc.bias{i}"), nn::zeros(&[c]), ParamKind::NoDecay);
            encoder.push((w, b));
            cin = c;
        }
        let gc = config.gate_channels;
        let head_conv = (
            p.add("gate.conv", nn::kaiming(&[gc, 2 * cin, 3, 3], 2 * cin * 9, &mut rng), ParamKind::Weight),
            p.add("gate.conv_bias", nn::zeros(&[gc]), ParamKind::NoDecay),
        );
        let head_linear = (
            p.add("gate.linear", nn::kaiming(&[k, gc], gc, &mut rng), ParamKind::Weight),
            p.add("gate.linear_bias", nn::zeros(&[k]), ParamKind::NoDecay),
        );
        let delta_uc = config.init_delta.exp_m1().ln();
        let gate = GateIds {
            gamma: p.add("gate.gamma", nn::filled(&[k], config.init_gamma), ParamKind::NoDecay),
            beta_bn: p.add("gate.beta_bn", nn::filled(&[k], config.init_beta), ParamKind::NoDecay),
            delta_uc: p.add("gate.delta_uc", nn::filled(&[k], delta_uc), ParamKind::NoDecay),
            mu: p.add("gate.mu", nn::zeros(&[k]), ParamKind::Buffer),
            sigma: p.add("gate.sigma", nn::filled(&[k], 1.0), ParamKind::Buffer),
        };

        Ok(MaskGenerator {
            config,
            input_shape: [backbone.input_channels, backbone.input_height, backbone.input_width],
            blocks: k,
            params: p,
            encoder,
            head_conv,
            head_linear,
            gate,
        })
    }

    pub fn config(&self) -> &MaskGenConfig {
        &self.config
    }

    /// Hyperparameters that do not change the parameter layout.
    pub fn config_mut(&mut self) -> &mut MaskGenConfig {
        &mut self.config
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    fn vector(&self, id: ParamId) -> Array1<f64> {
        self.params.get(id).iter().copied().collect()
    }

    pub fn state(&self) -> VariationalPruningState {
        VariationalPruningState {
            beta_bn: self.vector(self.gate.beta_bn),
            delta_uc: self.vector(self.gate.delta_uc),
            gamma: self.vector(self.gate.gamma),
            mu: self.vector(self.gate.mu),
            sigma: self.vector(self.gate.sigma),
            beta_p: self.config.beta_p,
            rho: self.config.rho,
            tau: self.config.tau,
        }
    }

    pub fn extract(&self, frame: &Frame) -> Result<ExtractedFeature> {
        if frame.pixels.shape() != self.input_shape {
            return Err(Error::shape(format!(
                "frame {:?} does not match generator input {:?}",
                frame.pixels.shape(),
                self.input_shape
            )));
        }
        let mut tape = Tape::inference();
        let binds = self.params.bind(&mut tape);
        let x = tape.constant(batch_of(&[frame]));
        let y = self.extract_graph(&mut tape, &binds, x);
        let values = tape.value(y).index_axis(Axis(0), 0).to_owned().into_dimensionality().expect("rank-4 batch");
        Ok(ExtractedFeature { values })
    }

    pub fn pruning_logits(&self, t: &ExtractedFeature, e: &ExtractedFeature) -> Result<Vec<f64>> {
        check_pair(t, e)?;
        let mut tape = Tape::inference();
        let binds = self.params.bind(&mut tape);
        let tv = tape.constant(batch_of_one(&t.values));
        let ev = tape.constant(batch_of_one(&e.values));
        let g = self.logits_graph(&mut tape, &binds, tv, ev);
        Ok(tape.value(g).iter().copied().collect())
    }

    /// Inference-mode gate decision for the pair `(t, e)` with spatial mask `m`.
    pub fn decide(&self, t: &ExtractedFeature, e: &ExtractedFeature, m: &SpatialMask) -> Result<GateDecision> {
        let logits = self.pruning_logits(t, e)?;
        let eta = if self.config.distortion_bias { distortion_bias(m) } else { 0.0 };
        let phi = pruning_probabilities(&logits, &self.state(), eta, None)?;
        let keep_prob: Vec<f64> = phi.iter().map(|&p| self.config.polarity.keep_probability(p)).collect();
        let mask = hard_mask(&keep_prob);
        Ok(GateDecision {
            logits,
            eta,
            phi,
            keep_prob,
            mask,
        })
    }

    /// Encoder on a batch `[N, 3, H, W]`, giving `[N, c_f, h_f, w_f]`.
    pub fn extract_graph(&self, tape: &mut Tape, binds: &Bindings, x: Var) -> Var {
        let mut h = x;
        for (i, &(w, b)) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h);
            }
            h = tape.conv2d(h, binds.var(w), Some(binds.var(b)), 2, 1);
        }
        h
    }

    /// Gate logits `[N, K]` from encoder outputs of the previous (`t`) and current (`e`) frames.
    pub fn logits_graph(&self, tape: &mut Tape, binds: &Bindings, t: Var, e: Var) -> Var {
        let x = tape.concat_channels(t, e);
        let (w, b) = self.head_conv;
        let c = tape.conv2d(x, binds.var(w), Some(binds.var(b)), 1, 1);
        let r = tape.relu(c);
        let pooled = tape.global_avg_pool(r);
        let (w, b) = self.head_linear;
        tape.linear(pooled, binds.var(w), Some(binds.var(b)))
    }

    /// Clamped probabilities `[N, K]`. `eta` is one constant per sample; `eps`
    /// (`[N, K]`) enables the training-mode noisy shift.
    pub fn probabilities_graph(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        logits: Var,
        eta: Option<&Array1<f64>>,
        eps: Option<&Array2<f64>>,
    ) -> Var {
        let g = &self.gate;
        graph::gate_probabilities(
            tape,
            graph::GateInputs {
                logits,
                gamma: binds.var(g.gamma),
                beta_bn: binds.var(g.beta_bn),
                delta_uc: binds.var(g.delta_uc),
            },
            &self.vector(g.mu),
            &self.vector(g.sigma),
            eta,
            eps,
            self.config.tau,
        )
    }

    /// Keep probabilities from gate probabilities according to the polarity.
    pub fn keep_graph(&self, tape: &mut Tape, phi: Var) -> Var {
        match self.config.polarity {
            Polarity::Keep => phi,
            Polarity::Prune => {
                let neg = tape.scale(phi, -1.0);
                tape.add_scalar(neg, 1.0)
            }
        }
    }

    /// Tape variables of the gate shift and noise scale, for the sparsity loss.
    pub fn gate_vars(&self, binds: &Bindings) -> (Var, Var) {
        (binds.var(self.gate.beta_bn), binds.var(self.gate.delta_uc))
    }

    /// Folds a batch of logits `[N, K]` into the running statistics.
    pub fn update_statistics(&mut self, logits: &Array2<f64>) {
        let n = logits.nrows();
        if n == 0 {
            return;
        }
        let m = self.config.stats_momentum;
        let mean = logits.mean_axis(Axis(0)).expect("non-empty batch");
        let var = logits.var_axis(Axis(0), 0.0);
        let mu = self.params.get_mut(self.gate.mu);
        mu.zip_mut_with(&mean, |r, &b| *r = (1.0 - m) * *r + m * b);
        let sigma = self.params.get_mut(self.gate.sigma);
        sigma.zip_mut_with(&var, |s, &v| {
            let var = (1.0 - m) * *s * *s + m * v;
            *s = var.sqrt().max(MIN_SIGMA);
        });
    }
}

#[cfg(test)]
mod tests;
