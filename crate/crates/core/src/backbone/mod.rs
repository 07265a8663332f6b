//! Residual segmentation backbone with per-block execution control.
//!
//! Layout for a config with layers `[(b_0, c_0), (b_1, c_1), ...]`:
//!
//! ```text
//! stem    conv k x k / stride k (k = feature_stride / 2^(L-1)), BN, ReLU
//! layer l block 0      shortcut(x) + F(x)      stride 2 for l > 0; never pruned
//! layer l block j > 0  x + keep * F(x)         prunable
//! F(x) = BN(conv3x3(ReLU(BN(conv3x3(ReLU(x))))))
//! head    ReLU, conv1x1 + bias, ReLU, conv1x1 + bias, bilinear upsample
//! ```
//!
//! With `keep = 0` the residual branch is never evaluated, so the block is
//! exactly the identity. The backbone output before the head is the feature
//! map that gets cached and blended across frames.

mod flops;

use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{self, batch_norm, BatchNormIds, Bindings, BnObservation, NormMode, ParamId, ParamKind, ParamStore};
use crate::synthdata::{Frame, LabelMap};

pub use flops::{conv_flops, FlopsLedger, UPSAMPLE_FLOPS_PER_OUTPUT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub blocks: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: Vec<LayerSpec>,
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub num_classes: usize,
    pub feature_stride: usize,
    pub head_channels: usize,
}

impl Default for BackboneConfig {
    /// Two layers of 3 and 4 blocks (K = 5), 16/32 channels, stride 8, 4 classes.
    fn default() -> Self {
        BackboneConfig {
            layers: vec![
                LayerSpec {
                    blocks: 3,
                    channels: 16,
                },
                LayerSpec {
                    blocks: 4,
                    channels: 32,
                },
            ],
            input_channels: 3,
            input_height: 64,
            input_width: 64,
            num_classes: 4,
            feature_stride: 8,
            head_channels: 32,
        }
    }
}

impl BackboneConfig {
    /// K: every block except the first of each layer.
    pub fn prunable_blocks(&self) -> usize {
        self.layers.iter().map(|l| l.blocks.saturating_sub(1)).sum()
    }

    /// `(layer, block)` of each prunable block in mask order.
    pub fn prunable_positions(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, spec)| (1..spec.blocks).map(move |b| (l, b)))
            .collect()
    }

    pub fn stem_stride(&self) -> usize {
        self.feature_stride >> (self.layers.len().saturating_sub(1))
    }

    pub fn feature_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.channels)
    }

    pub fn feature_height(&self) -> usize {
        self.input_height / self.feature_stride
    }

    pub fn feature_width(&self) -> usize {
        self.input_width / self.feature_stride
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        if self.prunable_blocks() == 0 {
            return Err(Error::config("backbone.layers", "no prunable blocks (K must be >= 1)"));
        }
        Ok(())
    }

    /// Everything except the K >= 1 requirement, which excised skeletons may violate.
    fn validate_structure(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("backbone.layers", "at least one layer is required"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.blocks == 0 {
                return Err(Error::config(format!("backbone.layers[{i}].blocks"), "must be >= 1"));
            }
            if l.channels == 0 {
                return Err(Error::config(format!("backbone.layers[{i}].channels"), "must be >= 1"));
            }
        }
        if !self.feature_stride.is_power_of_two() {
            return Err(Error::config("backbone.feature_stride", "must be a power of two"));
        }
        if self.feature_stride < 1 << (self.layers.len() - 1) {
            return Err(Error::config(
                "backbone.feature_stride",
                format!("must be at least 2^(layers-1) = {}", 1 << (self.layers.len() - 1)),
            ));
        }
        if self.input_channels == 0 {
            return Err(Error::config("backbone.input_channels", "must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("backbone.num_classes", "must be >= 2"));
        }
        if self.head_channels == 0 {
            return Err(Error::config("backbone.head_channels", "must be >= 1"));
        }
        for (field, v) in [("backbone.input_height", self.input_height), ("backbone.input_width", self.input_width)] {
            if v == 0 || v % self.feature_stride != 0 {
                return Err(Error::config(field, format!("{v} is not a positive multiple of feature_stride {}", self.feature_stride)));
            }
        }
        Ok(())
    }
}

/// Keep/drop decision per prunable block: 1 executes the block, 0 replaces it
/// by the identity. Values strictly between are relaxed (training) gates.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMask {
    keep: Vec<f64>,
}

impl BlockMask {
    pub fn new(keep: Vec<f64>) -> Result<Self> {
        if let Some(v) = keep.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("mask entry {v} outside [0, 1]")));
        }
        Ok(BlockMask { keep })
    }

    pub fn ones(k: usize) -> Self {
        BlockMask { keep: vec![1.0; k] }
    }

    pub fn zeros(k: usize) -> Self {
        BlockMask { keep: vec![0.0; k] }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        BlockMask {
            keep: bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Mask whose bit `k` is bit `k` of `code`.
    pub fn from_code(code: usize, k: usize) -> Self {
        let bits: Vec<bool> = (0..k).map(|i| code >> i & 1 == 1).collect();
        Self::from_bits(&bits)
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.keep
    }

    pub fn is_hard(&self) -> bool {
        self.keep.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Blocks that run at all (non-zero gate).
    pub fn executed(&self) -> Vec<bool> {
        self.keep.iter().map(|&v| v != 0.0).collect()
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn keep_ratio(&self) -> f64 {
        if self.keep.is_empty() {
            return 1.0;
        }
        self.kept_count() as f64 / self.keep.len() as f64
    }

    /// `"10110"`-style rendering, one character per block.
    pub fn bit_string(&self) -> String {
        self.keep
            .iter()
            .map(|&v| if v == 0.0 { '0' } else if v == 1.0 { '1' } else { '~' })
            .collect()
    }
}

/// Backbone output `pi(I)` at feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `[channels, h, w]`
    pub values: Array3<f64>,
}

impl FeatureMap {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Execution of one prunable block inside a graph.
#[derive(Clone, Copy, Debug)]
pub enum BlockGate {
    Execute,
    Skip,
    /// Relaxed gate, one value per sample (`[N]`).
    Scale(Var),
}

#[derive(Clone, Debug)]
struct BlockIds {
    conv1: ParamId,
    bn1: BatchNormIds,
    conv2: ParamId,
    bn2: BatchNormIds,
    shortcut: Option<(ParamId, BatchNormIds)>,
    stride: usize,
}

#[derive(Clone, Debug)]
struct HeadIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    pub params: ParamStore,
    stem: (ParamId, BatchNormIds),
    layers: Vec<Vec<BlockIds>>,
    head: HeadIds,
}

fn block_name(layer: usize, block: usize) -> String {
    format!("layer{layer}.block{block}")
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Self::build(config, seed)
    }

    fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate_structure()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();

        let k = config.stem_stride();
        let c0 = config.layers[0].channels;
        let stem_w = p.add(
            "stem.conv",
            nn::kaiming(&[c0, config.input_channels, k, k], config.input_channels * k * k, &mut rng),
            ParamKind::Weight,
        );
        let stem_bn = BatchNormIds::register(&mut p, "stem.bn", c0);

        let mut layers = Vec::new();
        let mut cin = c0;
        for (l, spec) in config.layers.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..spec.blocks {
                let name = block_name(l, b);
                let stride = if b == 0 && l > 0 { 2 } else { 1 };
                let inc = if b == 0 { cin } else { spec.channels };
                let c = spec.channels;
                let conv1 = p.add(format!("{name}.conv1"), nn::kaiming(&[c, inc, 3, 3], inc * 9, &mut rng), ParamKind::Weight);
                let bn1 = BatchNormIds::register(&mut p, &format!("{name}.bn1"), c);
                let conv2 = p.add(format!("{name}.conv2"), nn::kaiming(&[c, c, 3, 3], c * 9, &mut rng), ParamKind::Weight);
                let bn2 = BatchNormIds::register(&mut p, &format!("{name}.bn2"), c);
                let shortcut = (b == 0 && (stride != 1 || inc != c)).then(|| {
                    let w = p.add(format!("{name}.shortcut"), nn::kaiming(&[c, inc, 1, 1], inc, &mut rng), ParamKind::Weight);
                    (w, BatchNormIds::register(&mut p, &format!("{name}.shortcut_bn"), c))
                });
                blocks.push(BlockIds {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    shortcut,
                    stride,
                });
            }
            cin = spec.channels;
            layers.push(blocks);
        }

        let (cf, ch, nc) = (config.feature_channels(), config.head_channels, config.num_classes);
        let head = HeadIds {
            w1: p.add("head.conv1", nn::kaiming(&[ch, cf, 1, 1], cf, &mut rng), ParamKind::Weight),
            b1: p.add("head.bias1", nn::zeros(&[ch]), ParamKind::NoDecay),
            w2: p.add("head.conv2", nn::kaiming(&[nc, ch, 1, 1], ch, &mut rng), ParamKind::Weight),
            b2: p.add("head.bias2", nn::zeros(&[nc]), ParamKind::NoDecay),
        };

        Ok(Backbone {
            config,
            params: p,
            stem: (stem_w, stem_bn),
            layers,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn prunable_blocks(&self) -> usize {
        self.config.prunable_blocks()
    }

    pub fn ledger(&self) -> FlopsLedger {
        FlopsLedger::new(&self.config)
    }

    pub fn count_flops(&self, mask: &BlockMask) -> Result<u64> {
        self.ledger().count(mask)
    }

    fn check_frame(&self, frame: &Frame) -> Result<()> {
        let expected = [self.config.input_channels, self.config.input_height, self.config.input_width];
        if frame.pixels.shape() != expected {
            return Err(Error::shape(format!(
                "frame {:?} does not match backbone input {:?}",
                frame.pixels.shape(),
                expected
            )));
        }
        Ok(())
    }

    fn check_mask(&self, mask: &BlockMask) -> Result<()> {
        if mask.len() != self.prunable_blocks() {
            return Err(Error::shape(format!(
                "mask has {} entries, backbone has {} prunable blocks",
                mask.len(),
                self.prunable_blocks()
            )));
        }
        Ok(())
    }

    pub fn forward_full(&self, frame: &Frame) -> Result<FeatureMap> {
        self.forward_masked(frame, &BlockMask::ones(self.prunable_blocks()))
    }

    pub fn forward_masked(&self, frame: &Frame, mask: &BlockMask) -> Result<FeatureMap> {
        self.check_frame(frame)?;
        self.check_mask(mask)?;
        let mut tape = Tape::inference();
        let binds = self.params.bind(&mut tape);
        let x = tape.constant(batch_of(&[frame]));
        let gates: Vec<BlockGate> = mask
            .values()
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    BlockGate::Skip
                } else if v == 1.0 {
                    BlockGate::Execute
                } else {
                    BlockGate::Scale(tape.constant(ndarray::arr1(&[v]).into_dyn()))
                }
            })
            .collect();
        let y = self.forward_graph(&mut tape, &binds, x, &gates, NormMode::Eval, &mut Vec::new())?;
        Ok(FeatureMap {
            values: first_sample(tape.value(y)),
        })
    }

    /// Class scores `[num_classes, H, W]` at input resolution.
    pub fn segmentation_head(&self, feature: &FeatureMap) -> Result<Array3<f64>> {
        let expected = (self.config.feature_channels(), self.config.feature_height(), self.config.feature_width());
        if feature.shape() != expected {
            return Err(Error::shape(format!(
                "feature {:?} does not match backbone feature shape {:?}",
                feature.shape(),
                expected
            )));
        }
        let mut tape = Tape::inference();
        let binds = self.params.bind(&mut tape);
        let f = tape.constant(feature.values.clone().insert_axis(Axis(0)).into_dyn());
        let s = self.head_graph(&mut tape, &binds, f);
        Ok(first_sample(tape.value(s)))
    }

    /// Builds the backbone on `tape` for a batch `x [N, C, H, W]`.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        x: Var,
        gates: &[BlockGate],
        mode: NormMode,
        observations: &mut Vec<BnObservation>,
    ) -> Result<Var> {
        if gates.len() != self.prunable_blocks() {
            return Err(Error::shape(format!(
                "{} gates for {} prunable blocks",
                gates.len(),
                self.prunable_blocks()
            )));
        }
        let p = &self.params;
        let k = self.config.stem_stride();
        let (stem_w, stem_bn) = self.stem;
        let s = tape.conv2d(x, binds.var(stem_w), None, k, 0);
        let s = batch_norm(tape, p, binds, stem_bn, s, mode, observations);
        let mut h = tape.relu(s);

        let mut gate_iter = gates.iter();
        for blocks in &self.layers {
            for (b, ids) in blocks.iter().enumerate() {
                if b == 0 {
                    let f = self.residual_branch(tape, binds, ids, h, mode, observations);
                    let sc = match ids.shortcut {
                        Some((w, bn)) => {
                            let c = tape.conv2d(h, binds.var(w), None, ids.stride, 0);
                            batch_norm(tape, p, binds, bn, c, mode, observations)
                        }
                        None => h,
                    };
                    h = tape.add(sc, f);
                    continue;
                }
                match *gate_iter.next().expect("gate count checked above") {
                    BlockGate::Skip => {}
                    BlockGate::Execute => {
                        let f = self.residual_branch(tape, binds, ids, h, mode, observations);
                        h = tape.add(h, f);
                    }
                    BlockGate::Scale(g) => {
                        let f = self.residual_branch(tape, binds, ids, h, mode, observations);
                        let f = tape.mul_per_sample(f, g);
                        h = tape.add(h, f);
                    }
                }
            }
        }
        Ok(h)
    }

    fn residual_branch(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        ids: &BlockIds,
        x: Var,
        mode: NormMode,
        observations: &mut Vec<BnObservation>,
    ) -> Var {
        let p = &self.params;
        let a = tape.relu(x);
        let c1 = tape.conv2d(a, binds.var(ids.conv1), None, ids.stride, 1);
        let b1 = batch_norm(tape, p, binds, ids.bn1, c1, mode, observations);
        let r = tape.relu(b1);
        let c2 = tape.conv2d(r, binds.var(ids.conv2), None, 1, 1);
        batch_norm(tape, p, binds, ids.bn2, c2, mode, observations)
    }

    /// Head on a feature batch `[N, C, h, w]`, returning `[N, classes, H, W]`.
    pub fn head_graph(&self, tape: &mut Tape, binds: &Bindings, feature: Var) -> Var {
        let h = &self.head;
        let a = tape.relu(feature);
        let c1 = tape.conv2d(a, binds.var(h.w1), Some(binds.var(h.b1)), 1, 0);
        let r = tape.relu(c1);
        let c2 = tape.conv2d(r, binds.var(h.w2), Some(binds.var(h.b2)), 1, 0);
        tape.upsample_bilinear(c2, self.config.input_height, self.config.input_width)
    }

    /// Physically removes every block whose gate is 0, copying the remaining
    /// weights into a freshly shaped network.
    pub fn excise(&self, mask: &BlockMask) -> Result<Backbone> {
        self.check_mask(mask)?;
        if !mask.is_hard() {
            return Err(Error::invalid("excision needs a hard 0/1 mask"));
        }
        let keep = mask.executed();
        let positions = self.config.prunable_positions();
        let mut survivors: Vec<Vec<usize>> = self.config.layers.iter().map(|_| vec![0]).collect();
        for (&(l, b), &k) in positions.iter().zip(&keep) {
            if k {
                survivors[l].push(b);
            }
        }
        let mut config = self.config.clone();
        for (spec, s) in config.layers.iter_mut().zip(&survivors) {
            spec.blocks = s.len();
        }
        // A network with no prunable block left is still a valid skeleton.
        let mut out = Backbone::build(config, 0)?;
        let mut rename: Vec<(String, String)> = vec![("stem.".into(), "stem.".into()), ("head.".into(), "head.".into())];
        for (l, s) in survivors.iter().enumerate() {
            for (new_b, &old_b) in s.iter().enumerate() {
                rename.push((format!("{}.", block_name(l, old_b)), format!("{}.", block_name(l, new_b))));
            }
        }
        for (old_prefix, new_prefix) in rename {
            for entry in self.params.entries().iter().filter(|e| e.name.starts_with(&old_prefix)) {
                let new_name = format!("{new_prefix}{}", &entry.name[old_prefix.len()..]);
                let id = out
                    .params
                    .id(&new_name)
                    .ok_or_else(|| Error::invalid(format!("excised network lacks `{new_name}`")))?;
                *out.params.get_mut(id) = entry.value.clone();
            }
        }
        Ok(out)
    }
}

/// Stacks frames into an `[N, C, H, W]` tensor.
pub fn batch_of(frames: &[&Frame]) -> Tensor {
    let views: Vec<_> = frames.iter().map(|f| f.pixels.view()).collect();
    ndarray::stack(Axis(0), &views).expect("frames share a shape").into_dyn()
}

fn first_sample(t: &Tensor) -> Array3<f64> {
    t.index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality()
        .expect("rank-4 batch")
}

/// Per-pixel argmax over classes.
pub fn predict_labels(scores: &Array3<f64>) -> LabelMap {
    let (c, h, w) = scores.dim();
    let classes = ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for k in 1..c {
            if scores[[k, y, x]] > scores[[best, y, x]] {
                best = k;
            }
        }
        best as u8
    });
    LabelMap { classes }
}

/// Converts a `[N, ...]` batch tensor into its `N` samples.
pub fn unbatch(t: &Tensor) -> Vec<Tensor> {
    t.axis_iter(Axis(0)).map(|s| s.to_owned().into_dyn()).collect()
}

/// A single `[C, h, w]` array as a batch of one.
pub fn batch_of_one(values: &Array3<f64>) -> Tensor {
    values.clone().insert_axis(Axis(0)).into_dyn()
}
