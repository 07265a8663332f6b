//! Experiment configuration: one JSON document describing data, model,
//! training and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::maskgen::MaskGenConfig;
use crate::pipeline::{AggregationMode, Policy, StreamOptions, TrainConfig};
use crate::synthdata::{generate, FrameSequence, SceneParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Seed of the first training sequence; sequence `i` uses `seed + i`.
    pub seed: u64,
    pub sequences: usize,
    pub frames: usize,
    pub objects: usize,
    /// Object speed in pixels per frame.
    pub speed: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 100,
            sequences: 8,
            frames: 30,
            objects: 3,
            speed: 2.0,
            width: 64,
            height: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Seed of the held-out sequence.
    pub seed: u64,
    pub frames: usize,
    /// Repetitions averaged for random aggregation.
    pub random_trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 999,
            frames: 60,
            random_trials: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub eval: EvalConfig,
    pub backbone: BackboneConfig,
    pub maskgen: MaskGenConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub policy: Policy,
    pub aggregation: AggregationMode,
    pub fam_on_key: bool,
    /// Run directory; relative paths resolve against the output root.
    pub output_dir: PathBuf,
    /// Seed for weight initialization, batch sampling and gate noise.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            eval: EvalConfig::default(),
            backbone: BackboneConfig::default(),
            maskgen: MaskGenConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            policy: Policy::default(),
            aggregation: AggregationMode::Stmg,
            fam_on_key: false,
            output_dir: PathBuf::from("runs/default"),
            seed: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::config(json_path(&e), e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.sequences == 0 {
            return Err(Error::config("dataset.sequences", "must be >= 1"));
        }
        if d.frames < 2 {
            return Err(Error::config("dataset.frames", "must be >= 2"));
        }
        if !(d.speed >= 0.0 && d.speed.is_finite()) {
            return Err(Error::config("dataset.speed", "must be a finite value >= 0"));
        }
        if d.width != self.backbone.input_width {
            return Err(Error::config(
                "dataset.width",
                format!("{} does not match backbone.input_width {}", d.width, self.backbone.input_width),
            ));
        }
        if d.height != self.backbone.input_height {
            return Err(Error::config(
                "dataset.height",
                format!("{} does not match backbone.input_height {}", d.height, self.backbone.input_height),
            ));
        }
        if self.eval.frames < 2 {
            return Err(Error::config("eval.frames", "must be >= 2"));
        }
        if self.eval.random_trials == 0 {
            return Err(Error::config("eval.random_trials", "must be >= 1"));
        }
        self.backbone.validate()?;
        self.maskgen.validate(&self.backbone)?;
        for (field, v) in [("loss.task", self.loss.task), ("loss.kl", self.loss.kl), ("loss.recon", self.loss.recon)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be a finite value >= 0"));
            }
        }
        self.train.validate()?;
        self.policy.validate()?;
        self.aggregation.validate()?;
        Ok(())
    }

    pub fn scene(&self, frames: usize) -> SceneParams {
        SceneParams {
            width: self.dataset.width,
            height: self.dataset.height,
            num_classes: self.backbone.num_classes,
            num_frames: frames,
            num_objects: self.dataset.objects,
            speed: self.dataset.speed,
        }
    }

    pub fn training_sequences(&self) -> Result<Vec<FrameSequence>> {
        let scene = self.scene(self.dataset.frames);
        (0..self.dataset.sequences as u64)
            .map(|i| generate(self.dataset.seed + i, &scene))
            .collect()
    }

    pub fn eval_sequence(&self) -> Result<FrameSequence> {
        generate(self.eval.seed, &self.scene(self.eval.frames))
    }

    pub fn stream_options(&self) -> StreamOptions {
        StreamOptions {
            policy: self.policy,
            aggregation: self.aggregation,
            fam_on_key: self.fam_on_key,
            seed: self.seed,
        }
    }

    /// Hash of the parts that determine parameter names and shapes.
    pub fn architecture_hash(&self) -> String {
        let arch = serde_json::json!({
            "backbone": self.backbone,
            "extractor_channels": self.maskgen.extractor_channels,
            "gate_channels": self.maskgen.gate_channels,
        });
        let digest = Sha256::digest(arch.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Best-effort dotted path of the field a serde error refers to.
fn json_path(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    for marker in ["unknown field `", "missing field `"] {
        if let Some(start) = msg.find(marker) {
            let rest = &msg[start + marker.len()..];
            if let Some(end) = rest.find('`') {
                return rest[..end].to_string();
            }
        }
    }
    format!("line {} column {}", e.line(), e.column())
}
