//! Single-file model archive.
//!
//! A checkpoint is a safetensors file holding every backbone and generator
//! array as little-endian `f64`, named `backbone.<param>` and
//! `maskgen.<param>`. The header metadata carries:
//!
//! | key           | value                                         |
//! |---------------|-----------------------------------------------|
//! | `format`      | `stmg-checkpoint`                             |
//! | `version`     | [`FORMAT_VERSION`]                            |
//! | `config`      | the full experiment config as JSON            |
//! | `config_hash` | [`ExperimentConfig::architecture_hash`]       |

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::autograd::Tensor;
use crate::backbone::Backbone;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::maskgen::MaskGenerator;
use crate::nn::ParamStore;

pub const FORMAT: &str = "stmg-checkpoint";
pub const FORMAT_VERSION: &str = "1";

const BACKBONE_PREFIX: &str = "backbone.";
const MASKGEN_PREFIX: &str = "maskgen.";

pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub backbone: Backbone,
    pub generator: MaskGenerator,
}

fn encode(store: &ParamStore, prefix: &str, out: &mut Vec<(String, Vec<usize>, Vec<u8>)>) {
    for e in store.entries() {
        let bytes = e.value.iter().flat_map(|v| v.to_le_bytes()).collect();
        out.push((format!("{prefix}{}", e.name), e.value.shape().to_vec(), bytes));
    }
}

pub fn save(path: &Path, config: &ExperimentConfig, backbone: &Backbone, generator: &MaskGenerator) -> Result<()> {
    let mut raw = Vec::new();
    encode(&backbone.params, BACKBONE_PREFIX, &mut raw);
    encode(&generator.params, MASKGEN_PREFIX, &mut raw);
    let views = raw
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let metadata = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("version".to_string(), FORMAT_VERSION.to_string()),
        ("config".to_string(), config.to_json()),
        ("config_hash".to_string(), config.architecture_hash()),
    ]);
    let bytes = safetensors::serialize(views, &Some(metadata)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let field = |key: &str| {
        meta.get(key)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("metadata key `{key}` missing")))
    };
    if field("format")? != FORMAT {
        return Err(Error::Checkpoint("not an stmg checkpoint".into()));
    }
    let version = field("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config = ExperimentConfig::from_json(&field("config")?)?;
    let hash = field("config_hash")?;
    if hash != config.architecture_hash() {
        return Err(Error::Checkpoint("embedded config does not match its hash".into()));
    }

    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut backbone_arrays = HashMap::new();
    let mut maskgen_arrays = HashMap::new();
    for (name, view) in tensors.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(Error::Checkpoint(format!("tensor `{name}` is {:?}, expected F64", view.dtype())));
        }
        let values: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let array = Tensor::from_shape_vec(view.shape().to_vec(), values).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(rest) = name.strip_prefix(BACKBONE_PREFIX) {
            backbone_arrays.insert(rest.to_string(), array);
        } else if let Some(rest) = name.strip_prefix(MASKGEN_PREFIX) {
            maskgen_arrays.insert(rest.to_string(), array);
        } else {
            return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
        }
    }

    let mut backbone = Backbone::new(config.backbone.clone(), 0)?;
    backbone.params.load_from(&backbone_arrays)?;
    let mut generator = MaskGenerator::new(config.maskgen.clone(), &config.backbone, 0)?;
    generator.params.load_from(&maskgen_arrays)?;
    Ok(Checkpoint {
        config,
        backbone,
        generator,
    })
}

/// Loads a checkpoint and checks that its architecture matches `expected`.
pub fn load_matching(path: &Path, expected: &ExperimentConfig) -> Result<Checkpoint> {
    let ckpt = load(path)?;
    if ckpt.config.architecture_hash() != expected.architecture_hash() {
        return Err(Error::Checkpoint(format!(
            "{} was trained with a different architecture than the given config",
            path.display()
        )));
    }
    Ok(ckpt)
}
