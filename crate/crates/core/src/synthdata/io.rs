//! On-disk layout of a sequence directory:
//!
//! ```text
//! <dir>/manifest.json      SequenceManifest
//! <dir>/frame_0000.png     8-bit RGB, one per frame
//! <dir>/labels.bin         u8 class ids, frames x height x width, row-major
//! ```

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{Frame, FrameSequence, LabelMap, MotionSpec, CHANNELS};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "stmg-sequence";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub frame_files: Vec<String>,
    pub label_file: String,
    pub motion: MotionSpec,
}

pub fn write_sequence(seq: &FrameSequence, dir: &Path) -> Result<SequenceManifest> {
    fs::create_dir_all(dir)?;
    let (w, h) = (seq.motion.width, seq.motion.height);
    let mut frame_files = Vec::with_capacity(seq.len());
    for frame in &seq.frames {
        let name = format!("frame_{:04}.png", frame.index);
        let img = ImageBuffer::<Rgb<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (frame.pixels[[c, y as usize, x as usize]] * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        });
        img.save(dir.join(&name))?;
        frame_files.push(name);
    }

    let mut labels = Vec::with_capacity(seq.len() * w * h);
    for l in &seq.labels {
        labels.extend(l.classes.iter());
    }
    let label_file = "labels.bin".to_string();
    fs::write(dir.join(&label_file), &labels)?;

    let manifest = SequenceManifest {
        format: FORMAT.into(),
        version: VERSION,
        seed: seq.seed,
        num_frames: seq.len(),
        width: w,
        height: h,
        channels: CHANNELS,
        num_classes: seq.motion.num_classes,
        frame_files,
        label_file,
        motion: seq.motion.clone(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_sequence(dir: &Path) -> Result<FrameSequence> {
    let manifest: SequenceManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Dataset(format!(
            "unsupported sequence format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.channels != CHANNELS || manifest.frame_files.len() != manifest.num_frames {
        return Err(Error::Dataset("manifest is inconsistent".into()));
    }
    let (w, h) = (manifest.width, manifest.height);

    let mut frames = Vec::with_capacity(manifest.num_frames);
    for (index, name) in manifest.frame_files.iter().enumerate() {
        let img = image::open(dir.join(name))?.to_rgb8();
        if img.dimensions() != (w as u32, h as u32) {
            return Err(Error::Dataset(format!("{name}: expected {w}x{h}")));
        }
        let pixels = Array3::from_shape_fn((CHANNELS, h, w), |(c, y, x)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        frames.push(Frame { index, pixels });
    }

    let raw = fs::read(dir.join(&manifest.label_file))?;
    if raw.len() != manifest.num_frames * w * h {
        return Err(Error::Dataset(format!(
            "{}: {} bytes, expected {}",
            manifest.label_file,
            raw.len(),
            manifest.num_frames * w * h
        )));
    }
    let labels = raw
        .chunks_exact(w * h)
        .map(|chunk| {
            let classes = Array2::from_shape_vec((h, w), chunk.to_vec()).unwrap();
            LabelMap::new(classes, manifest.num_classes)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(FrameSequence {
        frames,
        labels,
        seed: manifest.seed,
        motion: manifest.motion,
    })
}
