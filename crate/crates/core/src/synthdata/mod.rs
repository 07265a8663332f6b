//! Deterministic synthetic video: moving rectangles and discs over a static
//! textured background, with exact per-pixel class labels.
//!
//! Everything is rendered from a [`MotionSpec`], which is itself drawn from a
//! seed. Pixel intensities are multiples of 1/255, so frames survive an 8-bit
//! lossless round trip bit-exactly.

mod io;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{read_sequence, write_sequence, SequenceManifest, MANIFEST_FILE};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    /// `[channels, height, width]`, values in `[0, 1]`.
    pub pixels: Array3<f64>,
}

impl Frame {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub classes: Array2<u8>,
}

impl LabelMap {
    pub fn new(classes: Array2<u8>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(LabelMap { classes })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.classes.dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Rect { half_width: f64, half_height: f64 },
    Circle { radius: f64 },
}

impl Shape {
    fn extent(&self) -> (f64, f64) {
        match *self {
            Shape::Rect {
                half_width,
                half_height,
            } => (half_width, half_height),
            Shape::Circle { radius } => (radius, radius),
        }
    }

    /// Whether a point lies inside the shape centered at `center`.
    fn contains(&self, center: (f64, f64), p: (f64, f64)) -> bool {
        let (dx, dy) = (p.0 - center.0, p.1 - center.1);
        match *self {
            Shape::Rect {
                half_width,
                half_height,
            } => dx >= -half_width && dx < half_width && dy >= -half_height && dy < half_height,
            Shape::Circle { radius } => dx * dx + dy * dy <= radius * radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub class: u8,
    pub color: [u8; 3],
    /// Center at frame 0, in pixels (x, y).
    pub start: [f64; 2],
    /// Pixels per frame (x, y). Objects reflect off the canvas borders.
    pub velocity: [f64; 2],
}

impl ObjectSpec {
    /// Center at frame `t`; the shape always stays fully inside the canvas.
    pub fn center_at(&self, t: usize, width: usize, height: usize) -> (f64, f64) {
        let (ex, ey) = self.shape.extent();
        let x = reflect(self.start[0] + self.velocity[0] * t as f64, ex, width as f64 - ex);
        let y = reflect(self.start[1] + self.velocity[1] * t as f64, ey, height as f64 - ey);
        (x, y)
    }
}

/// Folds `x` into `[lo, hi]` as a triangle wave.
fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let u = (x - lo).rem_euclid(2.0 * span);
    lo + if u <= span { u } else { 2.0 * span - u }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub base: [u8; 3],
    pub amplitude: f64,
    pub frequency: [f64; 2],
    pub phase: f64,
    pub noise: u8,
    pub noise_seed: u64,
}

impl BackgroundSpec {
    fn render(&self, width: usize, height: usize) -> Array3<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let mut img = Array3::zeros((CHANNELS, height, width));
        for y in 0..height {
            for x in 0..width {
                let wave = (self.frequency[0] * x as f64 + self.frequency[1] * y as f64 + self.phase).sin();
                let noise: i32 = if self.noise > 0 {
                    rng.gen_range(-(self.noise as i32)..=self.noise as i32)
                } else {
                    0
                };
                for c in 0..CHANNELS {
                    let v = self.base[c] as f64 + self.amplitude * wave + noise as f64;
                    img[[c, y, x]] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        img
    }
}

/// Everything needed to re-render a sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub speed: f64,
    pub background: BackgroundSpec,
    pub objects: Vec<ObjectSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Frame>,
    pub labels: Vec<LabelMap>,
    pub seed: u64,
    pub motion: MotionSpec,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Canvas and scene parameters for [`generate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub num_frames: usize,
    pub num_objects: usize,
    /// Pixels per frame.
    pub speed: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            width: 64,
            height: 64,
            num_classes: 4,
            num_frames: 30,
            num_objects: 3,
            speed: 2.0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::invalid(format!(
                "canvas must be at least 8x8, got {}x{}",
                self.width, self.height
            )));
        }
        if self.num_frames < 2 {
            return Err(Error::invalid("num_frames must be at least 2"));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::invalid("num_classes must be in [2, 255]"));
        }
        if !(self.speed.is_finite() && self.speed >= 0.0) {
            return Err(Error::invalid(format!("speed must be finite and >= 0, got {}", self.speed)));
        }
        Ok(())
    }
}

/// Sequence on the default 64x64, 4-class canvas.
pub fn generate_sequence(seed: u64, num_frames: usize, num_objects: usize, speed: f64) -> Result<FrameSequence> {
    generate(
        seed,
        &SceneParams {
            num_frames,
            num_objects,
            speed,
            ..SceneParams::default()
        },
    )
}

pub fn generate(seed: u64, params: &SceneParams) -> Result<FrameSequence> {
    params.validate()?;
    let motion = sample_motion(seed, params);
    let mut seq = render(&motion, params.num_frames)?;
    seq.seed = seed;
    Ok(seq)
}

/// Base color for an object class, spread around the hue circle.
fn class_color(class: u8, num_classes: usize) -> [f64; 3] {
    let hue = (class as f64 - 1.0) / (num_classes as f64 - 1.0) * 300.0;
    let (s, v) = (0.85, 0.9);
    let c = v * s;
    let hp = hue / 60.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn sample_motion(seed: u64, params: &SceneParams) -> MotionSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (params.width as f64, params.height as f64);
    let gray = rng.gen_range(80..140u8);
    let tint: [i16; 3] = [rng.gen_range(-10..=10), rng.gen_range(-10..=10), rng.gen_range(-10..=10)];
    let background = BackgroundSpec {
        base: [0, 1, 2].map(|c| (gray as i16 + tint[c]).clamp(0, 255) as u8),
        amplitude: rng.gen_range(8.0..20.0),
        frequency: [rng.gen_range(0.05..0.25), rng.gen_range(0.05..0.25)],
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
        noise: 6,
        noise_seed: rng.gen(),
    };

    let scale = w.min(h) / 64.0;
    let objects = (0..params.num_objects)
        .map(|_| {
            let class = rng.gen_range(1..params.num_classes) as u8;
            let shape = if rng.gen_bool(0.5) {
                Shape::Rect {
                    half_width: rng.gen_range(5.0..11.0) * scale,
                    half_height: rng.gen_range(5.0..11.0) * scale,
                }
            } else {
                Shape::Circle {
                    radius: rng.gen_range(5.0..10.0) * scale,
                }
            };
            let base = class_color(class, params.num_classes);
            let color = [0, 1, 2].map(|c| (base[c] + rng.gen_range(-20.0..20.0)).round().clamp(0.0, 255.0) as u8);
            let (ex, ey) = shape.extent();
            let start = [rng.gen_range(ex..(w - ex).max(ex + 1e-9)), rng.gen_range(ey..(h - ey).max(ey + 1e-9))];
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            ObjectSpec {
                shape,
                class,
                color,
                start,
                velocity: [params.speed * angle.cos(), params.speed * angle.sin()],
            }
        })
        .collect();

    MotionSpec {
        width: params.width,
        height: params.height,
        num_classes: params.num_classes,
        speed: params.speed,
        background,
        objects,
    }
}

/// Renders `num_frames` frames of a motion spec.
pub fn render(motion: &MotionSpec, num_frames: usize) -> Result<FrameSequence> {
    if motion.width == 0 || motion.height == 0 {
        return Err(Error::invalid("canvas dimensions must be positive"));
    }
    if num_frames == 0 {
        return Err(Error::invalid("num_frames must be positive"));
    }
    let (w, h) = (motion.width, motion.height);
    let background = motion.background.render(w, h);
    let mut frames = Vec::with_capacity(num_frames);
    let mut labels = Vec::with_capacity(num_frames);
    for t in 0..num_frames {
        let mut img = background.clone();
        let mut lab = Array2::<u8>::zeros((h, w));
        for obj in &motion.objects {
            let center = obj.center_at(t, w, h);
            let (ex, ey) = obj.shape.extent();
            let x0 = ((center.0 - ex - 1.0).floor().max(0.0)) as usize;
            let x1 = ((center.0 + ex + 1.0).ceil() as usize).min(w);
            let y0 = ((center.1 - ey - 1.0).floor().max(0.0)) as usize;
            let y1 = ((center.1 + ey + 1.0).ceil() as usize).min(h);
            for y in y0..y1 {
                for x in x0..x1 {
                    if obj.shape.contains(center, (x as f64 + 0.5, y as f64 + 0.5)) {
                        lab[[y, x]] = obj.class;
                        for c in 0..CHANNELS {
                            img[[c, y, x]] = obj.color[c];
                        }
                    }
                }
            }
        }
        frames.push(Frame {
            index: t,
            pixels: img.mapv(|v| v as f64 / 255.0),
        });
        labels.push(LabelMap::new(lab, motion.num_classes)?);
    }
    Ok(FrameSequence {
        frames,
        labels,
        seed: 0,
        motion: motion.clone(),
    })
}

/// Resolution at which a distortion map is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistortionResolution {
    Input,
    /// Downsampled by `stride` with a majority vote per bin (ties count as distorted).
    Feature { stride: usize },
    /// Downsampled by `stride`; a bin is distorted if any of its pixels is.
    FeatureAny { stride: usize },
}

/// 1 wherever the two label maps disagree.
pub fn oracle_distortion_map(prev: &LabelMap, cur: &LabelMap) -> Result<Array2<u8>> {
    if prev.shape() != cur.shape() {
        return Err(Error::shape(format!(
            "label maps {:?} and {:?} differ in shape",
            prev.shape(),
            cur.shape()
        )));
    }
    let mut out = Array2::zeros(prev.shape());
    ndarray::Zip::from(&mut out)
        .and(&prev.classes)
        .and(&cur.classes)
        .for_each(|o, &a, &b| *o = (a != b) as u8);
    Ok(out)
}

pub fn oracle_distortion_map_at(prev: &LabelMap, cur: &LabelMap, resolution: DistortionResolution) -> Result<Array2<u8>> {
    let full = oracle_distortion_map(prev, cur)?;
    match resolution {
        DistortionResolution::Input => Ok(full),
        DistortionResolution::Feature { stride } => downsample_majority(&full, stride),
        DistortionResolution::FeatureAny { stride } => downsample_any(&full, stride),
    }
}

/// Majority-of-ones pooling over `stride x stride` bins; ties resolve to 1.
pub fn downsample_majority(map: &Array2<u8>, stride: usize) -> Result<Array2<u8>> {
    pool_bins(map, stride, |ones, area| 2 * ones >= area)
}

/// Max pooling over `stride x stride` bins.
pub fn downsample_any(map: &Array2<u8>, stride: usize) -> Result<Array2<u8>> {
    pool_bins(map, stride, |ones, _| ones > 0)
}

fn pool_bins(map: &Array2<u8>, stride: usize, rule: impl Fn(usize, usize) -> bool) -> Result<Array2<u8>> {
    let (h, w) = map.dim();
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(format!("{h}x{w} map is not divisible by stride {stride}")));
    }
    let (oh, ow) = (h / stride, w / stride);
    let area = stride * stride;
    Ok(Array2::from_shape_fn((oh, ow), |(i, j)| {
        let ones: usize = map
            .slice(ndarray::s![i * stride..(i + 1) * stride, j * stride..(j + 1) * stride])
            .iter()
            .map(|&v| v as usize)
            .sum();
        rule(ones, area) as u8
    }))
}

/// Source of segmentation maps used to derive distillation targets.
///
/// The synthetic ground truth is the default teacher; any external segmenter
/// can be plugged in by implementing this trait.
pub trait Teacher {
    fn segment(&self, sequence: &FrameSequence, index: usize) -> Result<LabelMap>;
}

/// Teacher that returns the exact synthetic labels.
#[derive(Clone, Copy, Debug, Default)]
pub struct LabelOracle;

impl Teacher for LabelOracle {
    fn segment(&self, sequence: &FrameSequence, index: usize) -> Result<LabelMap> {
        sequence
            .labels
            .get(index)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("frame {index} out of range")))
    }
}

/// Distortion target between frames `index - 1` and `index` as seen by `teacher`.
pub fn teacher_distortion_map(
    teacher: &dyn Teacher,
    sequence: &FrameSequence,
    index: usize,
    resolution: DistortionResolution,
) -> Result<Array2<u8>> {
    if index == 0 {
        return Err(Error::invalid("frame 0 has no predecessor"));
    }
    let prev = teacher.segment(sequence, index - 1)?;
    let cur = teacher.segment(sequence, index)?;
    oracle_distortion_map_at(&prev, &cur, resolution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_changes(a: &LabelMap, b: &LabelMap) -> usize {
        let (h, w) = a.shape();
        let mut n = 0;
        for y in 0..h {
            for x in 0..w {
                if a.classes[[y, x]] != b.classes[[y, x]] {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn no_objects_means_static_background() {
        let seq = generate_sequence(7, 2, 0, 0.0).unwrap();
        assert_eq!(seq.frames[0].pixels, seq.frames[1].pixels);
        assert!(seq.labels.iter().all(|l| l.classes.iter().all(|&c| c == 0)));
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = generate_sequence(7, 5, 3, 2.0).unwrap();
        let b = generate_sequence(7, 5, 3, 2.0).unwrap();
        assert_eq!(a, b);
        let c = generate_sequence(8, 5, 3, 2.0).unwrap();
        assert_ne!(a.frames[0].pixels, c.frames[0].pixels);
    }

    #[test]
    fn distortion_popcount_matches_rendered_comparison() {
        let seq = generate_sequence(7, 6, 1, 2.0).unwrap();
        let mut total = 0;
        for i in 1..seq.len() {
            let map = oracle_distortion_map(&seq.labels[i - 1], &seq.labels[i]).unwrap();
            let ones = map.iter().filter(|&&v| v == 1).count();
            assert_eq!(ones, brute_force_changes(&seq.labels[i - 1], &seq.labels[i]));
            total += ones;
        }
        assert!(total > 0, "a moving object must change some pixels");
    }

    #[test]
    fn static_sequences_have_empty_distortion() {
        let seq = generate_sequence(3, 4, 4, 0.0).unwrap();
        for i in 1..seq.len() {
            assert_eq!(seq.frames[i].pixels, seq.frames[0].pixels);
            let map = oracle_distortion_map(&seq.labels[i - 1], &seq.labels[i]).unwrap();
            assert!(map.iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn distortion_edge_cases() {
        let a = LabelMap::new(Array2::zeros((4, 4)), 3).unwrap();
        assert!(oracle_distortion_map(&a, &a).unwrap().iter().all(|&v| v == 0));
        let mut b = a.clone();
        b.classes[[2, 1]] = 2;
        let m = oracle_distortion_map(&a, &b).unwrap();
        assert_eq!(m.iter().filter(|&&v| v == 1).count(), 1);
        assert_eq!(m[[2, 1]], 1);
        let c = LabelMap::new(Array2::zeros((4, 5)), 3).unwrap();
        assert!(matches!(oracle_distortion_map(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn majority_downsampling_breaks_ties_toward_distorted() {
        let mut m = Array2::<u8>::zeros((4, 4));
        // top-left bin: exactly half
        m[[0, 0]] = 1;
        m[[1, 1]] = 1;
        // top-right bin: one of four
        m[[0, 2]] = 1;
        // bottom-right bin: three of four
        m[[2, 2]] = 1;
        m[[2, 3]] = 1;
        m[[3, 3]] = 1;
        let d = downsample_majority(&m, 2).unwrap();
        assert_eq!(d, ndarray::array![[1, 0], [0, 1]]);
        assert!(downsample_majority(&m, 3).is_err());
        assert_eq!(downsample_any(&m, 2).unwrap(), ndarray::array![[1, 1], [0, 1]]);
    }

    proptest! {
        #[test]
        fn any_pooling_dominates_majority(bits in proptest::collection::vec(0u8..2, 64)) {
            let m = Array2::from_shape_vec((8, 8), bits).unwrap();
            let any = downsample_any(&m, 4).unwrap();
            let maj = downsample_majority(&m, 4).unwrap();
            prop_assert!(any.iter().zip(&maj).all(|(a, b)| a >= b));
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(generate_sequence(1, 1, 1, 1.0).is_err());
        assert!(generate_sequence(1, 2, 1, -1.0).is_err());
        assert!(generate_sequence(1, 2, 1, f64::NAN).is_err());
        let p = SceneParams {
            width: 0,
            ..SceneParams::default()
        };
        assert!(generate(1, &p).is_err());
        let p = SceneParams {
            num_classes: 1,
            ..SceneParams::default()
        };
        assert!(generate(1, &p).is_err());
    }

    #[test]
    fn pixels_are_exact_byte_levels() {
        let seq = generate_sequence(11, 3, 3, 1.5).unwrap();
        for f in &seq.frames {
            for &v in f.pixels.iter() {
                assert!((0.0..=1.0).contains(&v));
                let q = (v * 255.0).round();
                assert_eq!(q / 255.0, v);
            }
        }
    }

    #[test]
    fn objects_move_at_requested_speed() {
        let seq = generate_sequence(5, 2, 2, 3.0).unwrap();
        for obj in &seq.motion.objects {
            let s = (obj.velocity[0].powi(2) + obj.velocity[1].powi(2)).sqrt();
            assert!((s - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn teacher_hook_matches_direct_oracle() {
        let seq = generate_sequence(9, 4, 2, 2.0).unwrap();
        let res = DistortionResolution::Feature { stride: 8 };
        let via_teacher = teacher_distortion_map(&LabelOracle, &seq, 2, res).unwrap();
        let direct = oracle_distortion_map_at(&seq.labels[1], &seq.labels[2], res).unwrap();
        assert_eq!(via_teacher, direct);
        assert_eq!(direct.dim(), (8, 8));
    }

    /// One axis-aligned object moving right from the canvas center; the
    /// speeds tested never reach the border.
    fn single_object_changes(shape: Shape, speed: f64) -> usize {
        let motion = MotionSpec {
            width: 64,
            height: 64,
            num_classes: 2,
            speed,
            background: BackgroundSpec {
                base: [100, 100, 100],
                amplitude: 0.0,
                frequency: [0.0, 0.0],
                phase: 0.0,
                noise: 0,
                noise_seed: 0,
            },
            objects: vec![ObjectSpec {
                shape,
                class: 1,
                color: [200, 30, 30],
                start: [24.3, 31.7],
                velocity: [speed, 0.0],
            }],
        };
        let seq = render(&motion, 2).unwrap();
        oracle_distortion_map(&seq.labels[0], &seq.labels[1])
            .unwrap()
            .iter()
            .filter(|&&v| v == 1)
            .count()
    }

    #[test]
    fn distorted_area_grows_with_speed_in_canvas() {
        for shape in [
            Shape::Rect {
                half_width: 6.5,
                half_height: 4.0,
            },
            Shape::Circle { radius: 7.2 },
        ] {
            let counts: Vec<usize> = (0..=12).map(|s| single_object_changes(shape, s as f64)).collect();
            assert_eq!(counts[0], 0);
            assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{shape:?}: {counts:?}");
        }
    }

    proptest! {
        #[test]
        fn random_label_pairs_match_loop_oracle(
            a in proptest::collection::vec(0u8..3, 36),
            b in proptest::collection::vec(0u8..3, 36),
        ) {
            let la = LabelMap::new(Array2::from_shape_vec((6, 6), a).unwrap(), 3).unwrap();
            let lb = LabelMap::new(Array2::from_shape_vec((6, 6), b).unwrap(), 3).unwrap();
            let m = oracle_distortion_map(&la, &lb).unwrap();
            prop_assert_eq!(m.iter().filter(|&&v| v == 1).count(), brute_force_changes(&la, &lb));
        }

        #[test]
        fn reflected_positions_stay_inside(start in 0.0f64..64.0, v in -10.0f64..10.0, t in 0usize..200) {
            let obj = ObjectSpec {
                shape: Shape::Circle { radius: 5.0 },
                class: 1,
                color: [0, 0, 0],
                start: [start, start],
                velocity: [v, -v],
            };
            let (x, y) = obj.center_at(t, 64, 48);
            prop_assert!((5.0..=59.0).contains(&x));
            prop_assert!((5.0..=43.0).contains(&y));
        }
    }
}
