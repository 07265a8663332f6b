//! Per-pixel blending of cached and current backbone features.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Ix3, Ix4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::maskgen::SpatialMask;

/// Source of the blending weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AggregationMode {
    /// The generator's spatial mask.
    #[default]
    Stmg,
    /// The same weight everywhere.
    Fixed(f64),
    /// 0.5 everywhere.
    Uniform,
    /// The spatial mean of the generator's mask everywhere.
    UniformAvg,
    /// Independent fair coin per pixel.
    Random,
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregationMode::Stmg => write!(f, "stmg"),
            AggregationMode::Fixed(v) => write!(f, "fixed:{v}"),
            AggregationMode::Uniform => write!(f, "uniform"),
            AggregationMode::UniformAvg => write!(f, "uniform_avg"),
            AggregationMode::Random => write!(f, "random"),
        }
    }
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mode = match s {
            "stmg" => AggregationMode::Stmg,
            "uniform" => AggregationMode::Uniform,
            "uniform_avg" => AggregationMode::UniformAvg,
            "random" => AggregationMode::Random,
            _ => {
                let v = s
                    .strip_prefix("fixed:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::invalid(format!("unknown aggregation mode `{s}`")))?;
                AggregationMode::Fixed(v)
            }
        };
        mode.validate()?;
        Ok(mode)
    }
}

impl TryFrom<String> for AggregationMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AggregationMode> for String {
    fn from(m: AggregationMode) -> String {
        m.to_string()
    }
}

impl AggregationMode {
    pub fn validate(&self) -> Result<()> {
        if let AggregationMode::Fixed(v) = *self {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("fixed blending weight {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Weights actually used for blending, given the generator's mask.
    pub fn weights<R: Rng + ?Sized>(&self, m: &SpatialMask, rng: &mut R) -> Result<Array2<f64>> {
        self.validate()?;
        let dim = m.values.dim();
        Ok(match *self {
            AggregationMode::Stmg => m.values.clone(),
            AggregationMode::Fixed(v) => Array2::from_elem(dim, v),
            AggregationMode::Uniform => Array2::from_elem(dim, 0.5),
            AggregationMode::UniformAvg => Array2::from_elem(dim, m.magnitude()),
            AggregationMode::Random => Array2::from_shape_simple_fn(dim, || if rng.gen_bool(0.5) { 1.0 } else { 0.0 }),
        })
    }
}

/// `m * cur + (1 - m) * prev` with `m` broadcast over channels.
pub fn blend(prev: &FeatureMap, cur: &FeatureMap, m: &Array2<f64>) -> Result<FeatureMap> {
    let (c, h, w) = prev.shape();
    if cur.shape() != (c, h, w) || m.dim() != (h, w) {
        return Err(Error::shape(format!(
            "blend: prev {:?}, cur {:?}, mask {:?}",
            prev.shape(),
            cur.shape(),
            m.dim()
        )));
    }
    if m.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("blending weights must lie in [0, 1]"));
    }
    let values = Array3::from_shape_fn((c, h, w), |(k, y, x)| {
        let a = m[[y, x]];
        a * cur.values[[k, y, x]] + (1.0 - a) * prev.values[[k, y, x]]
    });
    Ok(FeatureMap { values })
}

pub fn aggregate<R: Rng + ?Sized>(
    prev: &FeatureMap,
    cur: &FeatureMap,
    m: &SpatialMask,
    mode: AggregationMode,
    rng: &mut R,
) -> Result<FeatureMap> {
    blend(prev, cur, &mode.weights(m, rng)?)
}

/// Graph form of [`blend`] on batches: features `[N, C, h, w]`, mask `[N, h, w]`.
pub fn aggregate_graph(tape: &mut Tape, prev: Var, cur: Var, m: Var) -> Var {
    let pv = tape.value(prev).view().into_dimensionality::<Ix4>().expect("[N, C, h, w]").to_owned();
    let cv = tape.value(cur).view().into_dimensionality::<Ix4>().expect("[N, C, h, w]").to_owned();
    let mv = tape.value(m).view().into_dimensionality::<Ix3>().expect("[N, h, w]").to_owned();
    let (n, c, h, w) = pv.dim();
    assert_eq!(cv.dim(), (n, c, h, w), "aggregate_graph: feature shapes");
    assert_eq!(mv.dim(), (n, h, w), "aggregate_graph: mask shape");
    let value = ndarray::Array4::from_shape_fn((n, c, h, w), |(i, k, y, x)| {
        let a = mv[[i, y, x]];
        a * cv[[i, k, y, x]] + (1.0 - a) * pv[[i, k, y, x]]
    });
    tape.custom(&[prev, cur, m], value.into_dyn(), move |g, needs| {
        let g = g.view().into_dimensionality::<Ix4>().unwrap();
        let gp = needs[0].then(|| ndarray::Array4::from_shape_fn((n, c, h, w), |(i, k, y, x)| g[[i, k, y, x]] * (1.0 - mv[[i, y, x]])).into_dyn());
        let gc = needs[1].then(|| ndarray::Array4::from_shape_fn((n, c, h, w), |(i, k, y, x)| g[[i, k, y, x]] * mv[[i, y, x]]).into_dyn());
        let gm = needs[2].then(|| {
            Array3::from_shape_fn((n, h, w), |(i, y, x)| {
                (0..c).map(|k| g[[i, k, y, x]] * (cv[[i, k, y, x]] - pv[[i, k, y, x]])).sum()
            })
            .into_dyn()
        });
        vec![gp, gc, gm]
    })
}
