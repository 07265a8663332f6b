//! Training objectives.
//!
//! Every loss comes in two forms: a plain function on arrays, used for
//! reporting and as the reference, and a graph builder on a [`Tape`].

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis, Ix3, Ix4};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::maskgen::{sigmoid, softplus, VariationalPruningState};
use crate::synthdata::LabelMap;

/// Smoothing constant of the dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

/// Per-block sparsity term `log(rho / delta) + (delta^2 + (beta_p - beta_bn)^2) / (2 rho^2)`
/// with `delta = softplus(delta_uc)`.
///
/// This is the Gaussian KL divergence from `N(beta_bn, delta^2)` to
/// `N(beta_p, rho^2)` plus a constant `1/2`, which does not affect gradients.
pub fn kl_sparsity(state: &VariationalPruningState) -> Result<Array1<f64>> {
    if !(state.rho > 0.0) {
        return Err(Error::invalid("rho must be positive"));
    }
    if state.delta_uc.len() != state.beta_bn.len() {
        return Err(Error::shape("delta_uc and beta_bn differ in length"));
    }
    let delta = state.delta();
    if delta.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::invalid("delta must be positive"));
    }
    let rho2 = state.rho * state.rho;
    Ok(Array1::from_shape_fn(state.len(), |k| {
        let d = delta[k];
        let shift = state.beta_p - state.beta_bn[k];
        (state.rho / d).ln() + (d * d + shift * shift) / (2.0 * rho2)
    }))
}

/// Graph form of [`kl_sparsity`], returning the `[K]` vector.
pub fn kl_graph(tape: &mut Tape, beta_bn: Var, delta_uc: Var, beta_p: f64, rho: f64) -> Var {
    let beta: Vec<f64> = tape.value(beta_bn).iter().copied().collect();
    let duc: Vec<f64> = tape.value(delta_uc).iter().copied().collect();
    let rho2 = rho * rho;
    let value = Array1::from_shape_fn(beta.len(), |k| {
        let d = softplus(duc[k]);
        let shift = beta_p - beta[k];
        (rho / d).ln() + (d * d + shift * shift) / (2.0 * rho2)
    });
    tape.custom(&[beta_bn, delta_uc], value.into_dyn(), move |g, _| {
        let db = Array1::from_shape_fn(beta.len(), |k| g[[k]] * (beta[k] - beta_p) / rho2);
        let dd = Array1::from_shape_fn(duc.len(), |k| {
            let d = softplus(duc[k]);
            g[[k]] * (-1.0 / d + d / rho2) * sigmoid(duc[k])
        });
        vec![Some(db.into_dyn()), Some(dd.into_dyn())]
    })
}

fn check_same(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("maps differ: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// `1 - (2 sum(m n) + 1) / (sum(m^2) + sum(n^2) + 1)`.
pub fn dice_loss(m: ArrayView2<f64>, n: ArrayView2<f64>) -> Result<f64> {
    check_same(m.dim(), n.dim())?;
    let inter = (&m * &n).sum();
    let denom = m.mapv(|v| v * v).sum() + n.mapv(|v| v * v).sum() + DICE_SMOOTH;
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / denom)
}

/// Mean per-pixel binary cross-entropy with `m` clipped to `[tau, 1 - tau]`.
pub fn bce_loss(m: ArrayView2<f64>, n: ArrayView2<f64>, tau: f64) -> Result<f64> {
    check_same(m.dim(), n.dim())?;
    let total: f64 = m
        .iter()
        .zip(n.iter())
        .map(|(&p, &t)| {
            let p = p.max(tau).min(1.0 - tau);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / m.len().max(1) as f64)
}

fn check_labels(c: usize, h: usize, w: usize, labels: &LabelMap) -> Result<()> {
    if labels.shape() != (h, w) {
        return Err(Error::shape(format!("labels {:?} vs scores {h}x{w}", labels.shape())));
    }
    if let Some(&bad) = labels.classes.iter().find(|&&l| l as usize >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    Ok(())
}

/// Mean per-pixel softmax cross-entropy of scores `[C, H, W]`.
pub fn task_loss(scores: &Array3<f64>, labels: &LabelMap) -> Result<f64> {
    let (c, h, w) = scores.dim();
    check_labels(c, h, w, labels)?;
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let col = scores.slice(ndarray::s![.., y, x]);
            let max = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + col.mapv(|v| (v - max).exp()).sum().ln();
            total += lse - col[labels.classes[[y, x]] as usize];
        }
    }
    Ok(total / (h * w) as f64)
}

/// Batch dice loss: mean over samples of the per-sample loss. `m` is `[N, h, w]`.
pub fn dice_graph(tape: &mut Tape, m: Var, target: &Array3<f64>) -> Var {
    let mv = tape.value(m).view().into_dimensionality::<Ix3>().expect("[N, h, w] mask").to_owned();
    assert_eq!(mv.dim(), target.dim(), "dice_graph: target shape");
    let n = mv.len_of(Axis(0));
    let target = target.clone();
    let mut terms = Vec::with_capacity(n);
    let mut value = 0.0;
    for i in 0..n {
        let a = mv.index_axis(Axis(0), i);
        let b = target.index_axis(Axis(0), i);
        let inter = (&a * &b).sum();
        let denom = a.mapv(|v| v * v).sum() + b.mapv(|v| v * v).sum() + DICE_SMOOTH;
        value += 1.0 - (2.0 * inter + DICE_SMOOTH) / denom;
        terms.push((2.0 * inter + DICE_SMOOTH, denom));
    }
    let scale = 1.0 / n as f64;
    tape.custom(&[m], Tensor::from_elem(ndarray::IxDyn(&[]), value * scale), move |g, _| {
        let g = g.sum() * scale;
        let mut out = Array3::<f64>::zeros(mv.dim());
        for (i, &(num, denom)) in terms.iter().enumerate() {
            let a = mv.index_axis(Axis(0), i);
            let b = target.index_axis(Axis(0), i);
            let d = (&b * (2.0 * denom) - &a * (2.0 * num)) * (-g / (denom * denom));
            out.index_axis_mut(Axis(0), i).assign(&d);
        }
        vec![Some(out.into_dyn())]
    })
}

/// Mean binary cross-entropy over every entry; no gradient where `m` is clipped.
pub fn bce_graph(tape: &mut Tape, m: Var, target: &Tensor, tau: f64) -> Var {
    let mv = tape.value(m).clone();
    assert_eq!(mv.shape(), target.shape(), "bce_graph: target shape");
    let count = mv.len().max(1) as f64;
    let target = target.clone();
    let value: f64 = mv
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| {
            let p = p.max(tau).min(1.0 - tau);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / count;
    tape.custom(&[m], Tensor::from_elem(ndarray::IxDyn(&[]), value), move |g, _| {
        let g = g.sum() / count;
        let mut out = mv.clone();
        ndarray::Zip::from(&mut out).and(&target).for_each(|p, &t| {
            *p = if *p > tau && *p < 1.0 - tau {
                g * ((1.0 - t) / (1.0 - *p) - t / *p)
            } else {
                0.0
            };
        });
        vec![Some(out)]
    })
}

/// Mean softmax cross-entropy of scores `[N, C, H, W]` against one label map per sample.
pub fn task_graph(tape: &mut Tape, scores: Var, labels: &[&LabelMap]) -> Result<Var> {
    let sv = tape.value(scores).view().into_dimensionality::<Ix4>().map_err(|_| Error::shape("scores must be [N, C, H, W]"))?.to_owned();
    let (n, c, h, w) = sv.dim();
    if labels.len() != n {
        return Err(Error::shape(format!("{} label maps for {n} samples", labels.len())));
    }
    for l in labels {
        check_labels(c, h, w, l)?;
    }
    let count = (n * h * w) as f64;
    let mut grad = sv.clone();
    let mut total = 0.0;
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let col = sv.slice(ndarray::s![i, .., y, x]);
                let max = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let exps = col.mapv(|v| (v - max).exp());
                let z = exps.sum();
                let label = labels[i].classes[[y, x]] as usize;
                total += max + z.ln() - col[label];
                for k in 0..c {
                    grad[[i, k, y, x]] = (exps[k] / z - if k == label { 1.0 } else { 0.0 }) / count;
                }
            }
        }
    }
    Ok(tape.custom(&[scores], Tensor::from_elem(ndarray::IxDyn(&[]), total / count), move |g, _| {
        vec![Some(grad.clone().into_dyn() * g.sum())]
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub task: f64,
    pub kl: f64,
    pub recon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            task: 1.0,
            kl: 1e-4,
            recon: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub task: f64,
    pub kl: f64,
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn new(task: f64, kl: f64, bce: f64, dice: f64, weights: LossWeights) -> Self {
        LossReport {
            task,
            kl,
            bce,
            dice,
            total: weights.task * task + weights.kl * kl + weights.recon * (bce + dice),
            weights,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.task, self.kl, self.bce, self.dice, self.total].iter().all(|v| v.is_finite())
    }
}

/// Binary map as reals.
pub fn as_real(map: &Array2<u8>) -> Array2<f64> {
    map.mapv(f64::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_relative_error;
    use ndarray::{arr1, Array2, Array4};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn state(beta_bn: f64, delta: f64, beta_p: f64, rho: f64) -> VariationalPruningState {
        let mut s = VariationalPruningState::neutral(1, beta_bn);
        s.delta_uc = arr1(&[delta.exp_m1().ln()]);
        s.beta_p = beta_p;
        s.rho = rho;
        s
    }

    #[test]
    fn kl_closed_form_examples() {
        for rho in [0.3, 1.0, 2.5] {
            let matched = kl_sparsity(&state(-1.0, rho, -1.0, rho)).unwrap()[0];
            assert!((matched - 0.5).abs() < 1e-9);
            let shifted = kl_sparsity(&state(-1.0 + rho, rho, -1.0, rho)).unwrap()[0];
            assert!((shifted - 1.0).abs() < 1e-9);
        }
        let mut bad = state(0.0, 1.0, 0.0, 1.0);
        bad.rho = 0.0;
        assert!(kl_sparsity(&bad).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo_plus_half() {
        let (beta_bn, delta, beta_p, rho) = (0.4, 0.3, -1.0, 1.0);
        let closed = kl_sparsity(&state(beta_bn, delta, beta_p, rho)).unwrap()[0];
        let q = Normal::new(beta_bn, delta).unwrap();
        let log_density = |x: f64, m: f64, s: f64| -((x - m) / s).powi(2) / 2.0 - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 1_000_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let x = q.sample(&mut rng);
            let v = log_density(x, beta_bn, delta) - log_density(x, beta_p, rho);
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((closed - (mean + 0.5)).abs() <= 3.0 * se, "closed {closed}, mc {mean} +- {se}");
    }

    #[test]
    fn kl_graph_matches_closed_form() {
        let mut s = VariationalPruningState::neutral(3, 0.0);
        s.beta_bn = arr1(&[0.9, -0.2, 0.1]);
        s.delta_uc = arr1(&[-3.0, 0.0, 1.0]);
        s.rho = 0.7;
        let mut tape = Tape::inference();
        let b = tape.constant(s.beta_bn.clone().into_dyn());
        let d = tape.constant(s.delta_uc.clone().into_dyn());
        let kl = kl_graph(&mut tape, b, d, s.beta_p, s.rho);
        let direct = kl_sparsity(&s).unwrap();
        for (a, b) in tape.value(kl).iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dice_examples() {
        let n = Array2::from_shape_fn((3, 3), |(y, x)| ((x + y) % 2) as f64);
        assert!(dice_loss(n.view(), n.view()).unwrap().abs() < 1e-12);
        let z = Array2::<f64>::zeros((2, 2));
        let o = Array2::<f64>::ones((2, 2));
        assert!((dice_loss(z.view(), o.view()).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(dice_loss(z.view(), z.view()).unwrap(), 0.0);
        assert!(dice_loss(z.view(), n.view()).is_err());
    }

    #[test]
    fn bce_examples() {
        let n = Array2::from_shape_fn((4, 4), |(y, _)| (y % 2) as f64);
        let half = Array2::from_elem((4, 4), 0.5);
        assert!((bce_loss(half.view(), n.view(), 1e-10).unwrap() - 2f64.ln()).abs() < 1e-12);
        let perfect = bce_loss(n.view(), n.view(), 1e-10).unwrap();
        assert!(perfect <= -(-1e-10f64).ln_1p() + 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Array2::from_shape_simple_fn((5, 7), || rng.gen_range(0.0..1.0));
        let t = Array2::from_shape_simple_fn((5, 7), || if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
        let mut oracle = 0.0;
        for y in 0..5 {
            for x in 0..7 {
                let p: f64 = m[[y, x]];
                oracle += if t[[y, x]] == 1.0 { -p.ln() } else { -(1.0 - p).ln() };
            }
        }
        assert!((bce_loss(m.view(), t.view(), 1e-10).unwrap() - oracle / 35.0).abs() < 1e-9);
    }

    fn labels(classes: Array2<u8>, c: usize) -> LabelMap {
        LabelMap::new(classes, c).unwrap()
    }

    #[test]
    fn task_loss_examples() {
        let l = labels(Array2::from_shape_fn((4, 4), |(y, x)| ((y + x) % 3) as u8), 3);
        let uniform = Array3::zeros((3, 4, 4));
        assert!((task_loss(&uniform, &l).unwrap() - 3f64.ln()).abs() < 1e-12);
        let with_margin = |m: f64| Array3::from_shape_fn((3, 4, 4), |(c, y, x)| if c == (y + x) % 3 { m } else { 0.0 });
        let losses: Vec<f64> = [1.0, 5.0, 20.0, 60.0].iter().map(|&m| task_loss(&with_margin(m), &l).unwrap()).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]));
        assert!(losses[3] < 1e-20);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = Array3::from_shape_simple_fn((3, 4, 4), || rng.gen_range(-3.0..3.0));
        let mut oracle = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                let z: f64 = (0..3).map(|c| f64::exp(s[[c, y, x]])).sum();
                oracle += -(s[[l.classes[[y, x]] as usize, y, x]].exp() / z).ln();
            }
        }
        assert!((task_loss(&s, &l).unwrap() - oracle / 16.0).abs() < 1e-9);

        let bad = LabelMap {
            classes: Array2::from_elem((4, 4), 7),
        };
        assert!(matches!(task_loss(&uniform, &bad), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn graph_forms_agree_with_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Array3::from_shape_simple_fn((2, 4, 4), || rng.gen_range(0.0..1.0));
        let t = Array3::from_shape_simple_fn((2, 4, 4), || if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
        let mut tape = Tape::inference();
        let mv = tape.constant(m.clone().into_dyn());
        let d = dice_graph(&mut tape, mv, &t);
        let b = bce_graph(&mut tape, mv, &t.clone().into_dyn(), 1e-10);
        let dice_ref = (0..2)
            .map(|i| dice_loss(m.index_axis(Axis(0), i), t.index_axis(Axis(0), i)).unwrap())
            .sum::<f64>()
            / 2.0;
        let bce_ref = (0..2)
            .map(|i| bce_loss(m.index_axis(Axis(0), i), t.index_axis(Axis(0), i), 1e-10).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((tape.item(d) - dice_ref).abs() < 1e-12);
        assert!((tape.item(b) - bce_ref).abs() < 1e-12);

        let scores = Array4::from_shape_simple_fn((2, 3, 4, 4), || rng.gen_range(-2.0..2.0));
        let ls: Vec<LabelMap> = (0..2).map(|_| labels(Array2::from_shape_simple_fn((4, 4), || rng.gen_range(0..3)), 3)).collect();
        let sv = tape.constant(scores.clone().into_dyn());
        let tl = task_graph(&mut tape, sv, &ls.iter().collect::<Vec<_>>()).unwrap();
        let reference = (0..2)
            .map(|i| task_loss(&scores.index_axis(Axis(0), i).to_owned(), &ls[i]).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((tape.item(tl) - reference).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Array3::from_shape_simple_fn((2, 3, 3), || rng.gen_range(0.05..0.95));
            let t = Array3::from_shape_simple_fn((2, 3, 3), || if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
            let e = max_relative_error(&[m.clone().into_dyn()], |tape, v| dice_graph(tape, v[0], &t), 1e-6);
            assert!(e < 1e-3, "dice {e}");
            let td = t.clone().into_dyn();
            let e = max_relative_error(&[m.into_dyn()], |tape, v| bce_graph(tape, v[0], &td, 1e-10), 1e-6);
            assert!(e < 1e-3, "bce {e}");

            let s = Array4::from_shape_simple_fn((2, 3, 2, 2), || rng.gen_range(-2.0..2.0));
            let ls: Vec<LabelMap> = (0..2).map(|_| labels(Array2::from_shape_simple_fn((2, 2), || rng.gen_range(0..3)), 3)).collect();
            let e = max_relative_error(
                &[s.into_dyn()],
                |tape, v| task_graph(tape, v[0], &ls.iter().collect::<Vec<_>>()).unwrap(),
                1e-6,
            );
            assert!(e < 1e-3, "task {e}");

            let beta = Array1::from_shape_simple_fn(4, || rng.gen_range(-2.0..2.0)).into_dyn();
            let duc = Array1::from_shape_simple_fn(4, || rng.gen_range(-3.0..2.0)).into_dyn();
            let e = max_relative_error(
                &[beta, duc],
                |tape, v| {
                    let kl = kl_graph(tape, v[0], v[1], -1.0, 0.8);
                    tape.sum(kl)
                },
                1e-6,
            );
            assert!(e < 1e-3, "kl {e}");
        }
    }

    #[test]
    fn reconstruction_drives_mask_to_target() {
        let target = Array3::from_shape_fn((1, 16, 16), |(_, y, x)| if (4..11).contains(&y) && (3..9).contains(&x) { 1.0 } else { 0.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut logits = Array3::from_shape_simple_fn((1, 16, 16), || rng.gen_range(-0.5..0.5));
        let mut m = logits.mapv(sigmoid);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let mv = tape.leaf(m.clone().into_dyn());
            let b = bce_graph(&mut tape, mv, &target.clone().into_dyn(), 1e-10);
            let d = dice_graph(&mut tape, mv, &target);
            let l = tape.add(b, d);
            let g = tape.backward(l);
            // Step on the logits; d m / d logit = m (1 - m).
            let gm = g.get(mv).unwrap().view().into_dimensionality::<Ix3>().unwrap();
            ndarray::Zip::from(&mut logits).and(gm).and(&m).for_each(|z, &g, &p| *z -= 50.0 * g * p * (1.0 - p));
            m = logits.mapv(sigmoid);
        }
        let mae = (&m - &target).mapv(f64::abs).mean().unwrap();
        assert!(mae <= 0.05, "mean abs error {mae}");
    }

    #[test]
    fn report_total_is_the_weighted_sum() {
        let w = LossWeights {
            task: 2.0,
            kl: 0.5,
            recon: 3.0,
        };
        let r = LossReport::new(1.0, 4.0, 0.25, 0.5, w);
        assert_eq!(r.total, 2.0 + 2.0 + 3.0 * 0.75);
        assert!(r.is_finite());
    }

    proptest! {
        #[test]
        fn dice_is_bounded_and_symmetric(
            a in prop::collection::vec(0f64..=1.0, 16),
            b in prop::collection::vec(0f64..=1.0, 16),
        ) {
            let a = Array2::from_shape_vec((4, 4), a).unwrap();
            let b = Array2::from_shape_vec((4, 4), b).unwrap();
            let ab = dice_loss(a.view(), b.view()).unwrap();
            let ba = dice_loss(b.view(), a.view()).unwrap();
            prop_assert!((0.0..1.0).contains(&ab) || ab.abs() < 1e-15);
            prop_assert!((ab - ba).abs() < 1e-15);
        }
    }
}
