//! Differentiable versions of the gate and spatial-mask computations.

use ndarray::{Array1, Array2, Array3, Array4, Ix2, Ix4};

use super::{sigmoid, softplus};
use crate::autograd::{Tape, Var};

pub(super) struct GateInputs {
    pub logits: Var,
    pub gamma: Var,
    pub beta_bn: Var,
    pub delta_uc: Var,
}

/// `clamp(gamma (g + eta - mu) / sigma + beta_bn + eps softplus(delta_uc), tau)`
/// over `[N, K]` logits; `mu` and `sigma` are constants.
pub(super) fn gate_probabilities(
    tape: &mut Tape,
    inputs: GateInputs,
    mu: &Array1<f64>,
    sigma: &Array1<f64>,
    eta: Option<&Array1<f64>>,
    eps: Option<&Array2<f64>>,
    tau: f64,
) -> Var {
    let g = tape.value(inputs.logits).view().into_dimensionality::<Ix2>().expect("[N, K] logits").to_owned();
    let (n, k) = g.dim();
    let vec = |tape: &Tape, v: Var| -> Array1<f64> { tape.value(v).iter().copied().collect() };
    let gamma = vec(tape, inputs.gamma);
    let beta = vec(tape, inputs.beta_bn);
    let duc = vec(tape, inputs.delta_uc);
    let eta = eta.cloned().unwrap_or_else(|| Array1::zeros(n));
    let eps = eps.cloned().unwrap_or_else(|| Array2::zeros((n, k)));
    assert_eq!(eta.len(), n, "one distortion bias per sample");
    assert_eq!(eps.dim(), (n, k), "noise must match the logits");

    let centered = Array2::from_shape_fn((n, k), |(i, j)| (g[[i, j]] + eta[i] - mu[j]) / sigma[j]);
    let pre = Array2::from_shape_fn((n, k), |(i, j)| gamma[j] * centered[[i, j]] + beta[j] + eps[[i, j]] * softplus(duc[j]));
    let inside = pre.mapv(|x| x > tau && x < 1.0 - tau);
    let value = pre.mapv(|x| x.max(tau).min(1.0 - tau)).into_dyn();
    let sigma = sigma.clone();

    tape.custom(
        &[inputs.logits, inputs.gamma, inputs.beta_bn, inputs.delta_uc],
        value,
        move |up, _| {
            let up = up.view().into_dimensionality::<Ix2>().unwrap();
            let d = Array2::from_shape_fn((n, k), |(i, j)| if inside[[i, j]] { up[[i, j]] } else { 0.0 });
            let dg = Array2::from_shape_fn((n, k), |(i, j)| d[[i, j]] * gamma[j] / sigma[j]);
            let dgamma = Array1::from_shape_fn(k, |j| (0..n).map(|i| d[[i, j]] * centered[[i, j]]).sum());
            let dbeta = Array1::from_shape_fn(k, |j| (0..n).map(|i| d[[i, j]]).sum());
            let ddelta = Array1::from_shape_fn(k, |j| sigmoid(duc[j]) * (0..n).map(|i| d[[i, j]] * eps[[i, j]]).sum::<f64>());
            vec![
                Some(dg.into_dyn()),
                Some(dgamma.into_dyn()),
                Some(dbeta.into_dyn()),
                Some(ddelta.into_dyn()),
            ]
        },
    )
}

/// Relaxed Bernoulli samples `sigmoid((logit p + logit u) / T)` for
/// probabilities `p` and fixed uniform noise `u` of the same shape.
pub fn relaxed_bernoulli_graph(tape: &mut Tape, p: Var, u: &Array2<f64>, temperature: f64) -> Var {
    let pv = tape.value(p).clone();
    assert_eq!(pv.shape(), u.shape(), "noise must match the probabilities");
    let u = u.clone().into_dyn();
    let mut z = pv.clone();
    z.zip_mut_with(&u, |p, &u| {
        let logistic = u.ln() - (-u).ln_1p();
        *p = sigmoid((p.ln() - (-*p).ln_1p() + logistic) / temperature);
    });
    let zc = z.clone();
    tape.custom(&[p], z, move |up, _| {
        let mut d = up.clone();
        ndarray::Zip::from(&mut d).and(&zc).and(&pv).for_each(|d, &z, &p| {
            *d *= z * (1.0 - z) / (temperature * p * (1.0 - p));
        });
        vec![Some(d)]
    })
}

/// Spatial mask `[N, h, w]` from encoder outputs `t`, `e` of shape `[N, C, h, w]`.
pub fn spatial_mask_graph(tape: &mut Tape, t: Var, e: Var) -> Var {
    let tv = tape.value(t).view().into_dimensionality::<Ix4>().expect("[N, C, h, w]").to_owned();
    let ev = tape.value(e).view().into_dimensionality::<Ix4>().expect("[N, C, h, w]").to_owned();
    assert_eq!(tv.dim(), ev.dim(), "spatial_mask_graph: shapes differ");
    let (n, c, h, w) = tv.dim();

    // Per pixel: dot, |t|^2, |e|^2.
    let mut dot = Array3::<f64>::zeros((n, h, w));
    let mut tt = Array3::<f64>::zeros((n, h, w));
    let mut ee = Array3::<f64>::zeros((n, h, w));
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (a, b) = (tv[[i, ch, y, x]], ev[[i, ch, y, x]]);
                    dot[[i, y, x]] += a * b;
                    tt[[i, y, x]] += a * a;
                    ee[[i, y, x]] += b * b;
                }
            }
        }
    }
    let norm = Array3::from_shape_fn((n, h, w), |ix| (tt[ix] * ee[ix]).sqrt());
    let cos = Array3::from_shape_fn((n, h, w), |ix| if norm[ix] > 0.0 { (dot[ix] / norm[ix]).clamp(-1.0, 1.0) } else { 0.0 });
    let value = cos.mapv(|c| 0.5 - 0.5 * c).into_dyn();

    tape.custom(&[t, e], value, move |up, needs| {
        let up = up.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        // d cos / d t = e / (|t||e|) - cos t / |t|^2, and symmetrically for e.
        let grad = |own: &Array4<f64>, other: &Array4<f64>, own_sq: &Array3<f64>| {
            Array4::from_shape_fn((n, c, h, w), |(i, ch, y, x)| {
                let nrm = norm[[i, y, x]];
                if nrm == 0.0 {
                    return 0.0;
                }
                let dcos = other[[i, ch, y, x]] / nrm - cos[[i, y, x]] * own[[i, ch, y, x]] / own_sq[[i, y, x]];
                -0.5 * up[[i, y, x]] * dcos
            })
            .into_dyn()
        };
        vec![
            needs[0].then(|| grad(&tv, &ev, &tt)),
            needs[1].then(|| grad(&ev, &tv, &ee)),
        ]
    })
}
