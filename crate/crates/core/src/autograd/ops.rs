use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, IxDyn};

use super::{Tape, Tensor, Var};

/// Per-channel statistics observed by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Array1<f64>,
}

fn scalar(v: f64) -> Tensor {
    ArrayD::from_elem(IxDyn(&[]), v)
}

/// View `x` as `[N, C, S]` where `S` is the product of trailing axes.
fn ncs_dims(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected at least [N, C], got {shape:?}");
    let s = shape[2..].iter().product::<usize>();
    (shape[0], shape[1], s)
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.custom(&[a, b], value, |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.custom(&[a, b], value, |g, _| vec![Some(g.clone()), Some(-g)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let value = &av * &bv;
        self.custom(&[a, b], value, move |g, needs| {
            vec![
                needs[0].then(|| g * &bv),
                needs[1].then(|| g * &av),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.custom(&[a], value, move |g, _| vec![Some(g * c)])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.custom(&[a], value, |g, _| vec![Some(g.clone())])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let value = av.mapv(|x| x.max(0.0));
        self.custom(&[a], value, move |g, _| {
            let mut out = g.clone();
            out.zip_mut_with(&av, |d, &x| {
                if x <= 0.0 {
                    *d = 0.0
                }
            });
            vec![Some(out)]
        })
    }

    /// Elementwise `min(hi, max(lo, x))`; the gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let av = self.value(a).clone();
        let value = av.mapv(|x| x.max(lo).min(hi));
        self.custom(&[a], value, move |g, _| {
            let mut out = g.clone();
            out.zip_mut_with(&av, |d, &x| {
                if !(x > lo && x < hi) {
                    *d = 0.0
                }
            });
            vec![Some(out)]
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.value(a).raw_dim();
        let value = scalar(self.value(a).sum());
        self.custom(&[a], value, move |g, _| {
            vec![Some(ArrayD::from_elem(shape.clone(), g.sum()))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old = self.value(a).shape().to_vec();
        let value = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.custom(&[a], value, move |g, _| {
            let g = g
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(&old))
                .unwrap();
            vec![Some(g)]
        })
    }

    /// Treats a value as a constant from here on.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    /// Concatenates along axis 1 (channels).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let ca = self.value(a).shape()[1];
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_channels: incompatible shapes");
        self.custom(&[a, b], value, move |g, _| {
            let ga = g.slice_axis(Axis(1), (0..ca).into()).to_owned();
            let gb = g.slice_axis(Axis(1), (ca..).into()).to_owned();
            vec![Some(ga), Some(gb)]
        })
    }

    /// Multiplies every sample of `x` (`[N, ...]`) by the matching entry of `s` (`[N]`).
    pub fn mul_per_sample(&mut self, x: Var, s: Var) -> Var {
        let xv = self.value(x).clone();
        let sv = self.value(s).clone();
        let n = xv.shape()[0];
        assert_eq!(sv.len(), n, "mul_per_sample: scale length");
        let mut value = xv.clone();
        for (i, mut sample) in value.axis_iter_mut(Axis(0)).enumerate() {
            sample *= sv[[i]];
        }
        self.custom(&[x, s], value, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = g.clone();
                for (i, mut sample) in gx.axis_iter_mut(Axis(0)).enumerate() {
                    sample *= sv[[i]];
                }
                gx
            });
            let gs = needs[1].then(|| {
                let v: Vec<f64> = (0..n)
                    .map(|i| {
                        (&g.index_axis(Axis(0), i) * &xv.index_axis(Axis(0), i)).sum()
                    })
                    .collect();
                Array1::from(v).into_dyn()
            });
            vec![gx, gs]
        })
    }

    /// Column `k` of a `[N, K]` matrix as an `[N]` vector.
    pub fn select_column(&mut self, x: Var, k: usize) -> Var {
        let shape = self.value(x).raw_dim();
        let value = self.value(x).index_axis(Axis(1), k).to_owned();
        self.custom(&[x], value, move |g, _| {
            let mut out = ArrayD::zeros(shape.clone());
            out.index_axis_mut(Axis(1), k).assign(g);
            vec![Some(out)]
        })
    }

    /// Mean over every axis except the first: `[N, ...] -> [N]`.
    pub fn mean_per_sample(&mut self, x: Var) -> Var {
        let shape = self.value(x).raw_dim();
        let n = shape[0];
        let per = (self.value(x).len() / n.max(1)) as f64;
        let value = Array1::from_iter(
            self.value(x)
                .axis_iter(Axis(0))
                .map(|s| s.sum() / per),
        )
        .into_dyn();
        self.custom(&[x], value, move |g, _| {
            let mut out = ArrayD::zeros(shape.clone());
            for (i, mut s) in out.axis_iter_mut(Axis(0)).enumerate() {
                s.fill(g[[i]] / per);
            }
            vec![Some(out)]
        })
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let (n, c, s) = ncs_dims(&shape);
        let xs = self
            .value(x)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, c, s))
            .unwrap();
        let value = xs.sum_axis(Axis(2)).mapv(|v| v / s as f64).into_dyn();
        self.custom(&[x], value, move |g, _| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = ndarray::Array3::<f64>::zeros((n, c, s));
            for i in 0..n {
                for j in 0..c {
                    out.slice_mut(ndarray::s![i, j, ..]).fill(g2[[i, j]] / s as f64);
                }
            }
            vec![Some(out.into_shape_with_order(IxDyn(&shape)).unwrap())]
        })
    }

    /// `x [N, I] * w[O, I]^T + b[O] -> [N, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let wv = self.value(w).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let mut value = xv.dot(&wv.t());
        if let Some(b) = b {
            let bv = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            value += &bv;
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.custom(&parents, value.into_dyn(), move |g, needs| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = vec![
                needs[0].then(|| g2.dot(&wv).into_dyn()),
                needs[1].then(|| g2.t().dot(&xv).into_dyn()),
            ];
            if needs.len() > 2 {
                out.push(needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn()));
            }
            out
        })
    }

    /// Per-channel normalization over all axes but 1, followed by `gamma * x + beta`.
    ///
    /// With `running = None` the batch statistics are used (and returned); with
    /// `Some((mean, var))` the supplied estimates are used as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Array1<f64>, &Array1<f64>)>,
        eps: f64,
    ) -> (Var, Option<BatchStats>) {
        let shape = self.value(x).shape().to_vec();
        let (n, c, s) = ncs_dims(&shape);
        let xs = self
            .value(x)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, c, s))
            .unwrap();
        let gv = self.value(gamma).clone().into_dimensionality::<ndarray::Ix1>().unwrap();
        let bv = self.value(beta).clone().into_dimensionality::<ndarray::Ix1>().unwrap();
        let m = (n * s) as f64;

        let (mean, var, stats) = match running {
            Some((rm, rv)) => (rm.clone(), rv.clone(), None),
            None => {
                let mut mean = Array1::zeros(c);
                let mut var = Array1::zeros(c);
                for j in 0..c {
                    let ch = xs.slice(ndarray::s![.., j, ..]);
                    let mu = ch.sum() / m;
                    let v = ch.fold(0.0, |acc, &x| acc + (x - mu) * (x - mu)) / m;
                    mean[j] = mu;
                    var[j] = v;
                }
                let unbiased = if m > 1.0 { &var * (m / (m - 1.0)) } else { var.clone() };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut xhat = xs.clone();
        for j in 0..c {
            let (mu, is) = (mean[j], inv_std[j]);
            xhat.slice_mut(ndarray::s![.., j, ..]).mapv_inplace(|x| (x - mu) * is);
        }
        let mut y = xhat.clone();
        for j in 0..c {
            let (gj, bj) = (gv[j], bv[j]);
            y.slice_mut(ndarray::s![.., j, ..]).mapv_inplace(|x| gj * x + bj);
        }
        let value = y.into_shape_with_order(IxDyn(&shape)).unwrap();
        let batch_mode = stats.is_some();

        let var_node = self.custom(&[x, gamma, beta], value, move |g, needs| {
            let gs = g
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((n, c, s))
                .unwrap();
            let mut dgamma = Array1::zeros(c);
            let mut dbeta = Array1::zeros(c);
            for j in 0..c {
                let gj = gs.slice(ndarray::s![.., j, ..]);
                let xj = xhat.slice(ndarray::s![.., j, ..]);
                dbeta[j] = gj.sum();
                dgamma[j] = (&gj * &xj).sum();
            }
            let dx = needs[0].then(|| {
                let mut dx = gs.clone();
                for j in 0..c {
                    let scale = gv[j] * inv_std[j];
                    let mut dj = dx.slice_mut(ndarray::s![.., j, ..]);
                    if batch_mode {
                        let mean_g = dbeta[j] / m;
                        let mean_gx = dgamma[j] / m;
                        let xj = xhat.slice(ndarray::s![.., j, ..]);
                        ndarray::Zip::from(&mut dj).and(&xj).for_each(|d, &xh| {
                            *d = scale * (*d - mean_g - xh * mean_gx);
                        });
                    } else {
                        dj.mapv_inplace(|d| d * scale);
                    }
                }
                dx.into_shape_with_order(IxDyn(&shape)).unwrap()
            });
            vec![dx, Some(dgamma.into_dyn()), Some(dbeta.into_dyn())]
        });
        (var_node, stats)
    }

    /// Bilinear resize of `[N, C, H, W]` with half-pixel centers and edge clamping.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let shape = self.value(x).shape().to_vec();
        assert_eq!(shape.len(), 4, "upsample_bilinear expects NCHW");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let uh = interpolation_matrix(h, out_h);
        let uw = interpolation_matrix(w, out_w);
        let xv = self
            .value(x)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * c, h, w))
            .unwrap();
        let mut out = ndarray::Array3::<f64>::zeros((n * c, out_h, out_w));
        for i in 0..n * c {
            let plane = uh.dot(&xv.index_axis(Axis(0), i)).dot(&uw.t());
            out.index_axis_mut(Axis(0), i).assign(&plane);
        }
        let value = out.into_shape_with_order(IxDyn(&[n, c, out_h, out_w])).unwrap();
        self.custom(&[x], value, move |g, _| {
            let gv = g
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((n * c, out_h, out_w))
                .unwrap();
            let mut dx = ndarray::Array3::<f64>::zeros((n * c, h, w));
            for i in 0..n * c {
                let plane = uh.t().dot(&gv.index_axis(Axis(0), i)).dot(&uw);
                dx.index_axis_mut(Axis(0), i).assign(&plane);
            }
            vec![Some(dx.into_shape_with_order(IxDyn(&shape)).unwrap())]
        })
    }
}

/// Row `o` holds the weights that output coordinate `o` takes from each input
/// coordinate.
pub(crate) fn interpolation_matrix(input: usize, output: usize) -> Array2<f64> {
    let mut m = Array2::zeros((output, input));
    let ratio = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[[o, i0]] += 1.0 - frac;
        m[[o, i1]] += frac;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::max_relative_error;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn batch_norm_train_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![
            random(&[3, 2, 2, 2], &mut rng),
            random(&[2], &mut rng),
            random(&[2], &mut rng),
            random(&[3, 2, 2, 2], &mut rng),
        ];
        let err = max_relative_error(
            &inputs,
            |t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], None, 1e-5);
                let p = t.mul(y, v[3]);
                t.sum(p)
            },
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn batch_norm_eval_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rm = Array1::from(vec![0.1, -0.2]);
        let rv = Array1::from(vec![0.5, 2.0]);
        let inputs = vec![
            random(&[2, 2, 3], &mut rng),
            random(&[2], &mut rng),
            random(&[2], &mut rng),
            random(&[2, 2, 3], &mut rng),
        ];
        let err = max_relative_error(
            &inputs,
            |t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], Some((&rm, &rv)), 1e-5);
                let p = t.mul(y, v[3]);
                t.sum(p)
            },
            1e-5,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_pool_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![
            random(&[2, 3, 2, 3], &mut rng),
            random(&[4, 3], &mut rng),
            random(&[4], &mut rng),
            random(&[2, 3, 5, 7], &mut rng),
        ];
        let err = max_relative_error(
            &inputs,
            |t, v| {
                let up = t.upsample_bilinear(v[0], 5, 7);
                let p = t.mul(up, v[3]);
                let pooled = t.global_avg_pool(p);
                let y = t.linear(pooled, v[1], Some(v[2]));
                let sq = t.mul(y, y);
                t.sum(sq)
            },
            1e-6,
        );
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn per_sample_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![
            random(&[3, 2, 2], &mut rng),
            random(&[3, 4], &mut rng),
            random(&[3, 1, 2], &mut rng),
        ];
        let err = max_relative_error(
            &inputs,
            |t, v| {
                let col = t.select_column(v[1], 2);
                let scaled = t.mul_per_sample(v[0], col);
                let c = t.concat_channels(scaled, v[2]);
                let m = t.mean_per_sample(c);
                let sq = t.mul(m, m);
                t.sum(sq)
            },
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn interpolation_rows_sum_to_one() {
        for (i, o) in [(8, 64), (4, 5), (3, 3), (1, 4)] {
            let m = interpolation_matrix(i, o);
            for row in m.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clamp_blocks_gradient_outside() {
        let mut tape = Tape::new();
        let a = tape.leaf(ndarray::arr1(&[-1.0, 0.5, 2.0]).into_dyn());
        let c = tape.clamp(a, 0.0, 1.0);
        let s = tape.sum(c);
        let g = tape.backward(s);
        assert_eq!(g.get(a).unwrap().as_slice().unwrap(), &[0.0, 1.0, 0.0]);
    }
}
