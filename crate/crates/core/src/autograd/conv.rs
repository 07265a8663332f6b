use ndarray::{Array2, Array4, Ix4, IxDyn};

use super::{Tape, Var};

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Lays one sample out as a `[C*kh*kw, Ho*Wo]` patch matrix.
fn im2col(x: &[f64], g: Geometry) -> Array2<f64> {
    let rows = g.c * g.kh * g.kw;
    let cols = g.ho * g.wo;
    let mut out = vec![0.0; rows * cols];
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.w as isize {
                            dst[oy * g.wo + ox] = src_row[xx as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((rows, cols), out).unwrap()
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im(cols: &Array2<f64>, g: Geometry, dx: &mut [f64]) {
    let ncols = g.ho * g.wo;
    let cols = cols.as_standard_layout();
    let data = cols.as_slice().unwrap();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &data[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.w as isize {
                            plane[y as usize * g.w + xx as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// 2-D cross-correlation of `x [N, C, H, W]` with `w [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("conv2d: x must be NCHW");
        let wv = self.value(w).view().into_dimensionality::<Ix4>().expect("conv2d: w must be OCkk");
        let (n, c, h, wd) = xv.dim();
        let (o, wc, kh, kw) = wv.dim();
        assert_eq!(c, wc, "conv2d: channel mismatch ({c} vs {wc})");
        let g = Geometry {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: conv_output_size(h, kh, stride, pad),
            wo: conv_output_size(wd, kw, stride, pad),
        };
        let xs = xv.as_standard_layout().into_owned();
        let xdata = xs.as_slice().unwrap();
        let w2 = wv
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, c * kh * kw))
            .unwrap();
        let bias = b.map(|b| self.value(b).iter().copied().collect::<Vec<f64>>());

        let plane = c * h * wd;
        let mut out = Array4::<f64>::zeros((n, o, g.ho, g.wo));
        let mut patches = Vec::with_capacity(n);
        for i in 0..n {
            let cols = im2col(&xdata[i * plane..(i + 1) * plane], g);
            let y = w2.dot(&cols);
            let mut dst = out.index_axis_mut(ndarray::Axis(0), i);
            for (oc, row) in y.outer_iter().enumerate() {
                let bo = bias.as_ref().map_or(0.0, |b| b[oc]);
                let mut d = dst.index_axis_mut(ndarray::Axis(0), oc);
                for (dv, &yv) in d.iter_mut().zip(row.iter()) {
                    *dv = yv + bo;
                }
            }
            patches.push(cols);
        }

        let mut parents = vec![x, w];
        parents.extend(b);
        let wshape = [o, c, kh, kw];
        self.custom(&parents, out.into_dyn(), move |grad, needs| {
            let gy = grad
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((n, o, g.ho * g.wo))
                .unwrap();
            let mut dw = Array2::<f64>::zeros((o, c * kh * kw));
            let mut dx = needs[0].then(|| vec![0.0; n * plane]);
            for (i, cols) in patches.iter().enumerate() {
                let gi = gy.index_axis(ndarray::Axis(0), i);
                if needs[1] {
                    dw += &gi.dot(&cols.t());
                }
                if let Some(dx) = dx.as_mut() {
                    let dcols = w2.t().dot(&gi);
                    col2im(&dcols, g, &mut dx[i * plane..(i + 1) * plane]);
                }
            }
            let mut res = vec![
                dx.map(|d| ndarray::ArrayD::from_shape_vec(IxDyn(&[n, c, h, wd]), d).unwrap()),
                needs[1].then(|| dw.into_shape_with_order(IxDyn(&wshape)).unwrap()),
            ];
            if needs.len() > 2 {
                res.push(needs[2].then(|| {
                    gy.sum_axis(ndarray::Axis(2)).sum_axis(ndarray::Axis(0)).into_dyn()
                }));
            }
            res
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::max_relative_error;
    use super::super::Tensor;
    use super::*;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct seven-loop convolution.
    fn naive(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = ArrayD::zeros(IxDyn(&[n, o, ho, wo]));
        for i in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[[oc]];
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let y = (oy * stride + ky) as isize - pad as isize;
                                    let xx = (ox * stride + kx) as isize - pad as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                        acc += x[[i, ic, y as usize, xx as usize]] * w[[oc, ic, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[i, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (4, 0, 4), (2, 0, 1)] {
            let x = random(&[2, 3, 9, 8], &mut rng);
            let w = random(&[5, 3, k, k], &mut rng);
            let b = random(&[5], &mut rng);
            let mut tape = Tape::inference();
            let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
            let y = tape.conv2d(xv, wv, Some(bv), stride, pad);
            let expected = naive(&x, &w, &b, stride, pad);
            let diff = (tape.value(y) - &expected).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(diff < 1e-12, "stride {stride} pad {pad}: {diff}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inputs = vec![
            random(&[2, 2, 5, 5], &mut rng),
            random(&[3, 2, 3, 3], &mut rng),
            random(&[3], &mut rng),
            random(&[2, 3, 3, 3], &mut rng),
        ];
        let err = max_relative_error(
            &inputs,
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1);
                let p = t.mul(y, v[3]);
                t.sum(p)
            },
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }
}
