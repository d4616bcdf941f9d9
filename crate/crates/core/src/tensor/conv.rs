use super::ops::{gemm_nn, gemm_nt, gemm_tn};
use super::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one sample `(c, h, w)` into columns `(c*kh*kw, out_h*out_w)`.
fn im2col<F: Scalar>(x: &[F], g: &ConvGeometry, cols: &mut [F]) {
    let p = g.positions();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        dst[oy * g.out_w + ox] =
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                                x[(c * g.height + iy as usize) * g.width + ix as usize]
                            } else {
                                F::zero()
                            };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into `(c, h, w)`.
fn col2im<F: Scalar>(cols: &[F], g: &ConvGeometry, x: &mut [F]) {
    let p = g.positions();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        let idx = (c * g.height + iy as usize) * g.width + ix as usize;
                        x[idx] = x[idx] + src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

impl<F: Scalar> Tensor<F> {
    /// 2-D cross-correlation of `(n, c, h, w)` input with `(o, c, kh, kw)` weights.
    pub fn conv2d(
        &self,
        weight: &Tensor<F>,
        bias: Option<&Tensor<F>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<F>> {
        let mismatch =
            || TensorError::ShapeMismatch { op: "conv2d", lhs: self.shape().to_vec(), rhs: weight.shape().to_vec() };
        if self.rank() != 4 || weight.rank() != 4 || self.shape()[1] != weight.shape()[1] {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(TensorError::Contract("conv2d: stride must be positive".into()));
        }
        let (n, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (o, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: weight.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let geo = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let (pl, p) = (geo.patch_len(), geo.positions());
        let x = self.data_arc();
        let wt = weight.data_arc();
        let in_len = c * h * w;
        let mut out = vec![F::zero(); n * o * p];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![F::zero(); pl * p] };
        for s in 0..n {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let dst = &mut out[s * o * p..(s + 1) * o * p];
            if let Some(b) = bias {
                for (oc, &bv) in b.data().iter().enumerate() {
                    dst[oc * p..(oc + 1) * p].iter_mut().for_each(|v| *v = bv);
                }
            }
            if geo.is_pointwise() {
                gemm_nn(&wt, xs, dst, o, pl, p);
            } else {
                im2col(xs, &geo, &mut cols);
                gemm_nn(&wt, &cols, dst, o, pl, p);
            }
        }
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Tensor::from_op("conv2d", vec![n, o, geo.out_h, geo.out_w], out, &parents, move |g, needs| {
            let mut gx = needs[0].then(|| vec![F::zero(); n * in_len]);
            let mut gw = needs[1].then(|| vec![F::zero(); o * pl]);
            let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![F::zero(); pl * p] };
            let mut dcols = if geo.is_pointwise() { Vec::new() } else { vec![F::zero(); pl * p] };
            for s in 0..n {
                let gs = &g[s * o * p..(s + 1) * o * p];
                let xs = &x[s * in_len..(s + 1) * in_len];
                if let Some(gw) = gw.as_mut() {
                    if geo.is_pointwise() {
                        gemm_nt(gs, xs, gw, o, p, pl);
                    } else {
                        im2col(xs, &geo, &mut cols);
                        gemm_nt(gs, &cols, gw, o, p, pl);
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    let gxs = &mut gx[s * in_len..(s + 1) * in_len];
                    if geo.is_pointwise() {
                        gemm_tn(&wt, gs, gxs, pl, o, p);
                    } else {
                        dcols.iter_mut().for_each(|v| *v = F::zero());
                        gemm_tn(&wt, gs, &mut dcols, pl, o, p);
                        col2im(&dcols, &geo, gxs);
                    }
                }
            }
            let mut res = vec![gx, gw];
            if needs.len() > 2 {
                res.push(needs[2].then(|| {
                    let mut gb = vec![F::zero(); o];
                    for s in 0..n {
                        for (oc, acc) in gb.iter_mut().enumerate() {
                            let base = (s * o + oc) * p;
                            *acc = *acc + g[base..base + p].iter().copied().sum::<F>();
                        }
                    }
                    gb
                }));
            }
            res
        })
    }

    /// Bilinear ×2 upsampling of `(n, c, h, w)` with corner-aligned sampling.
    pub fn upsample_bilinear2x(&self) -> Result<Tensor<F>> {
        if self.rank() != 4 {
            return Err(TensorError::InvalidShape {
                op: "upsample_bilinear2x",
                shape: self.shape().to_vec(),
                reason: "expected (n, c, h, w)".into(),
            });
        }
        let (n, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let ys = axis_taps::<F>(h, oh);
        let xs = axis_taps::<F>(w, ow);
        let x = self.data();
        let mut out = vec![F::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (F::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (F::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * ow + ox] = top * (F::one() - fy) + bot * fy;
                }
            }
        }
        Tensor::from_op("upsample_bilinear2x", vec![n, c, oh, ow], out, &[self], move |g, _| {
            let mut gx = vec![F::zero(); n * c * h * w];
            for plane in 0..n * c {
                let gs = &g[plane * oh * ow..(plane + 1) * oh * ow];
                let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let gv = gs[oy * ow + ox];
                        let top = gv * (F::one() - fy);
                        let bot = gv * fy;
                        dst[y0 * w + x0] = dst[y0 * w + x0] + top * (F::one() - fx);
                        dst[y0 * w + x1] = dst[y0 * w + x1] + top * fx;
                        dst[y1 * w + x0] = dst[y1 * w + x0] + bot * (F::one() - fx);
                        dst[y1 * w + x1] = dst[y1 * w + x1] + bot * fx;
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}

/// For each output coordinate: (lower source index, upper source index, upper weight).
fn axis_taps<F: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, F)> {
    (0..output)
        .map(|o| {
            if input == 1 || output == 1 {
                return (0, 0, F::zero());
            }
            let pos = o as f64 * (input - 1) as f64 / (output - 1) as f64;
            let lo = (pos.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, F::lit(pos - lo as f64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_kernel_gives_zero_output() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 3, 3], (0..18).map(|v| v as f64 - 4.0).collect()).unwrap();
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let y = x.conv2d(&w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stride_two_halves_extent() {
        let x = Tensor::<f32>::zeros(&[2, 3, 8, 8]);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        assert_eq!(x.conv2d(&w, None, 2, 1).unwrap().shape(), &[2, 4, 4, 4]);
    }

    #[test]
    fn pointwise_conv_is_channel_mix() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let w = Tensor::from_vec(&[1, 2, 1, 1], vec![10., 1.]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let y = x.conv2d(&w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.data(), &[13.5, 24.5]);
    }

    #[test]
    fn upsample_preserves_constants_and_corners() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let y = x.upsample_bilinear2x().unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        let d = y.data();
        assert_eq!((d[0], d[3], d[12], d[15]), (1.0, 2.0, 3.0, 4.0));
        let c = Tensor::<f64>::full(&[1, 1, 3, 3], 7.0).upsample_bilinear2x().unwrap();
        assert!(c.data().iter().all(|&v| (v - 7.0).abs() < 1e-12));
    }
}
