use super::{Result, Scalar, Tensor, TensorError};

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased variance (divisor = element count).
    pub var: Vec<F>,
    pub count: usize,
}

fn affine_check<F: Scalar>(
    op: &'static str,
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    ch: usize,
) -> Result<()> {
    for p in [gamma, beta] {
        if p.shape() != [ch] {
            return Err(TensorError::ShapeMismatch { op, lhs: x.shape().to_vec(), rhs: p.shape().to_vec() });
        }
    }
    Ok(())
}

/// Element layout of an `(n, c, inner)` tensor normalized per channel.
struct NormLayout {
    n: usize,
    c: usize,
    inner: usize,
}

impl NormLayout {
    fn group_members(&self, ch: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).flat_map(move |s| {
            let base = (s * self.c + ch) * self.inner;
            base..base + self.inner
        })
    }

    fn count(&self) -> usize {
        self.n * self.inner
    }
}

impl<F: Scalar> Tensor<F> {
    /// Training-mode batch normalization of `(n, c, h, w)` using batch statistics.
    pub fn batch_norm_train(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: F) -> Result<(Tensor<F>, BatchStats<F>)> {
        if self.rank() != 4 {
            return Err(TensorError::InvalidShape {
                op: "batch_norm",
                shape: self.shape().to_vec(),
                reason: "expected (n, c, h, w)".into(),
            });
        }
        let (n, c) = (self.shape()[0], self.shape()[1]);
        affine_check("batch_norm", self, gamma, beta, c)?;
        let layout = NormLayout { n, c, inner: self.shape()[2] * self.shape()[3] };
        let m = layout.count();
        if m == 0 {
            return Err(TensorError::InvalidShape {
                op: "batch_norm",
                shape: self.shape().to_vec(),
                reason: "no elements per channel".into(),
            });
        }
        let mf = F::lit(m as f64);
        let x = self.data();
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for ch in 0..c {
            let mu = layout.group_members(ch).map(|i| x[i]).sum::<F>() / mf;
            let v = layout.group_members(ch).map(|i| (x[i] - mu) * (x[i] - mu)).sum::<F>() / mf;
            mean[ch] = mu;
            var[ch] = v;
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![F::zero(); x.len()];
        let mut out = vec![F::zero(); x.len()];
        let (gd, bd) = (gamma.data_arc(), beta.data_arc());
        for ch in 0..c {
            for i in layout.group_members(ch) {
                xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                out[i] = xhat[i] * gd[ch] + bd[ch];
            }
        }
        let stats = BatchStats { mean, var, count: m };
        let y = Tensor::from_op("batch_norm", self.shape().to_vec(), out, &[self, gamma, beta], move |g, needs| {
            let mut gx = needs[0].then(|| vec![F::zero(); g.len()]);
            let mut gg = vec![F::zero(); c];
            let mut gb = vec![F::zero(); c];
            for ch in 0..c {
                let mut sum_dy = F::zero();
                let mut sum_dy_xhat = F::zero();
                for i in layout.group_members(ch) {
                    sum_dy = sum_dy + g[i];
                    sum_dy_xhat = sum_dy_xhat + g[i] * xhat[i];
                }
                gg[ch] = sum_dy_xhat;
                gb[ch] = sum_dy;
                if let Some(gx) = gx.as_mut() {
                    let k = gd[ch] * inv_std[ch] / mf;
                    for i in layout.group_members(ch) {
                        gx[i] = k * (mf * g[i] - sum_dy - xhat[i] * sum_dy_xhat);
                    }
                }
            }
            vec![gx, needs[1].then_some(gg), needs[2].then_some(gb)]
        })?;
        Ok((y, stats))
    }

    /// Evaluation-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
        mean: &[F],
        var: &[F],
        eps: F,
    ) -> Result<Tensor<F>> {
        if self.rank() != 4 {
            return Err(TensorError::InvalidShape {
                op: "batch_norm",
                shape: self.shape().to_vec(),
                reason: "expected (n, c, h, w)".into(),
            });
        }
        let (n, c) = (self.shape()[0], self.shape()[1]);
        affine_check("batch_norm", self, gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: self.shape().to_vec(),
                rhs: vec![mean.len()],
            });
        }
        let layout = NormLayout { n, c, inner: self.shape()[2] * self.shape()[3] };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let x = self.data_arc();
        let (gd, bd) = (gamma.data_arc(), beta.data_arc());
        let mut out = vec![F::zero(); x.len()];
        for ch in 0..c {
            for i in layout.group_members(ch) {
                out[i] = (x[i] - mean[ch]) * inv_std[ch] * gd[ch] + bd[ch];
            }
        }
        Tensor::from_op("batch_norm_eval", self.shape().to_vec(), out, &[self, gamma, beta], move |g, needs| {
            let mut gx = needs[0].then(|| vec![F::zero(); g.len()]);
            let mut gg = vec![F::zero(); c];
            let mut gb = vec![F::zero(); c];
            for ch in 0..c {
                for i in layout.group_members(ch) {
                    let xhat = (x[i] - mean[ch]) * inv_std[ch];
                    gg[ch] = gg[ch] + g[i] * xhat;
                    gb[ch] = gb[ch] + g[i];
                    if let Some(gx) = gx.as_mut() {
                        gx[i] = g[i] * gd[ch] * inv_std[ch];
                    }
                }
            }
            vec![gx, needs[1].then_some(gg), needs[2].then_some(gb)]
        })
    }

    /// Layer normalization over the last axis with per-feature affine.
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
        let d = *self.shape().last().ok_or_else(|| TensorError::InvalidShape {
            op: "layer_norm",
            shape: vec![],
            reason: "rank 0".into(),
        })?;
        affine_check("layer_norm", self, gamma, beta, d)?;
        let rows = self.numel() / d.max(1);
        let df = F::lit(d as f64);
        let x = self.data();
        let mut xhat = vec![F::zero(); x.len()];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); x.len()];
        let (gd, bd) = (gamma.data_arc(), beta.data_arc());
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / df;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mu) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gd[j] + bd[j];
            }
        }
        Tensor::from_op("layer_norm", self.shape().to_vec(), out, &[self, gamma, beta], move |g, needs| {
            let mut gx = needs[0].then(|| vec![F::zero(); g.len()]);
            let mut gg = vec![F::zero(); d];
            let mut gb = vec![F::zero(); d];
            for (r, &is) in inv_std.iter().enumerate() {
                let mut sum_dxh = F::zero();
                let mut sum_dxh_xh = F::zero();
                for j in 0..d {
                    let i = r * d + j;
                    gg[j] = gg[j] + g[i] * xhat[i];
                    gb[j] = gb[j] + g[i];
                    let dxh = g[i] * gd[j];
                    sum_dxh = sum_dxh + dxh;
                    sum_dxh_xh = sum_dxh_xh + dxh * xhat[i];
                }
                if let Some(gx) = gx.as_mut() {
                    let k = is / df;
                    for j in 0..d {
                        let i = r * d + j;
                        gx[i] = k * (df * g[i] * gd[j] - sum_dxh - xhat[i] * sum_dxh_xh);
                    }
                }
            }
            vec![gx, needs[1].then_some(gg), needs[2].then_some(gb)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_norm_train_standardizes_channels() {
        let x = Tensor::<f64>::from_vec(&[2, 2, 1, 2], vec![1., 2., 10., 20., 3., 4., 30., 40.]).unwrap();
        let (y, stats) = x.batch_norm_train(&Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 0.0).unwrap();
        assert_eq!(stats.mean, vec![2.5, 25.0]);
        assert_eq!(stats.count, 4);
        for ch in 0..2 {
            let vals: Vec<f64> = [0, 1, 4, 5].iter().map(|&i| y.data()[i + ch * 2]).collect();
            let m: f64 = vals.iter().sum::<f64>() / 4.0;
            let v: f64 = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean() {
        let x = Tensor::<f64>::from_vec(&[2, 3], vec![1., 2., 3., -1., 0., 5.]).unwrap();
        let y = x.layer_norm(&Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), 1e-6).unwrap();
        for r in 0..2 {
            let s: f64 = y.data()[r * 3..r * 3 + 3].iter().sum();
            assert!(s.abs() < 1e-9);
        }
    }
}
