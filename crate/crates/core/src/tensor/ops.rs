use super::{numel, Result, Scalar, Tensor, TensorError};

// ---------------------------------------------------------------------------
// dense kernels

/// c[m,n] += a[m,k] * b[k,n]
pub(crate) fn gemm_nn<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T
pub(crate) fn gemm_nt<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// c[m,n] += a[k,m]^T * b[k,n]
pub(crate) fn gemm_tn<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == F::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

fn mismatch<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    Ok(())
}

/// (outer, extent, inner) decomposition around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

impl<F: Scalar> Tensor<F> {
    // -----------------------------------------------------------------------
    // elementwise binary

    fn binary(&self, other: &Tensor<F>, kind: Bin) -> Result<Tensor<F>> {
        let op = match kind {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
            Bin::Div => "div",
        };
        let (a_scalar, b_scalar) = if self.shape() == other.shape() {
            (false, false)
        } else if other.numel() == 1 {
            (false, true)
        } else if self.numel() == 1 {
            (true, false)
        } else {
            return Err(mismatch(op, self, other));
        };
        let shape = if a_scalar { other.shape().to_vec() } else { self.shape().to_vec() };
        let n = numel(&shape);
        let ad = self.data_arc();
        let bd = other.data_arc();
        let at = |i: usize| if a_scalar { ad[0] } else { ad[i] };
        let bt = |i: usize| if b_scalar { bd[0] } else { bd[i] };
        let f = |x: F, y: F| match kind {
            Bin::Add => x + y,
            Bin::Sub => x - y,
            Bin::Mul => x * y,
            Bin::Div => x / y,
        };
        let data: Vec<F> = (0..n).map(|i| f(at(i), bt(i))).collect();
        Tensor::from_op(op, shape, data, &[self, other], move |g, needs| {
            let at = |i: usize| if a_scalar { ad[0] } else { ad[i] };
            let bt = |i: usize| if b_scalar { bd[0] } else { bd[i] };
            let reduce = |full: Vec<F>, scalar: bool| -> Vec<F> {
                if scalar {
                    vec![full.iter().copied().sum()]
                } else {
                    full
                }
            };
            let ga = needs[0].then(|| {
                let full: Vec<F> = match kind {
                    Bin::Add | Bin::Sub => g.to_vec(),
                    Bin::Mul => g.iter().enumerate().map(|(i, &gi)| gi * bt(i)).collect(),
                    Bin::Div => g.iter().enumerate().map(|(i, &gi)| gi / bt(i)).collect(),
                };
                reduce(full, a_scalar)
            });
            let gb = needs[1].then(|| {
                let full: Vec<F> = match kind {
                    Bin::Add => g.to_vec(),
                    Bin::Sub => g.iter().map(|&gi| -gi).collect(),
                    Bin::Mul => g.iter().enumerate().map(|(i, &gi)| gi * at(i)).collect(),
                    Bin::Div => g.iter().enumerate().map(|(i, &gi)| -gi * at(i) / (bt(i) * bt(i))).collect(),
                };
                reduce(full, b_scalar)
            });
            vec![ga, gb]
        })
    }

    /// Elementwise sum. Shapes must match, or one side must hold a single value.
    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, Bin::Add)
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, Bin::Sub)
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, Bin::Mul)
    }

    pub fn div(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, Bin::Div)
    }

    /// Adds `bias` to every trailing slice: `bias.shape()` must equal the last
    /// `bias.rank()` extents of `self`.
    pub fn add_trailing(&self, bias: &Tensor<F>) -> Result<Tensor<F>> {
        let r = bias.rank();
        if r > self.rank() || self.shape()[self.rank() - r..] != *bias.shape() {
            return Err(mismatch("add_trailing", self, bias));
        }
        let inner = bias.numel();
        let bd = bias.data_arc();
        let data: Vec<F> = self.data().iter().enumerate().map(|(i, &x)| x + bd[i % inner]).collect();
        Tensor::from_op("add_trailing", self.shape().to_vec(), data, &[self, bias], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![F::zero(); inner];
                for (i, &gi) in g.iter().enumerate() {
                    acc[i % inner] = acc[i % inner] + gi;
                }
                acc
            });
            vec![needs[0].then(|| g.to_vec()), gb]
        })
    }

    // -----------------------------------------------------------------------
    // elementwise unary

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(F) -> F,
        df: impl Fn(F, F) -> F + Send + Sync + 'static,
    ) -> Result<Tensor<F>> {
        let data: Vec<F> = self.data().iter().map(|&x| f(x)).collect();
        let xs = self.data_arc();
        let ys = std::sync::Arc::new(data.clone());
        Tensor::from_op(op, self.shape().to_vec(), data, &[self], move |g, _| {
            vec![Some(g.iter().zip(xs.iter().zip(ys.iter())).map(|(&gi, (&x, &y))| gi * df(x, y)).collect())]
        })
    }

    pub fn scale(&self, c: F) -> Result<Tensor<F>> {
        self.unary("scale", |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: F) -> Result<Tensor<F>> {
        self.unary("add_scalar", |x| x + c, |_, _| F::one())
    }

    pub fn neg(&self) -> Result<Tensor<F>> {
        self.scale(-F::one())
    }

    pub fn square(&self) -> Result<Tensor<F>> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn exp(&self) -> Result<Tensor<F>> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Result<Tensor<F>> {
        self.unary("ln", |x| x.ln(), |x, _| F::one() / x)
    }

    pub fn relu(&self) -> Result<Tensor<F>> {
        self.unary(
            "relu",
            |x| if x > F::zero() { x } else { F::zero() },
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor<F>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (F::one() - y))
    }

    pub fn tanh(&self) -> Result<Tensor<F>> {
        self.unary("tanh", |x| x.tanh(), |_, y| F::one() - y * y)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&self) -> Result<Tensor<F>> {
        self.unary(
            "gelu",
            |x| {
                let v = x.as_f64();
                F::lit(0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
            },
            |x, _| {
                let v = x.as_f64();
                let cdf = 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
                F::lit(cdf + v * pdf)
            },
        )
    }

    // -----------------------------------------------------------------------
    // reductions

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Result<Tensor<F>> {
        let s: F = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![1], vec![s], &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self) -> Result<Tensor<F>> {
        let n = self.numel();
        if n == 0 {
            return Err(TensorError::InvalidShape {
                op: "mean",
                shape: self.shape().to_vec(),
                reason: "empty tensor".into(),
            });
        }
        let inv = F::one() / F::lit(n as f64);
        let s: F = self.data().iter().copied().sum::<F>() * inv;
        Tensor::from_op("mean", vec![1], vec![s], &[self], move |g, _| vec![Some(vec![g[0] * inv; n])])
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<F>> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (outer, ext, inner) = split_at_axis(self.shape(), axis);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let x = self.data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..ext {
                let base = (o * ext + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + x[base + i];
                }
            }
        }
        Tensor::from_op("sum_axis", shape, out, &[self], move |g, _| {
            let mut gx = vec![F::zero(); outer * ext * inner];
            for o in 0..outer {
                for a in 0..ext {
                    let base = (o * ext + a) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        })
    }

    // -----------------------------------------------------------------------
    // shape manipulation

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch { op: "reshape", lhs: self.shape().to_vec(), rhs: shape.to_vec() });
        }
        Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), &[self], |g, _| vec![Some(g.to_vec())])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<F>> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape: self.shape().to_vec(),
                reason: format!("bad axis order {axes:?}"),
            });
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let mut in_strides = vec![1usize; r];
        for i in (0..r.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        // stride in the input for each output axis
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let map = permutation_index(&out_shape, &strides);
        let x = self.data();
        let data: Vec<F> = map.iter().map(|&src| x[src]).collect();
        Tensor::from_op("permute", out_shape, data, &[self], move |g, _| {
            let mut gx = vec![F::zero(); g.len()];
            for (o, &src) in map.iter().enumerate() {
                gx[src] = g[o];
            }
            vec![Some(gx)]
        })
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<F>> {
        let r = self.rank();
        if r < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose_last",
                shape: self.shape().to_vec(),
                reason: "rank < 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>> {
        let first = parts.first().ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        check_axis("concat", first.shape(), axis)?;
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", first, p));
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let exts: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = exts.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&exts) {
                data.extend_from_slice(&p.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        Tensor::from_op("concat", shape, data, parts, move |g, needs| {
            let mut out: Vec<Option<Vec<F>>> =
                needs.iter().zip(&exts).map(|(&n, &e)| n.then(|| Vec::with_capacity(outer * e * inner))).collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (slot, &e) in out.iter_mut().zip(&exts) {
                    let len = e * inner;
                    if let Some(v) = slot {
                        v.extend_from_slice(&g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            out
        })
    }

    // -----------------------------------------------------------------------
    // linear algebra

    /// Batched matrix product over the last two axes; leading axes must match.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || ra != rb || self.shape()[..ra - 2] != other.shape()[..rb - 2] {
            return Err(mismatch("matmul", self, other));
        }
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (k2, n) = (other.shape()[rb - 2], other.shape()[rb - 1]);
        if k != k2 {
            return Err(mismatch("matmul", self, other));
        }
        let batch = numel(&self.shape()[..ra - 2]);
        let mut shape = self.shape()[..ra - 2].to_vec();
        shape.extend([m, n]);
        let a = self.data_arc();
        let b = other.data_arc();
        let mut c = vec![F::zero(); batch * m * n];
        for bi in 0..batch {
            gemm_nn(
                &a[bi * m * k..(bi + 1) * m * k],
                &b[bi * k * n..(bi + 1) * k * n],
                &mut c[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Tensor::from_op("matmul", shape, c, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![F::zero(); batch * m * k];
                for bi in 0..batch {
                    gemm_nt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &b[bi * k * n..(bi + 1) * k * n],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![F::zero(); batch * k * n];
                for bi in 0..batch {
                    gemm_tn(
                        &a[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[bi * k * n..(bi + 1) * k * n],
                        k,
                        m,
                        n,
                    );
                }
                gb
            });
            vec![ga, gb]
        })
    }

    /// Batched `self @ other^T` over the last two axes without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || ra != rb || self.shape()[..ra - 2] != other.shape()[..rb - 2] {
            return Err(mismatch("matmul_t", self, other));
        }
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (n, k2) = (other.shape()[rb - 2], other.shape()[rb - 1]);
        if k != k2 {
            return Err(mismatch("matmul_t", self, other));
        }
        let batch = numel(&self.shape()[..ra - 2]);
        let mut shape = self.shape()[..ra - 2].to_vec();
        shape.extend([m, n]);
        let a = self.data_arc();
        let b = other.data_arc();
        let mut c = vec![F::zero(); batch * m * n];
        for bi in 0..batch {
            gemm_nt(
                &a[bi * m * k..(bi + 1) * m * k],
                &b[bi * n * k..(bi + 1) * n * k],
                &mut c[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Tensor::from_op("matmul_t", shape, c, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![F::zero(); batch * m * k];
                for bi in 0..batch {
                    gemm_nn(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &b[bi * n * k..(bi + 1) * n * k],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![F::zero(); batch * n * k];
                for bi in 0..batch {
                    gemm_tn(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &a[bi * m * k..(bi + 1) * m * k],
                        &mut gb[bi * n * k..(bi + 1) * n * k],
                        n,
                        m,
                        k,
                    );
                }
                gb
            });
            vec![ga, gb]
        })
    }

    /// Affine map over the last axis: `x[.., in] @ weight[in, out] + bias[out]`.
    pub fn linear(&self, weight: &Tensor<F>, bias: Option<&Tensor<F>>) -> Result<Tensor<F>> {
        if weight.rank() != 2 || self.rank() == 0 || *self.shape().last().unwrap() != weight.shape()[0] {
            return Err(mismatch("linear", self, weight));
        }
        let (k, n) = (weight.shape()[0], weight.shape()[1]);
        if let Some(b) = bias {
            if b.shape() != [n] {
                return Err(mismatch("linear", weight, b));
            }
        }
        let rows = self.numel() / k;
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let x = self.data_arc();
        let w = weight.data_arc();
        let mut out = vec![F::zero(); rows * n];
        if let Some(b) = bias {
            for r in 0..rows {
                out[r * n..(r + 1) * n].copy_from_slice(b.data());
            }
        }
        gemm_nn(&x, &w, &mut out, rows, k, n);
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Tensor::from_op("linear", shape, out, &parents, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = vec![F::zero(); rows * k];
                gemm_nt(g, &w, &mut gx, rows, n, k);
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![F::zero(); k * n];
                gemm_tn(&x, g, &mut gw, k, rows, n);
                gw
            });
            let mut res = vec![gx, gw];
            if needs.len() > 2 {
                res.push(needs[2].then(|| {
                    let mut gb = vec![F::zero(); n];
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] = gb[j] + g[r * n + j];
                        }
                    }
                    gb
                }));
            }
            res
        })
    }

    // -----------------------------------------------------------------------
    // softmax

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<F>> {
        check_axis("softmax", self.shape(), axis)?;
        let (outer, ext, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![F::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * ext + a) * inner + i;
                let mut mx = F::neg_infinity();
                for a in 0..ext {
                    mx = mx.max(x[idx(a)]);
                }
                let mut total = F::zero();
                for a in 0..ext {
                    let e = (x[idx(a)] - mx).exp();
                    y[idx(a)] = e;
                    total = total + e;
                }
                let inv = F::one() / total;
                for a in 0..ext {
                    y[idx(a)] = y[idx(a)] * inv;
                }
            }
        }
        let ys = std::sync::Arc::new(y.clone());
        Tensor::from_op("softmax", self.shape().to_vec(), y, &[self], move |g, _| {
            let mut gx = vec![F::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * ext + a) * inner + i;
                    let mut dot = F::zero();
                    for a in 0..ext {
                        dot = dot + g[idx(a)] * ys[idx(a)];
                    }
                    for a in 0..ext {
                        gx[idx(a)] = ys[idx(a)] * (g[idx(a)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Source offset for every output element of a strided view.
fn permutation_index(out_shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    let r = out_shape.len();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    map
}
