//! Reverse-mode gradients checked against central finite differences.

use super::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that gradients which
    /// are zero analytically are judged on absolute error at this scale.
    pub denom_floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { step: 1e-5, tolerance: 1e-5, denom_floor: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub entries: Vec<GradEntry>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Entries whose relative error exceeds the tolerance.
    pub fn failures(&self) -> impl Iterator<Item = &GradEntry> {
        self.entries.iter().filter(move |e| e.rel_error > self.tolerance)
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn merge(&mut self, other: GradcheckReport) {
        self.entries.extend(other.entries);
    }
}

pub fn relative_error(analytic: f64, numeric: f64, denom_floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(denom_floor);
    (analytic - numeric).abs() / denom
}

/// Central differences `(f(x+h e_i) - f(x-h e_i)) / 2h` at the requested indices.
pub fn central_differences<F: Scalar>(
    values: &[F],
    indices: &[usize],
    step: f64,
    mut eval: impl FnMut(&[F]) -> Result<F>,
) -> Result<Vec<f64>> {
    if step <= 0.0 {
        return Err(TensorError::Contract("finite-difference step must be positive".into()));
    }
    let mut work = values.to_vec();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = work[i];
        work[i] = F::lit(orig.as_f64() + step);
        let plus = eval(&work)?.as_f64();
        work[i] = F::lit(orig.as_f64() - step);
        let minus = eval(&work)?.as_f64();
        work[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Builds a report from matching analytic and numeric gradients.
pub fn compare(indices: &[usize], analytic: &[f64], numeric: &[f64], opts: &GradcheckOptions) -> GradcheckReport {
    let entries = indices
        .iter()
        .zip(analytic.iter().zip(numeric))
        .map(|(&index, (&a, &n))| GradEntry {
            index,
            analytic: a,
            numeric: n,
            rel_error: relative_error(a, n, opts.denom_floor),
        })
        .collect();
    GradcheckReport { entries, tolerance: opts.tolerance }
}

/// Checks every element of `x` for a scalar-valued tensor function `f`.
pub fn gradcheck<F: Scalar>(
    f: impl Fn(&Tensor<F>) -> Result<Tensor<F>>,
    x: &Tensor<F>,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let indices: Vec<usize> = (0..x.numel()).collect();
    gradcheck_at(f, x, &indices, opts)
}

/// Like [`gradcheck`] but only at the given flat indices.
pub fn gradcheck_at<F: Scalar>(
    f: impl Fn(&Tensor<F>) -> Result<Tensor<F>>,
    x: &Tensor<F>,
    indices: &[usize],
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(TensorError::Contract("gradcheck input must be finite".into()));
    }
    let leaf = x.detach_with_grad(true);
    let out = f(&leaf)?;
    if out.numel() != 1 {
        return Err(TensorError::Contract(format!(
            "gradcheck needs a scalar-valued function, got shape {:?}",
            out.shape()
        )));
    }
    out.backward()?;
    let full = leaf.grad().unwrap_or_else(|| vec![F::zero(); x.numel()]);
    let analytic: Vec<f64> = indices.iter().map(|&i| full[i].as_f64()).collect();
    let shape = x.shape().to_vec();
    let numeric = central_differences(x.data(), indices, opts.step, |vals| {
        let t = Tensor::from_vec(&shape, vals.to_vec())?;
        super::no_grad(|| f(&t))?.item()
    })?;
    Ok(compare(indices, &analytic, &numeric, opts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::<f64>::from_vec(&[2, 3], vec![0.3, -1.0, 2.0, 5.0, 0.0, 1.5]).unwrap();
        let r = gradcheck(|t| t.sum(), &x, &GradcheckOptions::default()).unwrap();
        assert!(r.max_rel_error() < 1e-9, "{}", r.max_rel_error());
    }

    #[test]
    fn sum_of_squares_matches_differences() {
        let x = Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = gradcheck(|t| t.square()?.sum(), &x, &GradcheckOptions { step: 1e-4, ..Default::default() }).unwrap();
        let numeric: Vec<f64> = r.entries.iter().map(|e| e.numeric).collect();
        for (n, want) in numeric.iter().zip([2.0, 4.0, 6.0]) {
            assert!((n - want).abs() < 1e-6);
        }
        assert!(r.passed());
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let err = gradcheck(|t| t.square(), &x, &GradcheckOptions::default()).unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }
}
