//! Training objectives: cross-entropy (binary or multiclass) averaged with a soft Dice loss.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// One logit channel, sigmoid, labels in {0, 1}.
    Binary,
    /// One logit channel per class, softmax.
    Multiclass,
}

impl LossMode {
    pub fn for_channels(channels: usize) -> Self {
        if channels == 1 {
            LossMode::Binary
        } else {
            LossMode::Multiclass
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    /// Weight on positive pixels in the binary cross-entropy.
    pub pos_weight: f64,
    /// Additive smoothing in the Dice numerator and denominator.
    pub smooth: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions { pos_weight: 1.0, smooth: 1.0 }
    }
}

/// Differentiable loss terms. `total = 0.5 * cross_entropy + 0.5 * dice`.
pub struct LossValue<F: Scalar> {
    pub total: Tensor<F>,
    pub cross_entropy: Tensor<F>,
    pub dice: Tensor<F>,
}

impl<F: Scalar> LossValue<F> {
    pub fn total_value(&self) -> f64 {
        self.total.data()[0].as_f64()
    }

    pub fn cross_entropy_value(&self) -> f64 {
        self.cross_entropy.data()[0].as_f64()
    }

    pub fn dice_value(&self) -> f64 {
        self.dice.data()[0].as_f64()
    }
}

fn logits_layout(logits: &Tensor<impl Scalar>, targets: &[u8]) -> Result<(usize, usize, usize)> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(TensorError::InvalidShape {
            op: "loss",
            shape: s.to_vec(),
            reason: "logits must be (n, classes, h, w)".into(),
        }
        .into());
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    if targets.len() != n * hw {
        return Err(TensorError::ShapeMismatch { op: "loss", lhs: s.to_vec(), rhs: vec![targets.len()] }.into());
    }
    let classes = c.max(2);
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= classes) {
        return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
    }
    Ok((n, c, hw))
}

/// Mean stable binary cross-entropy on logits, with `pos_weight` scaling the positive term.
pub fn binary_cross_entropy<F: Scalar>(logits: &Tensor<F>, targets: &[u8], pos_weight: f64) -> Result<Tensor<F>> {
    let (_, c, _) = logits_layout(logits, targets)?;
    if c != 1 {
        return Err(TensorError::Contract(format!("binary cross-entropy needs one channel, got {c}")).into());
    }
    let x = logits.data_arc();
    let t: Vec<f64> = targets.iter().map(|&v| v as f64).collect();
    let count = t.len() as f64;
    let total: f64 = x
        .iter()
        .zip(&t)
        .map(|(&xv, &tv)| {
            let xv = xv.as_f64();
            let softplus_neg = (-xv.abs()).exp().ln_1p() + (-xv).max(0.0);
            (1.0 - tv) * xv + (1.0 + (pos_weight - 1.0) * tv) * softplus_neg
        })
        .sum();
    Ok(Tensor::from_op("binary_cross_entropy", vec![1], vec![F::lit(total / count)], &[logits], move |g, _| {
        let scale = g[0].as_f64() / count;
        let grad = x
            .iter()
            .zip(&t)
            .map(|(&xv, &tv)| {
                let p = crate::tensor::sigmoid(xv).as_f64();
                F::lit(scale * ((1.0 - tv) - (1.0 + (pos_weight - 1.0) * tv) * (1.0 - p)))
            })
            .collect();
        vec![Some(grad)]
    })?)
}

/// Mean softmax cross-entropy over all pixels; the softmax runs over axis 1.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, targets: &[u8]) -> Result<Tensor<F>> {
    let (n, c, hw) = logits_layout(logits, targets)?;
    if c < 2 {
        return Err(TensorError::Contract("cross-entropy needs at least two channels".into()).into());
    }
    let x = logits.data();
    let mut probs = vec![0.0f64; x.len()];
    let mut total = 0.0;
    for b in 0..n {
        for p in 0..hw {
            let at = |k: usize| b * c * hw + k * hw + p;
            let max = (0..c).map(|k| x[at(k)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|k| (x[at(k)].as_f64() - max).exp()).sum();
            for k in 0..c {
                probs[at(k)] = (x[at(k)].as_f64() - max).exp() / z;
            }
            let target = targets[b * hw + p] as usize;
            total += z.ln() + max - x[at(target)].as_f64();
        }
    }
    let count = (n * hw) as f64;
    let targets = targets.to_vec();
    Ok(Tensor::from_op("cross_entropy", vec![1], vec![F::lit(total / count)], &[logits], move |g, _| {
        let scale = g[0].as_f64() / count;
        let mut grad: Vec<F> = probs.iter().map(|&p| F::lit(p * scale)).collect();
        for (i, &t) in targets.iter().enumerate() {
            let (b, p) = (i / hw, i % hw);
            let at = b * c * hw + t as usize * hw + p;
            grad[at] = F::lit((probs[at] - 1.0) * scale);
        }
        vec![Some(grad)]
    })?)
}

/// Soft Dice loss `1 - (2 Σpt + s) / (Σp + Σt + s)`, computed for every
/// (sample, channel) pair of the `(n, c, h, w)` inputs and averaged.
pub fn dice_loss<F: Scalar>(probabilities: &Tensor<F>, target: &Tensor<F>, smooth: f64) -> Result<Tensor<F>> {
    let s = probabilities.shape();
    if s.len() != 4 || s != target.shape() {
        return Err(
            TensorError::ShapeMismatch { op: "dice_loss", lhs: s.to_vec(), rhs: target.shape().to_vec() }.into()
        );
    }
    if smooth < 0.0 {
        return Err(TensorError::Contract(format!("dice smoothing must be non-negative, got {smooth}")).into());
    }
    let p = probabilities.data_arc();
    if let Some(bad) = p.iter().map(|v| v.as_f64()).find(|v| !(-1e-6..=1.0 + 1e-6).contains(v)) {
        return Err(TensorError::Contract(format!("probability {bad} outside [0, 1]")).into());
    }
    let t = target.data_arc();
    let groups = s[0] * s[1];
    let len = s[2] * s[3];
    // Per group: (overlap, sum of p + sum of t + smooth).
    let stats: Vec<(f64, f64)> = (0..groups)
        .map(|g| {
            let range = g * len..(g + 1) * len;
            let (mut inter, mut denom) = (0.0, smooth);
            for (pv, tv) in p[range.clone()].iter().zip(&t[range]) {
                inter += pv.as_f64() * tv.as_f64();
                denom += pv.as_f64() + tv.as_f64();
            }
            (inter, denom)
        })
        .collect();
    let loss = stats
        .iter()
        .map(|&(inter, denom)| if denom == 0.0 { 0.0 } else { 1.0 - (2.0 * inter + smooth) / denom })
        .sum::<f64>()
        / groups as f64;
    Ok(Tensor::from_op("dice_loss", vec![1], vec![F::lit(loss)], &[probabilities], move |g, _| {
        let scale = g[0].as_f64() / groups as f64;
        let mut grad = vec![F::zero(); p.len()];
        for (gi, &(inter, denom)) in stats.iter().enumerate() {
            if denom == 0.0 {
                continue;
            }
            let num = 2.0 * inter + smooth;
            for k in gi * len..(gi + 1) * len {
                let d = -(2.0 * t[k].as_f64() * denom - num) / (denom * denom);
                grad[k] = F::lit(scale * d);
            }
        }
        vec![Some(grad)]
    })?)
}

/// Expands labels into the `(n, c, h, w)` target matching the network's
/// probability map: the labels themselves for a binary head, one-hot otherwise.
pub fn target_map<F: Scalar>(targets: &[u8], shape: &[usize]) -> Result<Tensor<F>> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut data = vec![F::zero(); n * c * hw];
    for (i, &t) in targets.iter().enumerate() {
        let (b, p) = (i / hw, i % hw);
        if c == 1 {
            data[b * hw + p] = F::lit(t as f64);
        } else {
            data[b * c * hw + t as usize * hw + p] = F::one();
        }
    }
    Ok(Tensor::from_vec(shape, data)?)
}

/// Equal-weight sum of cross-entropy and Dice loss on the given logits.
pub fn combined_loss<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[u8],
    mode: LossMode,
    opts: LossOptions,
) -> Result<LossValue<F>> {
    logits_layout(logits, targets)?;
    let (cross_entropy, probabilities) = match mode {
        LossMode::Binary => (binary_cross_entropy(logits, targets, opts.pos_weight)?, logits.sigmoid()?),
        LossMode::Multiclass => (cross_entropy(logits, targets)?, logits.softmax(1)?),
    };
    let target = target_map(targets, logits.shape())?;
    let dice = dice_loss(&probabilities, &target, opts.smooth)?;
    let half = F::lit(0.5);
    let total = cross_entropy.scale(half)?.add(&dice.scale(half)?)?;
    Ok(LossValue { total, cross_entropy, dice })
}
