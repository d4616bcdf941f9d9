//! Learnable layers built on [`crate::tensor`].

use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::{Result, Scalar, Tensor};

/// A named learnable tensor. Optimizers replace the tensor wholesale after each step.
pub struct Parameter<F: Scalar> {
    name: String,
    tensor: Tensor<F>,
}

impl<F: Scalar> Parameter<F> {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<F>) -> Self {
        Parameter { name: name.into(), tensor: Tensor::parameter(shape, data).expect("parameter shape and data agree") }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![F::zero(); n])
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![value; n])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn data(&self) -> &[F] {
        self.tensor.data()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.tensor.grad()
    }

    /// Replaces the value with a fresh leaf (the gradient is cleared).
    pub fn set_data(&mut self, data: Vec<F>) {
        self.tensor = Tensor::parameter(self.tensor.shape(), data).expect("set_data keeps the shape");
    }

    pub fn zero_grad(&self) {
        self.tensor.zero_grad();
    }
}

/// Non-learnable state that is still checkpointed (batch-norm running statistics).
pub struct Buffer<F: Scalar> {
    name: String,
    shape: Vec<usize>,
    data: Mutex<Vec<F>>,
}

impl<F: Scalar> Buffer<F> {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<F>) -> Self {
        Buffer { name: name.into(), shape: shape.to_vec(), data: Mutex::new(data) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn get(&self) -> Vec<F> {
        self.data.lock().expect("buffer lock poisoned").clone()
    }

    pub fn set(&self, data: Vec<F>) {
        assert_eq!(data.len(), self.shape.iter().product::<usize>(), "buffer {} size", self.name);
        *self.data.lock().expect("buffer lock poisoned") = data;
    }
}

/// Anything owning parameters.
pub trait Module<F: Scalar> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>);
    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>);
    fn buffers<'a>(&'a self, _out: &mut Vec<&'a Buffer<F>>) {}

    fn param_list(&self) -> Vec<&Parameter<F>> {
        let mut v = Vec::new();
        self.parameters(&mut v);
        v
    }

    fn param_list_mut(&mut self) -> Vec<&mut Parameter<F>> {
        let mut v = Vec::new();
        self.parameters_mut(&mut v);
        v
    }

    fn buffer_list(&self) -> Vec<&Buffer<F>> {
        let mut v = Vec::new();
        self.buffers(&mut v);
        v
    }

    fn num_parameters(&self) -> usize {
        self.param_list().iter().map(|p| p.numel()).sum()
    }
}

/// Per-forward-pass state: train/eval mode and the dropout stream.
pub struct ForwardCtx {
    training: bool,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx { training: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn train(seed: u64) -> Self {
        ForwardCtx { training: true, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Inverted dropout; the identity in eval mode or when `p == 0`.
    pub fn dropout<F: Scalar>(&mut self, x: &Tensor<F>, p: f64) -> Result<Tensor<F>> {
        if !self.training || p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let mask: Vec<F> =
            (0..x.numel()).map(|_| if self.rng.random::<f64>() < p { F::zero() } else { keep }).collect();
        x.mul(&Tensor::from_vec(x.shape(), mask)?)
    }
}

pub fn he_uniform<F: Scalar, R: Rng>(rng: &mut R, fan_in: usize, n: usize) -> Vec<F> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..n).map(|_| F::lit(dist.sample(rng))).collect()
}

/// Normal(0, std) truncated to two standard deviations.
pub fn trunc_normal<F: Scalar, R: Rng>(rng: &mut R, std: f64, n: usize) -> Vec<F> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break F::lit(v);
            }
        })
        .collect()
}

pub struct Conv2d<F: Scalar> {
    pub weight: Parameter<F>,
    pub bias: Option<Parameter<F>>,
    pub stride: usize,
    pub padding: usize,
}

impl<F: Scalar> Conv2d<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            weight: Parameter::new(
                format!("{name}.weight"),
                &[out_ch, in_ch, kernel, kernel],
                he_uniform(rng, fan_in, out_ch * fan_in),
            ),
            bias: bias.then(|| Parameter::zeros(format!("{name}.bias"), &[out_ch])),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.conv2d(self.weight.tensor(), self.bias.as_ref().map(|b| b.tensor()), self.stride, self.padding)
    }
}

impl<F: Scalar> Module<F> for Conv2d<F> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        out.push(&self.weight);
        out.extend(self.bias.as_ref());
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        out.push(&mut self.weight);
        out.extend(self.bias.as_mut());
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

pub struct BatchNorm2d<F: Scalar> {
    pub gamma: Parameter<F>,
    pub beta: Parameter<F>,
    pub running_mean: Buffer<F>,
    pub running_var: Buffer<F>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Parameter::filled(format!("{name}.gamma"), &[channels], F::one()),
            beta: Parameter::zeros(format!("{name}.beta"), &[channels]),
            running_mean: Buffer::new(format!("{name}.running_mean"), &[channels], vec![F::zero(); channels]),
            running_var: Buffer::new(format!("{name}.running_var"), &[channels], vec![F::one(); channels]),
        }
    }

    /// Batch statistics in training mode (running statistics updated with
    /// momentum 0.1, unbiased variance); running statistics in eval mode.
    pub fn forward(&self, x: &Tensor<F>, ctx: &ForwardCtx) -> Result<Tensor<F>> {
        let eps = F::lit(BN_EPS);
        if !ctx.training() {
            return x.batch_norm_eval(
                self.gamma.tensor(),
                self.beta.tensor(),
                &self.running_mean.get(),
                &self.running_var.get(),
                eps,
            );
        }
        let (y, stats) = x.batch_norm_train(self.gamma.tensor(), self.beta.tensor(), eps)?;
        let m = F::lit(BN_MOMENTUM);
        let keep = F::one() - m;
        let unbias = if stats.count > 1 { F::lit(stats.count as f64 / (stats.count - 1) as f64) } else { F::one() };
        let mean: Vec<F> = self.running_mean.get().iter().zip(&stats.mean).map(|(&r, &b)| keep * r + m * b).collect();
        let var: Vec<F> =
            self.running_var.get().iter().zip(&stats.var).map(|(&r, &b)| keep * r + m * b * unbias).collect();
        self.running_mean.set(mean);
        self.running_var.set(var);
        Ok(y)
    }
}

impl<F: Scalar> Module<F> for BatchNorm2d<F> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        out.push(&self.gamma);
        out.push(&self.beta);
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }

    fn buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<F>>) {
        out.push(&self.running_mean);
        out.push(&self.running_var);
    }
}

/// Convolution (no bias) → batch norm → ReLU.
pub struct ConvBnRelu<F: Scalar> {
    pub conv: Conv2d<F>,
    pub bn: BatchNorm2d<F>,
}

impl<F: Scalar> ConvBnRelu<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(&format!("{name}.conv"), in_ch, out_ch, kernel, stride, padding, false, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), out_ch),
        }
    }

    pub fn forward(&self, x: &Tensor<F>, ctx: &ForwardCtx) -> Result<Tensor<F>> {
        self.bn.forward(&self.conv.forward(x)?, ctx)?.relu()
    }
}

impl<F: Scalar> Module<F> for ConvBnRelu<F> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        self.conv.parameters(out);
        self.bn.parameters(out);
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        self.conv.parameters_mut(out);
        self.bn.parameters_mut(out);
    }

    fn buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<F>>) {
        self.bn.buffers(out);
    }
}

pub const LN_EPS: f64 = 1e-6;

pub struct LayerNorm<F: Scalar> {
    pub gamma: Parameter<F>,
    pub beta: Parameter<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: Parameter::filled(format!("{name}.gamma"), &[dim], F::one()),
            beta: Parameter::zeros(format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.layer_norm(self.gamma.tensor(), self.beta.tensor(), F::lit(LN_EPS))
    }
}

impl<F: Scalar> Module<F> for LayerNorm<F> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        out.push(&self.gamma);
        out.push(&self.beta);
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

/// `x @ weight + bias` with weight stored as `(in, out)`.
pub struct Linear<F: Scalar> {
    pub weight: Parameter<F>,
    pub bias: Parameter<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new<R: Rng>(name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Linear {
            weight: Parameter::new(
                format!("{name}.weight"),
                &[in_dim, out_dim],
                trunc_normal(rng, 0.02, in_dim * out_dim),
            ),
            bias: Parameter::zeros(format!("{name}.bias"), &[out_dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.linear(self.weight.tensor(), Some(self.bias.tensor()))
    }
}

impl<F: Scalar> Module<F> for Linear<F> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_stats_track_batches() {
        let bn = BatchNorm2d::<f64>::new("bn", 1);
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        bn.forward(&x, &ForwardCtx::train(0)).unwrap();
        assert!((bn.running_mean.get()[0] - 0.2).abs() < 1e-12);
        // unbiased variance of {1, 3} is 2
        assert!((bn.running_var.get()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let x = Tensor::<f32>::full(&[4, 4], 2.0);
        let y = ForwardCtx::eval().dropout(&x, 0.5).unwrap();
        assert!(y.same_node(&x));
    }

    #[test]
    fn trunc_normal_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = trunc_normal(&mut rng, 0.02, 1000);
        assert!(v.iter().all(|x| x.abs() <= 0.04));
    }
}
