//! Copies production module weights into the plain-buffer specs of the oracle.
#![allow(dead_code)]

use datransunet::attention::{DaBlock, PositionAttention};
use datransunet::model::TransformerLayer;
use datransunet::nn::{BatchNorm2d, Conv2d, ConvBnRelu, LayerNorm, Linear, Module};
use datransunet::oracle::{
    AffineSpec, ConvNormSpec, ConvSpec, DaBlockSpec, FeatureMap, NormSpec, PositionSpec, TransformerSpec,
};
use datransunet::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn conv(c: &Conv2d<f64>) -> ConvSpec {
    let s = c.weight.shape();
    ConvSpec {
        out_channels: s[0],
        in_channels: s[1],
        kernel: s[2],
        stride: c.stride,
        padding: c.padding,
        weight: c.weight.data().to_vec(),
        bias: c.bias.as_ref().map(|b| b.data().to_vec()),
    }
}

pub fn norm(bn: &BatchNorm2d<f64>) -> NormSpec {
    NormSpec {
        gamma: bn.gamma.data().to_vec(),
        beta: bn.beta.data().to_vec(),
        running_mean: bn.running_mean.get(),
        running_var: bn.running_var.get(),
        eps: 1e-5,
    }
}

pub fn conv_norm(m: &ConvBnRelu<f64>) -> ConvNormSpec {
    ConvNormSpec { conv: conv(&m.conv), norm: norm(&m.bn) }
}

pub fn position(p: &PositionAttention<f64>) -> PositionSpec {
    PositionSpec {
        query: conv(&p.query_conv),
        key: conv(&p.key_conv),
        value: conv(&p.value_conv),
        alpha: p.alpha.data()[0],
    }
}

pub fn da_block(b: &DaBlock<f64>) -> DaBlockSpec {
    DaBlockSpec {
        position_in: conv_norm(&b.pam_in_conv),
        position: position(&b.pam),
        position_out: conv_norm(&b.pam_out_conv),
        channel_in: conv_norm(&b.cam_in_conv),
        beta: b.cam.beta.data()[0],
        channel_out: conv_norm(&b.cam_out_conv),
        fuse: conv(&b.fuse_conv),
    }
}

fn affine(l: &Linear<f64>) -> AffineSpec {
    let s = l.weight.shape();
    AffineSpec { inputs: s[0], outputs: s[1], weight: l.weight.data().to_vec(), bias: l.bias.data().to_vec() }
}

fn layer_norm(n: &LayerNorm<f64>) -> (Vec<f64>, Vec<f64>) {
    (n.gamma.data().to_vec(), n.beta.data().to_vec())
}

pub fn transformer(l: &TransformerLayer<f64>) -> TransformerSpec {
    TransformerSpec {
        heads: l.heads(),
        attn_norm: layer_norm(&l.attn_norm),
        query: affine(&l.query),
        key: affine(&l.key),
        value: affine(&l.value),
        out: affine(&l.out),
        mlp_norm: layer_norm(&l.mlp_norm),
        fc1: affine(&l.fc1),
        fc2: affine(&l.fc2),
        eps: 1e-6,
    }
}

pub fn feature_map(t: &Tensor<f64>) -> FeatureMap {
    let s = t.shape();
    FeatureMap::new(s[0], s[1], s[2], s[3], t.data().to_vec())
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_vec(shape, uniform(rng, shape.iter().product(), scale)).unwrap()
}

/// Moves every parameter away from its initial value and gives batch-norm
/// buffers non-trivial running statistics.
pub fn perturb<M: Module<f64>>(m: &mut M, rng: &mut ChaCha8Rng) {
    for p in m.param_list_mut() {
        let data: Vec<f64> = p.data().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
        p.set_data(data);
    }
    for b in m.buffer_list() {
        let n = b.get().len();
        if b.name().ends_with("running_var") {
            b.set((0..n).map(|_| rng.random_range(0.5..2.0)).collect());
        } else {
            b.set(uniform(rng, n, 0.5));
        }
    }
}
