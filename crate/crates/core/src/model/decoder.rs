use rand::Rng;

use super::config::ModelConfig;
use super::encoder::ShapeTrace;
use crate::error::Result;
use crate::nn::{Buffer, Conv2d, ConvBnRelu, ForwardCtx, Module, Parameter};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Upsample ×2, concatenate the skip, then two 3×3 conv-BN-ReLU.
pub struct DecoderBlock<F: Scalar> {
    pub conv1: ConvBnRelu<F>,
    pub conv2: ConvBnRelu<F>,
}

impl<F: Scalar> DecoderBlock<F> {
    pub fn new<R: Rng>(name: &str, in_ch: usize, skip_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        DecoderBlock {
            conv1: ConvBnRelu::new(&format!("{name}.conv1"), in_ch + skip_ch, out_ch, 3, 1, 1, rng),
            conv2: ConvBnRelu::new(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<F>, skip: &Tensor<F>, stage: usize, ctx: &ForwardCtx) -> Result<Tensor<F>> {
        let up = x.upsample_bilinear2x()?;
        if skip.rank() != 4 || skip.shape()[0] != up.shape()[0] || skip.shape()[2..] != up.shape()[2..] {
            return Err(TensorError::InvalidShape {
                op: "decoder",
                shape: skip.shape().to_vec(),
                reason: format!("stage {stage}: skip does not match upsampled map {:?}", up.shape()),
            }
            .into());
        }
        let merged = Tensor::concat(&[&up, skip], 1)?;
        Ok(self.conv2.forward(&self.conv1.forward(&merged, ctx)?, ctx)?)
    }
}

impl<F: Scalar> Module<F> for DecoderBlock<F> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        self.conv1.parameters(out);
        self.conv2.parameters(out);
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        self.conv1.parameters_mut(out);
        self.conv2.parameters_mut(out);
    }

    fn buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<F>>) {
        self.conv1.buffers(out);
        self.conv2.buffers(out);
    }
}

pub struct Decoder<F: Scalar> {
    pub blocks: [DecoderBlock<F>; 3],
    pub head: Conv2d<F>,
}

impl<F: Scalar> Decoder<F> {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let dec = cfg.decoder_channels;
        let skips = cfg.skip_channels();
        let blocks = [
            DecoderBlock::new("decoder.block1", cfg.transformer_hidden, skips[2], dec[0], rng),
            DecoderBlock::new("decoder.block2", dec[0], skips[1], dec[1], rng),
            DecoderBlock::new("decoder.block3", dec[1], skips[0], dec[2], rng),
        ];
        Decoder { blocks, head: Conv2d::new("decoder.head", dec[2], cfg.num_classes, 1, 1, 0, true, rng) }
    }

    /// `skips` are ordered shallow to deep (1/2, 1/4, 1/8); the deepest is consumed first.
    pub fn forward(&self, tokens: &Tensor<F>, skips: &[Tensor<F>; 3], ctx: &ForwardCtx) -> Result<Tensor<F>> {
        self.forward_traced(tokens, skips, ctx, None)
    }

    pub(crate) fn forward_traced(
        &self,
        tokens: &Tensor<F>,
        skips: &[Tensor<F>; 3],
        ctx: &ForwardCtx,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<Tensor<F>> {
        let s = tokens.shape();
        let side = if s.len() == 3 { (s[1] as f64).sqrt().round() as usize } else { 0 };
        if s.len() != 3 || side * side != s[1] || side == 0 {
            return Err(TensorError::InvalidShape {
                op: "decoder",
                shape: s.to_vec(),
                reason: "tokens must be (n, t, hidden) with t a perfect square".into(),
            }
            .into());
        }
        let (n, d) = (s[0], s[2]);
        let mut x = tokens.transpose_last()?.reshape(&[n, d, side, side])?;
        ShapeTrace::record(&mut trace, "token_map", &x);
        for (stage, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, &skips[2 - stage], stage + 1, ctx)?;
        }
        ShapeTrace::record(&mut trace, "decoded", &x);
        let logits = self.head.forward(&x.upsample_bilinear2x()?)?;
        ShapeTrace::record(&mut trace, "logits", &logits);
        Ok(logits)
    }
}

impl<F: Scalar> Module<F> for Decoder<F> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        self.blocks.iter().for_each(|b| b.parameters(out));
        self.head.parameters(out);
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        self.blocks.iter_mut().for_each(|b| b.parameters_mut(out));
        self.head.parameters_mut(out);
    }

    fn buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<F>>) {
        self.blocks.iter().for_each(|b| b.buffers(out));
    }
}
