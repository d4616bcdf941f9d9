//! Position attention, channel attention and the two-branch dual-attention block.
//!
//! Index convention: for target position (or channel) `j` and source `i`,
//! the attention row `j` is a softmax over `i`, and output `j` aggregates
//! `sum_i s[j][i] * value[i]`. Position logits are `B_i · C_j` with `B`
//! from the query convolution and `C` from the key convolution; channel
//! logits are `A_i · A_j` on the raw input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Buffer, Conv2d, ConvBnRelu, ForwardCtx, Module, Parameter};
use crate::tensor::{Scalar, Tensor, TensorError};

fn spatial(op: &'static str, a: &Tensor<impl Scalar>) -> Result<(usize, usize, usize, usize)> {
    let s = a.shape();
    if s.len() != 4 || s[2] * s[3] == 0 || s[1] == 0 {
        return Err(TensorError::InvalidShape {
            op,
            shape: s.to_vec(),
            reason: "expected (n, c, h, w) with non-empty channels and spatial extent".into(),
        }
        .into());
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Position attention module: 1×1 query/key/value convolutions and a learnable gate `alpha`.
pub struct PositionAttention<F: Scalar> {
    pub query_conv: Conv2d<F>,
    pub key_conv: Conv2d<F>,
    pub value_conv: Conv2d<F>,
    pub alpha: Parameter<F>,
}

impl<F: Scalar> PositionAttention<F> {
    /// Query/key width is `channels / qk_reduction`, at least 1.
    pub fn new<R: Rng>(name: &str, channels: usize, qk_reduction: usize, rng: &mut R) -> Self {
        let qk = (channels / qk_reduction.max(1)).max(1);
        PositionAttention {
            query_conv: Conv2d::new(&format!("{name}.query_conv"), channels, qk, 1, 1, 0, true, rng),
            key_conv: Conv2d::new(&format!("{name}.key_conv"), channels, qk, 1, 1, 0, true, rng),
            value_conv: Conv2d::new(&format!("{name}.value_conv"), channels, channels, 1, 1, 0, true, rng),
            alpha: Parameter::zeros(format!("{name}.alpha"), &[1]),
        }
    }

    pub fn channels(&self) -> usize {
        self.value_conv.in_channels()
    }

    pub fn forward(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.forward_with_attention(a)?.0)
    }

    /// Returns the output and the `(n, N, N)` attention map, `N = h*w`.
    pub fn forward_with_attention(&self, a: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let (n, c, h, w) = spatial("pam", a)?;
        if c != self.channels() {
            return Err(TensorError::ShapeMismatch {
                op: "pam",
                lhs: a.shape().to_vec(),
                rhs: self.value_conv.weight.shape().to_vec(),
            }
            .into());
        }
        let positions = h * w;
        let qk = self.query_conv.out_channels();
        let b = self.query_conv.forward(a)?.reshape(&[n, qk, positions])?;
        let cm = self.key_conv.forward(a)?.reshape(&[n, qk, positions])?;
        let d = self.value_conv.forward(a)?.reshape(&[n, c, positions])?;
        // energy[j][i] = C_j · B_i
        let energy = cm.transpose_last()?.matmul(&b)?;
        let attn = energy.softmax(2)?;
        let agg = d.matmul_t(&attn)?.reshape(&[n, c, h, w])?;
        let out = agg.mul(self.alpha.tensor())?.add(a)?;
        Ok((out, attn))
    }
}

impl<F: Scalar> Module<F> for PositionAttention<F> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        self.query_conv.parameters(out);
        self.key_conv.parameters(out);
        self.value_conv.parameters(out);
        out.push(&self.alpha);
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        self.query_conv.parameters_mut(out);
        self.key_conv.parameters_mut(out);
        self.value_conv.parameters_mut(out);
        out.push(&mut self.alpha);
    }
}

/// Channel attention module. It has no convolutions; only the gate `beta` is learned.
pub struct ChannelAttention<F: Scalar> {
    pub beta: Parameter<F>,
}

impl<F: Scalar> ChannelAttention<F> {
    pub fn new(name: &str) -> Self {
        ChannelAttention { beta: Parameter::zeros(format!("{name}.beta"), &[1]) }
    }

    pub fn forward(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.forward_with_attention(a)?.0)
    }

    /// Returns the output and the `(n, c, c)` channel attention map.
    pub fn forward_with_attention(&self, a: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let (n, c, h, w) = spatial("cam", a)?;
        let flat = a.reshape(&[n, c, h * w])?;
        let energy = flat.matmul_t(&flat)?;
        let attn = energy.softmax(2)?;
        let agg = attn.matmul(&flat)?.reshape(&[n, c, h, w])?;
        let out = agg.mul(self.beta.tensor())?.add(a)?;
        Ok((out, attn))
    }
}

impl<F: Scalar> Module<F> for ChannelAttention<F> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        out.push(&self.beta);
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        out.push(&mut self.beta);
    }
}

/// Branch width of a dual-attention block: `ceil(in / reduction)`, at least 1.
pub fn reduced_channels(in_channels: usize, reduction: usize) -> usize {
    in_channels.div_ceil(reduction.max(1)).max(1)
}

/// Two parallel branches (conv → PAM → conv, conv → CAM → conv) summed and
/// fused by a 1×1 convolution to `out_channels`.
pub struct DaBlock<F: Scalar> {
    pub pam_in_conv: ConvBnRelu<F>,
    pub pam: PositionAttention<F>,
    pub pam_out_conv: ConvBnRelu<F>,
    pub cam_in_conv: ConvBnRelu<F>,
    pub cam: ChannelAttention<F>,
    pub cam_out_conv: ConvBnRelu<F>,
    pub fuse_conv: Conv2d<F>,
    in_channels: usize,
}

impl<F: Scalar> DaBlock<F> {
    pub fn new<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        reduction: usize,
        qk_reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels < 1 || out_channels < 1 {
            return Err(Error::Config(format!(
                "{name}: dual-attention block needs at least one input and output channel"
            )));
        }
        if reduction < 1 || qk_reduction < 1 {
            return Err(Error::Config(format!("{name}: reduction ratios must be at least 1")));
        }
        let inter = reduced_channels(in_channels, reduction);
        Ok(DaBlock {
            pam_in_conv: ConvBnRelu::new(&format!("{name}.pam_in"), in_channels, inter, 3, 1, 1, rng),
            pam: PositionAttention::new(&format!("{name}.pam"), inter, qk_reduction, rng),
            pam_out_conv: ConvBnRelu::new(&format!("{name}.pam_out"), inter, inter, 3, 1, 1, rng),
            cam_in_conv: ConvBnRelu::new(&format!("{name}.cam_in"), in_channels, inter, 3, 1, 1, rng),
            cam: ChannelAttention::new(&format!("{name}.cam")),
            cam_out_conv: ConvBnRelu::new(&format!("{name}.cam_out"), inter, inter, 3, 1, 1, rng),
            fuse_conv: Conv2d::new(&format!("{name}.fuse"), inter, out_channels, 1, 1, 0, true, rng),
            in_channels,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.fuse_conv.out_channels()
    }

    pub fn branch_channels(&self) -> usize {
        self.fuse_conv.in_channels()
    }

    pub fn forward(&self, a: &Tensor<F>, ctx: &ForwardCtx) -> Result<Tensor<F>> {
        if a.rank() != 4 || a.shape()[1] != self.in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "da_block",
                lhs: a.shape().to_vec(),
                rhs: vec![self.in_channels],
            }
            .into());
        }
        let p1 = self.pam_in_conv.forward(a, ctx)?;
        let p2 = self.pam_out_conv.forward(&self.pam.forward(&p1)?, ctx)?;
        let c1 = self.cam_in_conv.forward(a, ctx)?;
        let c2 = self.cam_out_conv.forward(&self.cam.forward(&c1)?, ctx)?;
        Ok(self.fuse_conv.forward(&p2.add(&c2)?)?)
    }
}

impl<F: Scalar> Module<F> for DaBlock<F> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        self.pam_in_conv.parameters(out);
        self.pam.parameters(out);
        self.pam_out_conv.parameters(out);
        self.cam_in_conv.parameters(out);
        self.cam.parameters(out);
        self.cam_out_conv.parameters(out);
        self.fuse_conv.parameters(out);
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        self.pam_in_conv.parameters_mut(out);
        self.pam.parameters_mut(out);
        self.pam_out_conv.parameters_mut(out);
        self.cam_in_conv.parameters_mut(out);
        self.cam.parameters_mut(out);
        self.cam_out_conv.parameters_mut(out);
        self.fuse_conv.parameters_mut(out);
    }

    fn buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<F>>) {
        self.pam_in_conv.buffers(out);
        self.pam_out_conv.buffers(out);
        self.cam_in_conv.buffers(out);
        self.cam_out_conv.buffers(out);
    }
}
