use rand::Rng;

use super::config::ModelConfig;
use super::transformer::TransformerLayer;
use crate::attention::DaBlock;
use crate::error::Result;
use crate::nn::{trunc_normal, BatchNorm2d, Buffer, Conv2d, ConvBnRelu, ForwardCtx, LayerNorm, Module, Parameter};
use crate::tensor::{Scalar, Tensor};

/// Stride-2 residual stage: `relu(bn(conv(relu(bn(conv_s2(x))))) + bn(conv1x1_s2(x)))`.
pub struct ResidualDown<F: Scalar> {
    pub conv1: ConvBnRelu<F>,
    pub conv2: Conv2d<F>,
    pub bn2: BatchNorm2d<F>,
    pub shortcut: Conv2d<F>,
    pub shortcut_bn: BatchNorm2d<F>,
}

impl<F: Scalar> ResidualDown<F> {
    pub fn new<R: Rng>(name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        ResidualDown {
            conv1: ConvBnRelu::new(&format!("{name}.conv1"), in_ch, out_ch, 3, 2, 1, rng),
            conv2: Conv2d::new(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), out_ch),
            shortcut: Conv2d::new(&format!("{name}.shortcut"), in_ch, out_ch, 1, 2, 0, false, rng),
            shortcut_bn: BatchNorm2d::new(&format!("{name}.shortcut_bn"), out_ch),
        }
    }

    pub fn forward(&self, x: &Tensor<F>, ctx: &ForwardCtx) -> Result<Tensor<F>> {
        let main = self.bn2.forward(&self.conv2.forward(&self.conv1.forward(x, ctx)?)?, ctx)?;
        let short = self.shortcut_bn.forward(&self.shortcut.forward(x)?, ctx)?;
        Ok(main.add(&short)?.relu()?)
    }
}

impl<F: Scalar> Module<F> for ResidualDown<F> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        self.conv1.parameters(out);
        self.conv2.parameters(out);
        self.bn2.parameters(out);
        self.shortcut.parameters(out);
        self.shortcut_bn.parameters(out);
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        self.conv1.parameters_mut(out);
        self.conv2.parameters_mut(out);
        self.bn2.parameters_mut(out);
        self.shortcut.parameters_mut(out);
        self.shortcut_bn.parameters_mut(out);
    }

    fn buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<F>>) {
        self.conv1.buffers(out);
        self.bn2.buffers(out);
        self.shortcut_bn.buffers(out);
    }
}

/// Maps the deepest stem features to the Transformer width.
pub enum Bottleneck<F: Scalar> {
    DualAttention(Box<DaBlock<F>>),
    Projection(Conv2d<F>),
}

impl<F: Scalar> Bottleneck<F> {
    pub fn forward(&self, x: &Tensor<F>, ctx: &ForwardCtx) -> Result<Tensor<F>> {
        match self {
            Bottleneck::DualAttention(da) => da.forward(x, ctx),
            Bottleneck::Projection(conv) => Ok(conv.forward(x)?),
        }
    }
}

impl<F: Scalar> Module<F> for Bottleneck<F> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        match self {
            Bottleneck::DualAttention(da) => da.parameters(out),
            Bottleneck::Projection(conv) => conv.parameters(out),
        }
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        match self {
            Bottleneck::DualAttention(da) => da.parameters_mut(out),
            Bottleneck::Projection(conv) => conv.parameters_mut(out),
        }
    }

    fn buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<F>>) {
        if let Bottleneck::DualAttention(da) = self {
            da.buffers(out);
        }
    }
}

pub struct EncoderOutput<F: Scalar> {
    /// `(n, n_tokens, hidden)`.
    pub tokens: Tensor<F>,
    /// Filtered skip features at 1/2, 1/4 and 1/8 resolution.
    pub skips: [Tensor<F>; 3],
}

/// Intermediate shapes of one forward pass, batch dimension dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTrace {
    pub steps: Vec<(&'static str, Vec<usize>)>,
}

impl ShapeTrace {
    pub(crate) fn record(trace: &mut Option<&mut ShapeTrace>, name: &'static str, t: &Tensor<impl Scalar>) {
        if let Some(tr) = trace.as_deref_mut() {
            tr.steps.push((name, t.shape()[1..].to_vec()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&[usize]> {
        self.steps.iter().find(|(n, _)| *n == name).map(|(_, s)| s.as_slice())
    }
}

pub struct Encoder<F: Scalar> {
    pub root: ConvBnRelu<F>,
    pub stages: [ResidualDown<F>; 3],
    pub bottleneck: Bottleneck<F>,
    pub skip_da: [Option<DaBlock<F>>; 3],
    pub position_embedding: Parameter<F>,
    pub layers: Vec<TransformerLayer<F>>,
    pub final_norm: LayerNorm<F>,
    dropout: f64,
}

impl<F: Scalar> Encoder<F> {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let s = cfg.stem_channels;
        let hidden = cfg.transformer_hidden;
        let root = ConvBnRelu::new("encoder.root", cfg.in_channels, s[0], 3, 2, 1, rng);
        let stages = [
            ResidualDown::new("encoder.stage1", s[0], s[1], rng),
            ResidualDown::new("encoder.stage2", s[1], s[2], rng),
            ResidualDown::new("encoder.stage3", s[2], s[3], rng),
        ];
        let bottleneck = if cfg.enable_encoder_da {
            Bottleneck::DualAttention(Box::new(DaBlock::new(
                "encoder.da",
                s[3],
                hidden,
                cfg.da_reduction,
                cfg.pam_qk_reduction,
                rng,
            )?))
        } else {
            Bottleneck::Projection(Conv2d::new("encoder.projection", s[3], hidden, 1, 1, 0, true, rng))
        };
        let skip_channels = cfg.skip_channels();
        let mut skip_da: [Option<DaBlock<F>>; 3] = [None, None, None];
        for (i, slot) in skip_da.iter_mut().enumerate() {
            if cfg.enable_skip_da[i] {
                let c = skip_channels[i];
                let name = format!("skip{}.da", i + 1);
                *slot = Some(DaBlock::new(&name, c, c, cfg.da_reduction, cfg.pam_qk_reduction, rng)?);
            }
        }
        let t = cfg.n_tokens();
        let position_embedding =
            Parameter::new("encoder.position_embedding", &[t, hidden], trunc_normal(rng, 0.02, t * hidden));
        let layers = (0..cfg.transformer_layers)
            .map(|i| {
                TransformerLayer::new(
                    &format!("encoder.layer{i}"),
                    hidden,
                    cfg.transformer_heads,
                    cfg.mlp_dim,
                    cfg.dropout,
                    rng,
                )
            })
            .collect();
        Ok(Encoder {
            root,
            stages,
            bottleneck,
            skip_da,
            position_embedding,
            layers,
            final_norm: LayerNorm::new("encoder.final_norm", hidden),
            dropout: cfg.dropout,
        })
    }

    pub fn forward(&self, image: &Tensor<F>, ctx: &mut ForwardCtx) -> Result<EncoderOutput<F>> {
        self.forward_traced(image, ctx, None)
    }

    pub(crate) fn forward_traced(
        &self,
        image: &Tensor<F>,
        ctx: &mut ForwardCtx,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<EncoderOutput<F>> {
        let half = self.root.forward(image, ctx)?;
        let quarter = self.stages[0].forward(&half, ctx)?;
        let eighth = self.stages[1].forward(&quarter, ctx)?;
        let deep = self.stages[2].forward(&eighth, ctx)?;
        ShapeTrace::record(&mut trace, "stem", &deep);

        let mapped = self.bottleneck.forward(&deep, ctx)?;
        ShapeTrace::record(&mut trace, "bottleneck", &mapped);
        let (n, d) = (mapped.shape()[0], mapped.shape()[1]);
        let t = mapped.shape()[2] * mapped.shape()[3];
        let tokens = mapped.reshape(&[n, d, t])?.transpose_last()?;
        let embedded = tokens.add_trailing(self.position_embedding.tensor())?;
        let mut x = ctx.dropout(&embedded, self.dropout)?;
        for layer in &self.layers {
            x = layer.forward(&x, ctx)?;
        }
        let tokens = self.final_norm.forward(&x)?;
        ShapeTrace::record(&mut trace, "tokens", &tokens);

        let raw = [half, quarter, eighth];
        let mut skips = Vec::with_capacity(3);
        for (feat, da) in raw.into_iter().zip(&self.skip_da) {
            skips.push(match da {
                Some(block) => block.forward(&feat, ctx)?,
                None => feat,
            });
        }
        let skips: [Tensor<F>; 3] = skips.try_into().unwrap_or_else(|_| unreachable!());
        for (name, s) in ["skip1", "skip2", "skip3"].into_iter().zip(&skips) {
            ShapeTrace::record(&mut trace, name, s);
        }
        Ok(EncoderOutput { tokens, skips })
    }
}

impl<F: Scalar> Module<F> for Encoder<F> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        self.root.parameters(out);
        self.stages.iter().for_each(|s| s.parameters(out));
        self.bottleneck.parameters(out);
        self.skip_da.iter().flatten().for_each(|d| d.parameters(out));
        out.push(&self.position_embedding);
        self.layers.iter().for_each(|l| l.parameters(out));
        self.final_norm.parameters(out);
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        self.root.parameters_mut(out);
        self.stages.iter_mut().for_each(|s| s.parameters_mut(out));
        self.bottleneck.parameters_mut(out);
        self.skip_da.iter_mut().flatten().for_each(|d| d.parameters_mut(out));
        out.push(&mut self.position_embedding);
        self.layers.iter_mut().for_each(|l| l.parameters_mut(out));
        self.final_norm.parameters_mut(out);
    }

    fn buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<F>>) {
        self.root.buffers(out);
        self.stages.iter().for_each(|s| s.buffers(out));
        self.bottleneck.buffers(out);
        self.skip_da.iter().flatten().for_each(|d| d.buffers(out));
    }
}
