//! The segmentation network: convolutional stem, dual-attention bottleneck,
//! Transformer encoder, attention-filtered skips and an upsampling decoder.

mod config;
mod decoder;
mod encoder;
mod transformer;

pub use config::ModelConfig;
pub use decoder::{Decoder, DecoderBlock};
pub use encoder::{Bottleneck, Encoder, EncoderOutput, ResidualDown, ShapeTrace};
pub use transformer::TransformerLayer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::reduced_channels;
use crate::error::Result;
use crate::nn::{Buffer, ForwardCtx, Module, Parameter};
use crate::tensor::{Scalar, Tensor, TensorError};

pub struct DaTransUnet<F: Scalar> {
    config: ModelConfig,
    pub encoder: Encoder<F>,
    pub decoder: Decoder<F>,
}

impl<F: Scalar> DaTransUnet<F> {
    /// Builds and initializes the network from `config.seed`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = Encoder::new(config, &mut rng)?;
        let decoder = Decoder::new(config, &mut rng);
        Ok(DaTransUnet { config: config.clone(), encoder, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `(n, in_channels, s, s)` image to `(n, num_classes, s, s)` logits.
    pub fn forward(&self, image: &Tensor<F>, ctx: &mut ForwardCtx) -> Result<Tensor<F>> {
        self.run(image, ctx, None)
    }

    pub fn forward_traced(&self, image: &Tensor<F>, ctx: &mut ForwardCtx) -> Result<(Tensor<F>, ShapeTrace)> {
        let mut trace = ShapeTrace { steps: Vec::new() };
        let logits = self.run(image, ctx, Some(&mut trace))?;
        Ok((logits, trace))
    }

    fn run(&self, image: &Tensor<F>, ctx: &mut ForwardCtx, mut trace: Option<&mut ShapeTrace>) -> Result<Tensor<F>> {
        let c = &self.config;
        let s = image.shape();
        if s.len() != 4 || s[0] == 0 || s[1] != c.in_channels || s[2] != c.input_size || s[3] != c.input_size {
            return Err(TensorError::InvalidShape {
                op: "model",
                shape: s.to_vec(),
                reason: format!("expected (n, {}, {}, {})", c.in_channels, c.input_size, c.input_size),
            }
            .into());
        }
        let encoded = self.encoder.forward_traced(image, ctx, trace.as_deref_mut())?;
        self.decoder.forward_traced(&encoded.tokens, &encoded.skips, ctx, trace)
    }

    /// Named parameters and batch-norm buffers, in a fixed order.
    pub fn state(&self) -> (Vec<&Parameter<F>>, Vec<&Buffer<F>>) {
        (self.param_list(), self.buffer_list())
    }
}

impl<F: Scalar> Module<F> for DaTransUnet<F> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        self.encoder.parameters(out);
        self.decoder.parameters(out);
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        self.encoder.parameters_mut(out);
        self.decoder.parameters_mut(out);
    }

    fn buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<F>>) {
        self.encoder.buffers(out);
        self.decoder.buffers(out);
    }
}

/// Learnable scalar count of the network described by `cfg`, without building it.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    let conv = |i: usize, o: usize, k: usize, bias: bool| i * o * k * k + if bias { o } else { 0 };
    let cbr = |i: usize, o: usize| conv(i, o, 3, false) + 2 * o;
    let residual = |i: usize, o: usize| cbr(i, o) + conv(o, o, 3, false) + 2 * o + conv(i, o, 1, false) + 2 * o;
    let da = |i: usize, o: usize| {
        let inter = reduced_channels(i, cfg.da_reduction);
        let qk = (inter / cfg.pam_qk_reduction).max(1);
        2 * cbr(i, inter)
            + 2 * cbr(inter, inter)
            + 2 * conv(inter, qk, 1, true)
            + conv(inter, inter, 1, true)
            + 2
            + conv(inter, o, 1, true)
    };
    let linear = |i: usize, o: usize| i * o + o;
    let (s, d, dec, skip) = (cfg.stem_channels, cfg.transformer_hidden, cfg.decoder_channels, cfg.skip_channels());

    let stem = cbr(cfg.in_channels, s[0]) + residual(s[0], s[1]) + residual(s[1], s[2]) + residual(s[2], s[3]);
    let bottleneck = if cfg.enable_encoder_da { da(s[3], d) } else { conv(s[3], d, 1, true) };
    let skip_blocks: usize = (0..3).filter(|&i| cfg.enable_skip_da[i]).map(|i| da(skip[i], skip[i])).sum();
    let layer = 4 * d + 4 * linear(d, d) + linear(d, cfg.mlp_dim) + linear(cfg.mlp_dim, d);
    let transformer = cfg.n_tokens() * d + cfg.transformer_layers * layer + 2 * d;
    let block = |i: usize, sk: usize, o: usize| cbr(i + sk, o) + cbr(o, o);
    let decoder = block(d, skip[2], dec[0])
        + block(dec[0], skip[1], dec[1])
        + block(dec[1], skip[0], dec[2])
        + conv(dec[2], cfg.num_classes, 1, true);
    stem + bottleneck + skip_blocks + transformer + decoder
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::no_grad;

    fn image(shape: &[usize]) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 7919) % 255) as f32 / 255.0).collect()).unwrap()
    }

    #[test]
    fn toy_shapes() {
        let cfg = ModelConfig::toy(64, 32, 2);
        let model = DaTransUnet::<f32>::new(&cfg).unwrap();
        let (logits, trace) =
            no_grad(|| model.forward_traced(&image(&[2, 3, 64, 64]), &mut ForwardCtx::eval())).unwrap();
        assert_eq!(logits.shape(), &[2, 1, 64, 64]);
        assert_eq!(trace.get("stem"), Some(&[128, 4, 4][..]));
        assert_eq!(trace.get("tokens"), Some(&[16, 32][..]));
        assert_eq!(trace.get("skip1"), Some(&[16, 32, 32][..]));
        assert_eq!(trace.get("decoded"), Some(&[16, 32, 32][..]));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = ModelConfig::toy(32, 16, 1);
        let model = DaTransUnet::<f32>::new(&cfg).unwrap();
        let x = image(&[1, 3, 32, 32]);
        let a = model.forward(&x, &mut ForwardCtx::eval()).unwrap();
        let b = model.forward(&x, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn analytic_count_matches_instantiated() {
        let mut cfg = ModelConfig::toy(32, 16, 2);
        for encoder in [false, true] {
            for skips in [[false; 3], [true, false, true], [true; 3]] {
                cfg.enable_encoder_da = encoder;
                cfg.enable_skip_da = skips;
                let model = DaTransUnet::<f32>::new(&cfg).unwrap();
                assert_eq!(model.num_parameters(), count_parameters(&cfg));
            }
        }
    }

    #[test]
    fn wrong_input_size_is_a_shape_error() {
        let model = DaTransUnet::<f32>::new(&ModelConfig::toy(32, 16, 1)).unwrap();
        assert!(model.forward(&image(&[1, 3, 48, 48]), &mut ForwardCtx::eval()).is_err());
    }

    #[test]
    fn skip_mismatch_names_the_stage() {
        let cfg = ModelConfig::toy(32, 16, 1);
        let model = DaTransUnet::<f32>::new(&cfg).unwrap();
        let tokens = Tensor::zeros(&[1, 4, 16]);
        let skips = [Tensor::zeros(&[1, 16, 16, 16]), Tensor::zeros(&[1, 32, 8, 8]), Tensor::zeros(&[1, 64, 5, 5])];
        let err = model.decoder.forward(&tokens, &skips, &ForwardCtx::eval()).unwrap_err();
        assert!(err.to_string().contains("stage 1"), "{err}");
    }
}
