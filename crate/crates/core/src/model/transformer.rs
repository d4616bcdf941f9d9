use rand::Rng;

use crate::error::Result;
use crate::nn::{ForwardCtx, LayerNorm, Linear, Module, Parameter};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Pre-norm encoder layer: `x + MSA(LN(x))`, then `+ MLP(LN(.))` with GELU.
pub struct TransformerLayer<F: Scalar> {
    pub attn_norm: LayerNorm<F>,
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub out: Linear<F>,
    pub mlp_norm: LayerNorm<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
    heads: usize,
    dropout: f64,
}

impl<F: Scalar> TransformerLayer<F> {
    pub fn new<R: Rng>(name: &str, hidden: usize, heads: usize, mlp_dim: usize, dropout: f64, rng: &mut R) -> Self {
        TransformerLayer {
            attn_norm: LayerNorm::new(&format!("{name}.attn_norm"), hidden),
            query: Linear::new(&format!("{name}.attn.query"), hidden, hidden, rng),
            key: Linear::new(&format!("{name}.attn.key"), hidden, hidden, rng),
            value: Linear::new(&format!("{name}.attn.value"), hidden, hidden, rng),
            out: Linear::new(&format!("{name}.attn.out"), hidden, hidden, rng),
            mlp_norm: LayerNorm::new(&format!("{name}.mlp_norm"), hidden),
            fc1: Linear::new(&format!("{name}.mlp.fc1"), hidden, mlp_dim, rng),
            fc2: Linear::new(&format!("{name}.mlp.fc2"), mlp_dim, hidden, rng),
            heads,
            dropout,
        }
    }

    pub fn hidden(&self) -> usize {
        self.query.weight.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn forward(&self, x: &Tensor<F>, ctx: &mut ForwardCtx) -> Result<Tensor<F>> {
        Ok(self.forward_with_attention(x, ctx)?.0)
    }

    /// Also returns the `(n, heads, t, t)` attention weights (before dropout).
    pub fn forward_with_attention(&self, x: &Tensor<F>, ctx: &mut ForwardCtx) -> Result<(Tensor<F>, Tensor<F>)> {
        let d = self.hidden();
        if x.rank() != 3 || x.shape()[2] != d {
            return Err(
                TensorError::ShapeMismatch { op: "transformer_layer", lhs: x.shape().to_vec(), rhs: vec![d] }.into()
            );
        }
        let (n, t) = (x.shape()[0], x.shape()[1]);
        let (h, dh) = (self.heads, d / self.heads);
        let split = |y: Tensor<F>| -> Result<Tensor<F>> { Ok(y.reshape(&[n, t, h, dh])?.permute(&[0, 2, 1, 3])?) };

        let normed = self.attn_norm.forward(x)?;
        let q = split(self.query.forward(&normed)?)?;
        let k = split(self.key.forward(&normed)?)?;
        let v = split(self.value.forward(&normed)?)?;
        let scores = q.matmul_t(&k)?.scale(F::lit(1.0 / (dh as f64).sqrt()))?;
        let attn = scores.softmax(3)?;
        let mixed = ctx.dropout(&attn, self.dropout)?.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[n, t, d])?;
        let attended = ctx.dropout(&self.out.forward(&mixed)?, self.dropout)?;
        let x1 = x.add(&attended)?;

        let hidden = self.fc1.forward(&self.mlp_norm.forward(&x1)?)?.gelu()?;
        let mlp = self.fc2.forward(&ctx.dropout(&hidden, self.dropout)?)?;
        let x2 = x1.add(&ctx.dropout(&mlp, self.dropout)?)?;
        Ok((x2, attn))
    }
}

impl<F: Scalar> Module<F> for TransformerLayer<F> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        self.attn_norm.parameters(out);
        self.query.parameters(out);
        self.key.parameters(out);
        self.value.parameters(out);
        self.out.parameters(out);
        self.mlp_norm.parameters(out);
        self.fc1.parameters(out);
        self.fc2.parameters(out);
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        self.attn_norm.parameters_mut(out);
        self.query.parameters_mut(out);
        self.key.parameters_mut(out);
        self.value.parameters_mut(out);
        self.out.parameters_mut(out);
        self.mlp_norm.parameters_mut(out);
        self.fc1.parameters_mut(out);
        self.fc2.parameters_mut(out);
    }
}
