//! Named layers shared by the encoders and the fusion block.
//!
//! Layers only hold parameter names; values live in a [`ParameterStore`]
//! and are bound onto a [`Graph`] at forward time.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{truncated_normal, ParameterStore};
use crate::tensor::{Result, Tensor};

pub const WEIGHT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
}

impl Linear {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        store.insert(&weight, truncated_normal(rng, &[fan_in, fan_out], WEIGHT_STD))?;
        let bias = if bias {
            let name = format!("{prefix}.bias");
            store.insert(&name, Tensor::zeros(&[fan_out]))?;
            Some(name)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = self.bias.as_deref().map(|b| g.param(b)).transpose()?;
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn init(store: &mut ParameterStore, prefix: &str, width: usize) -> Result<Self> {
        let gamma = format!("{prefix}.gamma");
        let beta = format!("{prefix}.beta");
        store.insert(&gamma, Tensor::ones(&[width]))?;
        store.insert(&beta, Tensor::zeros(&[width]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma)?;
        let beta = g.param(&self.beta)?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Pre-norm residual MLP: `x + fc2(gelu(fc1(norm(x))))`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        prefix: &str,
        width: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::init(store, &format!("{prefix}.norm"), width)?,
            fc1: Linear::init(store, rng, &format!("{prefix}.fc1"), width, hidden, true)?,
            fc2: Linear::init(store, rng, &format!("{prefix}.fc2"), hidden, width, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }
}

/// `softmax(q·kᵀ / √d) · v` for rank-2 operands.
pub fn scaled_dot_attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = g.shape(q)[1];
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax(scores, 1)?;
    g.matmul(attn, v)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        prefix: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(crate::tensor::TensorError::Invalid(format!(
                "head count {heads} must divide width {width}"
            )));
        }
        Ok(Self {
            query: Linear::init(store, rng, &format!("{prefix}.query"), width, width, true)?,
            key: Linear::init(store, rng, &format!("{prefix}.key"), width, width, true)?,
            value: Linear::init(store, rng, &format!("{prefix}.value"), width, width, true)?,
            out: Linear::init(store, rng, &format!("{prefix}.out"), width, width, true)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let width = g.shape(x)[1];
        let dh = width / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            outs.push(scaled_dot_attention(g, qh, kh, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.out.forward(g, merged)
    }
}

/// Pre-norm transformer layer: self-attention then feed-forward, each residual.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
}

impl TransformerLayer {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        prefix: &str,
        width: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::init(store, &format!("{prefix}.norm"), width)?,
            attn: MultiHeadAttention::init(store, rng, &format!("{prefix}.attn"), width, heads)?,
            ffn: FeedForward::init(store, rng, &format!("{prefix}.ffn"), width, ffn_hidden)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = self.attn.forward(g, h)?;
        let x = g.add(x, h)?;
        self.ffn.forward(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_attention_returns_value_row() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(vec![1, 3], vec![0.3, -2.0, 1.0]).unwrap());
        let k = g.constant(Tensor::new(vec![1, 3], vec![5.0, 1.0, 0.1]).unwrap());
        let v = g.constant(Tensor::new(vec![1, 3], vec![7.0, 8.0, 9.0]).unwrap());
        let o = scaled_dot_attention(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(o).data(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut s = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MultiHeadAttention::init(&mut s, &mut rng, "a", 10, 4).is_err());
        assert!(MultiHeadAttention::init(&mut s, &mut rng, "b", 12, 4).is_ok());
    }

    #[test]
    fn transformer_layer_keeps_shape() {
        let mut s = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = TransformerLayer::init(&mut s, &mut rng, "l", 8, 2, 16).unwrap();
        let mut g = Graph::with_params(&s);
        let x = g.constant(truncated_normal(&mut rng, &[5, 8], 1.0));
        let y = layer.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[5, 8]);
    }
}
