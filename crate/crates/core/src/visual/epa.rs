//! Efficient paired attention with prompt tokens.
//!
//! Both branches use one query and one key projection. The spatial branch
//! attends across tokens, the channel branch across feature channels. With
//! prompting enabled, half of the block's `P` prompts are prepended to the
//! spatial input and half to the channel input. The prompt-position outputs
//! of both branches feed the global transform `T`, whose `1 × C` output `g`
//! scales the summed attention map before the residual add:
//!
//! `I ← I + (I_S + I_C) ⊙ g`

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attribute::init_prompt;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{scaled_dot_attention, FeedForward, LayerNorm, Linear, WEIGHT_STD};
use crate::params::{truncated_normal, ParameterStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct EpaBlock {
    pub norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value_spatial: Linear,
    pub value_channel: Linear,
    pub out_spatial: Linear,
    pub out_channel: Linear,
    pub ffn: FeedForward,
    pub width: usize,
}

impl EpaBlock {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        prefix: &str,
        width: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        let lin = |store: &mut ParameterStore, rng: &mut R, name: &str| {
            Linear::init(store, rng, &format!("{prefix}.{name}"), width, width, true)
        };
        Ok(Self {
            norm: LayerNorm::init(store, &format!("{prefix}.norm"), width)?,
            query: lin(store, rng, "query")?,
            key: lin(store, rng, "key")?,
            value_spatial: lin(store, rng, "value_spatial")?,
            value_channel: lin(store, rng, "value_channel")?,
            out_spatial: lin(store, rng, "out_spatial")?,
            out_channel: lin(store, rng, "out_channel")?,
            ffn: FeedForward::init(store, rng, &format!("{prefix}.ffn"), width, ffn_hidden)?,
            width,
        })
    }
}

/// Prompt tokens for one block: `P/2` rows for each branch.
#[derive(Debug, Clone)]
pub struct VisualPromptSet {
    pub spatial: String,
    pub channel: String,
    pub count: usize,
}

impl VisualPromptSet {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        prefix: &str,
        count: usize,
        width: usize,
    ) -> Result<Self> {
        if count == 0 || count % 2 != 0 {
            return Err(Error::Config(format!(
                "visual prompt count must be even and positive, got {count}"
            )));
        }
        let spatial = format!("{prefix}.prompt.spatial");
        let channel = format!("{prefix}.prompt.channel");
        store.insert(&spatial, init_prompt(rng, count / 2, width))?;
        store.insert(&channel, init_prompt(rng, count / 2, width))?;
        Ok(Self { spatial, channel, count })
    }
}

/// How `T` maps the `P × C` prompt outputs to a `1 × C` vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GlobalTransformKind {
    /// A `1 × P` weight mixing prompt rows per channel, plus a per-channel bias.
    #[default]
    PromptAxis,
    /// A dense `P·C × C` weight on the flattened prompts, plus a bias.
    Full,
}

#[derive(Debug, Clone)]
pub struct GlobalPromptTransform {
    pub weight: String,
    pub bias: String,
    pub kind: GlobalTransformKind,
}

impl GlobalPromptTransform {
    /// The bias starts at one so that `g ≈ 1` and a pretrained block is
    /// initially left close to its unscaled behaviour.
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        prefix: &str,
        prompt_count: usize,
        width: usize,
        kind: GlobalTransformKind,
    ) -> Result<Self> {
        let weight = format!("{prefix}.global.weight");
        let bias = format!("{prefix}.global.bias");
        let shape = match kind {
            GlobalTransformKind::PromptAxis => [1, prompt_count],
            GlobalTransformKind::Full => [prompt_count * width, width],
        };
        store.insert(&weight, truncated_normal(rng, &shape, WEIGHT_STD))?;
        store.insert(&bias, Tensor::ones(&[width]))?;
        Ok(Self { weight, bias, kind })
    }

    /// `g = T(prompts)` for a `P × C` prompt matrix.
    pub fn forward(&self, g: &mut Graph<'_>, prompts: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        let mixed = match self.kind {
            GlobalTransformKind::PromptAxis => g.matmul(w, prompts)?,
            GlobalTransformKind::Full => {
                let n = g.value(prompts).numel();
                let flat = g.reshape(prompts, vec![1, n])?;
                g.matmul(flat, w)?
            }
        };
        Ok(g.add_row(mixed, b)?)
    }
}

/// Spatial-wise attention over the token axis, output-projected.
pub fn swa(g: &mut Graph<'_>, block: &EpaBlock, tokens: Var) -> Result<Var> {
    let q = block.query.forward(g, tokens)?;
    let k = block.key.forward(g, tokens)?;
    let v = block.value_spatial.forward(g, tokens)?;
    let attended = scaled_dot_attention(g, q, k, v)?;
    Ok(block.out_spatial.forward(g, attended)?)
}

/// Channel-wise attention: `A = softmax(Qᵀ·K / √T)` is `C × C` with rows
/// normalized, and output channel `i` is `Σ_j A[i,j] · V[:, j]`.
pub fn cwa(g: &mut Graph<'_>, block: &EpaBlock, tokens: Var) -> Result<Var> {
    let q = block.query.forward(g, tokens)?;
    let k = block.key.forward(g, tokens)?;
    let v = block.value_channel.forward(g, tokens)?;
    let t = g.shape(tokens)[0];
    let qt = g.transpose(q)?;
    let scores = g.matmul(qt, k)?;
    let scores = g.scale(scores, 1.0 / (t as f64).sqrt());
    let attn = g.softmax(scores, 1)?;
    let attn_t = g.transpose(attn)?;
    let mixed = g.matmul(v, attn_t)?;
    Ok(block.out_channel.forward(g, mixed)?)
}

/// One EPA block: paired attention, optional prompts and global scaling,
/// residual add, then the feed-forward sublayer.
pub fn epa_prompt_forward(
    g: &mut Graph<'_>,
    block: &EpaBlock,
    prompts: Option<&VisualPromptSet>,
    global: Option<&GlobalPromptTransform>,
    input: Var,
) -> Result<Var> {
    if global.is_some() && prompts.is_none() {
        return Err(Error::Config("global prompt transform requires visual prompts".into()));
    }
    let n = g.shape(input)[0];
    let x = block.norm.forward(g, input)?;
    let attn = match prompts {
        None => {
            let spatial = swa(g, block, x)?;
            let channel = cwa(g, block, x)?;
            g.add(spatial, channel)?
        }
        Some(set) => {
            let half = set.count / 2;
            let ps = g.param(&set.spatial)?;
            let pc = g.param(&set.channel)?;
            let s_in = g.concat(&[ps, x], 0)?;
            let c_in = g.concat(&[pc, x], 0)?;
            let s_out = swa(g, block, s_in)?;
            let c_out = cwa(g, block, c_in)?;
            let s_parts = g.split(s_out, 0, &[half, n])?;
            let c_parts = g.split(c_out, 0, &[half, n])?;
            let summed = g.add(s_parts[1], c_parts[1])?;
            match global {
                None => summed,
                Some(t) => {
                    let prompt_out = g.concat(&[s_parts[0], c_parts[0]], 0)?;
                    let scale = t.forward(g, prompt_out)?;
                    g.mul_row(summed, scale)?
                }
            }
        }
    };
    let residual = g.add(input, attn)?;
    Ok(block.ffn.forward(g, residual)?)
}
