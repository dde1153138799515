//! Class-token fusion of visual and tabular tokens, plus the classifier head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::{LayerNorm, Linear, TransformerLayer, WEIGHT_STD};
use crate::params::{truncated_normal, ParameterStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub head_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 1,
            heads: 4,
            ffn_ratio: 4,
            head_hidden: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionHead {
    pub proj_visual: Linear,
    pub proj_tabular: Linear,
    pub cls: String,
    pub layers: Vec<TransformerLayer>,
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Prefix shared by the classifier parameters.
pub const HEAD_PREFIX: &str = "head.";

impl FusionHead {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        cfg: &FusionConfig,
        visual_width: usize,
        tabular_width: usize,
    ) -> Result<Self> {
        let c = cfg.width;
        let proj_visual = Linear::init(store, rng, "fuse.proj_visual", visual_width, c, true)?;
        let proj_tabular = Linear::init(store, rng, "fuse.proj_tabular", tabular_width, c, true)?;
        let cls = "fuse.cls".to_string();
        store.insert(&cls, truncated_normal(rng, &[1, c], WEIGHT_STD))?;
        let mut layers = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            layers.push(TransformerLayer::init(
                store,
                rng,
                &format!("fuse.l{i}"),
                c,
                cfg.heads,
                c * cfg.ffn_ratio,
            )?);
        }
        Ok(Self {
            proj_visual,
            proj_tabular,
            cls,
            layers,
            norm: LayerNorm::init(store, "fuse.norm", c)?,
            fc1: Linear::init(store, rng, "head.fc1", c, cfg.head_hidden, true)?,
            fc2: Linear::init(store, rng, "head.fc2", cfg.head_hidden, 1, true)?,
        })
    }

    /// `[CLS; proj(visual); proj(tabular)]` through the fusion layers.
    pub fn fuse(&self, g: &mut Graph<'_>, visual: Var, tabular: Var) -> Result<Var> {
        let cls = g.param(&self.cls)?;
        let v = self.proj_visual.forward(g, visual)?;
        let t = self.proj_tabular.forward(g, tabular)?;
        let mut x = g.concat(&[cls, v, t], 0)?;
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        Ok(x)
    }

    /// `1 × 1` logit from the class-token position.
    pub fn classify(&self, g: &mut Graph<'_>, fused: Var) -> Result<Var> {
        let cls = g.slice(fused, 0, 0, 1)?;
        let h = self.norm.forward(g, cls)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        Ok(self.fc2.forward(g, h)?)
    }

    pub fn forward(&self, g: &mut Graph<'_>, visual: Var, tabular: Var) -> Result<Var> {
        let fused = self.fuse(g, visual, tabular)?;
        self.classify(g, fused)
    }
}
