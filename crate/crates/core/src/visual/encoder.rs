use rand::Rng;
use serde::{Deserialize, Serialize};

use super::epa::{epa_prompt_forward, EpaBlock, GlobalPromptTransform, GlobalTransformKind, VisualPromptSet};
use super::volume::{merge_index, patch_grid, patchify, Volume};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, WEIGHT_STD};
use crate::params::{truncated_normal, ParameterStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualConfig {
    /// `[D, H, W]` in voxels.
    pub volume: [usize; 3],
    /// Cubic patch side for the first stage.
    pub patch: usize,
    /// Channel width per stage.
    pub widths: Vec<usize>,
    /// EPA blocks per stage.
    pub depths: Vec<usize>,
    /// Per-axis token merge factor between stages.
    pub downsample: usize,
    pub ffn_ratio: usize,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            volume: [32, 32, 32],
            patch: 4,
            widths: vec![32, 64],
            depths: vec![1, 1],
            downsample: 2,
            ffn_ratio: 4,
        }
    }
}

impl VisualConfig {
    /// Token grid of every stage.
    pub fn stage_grids(&self) -> Result<Vec<[usize; 3]>> {
        if self.widths.is_empty() || self.widths.len() != self.depths.len() {
            return Err(Error::Config(format!(
                "visual stages: {} widths vs {} depths",
                self.widths.len(),
                self.depths.len()
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("visual stage width must be positive".into()));
        }
        let mut grid = patch_grid(self.volume, self.patch)?;
        let mut grids = vec![grid];
        for _ in 1..self.widths.len() {
            grid = patch_grid(grid, self.downsample)?;
            grids.push(grid);
        }
        Ok(grids)
    }

    pub fn output_tokens(&self) -> Result<usize> {
        Ok(self.stage_grids()?.last().unwrap().iter().product())
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }
}

#[derive(Debug, Clone)]
enum StageEntry {
    Patch { proj: Linear, patch: usize },
    Merge { index: Vec<usize>, proj: Linear, norm: LayerNorm },
}

#[derive(Debug, Clone)]
pub struct VisualStage {
    entry: StageEntry,
    pos: String,
    pub blocks: Vec<EpaBlock>,
    pub prompts: Vec<Option<VisualPromptSet>>,
    pub globals: Vec<Option<GlobalPromptTransform>>,
    pub tokens: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub stages: Vec<VisualStage>,
    volume: [usize; 3],
}

/// Visual prompt settings for the whole encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisualPrompting {
    pub count: usize,
    pub global: Option<GlobalTransformKind>,
}

impl VisualEncoder {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        cfg: &VisualConfig,
        prompting: Option<VisualPrompting>,
    ) -> Result<Self> {
        let grids = cfg.stage_grids()?;
        let mut stages = Vec::with_capacity(grids.len());
        for (s, grid) in grids.iter().enumerate() {
            let width = cfg.widths[s];
            let tokens: usize = grid.iter().product();
            let prefix = format!("vis.s{s}");
            let entry = if s == 0 {
                let p3 = cfg.patch.pow(3);
                StageEntry::Patch {
                    proj: Linear::init(store, rng, &format!("{prefix}.embed"), p3, width, true)?,
                    patch: cfg.patch,
                }
            } else {
                let prev = cfg.widths[s - 1];
                let f3 = cfg.downsample.pow(3);
                let (index, _) = merge_index(grids[s - 1], prev, cfg.downsample)?;
                StageEntry::Merge {
                    index,
                    proj: Linear::init(store, rng, &format!("{prefix}.embed"), f3 * prev, width, true)?,
                    norm: LayerNorm::init(store, &format!("{prefix}.embed.norm"), width)?,
                }
            };
            let pos = format!("{prefix}.pos");
            store.insert(&pos, truncated_normal(rng, &[tokens, width], WEIGHT_STD))?;
            let mut blocks = Vec::new();
            for b in 0..cfg.depths[s] {
                let bp = format!("{prefix}.b{b}");
                blocks.push(EpaBlock::init(store, rng, &bp, width, width * cfg.ffn_ratio)?);
            }
            let depth = blocks.len();
            stages.push(VisualStage {
                entry,
                pos,
                blocks,
                prompts: vec![None; depth],
                globals: vec![None; depth],
                tokens,
                width,
            });
        }
        let encoder = Self {
            stages,
            volume: cfg.volume,
        };
        match prompting {
            Some(p) => encoder.add_prompts(store, rng, p),
            None => Ok(encoder),
        }
    }

    /// Adds a fresh prompt set (and global transform, if requested) to every
    /// block. Backbone parameters are untouched.
    pub fn add_prompts<R: Rng>(
        mut self,
        store: &mut ParameterStore,
        rng: &mut R,
        prompting: VisualPrompting,
    ) -> Result<Self> {
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for b in 0..stage.blocks.len() {
                let bp = format!("vis.s{s}.b{b}");
                stage.prompts[b] = Some(VisualPromptSet::init(store, rng, &bp, prompting.count, stage.width)?);
                stage.globals[b] = match prompting.global {
                    Some(kind) => Some(GlobalPromptTransform::init(
                        store,
                        rng,
                        &bp,
                        prompting.count,
                        stage.width,
                        kind,
                    )?),
                    None => None,
                };
            }
        }
        Ok(self)
    }

    fn check(&self) -> Result<()> {
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.prompts.len() != stage.blocks.len() || stage.globals.len() != stage.blocks.len() {
                return Err(Error::Config(format!(
                    "stage {s}: {} blocks but {} prompt sets and {} global transforms",
                    stage.blocks.len(),
                    stage.prompts.len(),
                    stage.globals.len()
                )));
            }
            for (b, (p, t)) in stage.prompts.iter().zip(&stage.globals).enumerate() {
                if t.is_some() && p.is_none() {
                    return Err(Error::Config(format!(
                        "stage {s} block {b}: global transform without prompts"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        self.stages.last().map_or(0, |s| s.width)
    }

    pub fn output_tokens(&self) -> usize {
        self.stages.last().map_or(0, |s| s.tokens)
    }

    /// Stage entry: patch embedding or token merge, then positional embedding.
    pub fn stage_entry(&self, g: &mut Graph<'_>, stage: usize, input: StageInput<'_>) -> Result<Var> {
        let st = &self.stages[stage];
        let x = match (&st.entry, input) {
            (StageEntry::Patch { proj, patch }, StageInput::Volume(v)) => {
                if v.dims != self.volume {
                    return Err(Error::Input(format!(
                        "volume {:?} does not match configured {:?}",
                        v.dims, self.volume
                    )));
                }
                let patches = g.constant(patchify(v, *patch)?);
                proj.forward(g, patches)?
            }
            (StageEntry::Merge { index, proj, norm }, StageInput::Tokens(prev)) => {
                let width = index.len() / st.tokens;
                let merged = g.gather(prev, index.clone(), vec![st.tokens, width])?;
                let h = proj.forward(g, merged)?;
                norm.forward(g, h)?
            }
            _ => return Err(Error::Config(format!("stage {stage} received the wrong input kind"))),
        };
        let pos = g.param(&st.pos)?;
        Ok(g.add(x, pos)?)
    }

    pub fn forward(&self, g: &mut Graph<'_>, volume: &Volume) -> Result<Var> {
        self.check()?;
        let mut x = self.stage_entry(g, 0, StageInput::Volume(volume))?;
        for (s, stage) in self.stages.iter().enumerate() {
            if s > 0 {
                x = self.stage_entry(g, s, StageInput::Tokens(x))?;
            }
            for ((block, prompts), global) in stage.blocks.iter().zip(&stage.prompts).zip(&stage.globals) {
                x = epa_prompt_forward(g, block, prompts.as_ref(), global.as_ref(), x)?;
            }
        }
        Ok(x)
    }

    /// Strips all prompt sets and global transforms (names stay in the store).
    pub fn without_prompts(mut self) -> Self {
        for st in &mut self.stages {
            st.prompts.iter_mut().for_each(|p| *p = None);
            st.globals.iter_mut().for_each(|t| *t = None);
        }
        self
    }

    pub fn prompt_sets(&self) -> impl Iterator<Item = &VisualPromptSet> {
        self.stages.iter().flat_map(|s| s.prompts.iter().flatten())
    }

    pub fn global_transforms(&self) -> impl Iterator<Item = &GlobalPromptTransform> {
        self.stages.iter().flat_map(|s| s.globals.iter().flatten())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum StageInput<'a> {
    Volume(&'a Volume),
    Tokens(Var),
}

/// Convenience for tests and tools: all-zero volume of the configured size.
pub fn blank_volume(cfg: &VisualConfig) -> Volume {
    Volume::zeros(cfg.volume)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use crate::tensor::Tensor;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let t = truncated_normal(&mut ChaCha8Rng::seed_from_u64(seed), &dims, 1.0);
        Volume::new(dims, t.data().iter().map(|&v| v as f32).collect()).unwrap()
    }

    #[test]
    fn reference_config_output_shape() {
        let cfg = VisualConfig::default();
        assert_eq!(cfg.output_tokens().unwrap(), 64);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = VisualEncoder::init(
            &mut store,
            &mut rng,
            &cfg,
            Some(VisualPrompting {
                count: 10,
                global: Some(GlobalTransformKind::PromptAxis),
            }),
        )
        .unwrap();
        let mut g = Graph::inference(&store);
        let out = enc.forward(&mut g, &random_volume([32, 32, 32], 1)).unwrap();
        assert_eq!(g.shape(out), &[64, 64]);
    }

    #[test]
    fn zero_volume_tokens_are_position_plus_bias() {
        let cfg = VisualConfig {
            volume: [8, 8, 8],
            widths: vec![4],
            depths: vec![1],
            ..VisualConfig::default()
        };
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = VisualEncoder::init(&mut store, &mut rng, &cfg, None).unwrap();
        store.assign("vis.s0.embed.bias", &Tensor::full(&[4], 0.25)).unwrap();
        let mut g = Graph::inference(&store);
        let x = enc.stage_entry(&mut g, 0, StageInput::Volume(&blank_volume(&cfg))).unwrap();
        let pos = store.get("vis.s0.pos").unwrap();
        for (a, b) in g.value(x).data().iter().zip(pos.data()) {
            assert_eq!(*a, b + 0.25);
        }
    }

    #[test]
    fn prompt_count_never_changes_output_shape() {
        let cfg = VisualConfig {
            volume: [16, 16, 16],
            ..VisualConfig::default()
        };
        let vol = random_volume([16, 16, 16], 3);
        for count in [2, 4, 10, 20] {
            let mut store = ParameterStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let prompting = VisualPrompting {
                count,
                global: Some(GlobalTransformKind::PromptAxis),
            };
            let enc = VisualEncoder::init(&mut store, &mut rng, &cfg, Some(prompting)).unwrap();
            let mut g = Graph::inference(&store);
            let out = enc.forward(&mut g, &vol).unwrap();
            assert_eq!(g.shape(out), &[8, 64]);
        }
    }

    #[test]
    fn mismatched_volume_and_config_errors() {
        let cfg = VisualConfig {
            volume: [16, 16, 16],
            ..VisualConfig::default()
        };
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut enc = VisualEncoder::init(&mut store, &mut rng, &cfg, None).unwrap();
        let mut g = Graph::inference(&store);
        assert!(enc.forward(&mut g, &random_volume([8, 8, 8], 0)).is_err());
        enc.stages[0].prompts.clear();
        assert!(matches!(
            enc.forward(&mut g, &random_volume([16, 16, 16], 0)),
            Err(Error::Config(_))
        ));
        let bad = VisualConfig {
            volume: [30, 32, 32],
            ..VisualConfig::default()
        };
        assert!(bad.stage_grids().is_err());
    }
}
