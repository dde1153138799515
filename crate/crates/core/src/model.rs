//! The full two-modality classifier: visual encoder, attribute encoder and
//! fusion head, with optional prompt families.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribute::{AttributeEncoder, AttributeSchema, EncodedRecord, TabularConfig};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionHead, HEAD_PREFIX};
use crate::ops::sigmoid;
use crate::params::ParameterStore;
use crate::visual::{GlobalTransformKind, Volume, VisualConfig, VisualEncoder, VisualPrompting};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub visual: VisualConfig,
    pub tabular: TabularConfig,
    pub fusion: FusionConfig,
}

/// Which prompt families a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Visual prompts per EPA block (0 disables; otherwise even).
    pub visual: usize,
    /// Tabular prompts per layer (0 disables).
    pub tabular: usize,
    /// Global prompt transform in every EPA block.
    pub global: bool,
    pub transform: GlobalTransformKind,
}

impl PromptConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_none(&self) -> bool {
        self.visual == 0 && self.tabular == 0
    }

    fn validate(&self) -> Result<()> {
        if self.global && self.visual == 0 {
            return Err(Error::Config("global prompt requires visual prompts".into()));
        }
        if self.visual % 2 != 0 {
            return Err(Error::Config(format!(
                "visual prompt count must be even, got {}",
                self.visual
            )));
        }
        Ok(())
    }
}

/// One subject: volume, preprocessed attributes and binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub volume: Volume,
    pub record: EncodedRecord,
    pub label: u8,
}

#[derive(Debug, Clone)]
pub struct VapFormer {
    pub config: ModelConfig,
    pub prompts: PromptConfig,
    pub visual: VisualEncoder,
    pub tabular: AttributeEncoder,
    pub fusion: FusionHead,
}

/// Prompt tokens and global transforms, by naming convention.
pub fn is_prompt_param(name: &str) -> bool {
    name.ends_with(".prompt") || name.contains(".prompt.") || name.contains(".global.")
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with(HEAD_PREFIX)
}

impl VapFormer {
    /// Builds the model and its parameters. Backbone values depend only on
    /// `seed` and the model config; prompts draw from a separate stream, so
    /// adding prompts never changes the backbone.
    pub fn build(
        config: &ModelConfig,
        schema: &AttributeSchema,
        prompts: PromptConfig,
        seed: u64,
    ) -> Result<(Self, ParameterStore)> {
        schema.validate()?;
        prompts.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prompt_rng = ChaCha8Rng::seed_from_u64(seed);
        prompt_rng.set_stream(1);

        let mut visual = VisualEncoder::init(&mut store, &mut rng, &config.visual, None)?;
        let mut tabular = AttributeEncoder::init(&mut store, &mut rng, schema, &config.tabular, 0)?;
        let fusion = FusionHead::init(
            &mut store,
            &mut rng,
            &config.fusion,
            visual.output_width(),
            tabular.width(),
        )?;
        if prompts.visual > 0 {
            let p = VisualPrompting {
                count: prompts.visual,
                global: prompts.global.then_some(prompts.transform),
            };
            visual = visual.add_prompts(&mut store, &mut prompt_rng, p)?;
        }
        if prompts.tabular > 0 {
            tabular = tabular.add_prompts(&mut store, &mut prompt_rng, prompts.tabular)?;
        }
        Ok((
            Self {
                config: config.clone(),
                prompts,
                visual,
                tabular,
                fusion,
            },
            store,
        ))
    }

    /// `1 × 1` logit for one sample.
    pub fn forward(&self, g: &mut Graph<'_>, sample: &Sample) -> Result<Var> {
        let v = self.visual.forward(g, &sample.volume)?;
        let t = self.tabular.forward(g, &sample.record)?;
        self.fusion.forward(g, v, t)
    }

    /// Mean binary cross-entropy over a batch.
    pub fn batch_loss(&self, g: &mut Graph<'_>, batch: &[&Sample]) -> Result<Var> {
        let mut logits = Vec::with_capacity(batch.len());
        for s in batch {
            logits.push(self.forward(g, s)?);
        }
        let stacked = if logits.len() == 1 { logits[0] } else { g.concat(&logits, 0)? };
        let labels: Vec<f64> = batch.iter().map(|s| s.label as f64).collect();
        Ok(g.bce_with_logits(stacked, &labels)?)
    }

    pub fn logit(&self, store: &ParameterStore, sample: &Sample) -> Result<f64> {
        let mut g = Graph::inference(store);
        let l = self.forward(&mut g, sample)?;
        Ok(g.value(l).data()[0])
    }

    /// Positive-class probability.
    pub fn predict(&self, store: &ParameterStore, sample: &Sample) -> Result<f64> {
        self.logit(store, sample).map(sigmoid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribute::{AttributeRecord, AttributeValue};

    fn sample(label: u8) -> Sample {
        use AttributeValue::*;
        let schema = AttributeSchema::clinical_default();
        let record = schema
            .encode(&AttributeRecord {
                values: vec![
                    Number(72.0),
                    Level(0),
                    Number(16.0),
                    Level(1),
                    Number(22.0),
                    Number(300.0),
                    Number(1.2),
                ],
            })
            .unwrap();
        let data = (0..16 * 16 * 16).map(|i| ((i % 17) as f32) / 17.0).collect();
        Sample {
            volume: Volume::new([16, 16, 16], data).unwrap(),
            record,
            label,
        }
    }

    fn small() -> ModelConfig {
        ModelConfig {
            visual: VisualConfig {
                volume: [16, 16, 16],
                ..VisualConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn prompts_do_not_change_backbone() {
        let schema = AttributeSchema::clinical_default();
        let (_, plain) = VapFormer::build(&small(), &schema, PromptConfig::none(), 3).unwrap();
        let prompts = PromptConfig {
            visual: 10,
            tabular: 5,
            global: true,
            ..PromptConfig::default()
        };
        let (_, prompted) = VapFormer::build(&small(), &schema, prompts, 3).unwrap();
        for (name, t) in plain.iter() {
            assert!(prompted.get(name).unwrap().bit_eq(t), "{name}");
        }
        let extra: Vec<_> = prompted.names().filter(|n| !plain.contains(n)).collect();
        assert!(!extra.is_empty());
        assert!(extra.iter().all(|n| is_prompt_param(n)), "{extra:?}");
    }

    #[test]
    fn invalid_prompt_configs() {
        let schema = AttributeSchema::clinical_default();
        let global_only = PromptConfig {
            global: true,
            ..PromptConfig::default()
        };
        assert!(matches!(
            VapFormer::build(&small(), &schema, global_only, 0),
            Err(Error::Config(_))
        ));
        let odd = PromptConfig {
            visual: 3,
            ..PromptConfig::default()
        };
        assert!(VapFormer::build(&small(), &schema, odd, 0).is_err());
    }

    #[test]
    fn batch_loss_is_finite_and_predictions_are_probabilities() {
        let schema = AttributeSchema::clinical_default();
        let (model, store) = VapFormer::build(&small(), &schema, PromptConfig::none(), 1).unwrap();
        let (a, b) = (sample(0), sample(1));
        let mut g = Graph::with_params(&store);
        let loss = model.batch_loss(&mut g, &[&a, &b]).unwrap();
        assert!(g.value(loss).data()[0].is_finite());
        let p = model.predict(&store, &a).unwrap();
        assert!(p > 0.0 && p < 1.0);
    }
}
