//! Attribute tokens and the prompted tabular transformer.
//!
//! Each layer sees `[P_i; X_i]`: `p` fresh learnable prompt rows prepended
//! to the `M` attribute tokens. The prompt positions of the layer output are
//! dropped, so every layer returns exactly `M` tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schema::{AttributeKind, AttributeSchema, EncodedRecord, EncodedValue};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{TransformerLayer, WEIGHT_STD};
use crate::params::{truncated_normal, uniform, ParameterStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TabularConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
}

impl Default for TabularConfig {
    fn default() -> Self {
        Self {
            width: 32,
            depth: 2,
            heads: 4,
            ffn_ratio: 4,
        }
    }
}

#[derive(Debug, Clone)]
enum Embedding {
    /// `cardinality × C` table selected by the one-hot level.
    Table(String),
    /// `scaled · direction + bias`.
    Numeric { direction: String, bias: String },
}

#[derive(Debug, Clone)]
pub struct AttributeEncoder {
    embeddings: Vec<Embedding>,
    identity: String,
    layers: Vec<TransformerLayer>,
    prompts: Vec<String>,
    prompt_count: usize,
    width: usize,
}

/// Uniform prompt initialization in `±0.5/√C`.
pub(crate) fn init_prompt<R: Rng>(rng: &mut R, count: usize, width: usize) -> Tensor {
    uniform(rng, &[count, width], 0.5 / (width as f64).sqrt())
}

impl AttributeEncoder {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        schema: &AttributeSchema,
        cfg: &TabularConfig,
        prompt_count: usize,
    ) -> Result<Self> {
        let c = cfg.width;
        let mut embeddings = Vec::with_capacity(schema.len());
        for attr in &schema.attributes {
            let prefix = format!("tab.embed.{}", attr.name);
            embeddings.push(match attr.kind {
                AttributeKind::Categorical { cardinality } => {
                    let name = format!("{prefix}.table");
                    store.insert(&name, truncated_normal(rng, &[cardinality, c], WEIGHT_STD))?;
                    Embedding::Table(name)
                }
                AttributeKind::Numerical { .. } => {
                    let direction = format!("{prefix}.direction");
                    let bias = format!("{prefix}.bias");
                    store.insert(&direction, truncated_normal(rng, &[1, c], WEIGHT_STD))?;
                    store.insert(&bias, Tensor::zeros(&[1, c]))?;
                    Embedding::Numeric { direction, bias }
                }
            });
        }
        let identity = "tab.embed.identity".to_string();
        store.insert(&identity, truncated_normal(rng, &[schema.len(), c], WEIGHT_STD))?;
        let mut layers = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            layers.push(TransformerLayer::init(
                store,
                rng,
                &format!("tab.l{i}"),
                c,
                cfg.heads,
                c * cfg.ffn_ratio,
            )?);
        }
        let encoder = Self::from_parts(embeddings, identity, layers, Vec::new(), 0, c)?;
        if prompt_count > 0 {
            encoder.add_prompts(store, rng, prompt_count)
        } else {
            Ok(encoder)
        }
    }

    /// Adds `count` fresh prompt rows in front of every layer.
    pub fn add_prompts<R: Rng>(self, store: &mut ParameterStore, rng: &mut R, count: usize) -> Result<Self> {
        let mut names = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let name = format!("tab.l{i}.prompt");
            store.insert(&name, init_prompt(rng, count, self.width))?;
            names.push(name);
        }
        self.with_prompts(names, count)
    }

    fn from_parts(
        embeddings: Vec<Embedding>,
        identity: String,
        layers: Vec<TransformerLayer>,
        prompts: Vec<String>,
        prompt_count: usize,
        width: usize,
    ) -> Result<Self> {
        if !prompts.is_empty() && prompts.len() != layers.len() {
            return Err(Error::Config(format!(
                "tabular prompt stack has {} entries for {} layers",
                prompts.len(),
                layers.len()
            )));
        }
        Ok(Self {
            embeddings,
            identity,
            layers,
            prompts,
            prompt_count,
            width,
        })
    }

    /// Replaces the prompt stack; its length must match the layer count
    /// (or be empty to disable prompting).
    pub fn with_prompts(self, prompts: Vec<String>, prompt_count: usize) -> Result<Self> {
        Self::from_parts(self.embeddings, self.identity, self.layers, prompts, prompt_count, self.width)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn prompt_count(&self) -> usize {
        if self.prompts.is_empty() {
            0
        } else {
            self.prompt_count
        }
    }

    pub fn prompt_names(&self) -> &[String] {
        &self.prompts
    }

    pub fn layers(&self) -> &[TransformerLayer] {
        &self.layers
    }

    /// `M × C` attribute tokens.
    pub fn embed(&self, g: &mut Graph<'_>, record: &EncodedRecord) -> Result<Var> {
        if record.values.len() != self.embeddings.len() {
            return Err(Error::Input(format!(
                "record has {} attributes, encoder expects {}",
                record.values.len(),
                self.embeddings.len()
            )));
        }
        let mut rows = Vec::with_capacity(self.embeddings.len());
        for (emb, value) in self.embeddings.iter().zip(&record.values) {
            let row = match (emb, *value) {
                (Embedding::Table(table), EncodedValue::OneHot { level, cardinality }) => {
                    let mut onehot = Tensor::zeros(&[1, cardinality]);
                    onehot.data_mut()[level] = 1.0;
                    let onehot = g.constant(onehot);
                    let table = g.param(table)?;
                    g.matmul(onehot, table)?
                }
                (Embedding::Numeric { direction, bias }, EncodedValue::Scaled(x)) => {
                    let d = g.param(direction)?;
                    let b = g.param(bias)?;
                    let scaled = g.scale(d, x);
                    g.add(scaled, b)?
                }
                _ => return Err(Error::Input("encoded value kind does not match embedding".into())),
            };
            rows.push(row);
        }
        let tokens = g.concat(&rows, 0)?;
        let identity = g.param(&self.identity)?;
        Ok(g.add(tokens, identity)?)
    }

    /// One layer over `[prompts; x]`, returning only the attribute positions.
    pub fn layer_forward(&self, g: &mut Graph<'_>, layer: usize, x: Var) -> Result<Var> {
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Config(format!("tabular layer {layer} does not exist")))?;
        tab_prompt_layer_forward(g, l, self.prompts.get(layer).map(String::as_str), x)
    }

    pub fn forward(&self, g: &mut Graph<'_>, record: &EncodedRecord) -> Result<Var> {
        let mut x = self.embed(g, record)?;
        for i in 0..self.layers.len() {
            x = self.layer_forward(g, i, x)?;
        }
        Ok(x)
    }
}

/// Runs `layer` on `[prompt; x]` and discards the leading prompt outputs.
pub fn tab_prompt_layer_forward(
    g: &mut Graph<'_>,
    layer: &TransformerLayer,
    prompt: Option<&str>,
    x: Var,
) -> Result<Var> {
    let Some(prompt) = prompt else {
        return Ok(layer.forward(g, x)?);
    };
    let p = g.param(prompt)?;
    let (p_len, m) = (g.shape(p)[0], g.shape(x)[0]);
    let seq = g.concat(&[p, x], 0)?;
    let out = layer.forward(g, seq)?;
    Ok(g.slice(out, 0, p_len, m)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribute::schema::{AttributeRecord, AttributeValue};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record() -> EncodedRecord {
        use AttributeValue::*;
        AttributeSchema::clinical_default()
            .encode(&AttributeRecord {
                values: vec![
                    Number(70.0),
                    Level(1),
                    Number(14.0),
                    Level(2),
                    Number(30.0),
                    Number(350.0),
                    Number(1.1),
                ],
            })
            .unwrap()
    }

    fn build(prompts: usize) -> (ParameterStore, AttributeEncoder) {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = AttributeEncoder::init(
            &mut store,
            &mut rng,
            &AttributeSchema::clinical_default(),
            &TabularConfig::default(),
            prompts,
        )
        .unwrap();
        (store, enc)
    }

    #[test]
    fn tokens_are_seven_by_width() {
        let (store, enc) = build(5);
        let mut g = Graph::with_params(&store);
        let x = enc.embed(&mut g, &record()).unwrap();
        assert_eq!(g.shape(x), &[7, 32]);
        let y = enc.forward(&mut g, &record()).unwrap();
        assert_eq!(g.shape(y), &[7, 32]);
    }

    #[test]
    fn categorical_selects_table_row() {
        let (store, enc) = build(0);
        let mut g = Graph::with_params(&store);
        let x = enc.embed(&mut g, &record()).unwrap();
        let table = store.get("tab.embed.gender.table").unwrap();
        let id = store.get("tab.embed.identity").unwrap();
        for c in 0..32 {
            assert_eq!(g.value(x).at(1, c), table.at(1, c) + id.at(1, c));
        }
    }

    #[test]
    fn prompt_stack_length_is_checked() {
        let (_, enc) = build(0);
        assert!(enc.clone().with_prompts(vec!["a".into()], 5).is_err());
        assert!(enc.with_prompts(vec![], 0).is_ok());
    }

    #[test]
    fn zero_prompts_reduce_to_plain_layers() {
        let (store, enc) = build(0);
        let mut g = Graph::with_params(&store);
        let out = enc.forward(&mut g, &record()).unwrap();
        let mut g2 = Graph::with_params(&store);
        let mut x = enc.embed(&mut g2, &record()).unwrap();
        for l in enc.layers() {
            x = l.forward(&mut g2, x).unwrap();
        }
        assert!(g.value(out).bit_eq(g2.value(x)));
    }
}
