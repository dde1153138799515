//! Pretraining on task A and adaptation on task B.

mod scheduler;
mod strategy;

pub use scheduler::{PlateauConfig, ReduceLrOnPlateau};
pub use strategy::{build_freeze_mask, PromptCounts, TuningStrategy};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribute::AttributeSchema;
use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{EvalResult, MetricSummary};
use crate::model::{is_prompt_param, ModelConfig, PromptConfig, Sample, VapFormer};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    /// Initial learning rate. The default suits full-size data; the desk
    /// experiment raises it.
    pub lr: f64,
    pub optimizer: AdamWConfig,
    pub scheduler: PlateauConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_pretrain: 30,
            epochs_finetune: 20,
            batch_size: 4,
            lr: 1e-5,
            optimizer: AdamWConfig::default(),
            scheduler: PlateauConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub lr: f64,
}

/// Test hooks for exercising the verification paths.
#[derive(Debug, Clone, Default)]
pub struct TrainHooks {
    /// After this epoch, nudge the first frozen tensor by one ulp.
    pub corrupt_frozen_after_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Validation metrics of the returned (f32-rounded) weights.
    pub val: MetricSummary,
}

/// Worker count for read-only evaluation, from `VAPF_THREADS` (default 1).
pub fn eval_threads() -> usize {
    std::env::var("VAPF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Positive-class probabilities, in sample order regardless of `threads`.
pub fn predict_all(model: &VapFormer, store: &ParameterStore, samples: &[&Sample], threads: usize) -> Result<Vec<f64>> {
    let threads = threads.clamp(1, samples.len().max(1));
    if threads == 1 {
        return samples.iter().map(|s| model.predict(store, s)).collect();
    }
    let chunk = samples.len().div_ceil(threads);
    let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| model.predict(store, s)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate(model: &VapFormer, store: &ParameterStore, samples: &[&Sample]) -> Result<EvalResult> {
    let scores = predict_all(model, store, samples, eval_threads())?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite prediction for evaluation sample {i}")));
    }
    Ok(EvalResult::new(scores, samples.iter().map(|s| s.label).collect())?)
}

/// Trains the non-frozen parameters of `store` with AdamW and BCE. The
/// weights from the epoch with the best validation AUC are kept, rounded to
/// `f32` and re-evaluated.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &VapFormer,
    store: &mut ParameterStore,
    train_set: &[&Sample],
    val_set: &[&Sample],
    epochs: usize,
    cfg: &TrainConfig,
    seed: u64,
    hooks: &TrainHooks,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        ..cfg.optimizer
    });
    let mut sched = ReduceLrOnPlateau::new(cfg.scheduler, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7a1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    let mut log = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch_idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = batch_idx.iter().map(|&i| train_set[i]).collect();
            let (loss, grads) = {
                let mut g = Graph::with_params(store);
                let loss = model.batch_loss(&mut g, &batch)?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss {value} at epoch {epoch}, batch {b} (samples {batch_idx:?})"
                    )));
                }
                g.backward(loss)?;
                (value, g.param_grads())
            };
            store.accumulate_grads(grads)?;
            opt.step(store)?;
            loss_sum += loss * batch.len() as f64;
        }
        if hooks.corrupt_frozen_after_epoch == Some(epoch) {
            corrupt_first_frozen(store);
        }
        let val_auc = crate::metrics::auc(&evaluate(model, store, val_set)?)?;
        let lr = sched.step(val_auc);
        opt.set_lr(lr);
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_auc,
            lr,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_auc > *b) {
            best = Some((val_auc, epoch, store.clone()));
        }
    }

    let best_epoch = match best {
        Some((_, epoch, snapshot)) => {
            *store = snapshot;
            if hooks.corrupt_frozen_after_epoch.is_some_and(|e| e > epoch && e < epochs) {
                corrupt_first_frozen(store);
            }
            epoch
        }
        None => 0,
    };
    store.zero_grads();
    store.round_to_f32();
    let val = MetricSummary::compute(&evaluate(model, store, val_set)?)?;
    Ok(TrainOutcome { log, best_epoch, val })
}

/// Moves the first value of the first frozen tensor up by one `f32` ulp.
fn corrupt_first_frozen(store: &mut ParameterStore) {
    if let Some(name) = store.freeze_mask().iter().next().cloned() {
        let t = store.get_mut(&name).expect("mask names exist");
        let v = &mut t.data_mut()[0];
        *v = f32::from_bits((*v as f32).to_bits() + 1) as f64;
    }
}

/// Inputs shared by pretraining and adaptation.
#[derive(Debug, Clone, Copy)]
pub struct RunData<'a> {
    pub train: &'a [&'a Sample],
    pub val: &'a [&'a Sample],
    pub test: &'a [&'a Sample],
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub model: VapFormer,
    pub store: ParameterStore,
    pub outcome: TrainOutcome,
    pub test: MetricSummary,
    pub trainable_params: usize,
    pub total_params: usize,
}

impl RunReport {
    pub fn checkpoint(&self, config: serde_json::Value) -> Checkpoint {
        let mut metrics = IndexMap::new();
        metrics.insert("val_bacc".to_string(), self.outcome.val.bacc);
        metrics.insert("val_f1".to_string(), self.outcome.val.f1);
        metrics.insert("val_auc".to_string(), self.outcome.val.auc);
        metrics.insert("test_bacc".to_string(), self.test.bacc);
        metrics.insert("test_f1".to_string(), self.test.f1);
        metrics.insert("test_auc".to_string(), self.test.auc);
        Checkpoint::from_store(&self.store, config, metrics)
    }
}

fn test_metrics(model: &VapFormer, store: &ParameterStore, test: &[&Sample]) -> Result<MetricSummary> {
    Ok(MetricSummary::compute(&evaluate(model, store, test)?)?)
}

/// Full training of the prompt-free model on task A.
pub fn pretrain(
    model_cfg: &ModelConfig,
    schema: &AttributeSchema,
    data: RunData<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RunReport> {
    let (model, mut store) = VapFormer::build(model_cfg, schema, PromptConfig::none(), seed)?;
    store.round_to_f32();
    let outcome = train(&model, &mut store, data.train, data.val, cfg.epochs_pretrain, cfg, seed, &TrainHooks::default())?;
    let test = test_metrics(&model, &store, data.test)?;
    let total = store.total_count();
    Ok(RunReport {
        model,
        store,
        outcome,
        test,
        trainable_params: total,
        total_params: total,
    })
}

/// Builds the task-B model for `strategy`: pretrained weights from
/// `checkpoint`, fresh prompts and global transforms, freeze mask applied.
pub fn prepare_finetune(
    checkpoint: &Checkpoint,
    model_cfg: &ModelConfig,
    schema: &AttributeSchema,
    strategy: TuningStrategy,
    counts: PromptCounts,
    seed: u64,
) -> Result<(VapFormer, ParameterStore)> {
    let (model, mut store) = VapFormer::build(model_cfg, schema, strategy.prompt_config(counts), seed)?;
    checkpoint.load_into(&mut store, is_prompt_param)?;
    store.round_to_f32();
    let mask = build_freeze_mask(strategy, &model, &store)?;
    store.set_freeze_mask(mask)?;
    Ok((model, store))
}

/// Adapts a pretrained checkpoint to task B.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    checkpoint: &Checkpoint,
    model_cfg: &ModelConfig,
    schema: &AttributeSchema,
    data: RunData<'_>,
    cfg: &TrainConfig,
    strategy: TuningStrategy,
    counts: PromptCounts,
    seed: u64,
    hooks: &TrainHooks,
) -> Result<RunReport> {
    let (model, mut store) = prepare_finetune(checkpoint, model_cfg, schema, strategy, counts, seed)?;
    let outcome = train(&model, &mut store, data.train, data.val, cfg.epochs_finetune, cfg, seed, hooks)?;
    let test = test_metrics(&model, &store, data.test)?;
    Ok(RunReport {
        trainable_params: store.trainable_count(),
        total_params: store.total_count(),
        model,
        store,
        outcome,
        test,
    })
}

/// Names of frozen tensors whose bytes differ between two checkpoints.
pub fn frozen_mismatches(before: &Checkpoint, after: &Checkpoint) -> Vec<String> {
    after
        .freeze_mask
        .iter()
        .filter(|name| before.tensor_bytes(name).is_none() || before.tensor_bytes(name) != after.tensor_bytes(name))
        .cloned()
        .collect()
}
