//! The invariant suite behind `verify`: gradient checks, freeze
//! bit-exactness, metric oracles, the unscaled-global reduction and the
//! plain-loop model references.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::config::{ExperimentConfig, VerifyConfig};
use crate::error::{Error, Result};
use crate::experiment::{finetune_seed, pretrain_seed, Dataset};
use crate::gradcheck::{grad_check, sample_coords, Coord};
use crate::metrics::{auc, auc_trapezoid, bacc, f1, EvalResult};
use crate::model::{ModelConfig, PromptConfig, VapFormer};
use crate::params::ParameterStore;
use crate::reference;
use crate::synth::{SplitCounts, SynthConfig};
use crate::tensor::{Tensor, TensorError};
use crate::trainer::{frozen_mismatches, PromptCounts, TrainHooks, TuningStrategy};
use crate::visual::{epa_prompt_forward, VisualConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

/// Which groups of checks to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub gradcheck: bool,
    pub freeze: bool,
    pub oracles: bool,
}

impl Selection {
    pub fn all() -> Self {
        Self {
            gradcheck: true,
            freeze: true,
            oracles: true,
        }
    }
}

/// A small model with every prompt family, used where the experiment model
/// would make a check slow.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        visual: VisualConfig {
            volume: [16, 16, 16],
            ..VisualConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn check_data(seed: u64) -> Result<Dataset> {
    Dataset::generate(&SynthConfig {
        volume: [16, 16, 16],
        counts: SplitCounts {
            train: 16,
            val: 8,
            test: 8,
        },
        seed,
        ..SynthConfig::default()
    })
}

fn full_prompts() -> PromptConfig {
    TuningStrategy::Pt.prompt_config(PromptCounts::default())
}

/// Parameter families every gradient check must touch.
pub fn gradcheck_families(names: &[String]) -> Vec<(&'static str, Vec<String>)> {
    let pick = |f: &dyn Fn(&str) -> bool| names.iter().filter(|n| f(n)).cloned().collect::<Vec<_>>();
    vec![
        ("tabular prompts", pick(&|n| n.starts_with("tab.") && n.ends_with(".prompt"))),
        ("visual prompts", pick(&|n| n.contains(".prompt."))),
        ("global transform", pick(&|n| n.contains(".global."))),
        (
            "attention weights",
            pick(&|n| {
                [".query.", ".key.", ".value", ".out_spatial.", ".out_channel.", ".attn.out."]
                    .iter()
                    .any(|k| n.contains(k))
            }),
        ),
        ("classifier head", pick(&|n| n.starts_with("head."))),
        ("embeddings", pick(&|n| n.contains(".embed") || n.ends_with(".pos") || n == "fuse.cls")),
        ("norms", pick(&|n| n.ends_with(".gamma") || n.ends_with(".beta"))),
    ]
}

/// Coordinates spread over every family, topped up uniformly over all names.
pub fn gradcheck_coords(store: &ParameterStore, total: usize, seed: u64) -> Result<Vec<Coord>> {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let families = gradcheck_families(&names);
    let per_family = (total / (2 * families.len())).max(4);
    let mut coords = Vec::with_capacity(total.max(per_family * families.len()));
    for (i, (family, members)) in families.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Config(format!("gradient check: model has no {family}")));
        }
        coords.extend(sample_coords(store, members, per_family, seed.wrapping_add(i as u64))?);
    }
    if coords.len() < total {
        coords.extend(sample_coords(store, &names, total - coords.len(), seed ^ 0xabcd)?);
    }
    Ok(coords)
}

/// Backward-pass gradients of the full prompted model against central
/// differences, on a two-sample batch.
pub fn check_gradients(cfg: &VerifyConfig) -> Result<CheckOutcome> {
    let data = check_data(7)?;
    let (model, mut store) = VapFormer::build(&check_model_config(), &data.schema, full_prompts(), 3)?;
    // move T and the prompts off their initial values so all paths carry signal
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (name, t) in store.iter_mut() {
        if name.contains(".global.") || name.ends_with(".gamma") {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    }
    let pos = data.b.samples.iter().find(|s| s.label == 1).expect("positive sample");
    let neg = data.b.samples.iter().find(|s| s.label == 0).expect("negative sample");
    let batch = [pos, neg];
    let coords = gradcheck_coords(&store, cfg.gradcheck_coords, 11)?;
    let report = grad_check(
        |g: &mut Graph<'_>| {
            model
                .batch_loss(g, &batch)
                .map_err(|e| TensorError::Invalid(e.to_string()))
        },
        &mut store,
        cfg.gradcheck_step,
        &coords,
    )?;
    let worst = report.worst().map_or(String::new(), |w| {
        format!(" (worst {}[{}])", w.coord.name, w.coord.index)
    });
    Ok(CheckOutcome::new(
        "gradcheck",
        report.max_rel_error < cfg.gradcheck_tolerance,
        format!(
            "{} coordinates, max relative error {:.3e}, tolerance {:.0e}{worst}",
            report.results.len(),
            report.max_rel_error,
            cfg.gradcheck_tolerance
        ),
    ))
}

/// Runs a prompt-tuning adaptation and compares every frozen tensor with the
/// pretrained checkpoint byte for byte. `corrupt` nudges one frozen value
/// mid-run, which must make the check fail.
pub fn check_freeze(cfg: &ExperimentConfig, corrupt: bool) -> Result<CheckOutcome> {
    let data = check_data(5)?;
    let mut run = cfg.clone();
    run.model = check_model_config();
    run.data = data.config.clone();
    run.train.epochs_pretrain = 1;
    let (_, pre) = pretrain_seed(&run, &data, 0)?;
    let hooks = TrainHooks {
        corrupt_frozen_after_epoch: corrupt.then_some(run.train.epochs_finetune / 2),
    };
    let (report, after) = finetune_seed(&run, &data, &pre, TuningStrategy::Pt, run.prompts, 0, &hooks)?;
    let frozen = after.freeze_mask.len();
    let bad = frozen_mismatches(&pre, &after);
    let frozen_params = report.total_params - report.trainable_params;
    let detail = if bad.is_empty() {
        format!(
            "{frozen} frozen tensors ({frozen_params} values) unchanged after {} epochs",
            run.train.epochs_finetune
        )
    } else {
        format!("frozen tensors changed: {}", bad.join(", "))
    };
    Ok(CheckOutcome::new("freeze", bad.is_empty() && frozen > 0, detail))
}

fn count_confusion(pred: &[u8], labels: &[u8]) -> (usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0);
    for (&p, &l) in pred.iter().zip(labels) {
        match (p, l) {
            (1, 1) => c.0 += 1,
            (1, 0) => c.1 += 1,
            (0, 0) => c.2 += 1,
            _ => c.3 += 1,
        }
    }
    c
}

/// Largest gap between the pairwise AUC definition and both implemented
/// forms over `instances` random tie-heavy score sets.
pub fn auc_oracle_deviation(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(2..60);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // coarse scores force ties
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..12) as f64) / 11.0).collect();
        let r = EvalResult::new(scores.clone(), labels.clone())?;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in (0..n).filter(|&i| labels[i] == 1) {
            for j in (0..n).filter(|&j| labels[j] == 0) {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        let pairwise = wins / pairs;
        worst = worst
            .max((auc(&r)? - pairwise).abs())
            .max((auc_trapezoid(&r)? - pairwise).abs());
    }
    Ok(worst)
}

/// Exhaustive BACC/F1 on up to six samples plus pairwise-vs-trapezoid AUC on
/// random instances.
pub fn check_metric_oracles() -> Result<CheckOutcome> {
    let mut cases = 0;
    for n in 1..=6usize {
        for label_bits in 0..1u32 << n {
            for pred_bits in 0..1u32 << n {
                let labels: Vec<u8> = (0..n).map(|i| ((label_bits >> i) & 1) as u8).collect();
                let pred: Vec<u8> = (0..n).map(|i| ((pred_bits >> i) & 1) as u8).collect();
                let scores: Vec<f64> = pred.iter().map(|&p| if p == 1 { 0.75 } else { 0.25 }).collect();
                let r = EvalResult::new(scores, labels.clone())?;
                let (tp, fp, tn, fn_) = count_confusion(&pred, &labels);
                let want_bacc = (tp + fn_ > 0 && tn + fp > 0)
                    .then(|| (tp as f64 / (tp + fn_) as f64 + tn as f64 / (tn + fp) as f64) / 2.0);
                let want_f1 = (2 * tp + fp + fn_ > 0).then(|| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
                if bacc(&r).ok() != want_bacc || f1(&r).ok() != want_f1 {
                    return Ok(CheckOutcome::new(
                        "metric-oracles",
                        false,
                        format!("BACC/F1 disagree for labels {labels:?}, predictions {pred:?}"),
                    ));
                }
                cases += 1;
            }
        }
    }
    let worst = auc_oracle_deviation(100, 2024)?;
    Ok(CheckOutcome::new(
        "metric-oracles",
        worst < 1e-12,
        format!("{cases} exhaustive BACC/F1 cases exact; AUC forms agree within {worst:.1e} on 100 instances"),
    ))
}

/// Prompt-free encoders and the whole prompt-free model against the
/// plain-loop references, bit for bit.
pub fn check_reference_models() -> Result<CheckOutcome> {
    let data = check_data(13)?;
    let mut bad = Vec::new();
    let mut compared = 0;
    for seed in 0..2 {
        let (model, store) = VapFormer::build(&check_model_config(), &data.schema, PromptConfig::none(), seed)?;
        for s in data.a.samples.iter().take(3) {
            let mut g = Graph::inference(&store);
            let v = model.visual.forward(&mut g, &s.volume)?;
            let t = model.tabular.forward(&mut g, &s.record)?;
            let rv = reference::visual_forward(&model, &store, &s.volume)?;
            let rt = reference::tabular_forward(&model, &store, &data.schema, &s.record)?;
            let same = |a: &Tensor, b: &reference::Mat| {
                a.data().len() == b.data.len() && a.data().iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            };
            if !same(g.value(v), &rv) {
                bad.push(format!("visual (seed {seed})"));
            }
            if !same(g.value(t), &rt) {
                bad.push(format!("tabular (seed {seed})"));
            }
            let logit = model.logit(&store, s)?;
            let r = reference::model_logit(&model, &store, &data.schema, &s.volume, &s.record)?;
            if logit.to_bits() != r.to_bits() {
                bad.push(format!("model logit (seed {seed})"));
            }
            compared += 3;
        }
    }
    bad.dedup();
    Ok(CheckOutcome::new(
        "reference-models",
        bad.is_empty(),
        if bad.is_empty() {
            format!("{compared} outputs bitwise equal")
        } else {
            format!("mismatch: {}", bad.join(", "))
        },
    ))
}

/// With `T` forced to output ones, a block with the global prompt must equal
/// the block without it; forced to zeros, only the feed-forward path remains.
pub fn check_global_reduction() -> Result<CheckOutcome> {
    let data = check_data(17)?;
    let (model, mut store) = VapFormer::build(&check_model_config(), &data.schema, full_prompts(), 4)?;
    let mut failures = Vec::new();
    let mut blocks = 0;
    let sample = &data.a.samples[0];
    for (s, stage) in model.visual.stages.iter().enumerate() {
        for (b, block) in stage.blocks.iter().enumerate() {
            let (Some(prompts), Some(t)) = (&stage.prompts[b], &stage.globals[b]) else {
                continue;
            };
            blocks += 1;
            let w_shape = store.get(&t.weight).expect("weight").shape().to_vec();
            let width = stage.width;
            let mut forced = store.clone();
            forced.assign(&t.weight, &Tensor::zeros(&w_shape))?;
            forced.assign(&t.bias, &Tensor::ones(&[width]))?;
            let input = crate::params::truncated_normal(&mut ChaCha8Rng::seed_from_u64(s as u64), &[stage.tokens, width], 1.0);
            let mut g = Graph::inference(&forced);
            let x = g.constant(input.clone());
            let with = epa_prompt_forward(&mut g, block, Some(prompts), Some(t), x)?;
            let without = epa_prompt_forward(&mut g, block, Some(prompts), None, x)?;
            if !g.value(with).bit_eq(g.value(without)) {
                failures.push(format!("s{s}.b{b} g=1"));
            }
            forced.assign(&t.bias, &Tensor::zeros(&[width]))?;
            let mut g = Graph::inference(&forced);
            let x = g.constant(input);
            let zeroed = epa_prompt_forward(&mut g, block, Some(prompts), Some(t), x)?;
            let ffn_only = block.ffn.forward(&mut g, x)?;
            if !g.value(zeroed).bit_eq(g.value(ffn_only)) {
                failures.push(format!("s{s}.b{b} g=0"));
            }
        }
    }
    // the model-level forward must agree with the block-level one when g = 1
    for t in model.visual.global_transforms() {
        let shape = store.get(&t.weight).expect("weight").shape().to_vec();
        let width = store.get(&t.bias).expect("bias").numel();
        store.assign(&t.weight, &Tensor::zeros(&shape))?;
        store.assign(&t.bias, &Tensor::ones(&[width]))?;
    }
    let no_global = PromptConfig {
        global: false,
        ..full_prompts()
    };
    let (plain, mut plain_store) = VapFormer::build(&check_model_config(), &data.schema, no_global, 4)?;
    let shared: Vec<String> = plain_store.names().map(str::to_string).collect();
    for name in &shared {
        let value = store.get(name).expect("shared parameter").clone();
        plain_store.assign(name, &value)?;
    }
    let a = model.logit(&store, sample)?;
    let b = plain.logit(&plain_store, sample)?;
    if a.to_bits() != b.to_bits() {
        failures.push("model logit g=1".into());
    }
    Ok(CheckOutcome::new(
        "global-reduction",
        failures.is_empty() && blocks > 0,
        if failures.is_empty() {
            format!("{blocks} blocks exact at g=1 and g=0; model logit exact at g=1")
        } else {
            format!("mismatch: {}", failures.join(", "))
        },
    ))
}

/// Runs the selected checks in a fixed order.
pub fn run_checks(cfg: &ExperimentConfig, sel: Selection, corrupt_frozen: bool) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    if sel.gradcheck {
        out.push(check_gradients(&cfg.verify)?);
    }
    if sel.freeze {
        out.push(check_freeze(cfg, corrupt_frozen)?);
    }
    if sel.oracles {
        out.push(check_metric_oracles()?);
        out.push(check_reference_models()?);
        out.push(check_global_reduction()?);
    }
    Ok(out)
}

/// `Err(Verification)` naming every failed check.
pub fn require_all(outcomes: &[CheckOutcome]) -> Result<()> {
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.to_string()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(failed))
    }
}
