//! Multi-seed transfer runs and prompt-count sweeps built on the trainer.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attribute::AttributeSchema;
use crate::baseline::{evaluate_baselines, BaselineReport};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{MetricRow, MetricSummary};
use crate::model::{PromptConfig, Sample, VapFormer};
use crate::synth::{generate_task, load_task, read_manifest, read_schema, Splits, SynthConfig, Task, TaskData};
use crate::trainer::{evaluate, finetune, pretrain, PromptCounts, RunData, RunReport, TrainHooks, TuningStrategy};

/// Encoded samples of one task with their split.
#[derive(Debug, Clone)]
pub struct TaskSamples {
    pub samples: Vec<Sample>,
    pub splits: Splits,
}

impl TaskSamples {
    fn new(data: &TaskData, schema: &AttributeSchema) -> Result<Self> {
        Ok(Self {
            samples: data.samples(schema)?,
            splits: data.splits.clone(),
        })
    }

    /// Train, val and test views.
    pub fn views(&self) -> [Vec<&Sample>; 3] {
        self.splits.select(&self.samples)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: AttributeSchema,
    pub config: SynthConfig,
    pub a: TaskSamples,
    pub b: TaskSamples,
}

impl Dataset {
    /// Generates both tasks in memory.
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let schema = AttributeSchema::clinical_default();
        let a = generate_task(cfg, Task::A)?;
        let b = generate_task(cfg, Task::B)?;
        Ok(Self {
            a: TaskSamples::new(&a, &schema)?,
            b: TaskSamples::new(&b, &schema)?,
            schema,
            config: cfg.clone(),
        })
    }

    /// Loads a dataset written by `write_dataset`, verifying checksums.
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = read_manifest(root)?;
        let schema = read_schema(root)?;
        let a = load_task(root, Task::A, &schema)?;
        let b = load_task(root, Task::B, &schema)?;
        Ok(Self {
            a: TaskSamples::new(&a, &schema)?,
            b: TaskSamples::new(&b, &schema)?,
            schema,
            config: manifest.config,
        })
    }

    /// Loads `root` and checks that it was generated from `expected`.
    pub fn load_matching(root: &Path, expected: &SynthConfig) -> Result<Self> {
        let data = Self::load(root)?;
        if data.config != *expected {
            return Err(Error::Config(format!(
                "dataset at {} was generated with a different data config; rerun gen-data",
                root.display()
            )));
        }
        Ok(data)
    }

    pub fn task(&self, task: Task) -> &TaskSamples {
        match task {
            Task::A => &self.a,
            Task::B => &self.b,
        }
    }

    /// Unimodal baselines on task B, fitted on its training split.
    pub fn baselines(&self) -> Result<BaselineReport> {
        let [train, _, test] = self.b.views();
        evaluate_baselines(&train, &test)
    }
}

pub fn pretrain_run_id(seed: u64) -> String {
    format!("pretrain-s{seed}")
}

pub fn finetune_run_id(strategy: TuningStrategy, seed: u64) -> String {
    format!("{strategy}-s{seed}")
}

/// Config echo stored in checkpoints; enough to rebuild the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointInfo {
    pub model: crate::model::ModelConfig,
    pub prompts: PromptConfig,
    /// `None` for a pretrained checkpoint.
    pub strategy: Option<TuningStrategy>,
    pub seed: u64,
}

impl CheckpointInfo {
    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("checkpoint info serializes")
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Config(format!("checkpoint config echo is not usable: {e}")))
    }

    /// The task whose data this checkpoint was trained and scored on.
    pub fn task(&self) -> Task {
        if self.strategy.is_some() {
            Task::B
        } else {
            Task::A
        }
    }
}

/// Rebuilds the model a checkpoint was saved from and loads its weights.
/// Fails with the missing and unexpected names if they disagree.
pub fn restore(ckpt: &Checkpoint, schema: &AttributeSchema) -> Result<(CheckpointInfo, VapFormer, crate::params::ParameterStore)> {
    let info = CheckpointInfo::from_checkpoint(ckpt)?;
    let (model, mut store) = VapFormer::build(&info.model, schema, info.prompts, info.seed)?;
    ckpt.load_into(&mut store, |_| false)?;
    Ok((info, model, store))
}

/// Test-split metrics of a checkpoint on the task it was trained for.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, data: &Dataset) -> Result<(CheckpointInfo, MetricSummary)> {
    let (info, model, store) = restore(ckpt, &data.schema)?;
    let [_, _, test] = data.task(info.task()).views();
    let summary = MetricSummary::compute(&evaluate(&model, &store, &test)?)?;
    Ok((info, summary))
}

pub fn metric_row(run_id: String, strategy: &str, seed: u64, report: &RunReport) -> MetricRow {
    MetricRow {
        run_id,
        strategy: strategy.to_string(),
        seed,
        metrics: report.test,
        trainable_params: report.trainable_params,
        total_params: report.total_params,
    }
}

/// Pretrains on task A; returns the report and its checkpoint.
pub fn pretrain_seed(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<(RunReport, Checkpoint)> {
    let [train, val, test] = data.a.views();
    let report = pretrain(
        &cfg.model,
        &data.schema,
        RunData {
            train: &train,
            val: &val,
            test: &test,
        },
        &cfg.train,
        seed,
    )?;
    let info = CheckpointInfo {
        model: cfg.model.clone(),
        prompts: PromptConfig::none(),
        strategy: None,
        seed,
    };
    let ckpt = report.checkpoint(info.to_value());
    Ok((report, ckpt))
}

/// Adapts a pretrained checkpoint to task B; returns the report and its checkpoint.
pub fn finetune_seed(
    cfg: &ExperimentConfig,
    data: &Dataset,
    pretrained: &Checkpoint,
    strategy: TuningStrategy,
    counts: PromptCounts,
    seed: u64,
    hooks: &TrainHooks,
) -> Result<(RunReport, Checkpoint)> {
    let [train, val, test] = data.b.views();
    let report = finetune(
        pretrained,
        &cfg.model,
        &data.schema,
        RunData {
            train: &train,
            val: &val,
            test: &test,
        },
        &cfg.train,
        strategy,
        counts,
        seed,
        hooks,
    )?;
    let info = CheckpointInfo {
        model: cfg.model.clone(),
        prompts: strategy.prompt_config(counts),
        strategy: Some(strategy),
        seed,
    };
    let ckpt = report.checkpoint(info.to_value());
    Ok((report, ckpt))
}

/// Outcome of pretraining once per seed and adapting with each strategy.
#[derive(Debug, Clone)]
pub struct TransferResult {
    pub rows: Vec<MetricRow>,
    pub baselines: BaselineReport,
    /// Pretrained and adapted checkpoints, keyed by run id.
    pub checkpoints: Vec<(String, Checkpoint)>,
}

impl TransferResult {
    /// Mean test AUC of `strategy` over all seeds.
    pub fn mean_auc(&self, strategy: &str) -> Option<f64> {
        let aucs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.strategy == strategy)
            .map(|r| r.metrics.auc)
            .collect();
        (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
    }

    pub fn checkpoint(&self, run_id: &str) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|(id, _)| id == run_id).map(|(_, c)| c)
    }
}

/// Pretrains once per seed, then adapts with every strategy in `strategies`.
pub fn run_transfer(
    cfg: &ExperimentConfig,
    data: &Dataset,
    strategies: &[TuningStrategy],
    mut progress: impl FnMut(&MetricRow),
) -> Result<TransferResult> {
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    for &seed in &cfg.seeds {
        let (report, pre) = pretrain_seed(cfg, data, seed)?;
        let row = metric_row(pretrain_run_id(seed), "pretrain", seed, &report);
        progress(&row);
        rows.push(row);
        for &strategy in strategies {
            let (report, ckpt) = finetune_seed(cfg, data, &pre, strategy, cfg.prompts, seed, &TrainHooks::default())?;
            let row = metric_row(finetune_run_id(strategy, seed), strategy.as_str(), seed, &report);
            progress(&row);
            rows.push(row);
            checkpoints.push((finetune_run_id(strategy, seed), ckpt));
        }
        checkpoints.push((pretrain_run_id(seed), pre));
    }
    Ok(TransferResult {
        rows,
        baselines: data.baselines()?,
        checkpoints,
    })
}

/// Which prompt family a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptAxis {
    Visual,
    Tabular,
}

impl PromptAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Visual => "visual",
            Self::Tabular => "tabular",
        }
    }

    /// Sweep grid used when none is given. Visual counts stay even because
    /// each block splits its prompts evenly between the two branches.
    pub fn default_counts(self) -> Vec<usize> {
        match self {
            Self::Visual => vec![2, 6, 10, 20],
            Self::Tabular => vec![2, 5, 10, 20],
        }
    }

    /// Prompt counts for one sweep point; the other family stays at its
    /// reference value (10 visual, 5 tabular).
    pub fn counts(self, count: usize, base: PromptCounts) -> Result<PromptCounts> {
        let reference = PromptCounts {
            transform: base.transform,
            ..PromptCounts::default()
        };
        let out = match self {
            Self::Visual => PromptCounts {
                visual: count,
                ..reference
            },
            Self::Tabular => PromptCounts {
                tabular: count,
                ..reference
            },
        };
        if count == 0 {
            return Err(Error::Config(format!("{} prompt count must be positive", self.as_str())));
        }
        if out.visual % 2 != 0 {
            return Err(Error::Config(format!("visual prompt count must be even, got {count}")));
        }
        Ok(out)
    }
}

impl fmt::Display for PromptAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual" => Ok(Self::Visual),
            "tabular" => Ok(Self::Tabular),
            _ => Err(Error::Config(format!("unknown prompt axis `{s}` (expected visual or tabular)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub variant: TuningStrategy,
    pub axis: PromptAxis,
    pub count: usize,
    pub seed: u64,
    pub auc: f64,
}

pub const SWEEP_CSV_HEADER: &str = "variant,axis,count,seed,auc";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.variant, r.axis, r.count, r.seed, r.auc));
    }
    out
}

/// Min, max and mean AUC over seeds at one sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl Band {
    pub fn width(&self) -> f64 {
        self.max - self.min
    }
}

/// Bands of one variant, ordered by count.
pub fn bands(rows: &[SweepRow], variant: TuningStrategy) -> Vec<Band> {
    let mut counts: Vec<usize> = rows.iter().filter(|r| r.variant == variant).map(|r| r.count).collect();
    counts.sort_unstable();
    counts.dedup();
    counts
        .into_iter()
        .map(|count| {
            let aucs: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == variant && r.count == count)
                .map(|r| r.auc)
                .collect();
            Band {
                count,
                min: aucs.iter().copied().fold(f64::INFINITY, f64::min),
                max: aucs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean: aucs.iter().sum::<f64>() / aucs.len() as f64,
            }
        })
        .collect()
}

/// Variants sweeps compare by default: with and without the global prompt.
pub const SWEEP_VARIANTS: [TuningStrategy; 2] = [TuningStrategy::Pt, TuningStrategy::VisTab];

/// Runs every (variant, count, seed) point. `pretrained` supplies the task-A
/// checkpoint for a seed, so callers can cache or load it.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    data: &Dataset,
    axis: PromptAxis,
    counts: &[usize],
    variants: &[TuningStrategy],
    mut pretrained: impl FnMut(u64) -> Result<Checkpoint>,
    mut progress: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if let Some(v) = variants.iter().find(|v| **v == TuningStrategy::Ft) {
        return Err(Error::Config(format!("sweep variant `{v}` has no prompts")));
    }
    let points = counts
        .iter()
        .map(|&c| axis.counts(c, cfg.prompts).map(|p| (c, p)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let pre = pretrained(seed)?;
        for &variant in variants {
            for &(count, prompts) in &points {
                let (report, _) = finetune_seed(cfg, data, &pre, variant, prompts, seed, &TrainHooks::default())?;
                let row = SweepRow {
                    variant,
                    axis,
                    count,
                    seed,
                    auc: report.test.auc,
                };
                progress(&row);
                rows.push(row);
            }
        }
    }
    rows.sort_by(|a, b| {
        (a.variant, a.count, a.seed)
            .cmp(&(b.variant, b.count, b.seed))
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: TuningStrategy, count: usize, seed: u64, auc: f64) -> SweepRow {
        SweepRow {
            variant,
            axis: PromptAxis::Tabular,
            count,
            seed,
            auc,
        }
    }

    #[test]
    fn bands_group_by_count() {
        let rows = vec![
            row(TuningStrategy::Pt, 5, 0, 0.7),
            row(TuningStrategy::Pt, 5, 1, 0.9),
            row(TuningStrategy::Pt, 2, 0, 0.6),
            row(TuningStrategy::VisTab, 2, 0, 0.5),
        ];
        let b = bands(&rows, TuningStrategy::Pt);
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].count, 2);
        assert_eq!((b[1].min, b[1].max), (0.7, 0.9));
        assert!((b[1].mean - 0.8).abs() < 1e-15);
        assert!((b[1].width() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn sweep_points_fix_the_other_family() {
        let p = PromptAxis::Visual.counts(20, PromptCounts::default()).unwrap();
        assert_eq!((p.visual, p.tabular), (20, 5));
        let p = PromptAxis::Tabular.counts(2, PromptCounts::default()).unwrap();
        assert_eq!((p.visual, p.tabular), (10, 2));
        assert!(PromptAxis::Visual.counts(5, PromptCounts::default()).is_err());
        assert!(PromptAxis::Tabular.counts(0, PromptCounts::default()).is_err());
        assert!("diagonal".parse::<PromptAxis>().is_err());
    }

    #[test]
    fn sweep_csv_layout() {
        let csv = sweep_csv(&[row(TuningStrategy::VisTab, 10, 2, 0.75)]);
        assert_eq!(csv, "variant,axis,count,seed,auc\nvistab,tabular,10,2,0.75\n");
    }
}
