use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vapf::checkpoint::Checkpoint;
use vapf::config::ExperimentConfig;
use vapf::error::{Error, Result};
use vapf::experiment::{
    evaluate_checkpoint, finetune_run_id, finetune_seed, metric_row, pretrain_run_id, pretrain_seed, run_sweep,
    run_transfer, sweep_csv, Dataset, PromptAxis, SWEEP_VARIANTS,
};
use vapf::metrics::{merge_metric_rows, MetricRow};
use vapf::plot::render_sweep_svg;
use vapf::synth::write_dataset;
use vapf::trainer::{frozen_mismatches, TrainHooks, TuningStrategy};
use vapf::verify::{require_all, run_checks, Selection};

/// Multi-modal prompt tuning on synthetic volumes and clinical attributes.
#[derive(Parser, Debug)]
#[command(name = "vapf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (JSON). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset written by `gen-data`. Without it the dataset is generated in
    /// memory from the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes both synthetic tasks, the schema and a checksummed manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the prompt-free model on task A.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Adapts the pretrained checkpoint of the same seed to task B.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<TuningStrategy>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pretrained checkpoint; defaults to `checkpoints/pretrain-s{seed}.vapf`
        /// under the output directory, trained first if absent.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Test-split metrics of a saved checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Pretrains each seed, adapts with several strategies and fits the
    /// unimodal baselines.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [TuningStrategy::Ft, TuningStrategy::Pt, TuningStrategy::VisTab])]
        strategies: Vec<TuningStrategy>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Test AUC over a grid of prompt counts, with and without the global prompt.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt_axis: String,
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Runs the invariant suite; all groups when none is selected.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        gradcheck: bool,
        #[arg(long)]
        freeze: bool,
        #[arg(long)]
        oracles: bool,
        /// Overrides the gradient-check tolerance from the config.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Test hook: perturb a frozen tensor during the freeze run.
        #[arg(long)]
        corrupt_frozen: bool,
    },
    /// Compares the frozen tensors of an adapted checkpoint with its
    /// pretrained source.
    VerifyFreeze {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = TuningStrategy::Pt)]
        strategy: TuningStrategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

struct Context {
    cfg: ExperimentConfig,
    out: PathBuf,
    data_dir: Option<PathBuf>,
}

impl Context {
    fn new(common: &Common) -> Result<Self> {
        let cfg = load_config(common.config.as_deref())?;
        let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        let data_dir = common
            .data
            .clone()
            .or_else(|| cfg.data_dir.join("manifest.json").exists().then(|| cfg.data_dir.clone()));
        Ok(Self { cfg, out, data_dir })
    }

    fn dataset(&self) -> Result<Dataset> {
        match &self.data_dir {
            Some(dir) => Dataset::load_matching(dir, &self.cfg.data),
            None => Dataset::generate(&self.cfg.data),
        }
    }

    fn checkpoint_path(&self, run_id: &str) -> PathBuf {
        self.out.join("checkpoints").join(format!("{run_id}.vapf"))
    }

    fn save_checkpoint(&self, run_id: &str, ckpt: &Checkpoint) -> Result<PathBuf> {
        let path = self.checkpoint_path(run_id);
        let dir = path.parent().expect("checkpoint path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        ckpt.save(&path)?;
        Ok(path)
    }

    /// Loads the cached pretrained checkpoint for `seed`, training it first
    /// if it is not there.
    fn pretrained(&self, data: &Dataset, seed: u64) -> Result<Checkpoint> {
        let path = self.checkpoint_path(&pretrain_run_id(seed));
        if path.exists() {
            return Ok(Checkpoint::load(&path)?);
        }
        eprintln!("pretraining seed {seed}");
        let (report, ckpt) = pretrain_seed(&self.cfg, data, seed)?;
        self.save_checkpoint(&pretrain_run_id(seed), &ckpt)?;
        self.record(&[metric_row(pretrain_run_id(seed), "pretrain", seed, &report)])?;
        Ok(ckpt)
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let path = self.out.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Merges rows into `metrics.csv`, replacing earlier rows of the same run.
    fn record(&self, rows: &[MetricRow]) -> Result<()> {
        let path = self.out.join("metrics.csv");
        let existing = match std::fs::read_to_string(&path) {
            Ok(s) => s,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(Error::io(&path, e)),
        };
        self.write("metrics.csv", &merge_metric_rows(&existing, rows))?;
        for r in rows {
            println!("{}", r.to_csv_line());
        }
        Ok(())
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let manifest = write_dataset(&cfg.data, &out)?;
            println!("{} {}", manifest.checksum, out.join("manifest.json").display());
        }
        Command::Pretrain { common, seed } => {
            let ctx = Context::new(&common)?;
            let data = ctx.dataset()?;
            let (report, ckpt) = pretrain_seed(&ctx.cfg, &data, seed)?;
            ctx.save_checkpoint(&pretrain_run_id(seed), &ckpt)?;
            ctx.record(&[metric_row(pretrain_run_id(seed), "pretrain", seed, &report)])?;
        }
        Command::Finetune {
            common,
            strategy,
            seed,
            pretrained,
        } => {
            let ctx = Context::new(&common)?;
            let data = ctx.dataset()?;
            let strategy = strategy.unwrap_or(ctx.cfg.strategy);
            let pre = match pretrained {
                Some(p) => Checkpoint::load(&p)?,
                None => ctx.pretrained(&data, seed)?,
            };
            let (report, ckpt) = finetune_seed(&ctx.cfg, &data, &pre, strategy, ctx.cfg.prompts, seed, &TrainHooks::default())?;
            let id = finetune_run_id(strategy, seed);
            ctx.save_checkpoint(&id, &ckpt)?;
            ctx.record(&[metric_row(id, strategy.as_str(), seed, &report)])?;
        }
        Command::Evaluate { common, checkpoint } => {
            let ctx = Context::new(&common)?;
            let data = ctx.dataset()?;
            let (info, m) = evaluate_checkpoint(&Checkpoint::load(&checkpoint)?, &data)?;
            let strategy = info.strategy.map_or("pretrain", TuningStrategy::as_str);
            println!("strategy={strategy} seed={} bacc={} f1={} auc={}", info.seed, m.bacc, m.f1, m.auc);
        }
        Command::Transfer {
            common,
            strategies,
            seeds,
        } => {
            let mut ctx = Context::new(&common)?;
            if let Some(seeds) = seeds {
                ctx.cfg.seeds = seeds;
            }
            let data = ctx.dataset()?;
            let result = run_transfer(&ctx.cfg, &data, &strategies, |r| eprintln!("{}", r.to_csv_line()))?;
            for (id, ckpt) in &result.checkpoints {
                ctx.save_checkpoint(id, ckpt)?;
            }
            ctx.record(&result.rows)?;
            let b = &result.baselines;
            ctx.write(
                "baselines.csv",
                &format!(
                    "model,auc\ntabular,{}\nvisual,{}\naveraged,{}\n",
                    b.tabular_auc, b.visual_auc, b.averaged_auc
                ),
            )?;
            for s in std::iter::once("pretrain").chain(strategies.iter().map(|s| s.as_str())) {
                if let Some(m) = result.mean_auc(s) {
                    println!("mean auc {s}: {m:.4}");
                }
            }
            println!("baseline auc tabular: {:.4} visual: {:.4}", b.tabular_auc, b.visual_auc);
        }
        Command::Sweep {
            common,
            prompt_axis,
            counts,
            seeds,
        } => {
            let mut ctx = Context::new(&common)?;
            let axis: PromptAxis = prompt_axis.parse()?;
            if let Some(seeds) = seeds {
                ctx.cfg.seeds = seeds;
            }
            let counts = counts.unwrap_or_else(|| axis.default_counts());
            let data = ctx.dataset()?;
            let rows = run_sweep(
                &ctx.cfg,
                &data,
                axis,
                &counts,
                &SWEEP_VARIANTS,
                |seed| ctx.pretrained(&data, seed),
                |r| eprintln!("{} {} prompts={} seed={} auc={}", r.variant, r.axis, r.count, r.seed, r.auc),
            )?;
            ctx.write("sweep.csv", &sweep_csv(&rows))?;
            let svg = ctx.write("sweep.svg", &render_sweep_svg(&rows, axis))?;
            for v in SWEEP_VARIANTS {
                for b in vapf::experiment::bands(&rows, v) {
                    println!("{v} count={} mean={:.4} band={:.4}", b.count, b.mean, b.width());
                }
            }
            println!("{}", svg.display());
        }
        Command::Verify {
            config,
            gradcheck,
            freeze,
            oracles,
            tolerance,
            corrupt_frozen,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(t) = tolerance {
                cfg.verify.gradcheck_tolerance = t;
                cfg.validate()?;
            }
            let sel = if gradcheck || freeze || oracles {
                Selection {
                    gradcheck,
                    freeze: freeze || corrupt_frozen,
                    oracles,
                }
            } else {
                Selection::all()
            };
            let outcomes = run_checks(&cfg, sel, corrupt_frozen)?;
            for o in &outcomes {
                println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
            }
            require_all(&outcomes)?;
        }
        Command::VerifyFreeze { common, strategy, seed } => {
            let ctx = Context::new(&common)?;
            let before = Checkpoint::load(&ctx.checkpoint_path(&pretrain_run_id(seed)))?;
            let after = Checkpoint::load(&ctx.checkpoint_path(&finetune_run_id(strategy, seed)))?;
            let bad = frozen_mismatches(&before, &after);
            if !bad.is_empty() {
                return Err(Error::Verification(bad));
            }
            println!("PASS freeze: {} frozen tensors unchanged", after.freeze_mask.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
