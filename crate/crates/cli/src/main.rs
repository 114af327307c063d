use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use ragtta::harness::{
    self, DataDir, ExperimentConfig, GenerationSettings, InferRetrieval, PoolName, TrainOptions,
    TrainRetrieval, DATA_ENV,
};

#[derive(Parser)]
#[command(name = "ragtta", version, about = "Retrieval-augmented text-to-audio experiments on a toy corpus")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Prepared data directory.
    #[arg(long, global = true, env = DATA_ENV)]
    data: Option<PathBuf>,

    /// Output directory of the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    k: Option<usize>,

    #[arg(long, global = true, value_parser = ["a2a", "t2a", "none"])]
    train_retrieval: Option<String>,

    #[arg(long, global = true, value_parser = ["t2a", "t2t-proxy", "none"])]
    infer_retrieval: Option<String>,

    #[arg(long, global = true, value_parser = ["train", "pool"])]
    pool: Option<String>,

    #[arg(long, global = true)]
    steps: Option<usize>,

    #[arg(long, global = true)]
    ode_steps: Option<usize>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy corpus, curate splits, write manifests and prototypes.
    PrepareData,
    /// Write embedding caches for the train and pool splits.
    BuildIndex,
    /// Train a model on the prepared data.
    Train {
        /// Continue from a checkpoint (default: <out>/checkpoint.ckpt).
        #[arg(long, num_args = 0..=1)]
        resume: Option<Option<PathBuf>>,
    },
    /// Generate features for every caption of a manifest split.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Option<String>,
        /// Output length in frames (default: mean of the split).
        #[arg(long)]
        frames: Option<usize>,
        /// Also write WAVs resynthesized from the generated features.
        #[arg(long)]
        wavs: bool,
    },
    /// Score generated features against the reference clips.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        split: Option<String>,
    },
    /// Compare evaluated runs in one table.
    Report { runs: Vec<PathBuf> },
}

impl Common {
    fn data_dir(&self) -> Result<DataDir> {
        let root = self
            .data
            .clone()
            .with_context(|| format!("no data directory: pass --data or set {DATA_ENV}"))?;
        Ok(DataDir::new(root))
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().context("--out is required")
    }

    fn base_config(&self, fallback: Option<&DataDir>) -> Result<ExperimentConfig> {
        let cfg = match (&self.config, fallback) {
            (Some(path), _) => ExperimentConfig::load(path)
                .with_context(|| format!("reading {}", path.display()))?,
            (None, Some(data)) if data.config_path().exists() => data.config()?,
            _ => ExperimentConfig::default(),
        };
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(k) = self.k {
            cfg.retrieval.k = k;
        }
        if let Some(mode) = &self.train_retrieval {
            cfg.retrieval.train_mode = mode.parse::<TrainRetrieval>()?;
        }
        if let Some(mode) = &self.infer_retrieval {
            cfg.retrieval.infer_mode = mode.parse::<InferRetrieval>()?;
        }
        if let Some(pool) = &self.pool {
            let pool = pool.parse::<PoolName>()?;
            cfg.retrieval.pool = pool;
            cfg.retrieval.infer_pool = pool;
        }
        if let Some(steps) = self.steps {
            cfg.training.steps = steps;
        }
        if let Some(steps) = self.ode_steps {
            cfg.flow.ode_steps = steps;
        }
        cfg.validate()?;
        Ok(())
    }
}

/// Returns `true` when the command only partly succeeded.
fn run(cli: Cli) -> Result<bool> {
    let c = &cli.common;
    match cli.command {
        Command::PrepareData => {
            let out = c.out.clone().or_else(|| c.data.clone()).context("--out is required")?;
            let mut cfg = c.base_config(None)?;
            c.apply(&mut cfg)?;
            let summary = harness::prepare_data(&cfg, &DataDir::new(&out), c.force)?;
            println!("{}", serde_json::to_string_pretty(&summary.split_sizes)?);
        }
        Command::BuildIndex => {
            let data = c.data_dir()?;
            harness::build_index(&data)?;
            println!("indexed {}", data.root().display());
        }
        Command::Train { resume } => {
            let data = c.data_dir()?;
            let out = c.out_dir()?;
            let mut cfg = c.base_config(Some(&data))?;
            c.apply(&mut cfg)?;
            let resume = resume.map(|p| p.unwrap_or_else(|| harness::train::checkpoint_path(out)));
            let opts = TrainOptions { resume, force: c.force };
            let summary = harness::train(&cfg, &data, out, &opts)?;
            println!(
                "trained steps {}..{} final loss {:.5} in {:.0}s -> {}",
                summary.start_step,
                summary.steps,
                summary.final_loss,
                summary.wall_secs,
                summary.checkpoint.display()
            );
        }
        Command::Generate {
            checkpoint,
            split,
            frames,
            wavs,
        } => {
            let data = c.data_dir()?;
            let out = c.out_dir()?;
            if out.join("generated.feat").exists() && !c.force {
                bail!("{} already holds generated output (use --force)", out.display());
            }
            let ck = harness::load_checkpoint(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let mut cfg = ck.config.clone();
            c.apply(&mut cfg)?;
            let mut settings = GenerationSettings::from_config(&cfg);
            if let Some(split) = split {
                settings.split = split;
            }
            if let Some(frames) = frames {
                settings.frames = frames;
            }
            settings.write_wavs |= wavs;
            let summary = harness::generate(&ck, &settings, &data, out)?;
            println!(
                "generated {} items, skipped {}",
                summary.generated,
                summary.skipped.len()
            );
            return Ok(!summary.skipped.is_empty());
        }
        Command::Evaluate { generated, split } => {
            let data = c.data_dir()?;
            let split = match split {
                Some(s) => s,
                None => harness::train::RunInfo::load(&generated)?
                    .split
                    .context("generated run has no split; pass --split")?,
            };
            let report = harness::evaluate(&generated, &data, &split, c.out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Report { runs } => {
            print!("{}", harness::report(&runs)?);
        }
    }
    Ok(false)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            info!("finished with skipped items");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
