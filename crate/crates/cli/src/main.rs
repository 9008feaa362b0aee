use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dikm_cli::commands::{self, GenKind, GenOptions};
use dikm_cli::config::LANDMARK_GRID;
use dikm_cli::{exit_code, DataSource, RunConfig};
use dikm_core::datasets::Split;
use dikm_core::optimizer::LEARNING_RATE_GRID;
use dikm_core::MetricKind;

const DEFAULT_BASE: &str = concat!(
    "idx:",
    env!("CARGO_MANIFEST_DIR"),
    "/../../data/mnist5k/mnist5k-images-idx3-ubyte,",
    env!("CARGO_MANIFEST_DIR"),
    "/../../data/mnist5k/mnist5k-labels-idx1-ubyte"
);

#[derive(Parser)]
#[command(name = "dikm", version, about = "Deformation-invariant K-means")]
struct Cli {
    /// Worker threads; 1 runs sequentially and is bit-reproducible.
    #[arg(long, global = true, env = "DIKM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an Affine-MNIST or Diffeo-MNIST dataset.
    Gen(GenArgs),
    /// Train and write a checkpoint plus per-epoch history.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Independent seeded runs (seed, seed+1, ...); the lowest-distortion
        /// run becomes the checkpoint.
        #[arg(long, default_value_t = 1)]
        runs: usize,
        /// Held-out data to report per-run test accuracy on.
        #[arg(long)]
        test: Option<String>,
    },
    /// Assign a dataset to trained centroids and report accuracy.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Write the centroid PNG grid and the warped-data CSV.
    Export {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
    },
    /// Grid over landmark count and learning rate, selected by distortion.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        landmark_grid: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        lr_grid: Option<Vec<f64>>,
        #[arg(long)]
        test: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKindArg {
    Affine,
    Diffeo,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: GenKindArg,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Required: generated data must be reproducible.
    #[arg(long)]
    seed: Option<u64>,
    /// Standard deviation of the landmark jitter, in pixels.
    #[arg(long, default_value_t = 1.5)]
    sigma: f64,
    /// Source of the base exemplars (first image of each class).
    #[arg(long, default_value = DEFAULT_BASE)]
    base: String,
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by the training-side commands; each overrides the value in
/// `--config`.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["euclidean", "affine", "diffeo"])]
    metric: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    landmarks: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    blur_sigma: Option<f64>,
    #[arg(long)]
    stage1_steps: Option<usize>,
    #[arg(long)]
    stage2_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset descriptor: a `gen` output directory, `idx:IMAGES,LABELS`
    /// or `png:ROOT[@HxW]`.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(m) = &self.metric {
            cfg.metric = m.parse::<MetricKind>()?;
        }
        macro_rules! over {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$field = v; })*
            };
        }
        over!(k => k, landmarks => landmarks, lr => learning_rate, epochs => epochs,
            batch_size => batch_size, blur_sigma => blur_sigma, stage1_steps => stage1_steps,
            stage2_steps => stage2_steps, out => out);
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if self.data.is_some() {
            cfg.data = self.data.clone();
        }
        if self.per_class.is_some() {
            cfg.per_class = self.per_class;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let parallel = cli.threads != Some(1);
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Gen(args) => {
            let seed = args
                .seed
                .context("an explicit --seed is required so the dataset can be regenerated")?;
            commands::gen(&GenOptions {
                kind: match args.kind {
                    GenKindArg::Affine => GenKind::Affine,
                    GenKindArg::Diffeo => GenKind::Diffeo,
                },
                per_class: args.per_class,
                seed,
                sigma: args.sigma,
                base: args.base.parse::<DataSource>()?,
                out: args.out,
            })
        }
        Command::Train { run, runs, test } => {
            let cfg = run.resolve()?;
            commands::train(&cfg, runs, test.as_deref(), parallel).map(|_| ())
        }
        Command::Eval {
            run,
            checkpoint,
            split,
        } => {
            let cfg = run.resolve()?;
            let data = cfg.data.clone().context("eval needs --data")?;
            commands::eval(&cfg, &checkpoint, &data, split.into(), parallel).map(|_| ())
        }
        Command::Export {
            run,
            checkpoint,
            split,
        } => {
            let cfg = run.resolve()?;
            let data = cfg.data.clone().context("export needs --data")?;
            commands::export(&cfg, &checkpoint, &data, split.into(), parallel)
        }
        Command::Sweep {
            run,
            landmark_grid,
            lr_grid,
            test,
        } => {
            let cfg = run.resolve()?;
            let landmarks = landmark_grid.unwrap_or_else(|| LANDMARK_GRID.to_vec());
            let lrs = lr_grid.unwrap_or_else(|| LEARNING_RATE_GRID.to_vec());
            commands::sweep(&cfg, &landmarks, &lrs, test.as_deref(), parallel).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
