use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use floodtile::experiments::{self, AblationKind, ExperimentConfig, Overrides};
use floodtile::inference::{InferenceConfig, Strategy};
use floodtile::Error;

#[derive(Parser, Debug)]
#[command(name = "floodtile", version, about = "U-Net surrogate for flood water levels")]
struct Cli {
    /// JSON experiment configuration; the desk preset when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for terrain generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    patches_per_image: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Disable min-max scaling of the target.
    #[arg(long)]
    no_target_norm: bool,
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args, Debug)]
struct TileFlags {
    /// no_overlap, overlap or center_crop.
    #[arg(long, default_value = "center_crop")]
    strategy: Strategy,
    #[arg(long, default_value_t = 128)]
    patch_size: usize,
    /// Overlap stride; half the patch size by default.
    #[arg(long)]
    stride: Option<usize>,
    /// Retained center for center_crop; half the patch size by default.
    #[arg(long)]
    center_size: Option<usize>,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

impl TileFlags {
    fn config(&self) -> InferenceConfig {
        InferenceConfig {
            strategy: self.strategy,
            patch_size: self.patch_size,
            stride: self.stride,
            center_size: self.center_size,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic domain and its water levels.
    Gen {
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
        /// Terrain preset: source or foreign.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Train on a generated data directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Predict one discharge with one or more tiling strategies.
    Infer {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        q: f64,
        /// Run all three strategies instead of --strategy.
        #[arg(long)]
        all: bool,
        #[command(flatten)]
        tile: TileFlags,
    },
    /// Metrics and error maps for one split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "eval")]
        run_id: String,
        #[command(flatten)]
        tile: TileFlags,
    },
    /// Leave-one-discharge-out cross-validation.
    Xval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Apply a trained model to another domain.
    Zeroshot {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "zeroshot")]
        run_id: String,
        #[command(flatten)]
        tile: TileFlags,
    },
    /// Retrain over a grid of one hyperparameter.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// depth, width, patch-size, patch-amount or target-norm.
        #[arg(long)]
        kind: AblationKind,
        /// Comma-separated values; target-norm takes 0/1.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<usize>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Print the trainable parameter count of a configuration.
    CountParams {
        #[arg(long, default_value_t = 4)]
        depth: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
    },
}

fn overrides(seed: Option<u64>, f: &TrainFlags) -> Overrides {
    Overrides {
        seed,
        depth: f.depth,
        width: f.width,
        patch_size: f.patch_size,
        patches_per_image: f.patches_per_image,
        max_epochs: f.max_epochs,
        patience: f.patience,
        lr: f.lr,
        batch_size: f.batch_size,
        strategy: None,
        target_norm: f.no_target_norm.then_some(false),
        run_id: f.run_id.clone(),
    }
}

fn base_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    match &cli.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::desk()),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = base_config(&cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Gen { rows, cols, preset } => {
            let mut spec = cfg.domain.clone();
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            spec.rows = rows.unwrap_or(spec.rows);
            spec.cols = cols.unwrap_or(spec.cols);
            if let Some(p) = preset {
                spec.preset = p.clone();
            }
            let m = experiments::cmd_gen(&spec, out)?;
            println!("wrote {} water-level grids to {}", m.discharges.len(), out.display());
        }
        Command::Train { data, flags } => {
            overrides(cli.seed, flags).apply(&mut cfg);
            let s = experiments::cmd_train(&cfg, data, out)?;
            println!(
                "epochs {} best {} train {:.1}s",
                s.manifest.epochs_run, s.manifest.best_epoch, s.train_seconds
            );
            for r in &s.test_rows {
                println!("{} rmse {:.4} m nse {:.4}", r.split, r.rmse_m, r.nse);
            }
        }
        Command::Infer { run, data, q, all, tile } => {
            let strategies = if *all { Strategy::ALL.to_vec() } else { vec![tile.strategy] };
            for t in experiments::cmd_infer(run, data, *q, &strategies, &tile.config(), out)? {
                println!("{} tiles {} {:.3}s", t.strategy, t.tiles, t.seconds);
            }
        }
        Command::Eval { run, data, split, run_id, tile } => {
            for r in experiments::cmd_eval(run, data, split, &tile.config(), run_id, out)? {
                println!("{} rmse {:.4} m nse {:.4}", r.split, r.rmse_m, r.nse);
            }
        }
        Command::Xval { data, epochs, flags } => {
            overrides(cli.seed, flags).apply(&mut cfg);
            if let Some(e) = epochs {
                cfg.xval_epochs = *e;
            }
            for r in experiments::cmd_xval(&cfg, data, out)? {
                println!("fold {} q {} rmse {:.4} m nse {:.4}", r.fold, r.held_out_q, r.rmse_m, r.nse);
            }
        }
        Command::Zeroshot { run, data, run_id, tile } => {
            for r in experiments::cmd_zeroshot(run, data, &tile.config(), run_id, out)? {
                println!("{} rmse {:.4} m nse {:.4}", r.split, r.rmse_m, r.nse);
            }
        }
        Command::Ablate { data, kind, grid, flags } => {
            overrides(cli.seed, flags).apply(&mut cfg);
            for r in experiments::cmd_ablate(&cfg, *kind, grid, data, out)? {
                println!("{} {} params {} test rmse {:.4} m", r.kind, r.value, r.parameters, r.test_rmse_m);
            }
        }
        Command::CountParams { depth, width } => {
            let (n, m) = experiments::cmd_count_params(*depth, *width)?;
            println!("{n} ({m})");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
