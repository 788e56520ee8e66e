//! `cyclenoise`: generate synthetic gait data, inject label noise, train
//! the cyclic two-network model or its baselines, evaluate, and run the
//! component ablation.

mod commands;
mod datadir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "cyclenoise", version, about = "Cyclic noise-tolerant training experiments")]
struct Cli {
    /// Root that relative data and run directories resolve against.
    #[arg(long, global = true, env = "CYCLENOISE_OUT_ROOT")]
    out_root: Option<PathBuf>,
    /// Worker threads for the ablation grid.
    #[arg(long, global = true, env = "CYCLENOISE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a train/test dataset directory.
    GenData(GenDataArgs),
    /// Apply a noise construction to a dataset's training split.
    Corrupt(CorruptArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Rank-1 evaluation of a trained run on the test identities.
    Eval(EvalArgs),
    /// Run the eight-row component grid over several seeds.
    Ablate(AblateArgs),
    /// Check a recorded trace against the closed-form memory-network update.
    VerifyEq5(VerifyArgs),
    /// Print forward-pass costs per iteration.
    Cost(CostArgs),
}

#[derive(Args, Debug, Clone)]
pub struct NoiseArgs {
    /// Noise construction: label, aug or split.
    #[arg(long = "corrupt")]
    pub kind: Option<String>,
    /// Fraction of identities for split noise.
    #[arg(long, conflicts_with = "rate")]
    pub fraction: Option<f64>,
    /// Fraction of sequences for label or augmentation noise.
    #[arg(long)]
    pub rate: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Experiment config whose data and corruption sections are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total identities.
    #[arg(long)]
    pub ids: Option<usize>,
    /// Identities assigned to the training split.
    #[arg(long)]
    pub train_ids: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct CorruptArgs {
    /// Source dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Noise construction: label, aug or split.
    #[arg(long)]
    pub kind: String,
    /// Rate or identity fraction.
    #[arg(long, visible_aliases = ["rate", "fraction"])]
    pub amount: Option<f64>,
    /// Corruption seed; defaults to the generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// cntn, supervised, selfsup or coteach-baseline. Choosing supervised
    /// or selfsup turns the EMA coupling and the sieve off unless
    /// --cyclic/--and say otherwise.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// EMA coupling of the memory network; off means m = 1.
    #[arg(long, action = clap::ArgAction::Set)]
    pub cyclic: Option<bool>,
    /// Adaptive noise sieve on the supervised losses.
    #[arg(long = "and", action = clap::ArgAction::Set)]
    pub and_enabled: Option<bool>,
    /// Record the per-iteration parameter trace.
    #[arg(long)]
    pub trace: bool,
    /// Keep a copy of F every this many iterations for memorization curves.
    #[arg(long)]
    pub snapshot_every: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint file inside the run directory.
    #[arg(long, default_value = "model_f.ckpt")]
    pub weights: String,
    /// Drop gallery entries sharing the probe's view.
    #[arg(long, action = clap::ArgAction::Set)]
    pub exclude_same_view: Option<bool>,
    /// NM groups per identity enrolled in the gallery.
    #[arg(long)]
    pub gallery_groups: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Output directory for the table.
    #[arg(long)]
    pub out: PathBuf,
    /// Base config; defaults to the split-noise experiment.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Run directory holding trace.bin, init_f.ckpt and init_m.ckpt.
    #[arg(long)]
    pub run: PathBuf,
    /// Trace file, if not the run's own.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-8)]
    pub tolerance: f64,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    /// Batch size.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Noise rate assumed by the co-teaching baseline.
    #[arg(long, default_value_t = 0.2)]
    pub sigma: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = commands::Context::new(cli.out_root, cli.threads);
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&ctx, a),
        Command::Corrupt(a) => commands::corrupt(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Ablate(a) => commands::ablate(&ctx, a),
        Command::VerifyEq5(a) => commands::verify_eq5(&ctx, a),
        Command::Cost(a) => commands::cost(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
