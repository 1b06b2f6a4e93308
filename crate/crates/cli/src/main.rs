mod artifacts;
mod commands;
mod config;
mod images;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use artifacts::Run;
use commands::LossKind;
use config::{ExperimentConfig, Profile};

#[derive(Parser, Debug)]
#[command(name = "ufloss", version, about = "Feature-loss trained unrolled MRI reconstruction pipeline")]
struct Cli {
    /// TOML file layered over the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dot-path override such as `unroll.epochs=3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Global seed (overrides `seed` from the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out` from the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk", global = true)]
    profile: Profile,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/val/test phantom datasets.
    GenData,
    /// Draw sampling masks and simulate multi-coil k-space for every split.
    MaskGen,
    /// Pretrain the patch feature network.
    TrainUfnet,
    /// Train the unrolled network with the pixel loss or the feature loss.
    TrainRecon {
        #[arg(long, value_enum)]
        loss: LossKind,
        /// Feature-loss weight (defaults to `ufloss.mu`).
        #[arg(long)]
        mu: Option<f64>,
    },
    /// Wavelet-sparsity baseline reconstruction of the test set.
    ReconPics,
    /// Reconstruct k-space with a trained checkpoint.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// k-space archive (defaults to the test split).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output file (defaults to `recon/<checkpoint name>.npz`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Per-slice NRMSE, SSIM and UFLoss for each method.
    Evaluate {
        #[arg(long, value_delimiter = ',', default_values_t = commands::METHODS.map(String::from))]
        methods: Vec<String>,
    },
    /// UFLoss and NRMSE under increasing noise and blur.
    StudyPerturb,
    /// Recover blurred images by gradient descent on UFLoss.
    StudyDeblur,
    /// Nearest training patches of test queries in feature space.
    Retrieve,
    /// Feature and SSIM correlation maps of a reference patch over an image.
    Correlate {
        /// `reference`, `zero-filled`, or any method with a file under `recon/`.
        #[arg(long, default_value = "reference")]
        method: String,
    },
    /// Median and IQR summary of the evaluation metrics.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::MaskGen => "mask-gen",
            Command::TrainUfnet => "train-ufnet",
            Command::TrainRecon { .. } => "train-recon",
            Command::ReconPics => "recon-pics",
            Command::Reconstruct { .. } => "reconstruct",
            Command::Evaluate { .. } => "evaluate",
            Command::StudyPerturb => "study-perturb",
            Command::StudyDeblur => "study-deblur",
            Command::Retrieve => "retrieve",
            Command::Correlate { .. } => "correlate",
            Command::Report => "report",
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = ExperimentConfig::resolve(cli.profile, cli.config.as_deref(), &cli.sets)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    let mut run = Run::open(cfg, cli.command.name())?;
    match cli.command {
        Command::GenData => commands::gen_data(&mut run)?,
        Command::MaskGen => commands::mask_gen(&mut run)?,
        Command::TrainUfnet => commands::train_ufnet(&mut run)?,
        Command::TrainRecon { loss, mu } => commands::train_recon(&mut run, loss, mu)?,
        Command::ReconPics => commands::recon_pics(&mut run)?,
        Command::Reconstruct { checkpoint, input, output } => {
            commands::reconstruct(&mut run, &checkpoint, input, output)?
        }
        Command::Evaluate { methods } => commands::evaluate(&mut run, &methods)?,
        Command::StudyPerturb => commands::study_perturb(&mut run)?,
        Command::StudyDeblur => commands::study_deblur(&mut run)?,
        Command::Retrieve => commands::retrieve(&mut run)?,
        Command::Correlate { method } => commands::correlate(&mut run, &method)?,
        Command::Report => commands::report(&mut run)?,
    }
    run.finish()
}
