use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use daetalker::config::ExperimentConfig;
use daetalker::pipeline::{Ablation, Pipeline};
use daetalker::Result;

#[derive(Parser, Debug)]
#[command(name = "daetalker", about = "Train and run the diffusion-autoencoder talking-avatar pipeline")]
struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sets the corpus, model and inference-noise seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (overrides $DAETALKER_OUT and the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// KEY=VALUE with a dotted key, e.g. dae.train_steps=500. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Accept artifacts produced under a different configuration.
    #[arg(long, global = true)]
    allow_mismatch: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the procedural avatar corpus.
    DatasetGen,
    /// Train the diffusion autoencoder.
    TrainDae,
    /// Encode every corpus frame and store latents plus statistics.
    ExtractLatents,
    /// Train speech2latent on the extracted latents.
    TrainS2l,
    /// Synthesize a video from speech features.
    Infer {
        #[arg(long, default_value = "infer")]
        name: String,
    },
    /// Write the ground-truth frames of the inference window as a video.
    ExportReference {
        #[arg(long, default_value = "reference")]
        name: String,
    },
    /// Pack a video directory into a single raw file.
    Pack {
        #[arg(long, default_value = "infer")]
        name: String,
    },
    /// Score a video against the corpus.
    Eval {
        #[arg(long, default_value = "infer")]
        name: String,
    },
    /// Run one ablation: shared_noise, data_aug or pose_adaptor.
    Ablate { which: String },
    /// Every stage from corpus to evaluation.
    All,
    /// Print the resolved configuration and its hash.
    ShowConfig,
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    config = config.with_overrides(&cli.overrides)?;
    let root = config.resolve_output(cli.out.as_deref());
    let mut p = Pipeline::new(config, root);
    p.allow_mismatch = cli.allow_mismatch;
    let show = |path: PathBuf| println!("{}", path.display());
    match cli.command {
        Command::DatasetGen => show(p.cmd_dataset_gen()?),
        Command::TrainDae => show(p.cmd_train_dae()?),
        Command::ExtractLatents => show(p.cmd_extract_latents()?),
        Command::TrainS2l => show(p.cmd_train_s2l()?),
        Command::Infer { name } => show(p.cmd_infer(&name)?),
        Command::ExportReference { name } => show(p.cmd_export_reference(&name)?),
        Command::Pack { name } => show(p.cmd_pack(&name)?),
        Command::Eval { name } => print!("{}", p.cmd_eval(&name)?.to_kv()),
        Command::Ablate { which } => print!("{}", p.cmd_ablate(Ablation::parse(&which)?)?.to_kv()),
        Command::All => {
            p.cmd_dataset_gen()?;
            p.cmd_train_dae()?;
            p.cmd_extract_latents()?;
            p.cmd_train_s2l()?;
            p.cmd_infer("infer")?;
            print!("{}", p.cmd_eval("infer")?.to_kv());
        }
        Command::ShowConfig => {
            println!("# config hash {}", p.config.hash());
            print!("{}", p.config.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::FAILURE
        }
    }
}
