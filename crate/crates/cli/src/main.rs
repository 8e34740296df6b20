use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hpsnet::config::{keys_help, KEYS, LAB_KEYS};

#[derive(Parser)]
#[command(name = "hps", version, about = "Hidden path selection networks at desk scale")]
#[command(after_help = "Set HPS_THREADS to cap the worker threads.\nExit codes: 0 success, 1 invalid input or failed check, 2 file error.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write checkpoint.bin and metrics.csv
    #[command(after_help = run_keys())]
    Train {
        /// Run config file (key = value lines)
        config: PathBuf,
    },
    /// Per-class IoU CSV and mean IoU of a checkpoint
    #[command(after_help = run_keys())]
    Eval {
        config: PathBuf,
        checkpoint: PathBuf,
        /// Manifest to score; defaults to the config's evaluation set
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable primitive
    #[command(after_help = run_keys())]
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render per-stage masks for one image as PGM files
    #[command(name = "inspect-masks", after_help = run_keys())]
    InspectMasks {
        config: PathBuf,
        checkpoint: PathBuf,
        /// Binary PPM image
        image: PathBuf,
        #[arg(long, default_value = "masks")]
        out: PathBuf,
    },
    /// Loss-reachability report over the shipped tiny instances
    #[command(after_help = all_keys())]
    Manifold {
        /// Lab config file (lab.* keys); defaults apply when omitted
        config: Option<PathBuf>,
    },
    /// Write synthetic samples and a manifest
    #[command(name = "gen-data", after_help = run_keys())]
    GenData {
        #[arg(long, default_value_t = 250)]
        count: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1000)]
        seed: u64,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// FLOPs per sample for every variant
    #[command(after_help = run_keys())]
    Flops {
        /// Run config file; the toy network when omitted
        config: Option<PathBuf>,
    },
}

fn run_keys() -> String {
    format!("Config keys and defaults:\n{}", keys_help(KEYS))
}

fn all_keys() -> String {
    format!("Lab keys and defaults:\n{}\n{}", keys_help(LAB_KEYS), run_keys())
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("HPS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("HPS_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("hps: {e}");
        return ExitCode::from(1);
    }
    let result = match &cli.command {
        Command::Train { config } => hps_cli::cmd_train(config),
        Command::Eval { config, checkpoint, manifest } => hps_cli::cmd_eval(config, checkpoint, manifest.as_deref()),
        Command::Gradcheck { seed } => hps_cli::cmd_gradcheck(*seed),
        Command::InspectMasks { config, checkpoint, image, out } => {
            hps_cli::cmd_inspect_masks(config, checkpoint, image, out)
        }
        Command::Manifold { config } => hps_cli::cmd_manifold(config.as_deref()),
        Command::GenData { count, classes, size, seed, out } => {
            hps_cli::cmd_gen_data(*count, *classes, *size, *seed, out)
        }
        Command::Flops { config } => hps_cli::cmd_flops(config.as_deref()),
    };
    let code = hps_cli::exit_code(&result);
    match result {
        Ok(out) => print!("{out}"),
        Err(e) => eprintln!("hps: {e}"),
    }
    ExitCode::from(code as u8)
}
