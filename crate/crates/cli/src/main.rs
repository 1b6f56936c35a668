use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use msmatch_cli::{cmd_eval, cmd_label, cmd_match, cmd_register, cmd_synth, cmd_train, CliError, CliResult, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "msmatch", version, about = "Multispectral keypoint detection, matching and registration")]
struct Cli {
    /// TOML configuration; flags below take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Model checkpoint directory (eval, match, register).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    det_threshold: Option<f64>,
    #[arg(long, global = true)]
    nms_radius: Option<usize>,
    #[arg(long, global = true)]
    reproj_threshold: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic aligned pairs.
    Synth,
    /// Pseudo-label a dataset.
    Label { dataset: PathBuf },
    /// Train a model on a labeled dataset.
    Train { dataset: PathBuf, labels: PathBuf },
    /// Run the evaluation protocol on a dataset.
    Eval { dataset: PathBuf },
    /// Match keypoints between two images.
    Match { image_a: PathBuf, image_b: PathBuf },
    /// Estimate the homography from image A to image B.
    Register { image_a: PathBuf, image_b: PathBuf },
}

fn checkpoint(cli: &Cli) -> CliResult<&PathBuf> {
    cli.checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("--checkpoint is required for this command".into()))
}

fn run(cli: &Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Overrides {
        seed: cli.seed,
        workers: cli.workers,
        det_threshold: cli.det_threshold,
        nms_radius: cli.nms_radius,
        reproj_threshold: cli.reproj_threshold,
    }
    .apply(&mut cfg);
    if cfg.workers > 0 {
        // ignore: the global pool may already exist when embedded
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    let out = &cli.out;
    match &cli.command {
        Command::Synth => {
            let n = cmd_synth(&cfg, out)?;
            println!("wrote {n} pairs to {}", out.display());
        }
        Command::Label { dataset } => {
            let s = cmd_label(dataset, &cfg, out)?;
            println!("labeled {} pairs, {:.1} keypoints per pair", s.pairs, s.mean_keypoints);
        }
        Command::Train { dataset, labels } => {
            let ckpt = cmd_train(dataset, labels, &cfg, out)?;
            println!("final checkpoint: {}", ckpt.display());
        }
        Command::Eval { dataset } => {
            let report = cmd_eval(dataset, checkpoint(cli)?, &cfg, out)?;
            println!("{}", report.summary());
        }
        Command::Match { image_a, image_b } => {
            let rec = cmd_match(image_a, image_b, checkpoint(cli)?, &cfg, out)?;
            println!("{} matches", rec.matches.len());
        }
        Command::Register { image_a, image_b } => {
            let h = cmd_register(image_a, image_b, checkpoint(cli)?, &cfg, out)?;
            println!("{:?}", h.to_row_major());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
