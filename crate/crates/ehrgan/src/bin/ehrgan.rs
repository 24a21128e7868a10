//! Pipeline driver. Each subcommand resolves one config, runs one stage from
//! `ehrgan::pipeline`, and leaves its artifacts plus a resolved-config echo
//! under the run directory. Exit status is 0 iff the stage produced and
//! validated its artifact.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ehrgan::config::RunConfig;
use ehrgan::pipeline;

#[derive(Parser)]
#[command(name = "ehrgan", version, about = "Transition-GAN augmentation pipeline for event-sequence risk prediction")]
struct Cli {
    /// Flat `section.key = value` config file; defaults fill anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for artifacts.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a patient cohort and write the corpus file
    GenCohort,
    /// Train the code embedding table on the corpus
    TrainEmbedding,
    /// Train one transition GAN per class on labeled train records
    TrainGan,
    /// Decode synthetic cohorts from the trained GANs
    Sample,
    /// Train the risk predictor (ssl.mode picks basic|ssl-gan|rand|full)
    TrainPredictor,
    /// Check corpus fidelity and predictor scores against held-out splits
    Evaluate,
    /// Run the rho and mu grids across augmentation modes
    Sweep,
}

fn run(cli: &Cli) -> ehrgan::Result<String> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.resolve()?;
    fs::create_dir_all(&cli.out)?;
    fs::write(cli.out.join("resolved.cfg"), cfg.echo())?;

    let dir = cli.out.as_path();
    Ok(match cli.command {
        Cmd::GenCohort => pipeline::gen_cohort(&cfg, dir)?.render(),
        Cmd::TrainEmbedding => pipeline::train_embedding(&cfg, dir)?.render(),
        Cmd::TrainGan => {
            let stages = pipeline::train_gan(&cfg, dir)?;
            stages.iter().map(|s| s.render().trim_end().to_string()).collect::<Vec<_>>().join("\n")
        }
        Cmd::Sample => pipeline::sample(&cfg, dir)?.render(),
        Cmd::TrainPredictor => pipeline::train_predictor(&cfg, dir)?.render(),
        Cmd::Evaluate => pipeline::evaluate(&cfg, dir)?.render(),
        Cmd::Sweep => pipeline::sweep(&cfg, dir)?.render(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("EHRGAN_THREADS") {
        let n: usize = match threads.parse() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error: EHRGAN_THREADS must be a positive integer, got `{threads}`");
                return ExitCode::FAILURE;
            }
        };
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(&cli) {
        Ok(report) => {
            println!("{}", report.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
