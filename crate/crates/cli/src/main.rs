use std::path::PathBuf;
use std::process::ExitCode;

use aortaseg::config::RunConfig;
use aortaseg::gradcheck::cmd_gradcheck;
use aortaseg::stages::{run_stage, write_resolved_config, Layout};
use aortaseg::{cmd_crossval, PipelineError, Result};
use aortaseg_core::gradcheck::standard_checks;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aortaseg", version, about = "Slice-wise aortic segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Verb {
    /// Generate synthetic subjects.
    Phantom,
    /// Resample every subject to the unified in-plane spacing.
    Resample,
    /// Expand the training subjects with the configured policy.
    Augment,
    /// Train the network on the augmented slices.
    Train,
    /// Segment the test subject with the trained checkpoint.
    Predict,
    /// Keep the largest connected component of the prediction.
    Postprocess,
    /// Reconstruct the surface mesh (STL and OBJ).
    Reconstruct,
    /// Dice and cloud-to-mesh metrics against the ground truth.
    Evaluate,
    /// Run every fold of the experiment plan end to end.
    Crossval,
    /// Finite-difference verification of every backward pass.
    Gradcheck,
}

impl Verb {
    fn stage(self) -> Option<&'static str> {
        Some(match self {
            Self::Phantom => "phantom",
            Self::Resample => "resample",
            Self::Augment => "augment",
            Self::Train => "train",
            Self::Predict => "predict",
            Self::Postprocess => "postprocess",
            Self::Reconstruct => "reconstruct",
            Self::Evaluate => "evaluate",
            Self::Crossval | Self::Gradcheck => return None,
        })
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().ok_or_else(|| PipelineError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Verb::Gradcheck = cli.verb {
        let seed = match &cli.config {
            Some(_) => resolve(cli)?.seed,
            None => cli.seed.unwrap_or(0),
        };
        let report = cmd_gradcheck(&standard_checks(), seed);
        for line in report.lines() {
            println!("{line}");
        }
        if let Some(out) = &cli.out {
            std::fs::create_dir_all(out).map_err(PipelineError::io(out))?;
            let path = out.join("gradcheck.json");
            let text = serde_json::to_string_pretty(&report).map_err(aortaseg_core::Error::from)? + "\n";
            std::fs::write(&path, text).map_err(PipelineError::io(&path))?;
        }
        report.into_result()?;
        return Ok(());
    }
    let cfg = resolve(cli)?;
    let layout = Layout::new(&cfg.out_dir);
    write_resolved_config(&cfg, &layout)?;
    match cli.verb.stage() {
        Some(stage) => println!("{stage}: {}", run_stage(stage, &cfg, &layout)?),
        None => {
            let manifest = cmd_crossval(&cfg, &layout)?;
            print!("{}", manifest.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
