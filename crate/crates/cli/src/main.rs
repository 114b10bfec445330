//! `roadfuse`: rasterize, train, evaluate and probe the fusion network.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::Serialize;

use config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "roadfuse", version, about = "Road extraction from aerial images and GPS trajectories")]
struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed of every random choice; overrides the config.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "roadfuse-out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Count trajectory points per pixel and write raw and scaled rasters.
    Rasterize,
    /// Render the road polylines into a label raster.
    RenderGt {
        /// Road width in pixels [default: road_width_px of the config, 10]
        #[arg(long, value_name = "PX")]
        road_width: Option<f64>,
    },
    /// Train on random crops outside the validation and test areas.
    Train {
        /// Continue from this checkpoint stem instead of a fresh model.
        #[arg(long, value_name = "STEM")]
        resume: Option<PathBuf>,
    },
    /// Stitched evaluation over the test rectangles.
    Eval,
    /// Evaluation with one random quadrant of each modality removed.
    Attack,
    /// Metrics and gate means under image blur and trajectory noise.
    Sweep,
    /// Export the gate maps of the first test tile.
    Gates,
    /// Write binary road maps of the test rectangles.
    Predict,
    /// Generate a synthetic region with image, trajectories and roads.
    Synth,
}

#[derive(Serialize)]
struct ErrorRecord {
    error: &'static str,
    message: String,
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use roadfuse::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::Shape { .. }) => "shape",
        Some(E::Invalid(_)) => "invalid",
        Some(E::UnnormalizedGates { .. }) => "unnormalized_gates",
        Some(E::NoAdmissibleCorner { .. }) => "no_admissible_corner",
        Some(E::NonFiniteLoss { .. }) => "non_finite_loss",
        Some(E::Checkpoint(_)) => "checkpoint",
        Some(E::Io { .. }) => "io",
        Some(E::Format { .. }) => "format",
        Some(E::Json(_)) => "json",
        None => "config",
    }
}

fn report(error: &'static str, message: String) {
    let rec = ErrorRecord { error, message };
    eprintln!("{}", serde_json::to_string(&rec).expect("plain strings serialize"));
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Rasterize => commands::rasterize(&cfg, out),
        Command::RenderGt { road_width } => commands::render_gt(&cfg, out, road_width),
        Command::Train { resume } => commands::train(&cfg, out, resume.as_deref()).map(|_| ()),
        Command::Eval => commands::eval(&cfg, out),
        Command::Attack => commands::attack(&cfg, out),
        Command::Sweep => commands::sweep(&cfg, out),
        Command::Gates => commands::gates(&cfg, out),
        Command::Predict => commands::predict(&cfg, out),
        Command::Synth => commands::synth(&cfg, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            report("usage", e.render().to_string().trim_end().to_owned());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(error_kind(&e), format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flags_are_errors() {
        assert!(Cli::try_parse_from(["roadfuse", "train", "--epochs", "3"]).is_err());
        assert!(Cli::try_parse_from(["roadfuse", "train", "--seed", "3"]).is_ok());
    }
}
