use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use motiondiff_cli::commands::{self, GenerateOutputs};
use motiondiff_cli::verify::verify_bytes;
use motiondiff_cli::{CliError, PipelineConfig};

#[derive(Parser)]
#[command(name = "motiondiff", version, about = "Motion-decoupled gesture generation toolkit")]
struct Cli {
    /// Pipeline configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a thin-plate spline from `src_x,src_y,dst_x,dst_y` rows.
    TpsSolve {
        pairs: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        regularization: f64,
    },
    /// Warp a PPM image with one or more TPS transforms.
    Warp {
        image: PathBuf,
        #[arg(short, long = "transform", required = true)]
        transforms: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        no_background: bool,
    },
    /// Write a synthetic beat-driven dataset.
    SynthData {
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train the denoiser on a dataset directory.
    Train {
        data: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Generate long motion from audio features or a WAV file.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        seed_motion: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        render_source: Option<PathBuf>,
        #[arg(long)]
        render_dir: Option<PathBuf>,
    },
    /// Beat alignment, diversity and Fréchet distance for generated motion.
    Metrics {
        generated: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// List beats of a WAV, MDAF or MDSQ file.
    Beats {
        input: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = motiondiff::audio::DEFAULT_BEAT_THRESHOLD)]
        threshold: f64,
    },
    /// Check that artifact files decode cleanly.
    Verify {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<String, CliError> {
    let cfg = PipelineConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    match cli.command {
        Command::TpsSolve { pairs, out, regularization } => commands::tps_solve(&pairs, &out, regularization),
        Command::Warp { image, transforms, out, mask, no_background } => {
            commands::warp(&image, &transforms, &out, mask.as_deref(), cfg.softness, !no_background)
        }
        Command::SynthData { out } => commands::synth_data(&cfg, &out, seed),
        Command::Train { data, out, loss_csv } => commands::train(&cfg, &data, &out, loss_csv.as_deref(), seed),
        Command::Generate { model, audio, seed_motion, out, scores, render_source, render_dir } => {
            let extra = GenerateOutputs {
                scores_csv: scores.as_deref(),
                render_source: render_source.as_deref(),
                render_dir: render_dir.as_deref(),
            };
            commands::generate(&cfg, &model, &audio, &seed_motion, &out, &extra, seed)
        }
        Command::Metrics { generated, audio, reference, out } => {
            commands::metrics(&cfg, &generated, reference.as_deref(), &audio, &out)
        }
        Command::Beats { input, out, threshold } => commands::beats(&cfg, &input, out.as_deref(), threshold),
        Command::Verify { files } => {
            let mut report = String::new();
            for f in &files {
                let bytes = std::fs::read(f)
                    .map_err(|e| CliError::parse(format!("cannot read {}: {e}", f.display())))?;
                let line = verify_bytes(&bytes)
                    .map_err(|e| CliError { code: e.code, message: format!("{}: {}", f.display(), e.message) })?;
                report.push_str(&format!("{}: {line}\n", f.display()));
            }
            Ok(report)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
