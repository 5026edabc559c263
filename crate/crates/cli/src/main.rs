//! `se2match`: train, match and evaluate templates from the command line.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on data errors.

mod cli;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use cli::{Cli, Command};
use commands::Ctx;
use se2match_core::pipeline::PipelineConfig;

fn config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?,
        None => PipelineConfig::default(),
    };
    for (k, v) in &g.overrides {
        cfg.set(k, v)?;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let ctx = Ctx {
        cfg: config(&cli)?,
        output: cli.global.output.clone(),
        channel: cli.global.channel,
    };
    match &cli.command {
        Command::Lift { image, raw } => commands::lift(&ctx, image, *raw),
        Command::Train { manifest } => commands::train(&ctx, manifest),
        Command::Gcv { manifest, loss, domain } => commands::gcv(&ctx, manifest, *loss, *domain),
        Command::Match {
            images,
            manifest,
            templates,
            domain,
            combine,
            no_heatmaps,
        } => commands::match_images(&ctx, images, manifest.as_deref(), templates, *domain, *combine, *no_heatmaps),
        Command::Evaluate {
            manifest,
            detections,
            radius,
            normalized_error,
        } => commands::evaluate_cmd(&ctx, manifest, detections, *radius, *normalized_error),
        Command::Kfold { manifest } => commands::kfold(&ctx, manifest),
        Command::Diffuse { kernel, mass } => commands::diffuse(&ctx, kernel, *mass),
        Command::Pencil {
            kernel,
            samples,
            point_start,
        } => commands::pencil(&ctx, kernel, *samples, *point_start),
        Command::CompareKernels { a, b } => commands::compare(&ctx, a, b),
        Command::Synth {
            kind,
            n,
            size,
            radius,
            noise,
            contrast,
            distractors,
            rotations,
            no_occlusion,
            fixed_polarity,
            second_target,
        } => commands::synth(
            &ctx,
            kind,
            *n,
            *size,
            *radius,
            *noise,
            *contrast,
            *distractors,
            rotations,
            *no_occlusion,
            *fixed_polarity,
            *second_target,
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
