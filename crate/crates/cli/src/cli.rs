use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use se2match_core::pipeline::imageio::Channel;

#[derive(Debug, Parser)]
#[command(name = "se2match", version, about = "Template learning and matching on R2 and SE(2)")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Pipeline configuration file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set folds=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = parse_override)]
    pub overrides: Vec<(String, String)>,

    /// RNG seed (overrides the configuration).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Output directory.
    #[arg(long, short, global = true, default_value = "se2match-out")]
    pub output: PathBuf,

    /// Channel used for RGB inputs.
    #[arg(long, global = true, value_parser = parse_channel)]
    pub channel: Option<Channel>,

    /// More log output (repeat for debug).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got '{s}'"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_channel(s: &str) -> Result<Channel, String> {
    s.parse().map_err(|e: se2match_core::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Preprocess an image and write its orientation score.
    Lift {
        image: PathBuf,
        /// Skip rescaling and normalization.
        #[arg(long)]
        raw: bool,
    },
    /// Train templates on every image of a manifest.
    Train { manifest: PathBuf },
    /// Report the GCV curves of one training set.
    Gcv {
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = LossArg::Lin)]
        loss: LossArg,
        #[arg(long, value_enum, default_value_t = DomainArg::R2)]
        domain: DomainArg,
    },
    /// Match templates against an image.
    Match {
        /// Images to match; with `--manifest`, its records are matched too.
        images: Vec<PathBuf>,
        /// Match every record of a manifest, keyed by its ids.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Template files.
        #[arg(long = "template", short, required = true)]
        templates: Vec<PathBuf>,
        /// Require every template to be of this domain.
        #[arg(long, value_enum)]
        domain: Option<DomainArg>,
        /// Also report the summed potential of all templates.
        #[arg(long)]
        combine: bool,
        /// Skip writing heatmaps.
        #[arg(long)]
        no_heatmaps: bool,
    },
    /// Score a detections file against a manifest.
    Evaluate {
        manifest: PathBuf,
        detections: PathBuf,
        /// Radius criterion multiple (default from the configuration).
        #[arg(long, conflicts_with = "normalized_error")]
        radius: Option<f64>,
        /// Normalized-error threshold for two-target manifests.
        #[arg(long)]
        normalized_error: Option<f64>,
    },
    /// k-fold cross-validation over a manifest.
    Kfold { manifest: PathBuf },
    /// Solve the single-spike regression problem.
    Diffuse {
        #[command(flatten)]
        kernel: KernelArgs,
        /// Mass term of the linear system.
        #[arg(long, value_enum, default_value_t = MassArg::Gram)]
        mass: MassArg,
    },
    /// Monte Carlo simulation of the random pencil process.
    Pencil {
        #[command(flatten)]
        kernel: KernelArgs,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        /// Start at the origin instead of the B-spline spike density.
        #[arg(long)]
        point_start: bool,
    },
    /// Relative L2 distance between two kernel files.
    CompareKernels {
        a: PathBuf,
        b: PathBuf,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(value_parser = ["disk", "vessel_cross", "fovea_like"])]
        kind: String,
        #[arg(long, short, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        contrast: Option<f64>,
        #[arg(long)]
        distractors: Option<usize>,
        /// Comma-separated rotations in degrees, one drawn per image.
        #[arg(long, value_delimiter = ',')]
        rotations: Vec<f64>,
        #[arg(long)]
        no_occlusion: bool,
        #[arg(long)]
        fixed_polarity: bool,
        #[arg(long)]
        second_target: bool,
    },
}

#[derive(Debug, Args)]
pub struct KernelArgs {
    /// Spatial size of the kernel grid.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 12)]
    pub n_theta: usize,
    /// Decay rate of the traveling time.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub d_xi: f64,
    #[arg(long, default_value_t = 0.05)]
    pub d_theta: f64,
    /// Output file name inside the output directory.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LossArg {
    Lin,
    Log,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DomainArg {
    R2,
    Se2,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MassArg {
    Gram,
    Identity,
}
