//! `patchopt`: lesion statistics, patch-size selection, tokenization and ViT
//! encoder checks from the command line.
//!
//! Reports go to stdout as JSON; diagnostics go to stderr. Exit status is 0 on
//! success, 1 when an invariant or gradient check fails and 2 for usage or
//! input errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use patchopt_core::config::UnitModeName;
use patchopt_core::lesion_stats::{AggregationMode, Connectivity};

#[derive(Debug, Parser)]
#[command(name = "patchopt", version, about = "Lesion-volume driven ViT patch-size selection")]
struct Cli {
    /// Pipeline configuration (JSON). Flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    config_file: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Connected-component lesion statistics over NIfTI label volumes.
    Stats(StatsArgs),
    /// Pick the patch size for a mean lesion volume.
    Select(SelectArgs),
    /// Split a label volume into flattened patches (optionally embedded).
    Tokenize(TokenizeArgs),
    /// Run the encoder on a token matrix and print checksums.
    Forward(ForwardArgs),
    /// Finite-difference check of encoder gradients.
    Gradcheck(GradcheckArgs),
    /// Finite-difference check of the Dice + cross-entropy gradient.
    GradcheckLoss(GradcheckLossArgs),
    /// Order datasets for pretraining and fine-tuning.
    Plan(PlanArgs),
    /// Write phantom volumes with known lesion volumes.
    Synth(SynthArgs),
    /// Run the invariant suite.
    Verify(VerifyArgs),
}

/// Overrides shared by commands that make a patch decision.
#[derive(Debug, Args)]
struct SelectionFlags {
    #[arg(long)]
    unit_mode: Option<UnitModeName>,
    /// Scale `s` for paper-literal mode.
    #[arg(long)]
    scale_s: Option<f64>,
    /// Voxel spacing in mm, `sx,sy,sz`.
    #[arg(long, value_parser = parse_triple::<f32>)]
    spacing: Option<[f32; 3]>,
    /// Comma-separated candidate patch edges.
    #[arg(long, value_delimiter = ',')]
    candidates: Option<Vec<usize>>,
    /// Input dimensions `H,W,L` used for token geometry.
    #[arg(long, value_parser = parse_triple::<usize>)]
    dims: Option<[usize; 3]>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Volumes or directories of `.nii` files.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    #[arg(long)]
    dataset_id: Option<String>,
    #[arg(long)]
    connectivity: Option<Connectivity>,
    #[arg(long)]
    aggregation: Option<AggregationMode>,
    #[arg(long)]
    label: Option<u8>,
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    /// Stats report produced by `patchopt stats`.
    #[arg(long, conflicts_with = "volume_mm3")]
    stats: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    volume_mm3: Option<f64>,
    #[command(flatten)]
    selection: SelectionFlags,
}

#[derive(Debug, Args)]
struct TokenizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    patch: usize,
    #[arg(long)]
    output: PathBuf,
    /// Project patches to this width with a seeded `E` and `E_pos`.
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ForwardArgs {
    /// Encoder preset: tiny or base.
    #[arg(long, default_value = "tiny")]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Token matrix written by `tokenize --embed-dim`; random tokens if absent.
    #[arg(long)]
    tokens: Option<PathBuf>,
    /// Number of random tokens when `--tokens` is absent.
    #[arg(long, default_value_t = 4)]
    count: usize,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "tiny")]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = patchopt_core::gradcheck::VIT_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = 4)]
    tokens: usize,
    #[arg(long, default_value_t = 8)]
    patch_dim: usize,
    /// Scale analytic gradients by 1% to show the check catches it.
    #[arg(long)]
    perturb_grad: bool,
}

#[derive(Debug, Args)]
struct GradcheckLossArgs {
    #[arg(long, default_value_t = 8)]
    voxels: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    cases: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = patchopt_core::gradcheck::LOSS_TOLERANCE)]
    tolerance: f64,
    #[arg(long)]
    perturb_grad: bool,
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// Stats reports, one per dataset.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[command(flatten)]
    selection: SelectionFlags,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Phantom spec (JSON); otherwise lesions are placed at random.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "phantom")]
    id: String,
    /// Number of random scans, named `<id>_000`, `<id>_001`, ...
    #[arg(long, default_value_t = 1, conflicts_with = "spec")]
    count: usize,
    #[arg(long, default_value_t = 3)]
    lesions: usize,
    #[arg(long, value_parser = parse_triple::<usize>, default_value = "64,64,32")]
    grid: [usize; 3],
    #[arg(long, value_parser = parse_triple::<f32>)]
    spacing: Option<[f32; 3]>,
    /// Semi-axis range in mm, `lo,hi`.
    #[arg(long, value_parser = parse_pair, default_value = "2,6")]
    semi_axis: (f64, f64),
    #[arg(long)]
    no_liver: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value = "tiny")]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    perturb_grad: bool,
    /// Only check parameter count and token geometry.
    #[arg(long)]
    geometry_only: bool,
}

fn parse_triple<T: FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| format!("cannot parse {p:?}"))?);
    }
    out.try_into().map_err(|_| "expected three values".to_string())
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected lo,hi, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("cannot parse {v:?}"));
    Ok((parse(a)?, parse(b)?))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("patchopt: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
