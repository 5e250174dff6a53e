//! `maskreg` command-line tool: phantom generation, pre-alignment,
//! registration, distance-map export and run evaluation.
//!
//! Exit codes: 0 on success, 1 for usage errors (unknown flags, malformed
//! flag values, missing required arguments), 2 for data or numerical errors
//! (missing/corrupt files, incompatible volumes, diverged optimization).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use maskreg::LossWeights;

#[derive(Parser)]
#[command(name = "maskreg", version, about = "Deformable mask registration pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic test cases with known ground-truth deformations.
    Phantom(PhantomArgs),
    /// Center-of-mass pre-alignment onto a common sampling grid.
    Prealign(PrealignArgs),
    /// Register a case's moving mask onto its fixed mask.
    Register(RegisterArgs),
    /// Compute the signed distance map of a binary mask.
    Sdm(SdmArgs),
    /// Aggregate per-case metrics into a run report CSV.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Phantom settings JSON (dims, spacing, deformation, seed).
    #[arg(long)]
    spec: PathBuf,
    /// Directory that receives one case_NNN subdirectory per phantom.
    #[arg(long)]
    out: PathBuf,
    /// Number of cases; the case index is added to the base seed.
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Args)]
struct PrealignArgs {
    /// Moving intensity image (.mhd).
    #[arg(long)]
    moving: PathBuf,
    /// Moving binary mask (.mhd).
    #[arg(long = "moving-mask")]
    moving_mask: PathBuf,
    /// Fixed intensity image (.mhd).
    #[arg(long)]
    fixed: PathBuf,
    /// Fixed binary mask (.mhd).
    #[arg(long = "fixed-mask")]
    fixed_mask: PathBuf,
    /// Output directory for the four aligned volumes and translation.json.
    #[arg(long)]
    out: PathBuf,
    /// Target grid shape as "nx,ny,nz".
    #[arg(long, value_parser = parse_dims, default_value = "96,96,80")]
    dims: [usize; 3],
    /// Target voxel spacing in mm: one value (isotropic) or "sx,sy,sz".
    #[arg(long, value_parser = parse_spacing, default_value = "0.88")]
    spacing: [f64; 3],
}

#[derive(Args)]
struct RegisterArgs {
    /// Case manifest JSON listing the mask (and optional landmark) files.
    #[arg(long)]
    case: PathBuf,
    /// Loss preset.
    #[arg(long, value_enum)]
    mode: Mode,
    /// Optional settings JSON; fields it omits take defaults, and its
    /// "weights" field (if present) overrides the mode preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for ddf.mhd, warped_mask.mhd, metrics.json and
    /// loss_trace.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SdmArgs {
    /// Binary mask to transform (.mhd).
    #[arg(long)]
    mask: PathBuf,
    /// Output signed distance map (.mhd, millimetres).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory whose subdirectories each hold one run's metrics.json.
    #[arg(long)]
    runs: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

/// Loss presets selectable from the command line.
#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Multiscale soft Dice only.
    Mdsc,
    /// Distance-map matching only.
    Sdm,
    /// Blend of Dice and distance-map terms.
    Mix,
}

impl Mode {
    /// Label used in reports and file metadata.
    fn label(self) -> &'static str {
        match self {
            Mode::Mdsc => "mDSC",
            Mode::Sdm => "SDM",
            Mode::Mix => "MIX",
        }
    }

    fn weights(self) -> LossWeights {
        LossWeights::preset(self.label()).expect("every mode label is a preset")
    }
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated sizes, got {s:?}"));
    }
    let mut out = [0usize; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<usize>()
            .map_err(|_| format!("{part:?} is not a grid size"))?;
        if *slot == 0 {
            return Err("grid sizes must be positive".to_string());
        }
    }
    Ok(out)
}

fn parse_spacing(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let parse_one = |part: &str| -> Result<f64, String> {
        let v: f64 = part
            .trim()
            .parse()
            .map_err(|_| format!("{part:?} is not a spacing in mm"))?;
        if !(v.is_finite() && v > 0.0) {
            return Err(format!("spacing must be positive, got {part:?}"));
        }
        Ok(v)
    };
    match parts.as_slice() {
        [one] => {
            let v = parse_one(one)?;
            Ok([v, v, v])
        }
        [x, y, z] => Ok([parse_one(x)?, parse_one(y)?, parse_one(z)?]),
        _ => Err(format!("expected one or three comma-separated values, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests go to stdout and succeed; anything
            // else is a usage error.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Phantom(args) => commands::phantom(&args),
        Command::Prealign(args) => commands::prealign(&args),
        Command::Register(args) => commands::register(&args),
        Command::Sdm(args) => commands::sdm(&args),
        Command::Evaluate(args) => commands::evaluate(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
