mod cmd;
mod eval;
mod infer;
mod manifest;
mod report;
mod train;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Error in how the tool was invoked, as opposed to a failure on valid input.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Parser, Debug)]
#[command(name = "sidepth", version, about = "Depth alignment, losses, metrics and toy training on synthetic scenes")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct SeedArg {
    /// Random seed.
    #[arg(long, env = "SIDEPTH_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct IntrinsicsArg {
    /// Pinhole intrinsics as `fx,fy,cx,cy` (default: fx = fy = max(w, h), centered).
    #[arg(long, value_parser = parse_intrinsics)]
    pub intrinsics: Option<sidepth::CameraIntrinsics>,
}

fn parse_intrinsics(s: &str) -> Result<sidepth::CameraIntrinsics, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [fx, fy, cx, cy] => sidepth::CameraIntrinsics::new(fx, fy, cx, cy).map_err(|e| e.to_string()),
        _ => Err(format!("expected 4 comma-separated values, got {}", v.len())),
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossName {
    Ssi,
    So,
    Ranking,
    Ssig,
    SsiNet,
    L1,
    Normals,
    Ng,
    SiNet,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    Ssi,
    Si,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpaceArg {
    Depth,
    Disparity,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum StencilArg {
    Central,
    Sobel,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecipeArg {
    Ssi,
    Ranking,
    SsiRanking,
    SsiSo,
    Si,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleArg {
    Bilinear,
    Area,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a procedural scene: depth, normals, RGB, mask and a spec echo.
    Synth(cmd::SynthArgs),
    /// Evaluate a named loss between two PFM grids.
    Loss(cmd::LossArgs),
    /// Least-squares scale/shift (or scale-only) fit of one PFM onto another.
    Align(cmd::AlignArgs),
    /// Surface normals of a depth map as a 3-channel PFM.
    Normals(cmd::NormalsArgs),
    /// Back-project a depth map to a PLY point cloud.
    Project(cmd::ProjectArgs),
    /// Full metric suite for one prediction or a manifest of them.
    Evaluate(eval::EvaluateArgs),
    /// Train the toy network on the synthetic benchmark.
    TrainToy(train::TrainArgs),
    /// Train all SSI-stage recipes under one budget and compare them.
    Ablate(train::AblateArgs),
    /// Run the two-stage pipeline on an RGB image.
    Infer(infer::InferArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return usage("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Synth(a) => cmd::synth(a),
        Command::Loss(a) => cmd::loss(a),
        Command::Align(a) => cmd::align(a),
        Command::Normals(a) => cmd::normals(a),
        Command::Project(a) => cmd::project(a),
        Command::Evaluate(a) => eval::evaluate(a),
        Command::TrainToy(a) => train::train_toy(a),
        Command::Ablate(a) => train::ablate(a),
        Command::Infer(a) => infer::infer(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
