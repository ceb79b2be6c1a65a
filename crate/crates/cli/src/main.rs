//! `keyvol` command-line tool.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | internal error |
//! | 2 | bad arguments or configuration |
//! | 3 | missing, malformed or inconsistent input data |
//! | 4 | numeric failure (non-finite values) |

mod commands;
mod manifest;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

const EXIT_CODES: &str = "Exit codes: 0 success, 1 internal error, 2 bad arguments or configuration, \
3 missing or invalid input data, 4 numeric failure.";

#[derive(Parser)]
#[command(name = "keyvol", version, about = "Unsupervised 3D keypoints, skeletons and skinning", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-view dataset with ground-truth joints.
    GenerateSynthetic(GenerateArgs),
    /// Train a keypoint model on a dataset.
    Train(TrainArgs),
    /// Predict 3D keypoints for every sample of a dataset or a single sample bundle.
    Infer(InferArgs),
    /// Fit a regressor from predicted keypoints to ground-truth joints and report pose errors.
    Evaluate(EvaluateArgs),
    /// Build a skeleton from keypoints and bind a mesh to it.
    Rig(RigArgs),
    /// Deform a rig's mesh with a pose file.
    Pose(PoseArgs),
    /// Write the reference rig, its poses and their expected vertices.
    MakeTestRig(MakeTestRigArgs),
    /// Serve a directory over HTTP for the viewer.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SceneKind {
    Figure,
    SingleJoint,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum RegressorChoice {
    Linear,
    Mlp,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub views: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 10.0)]
    pub elevation: f64,
    #[arg(long, default_value_t = 3.5)]
    pub radius: f64,
    #[arg(long, value_enum, default_value = "figure")]
    pub scene: SceneKind,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub keypoints: Option<usize>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a checkpoint; its configuration is used.
    #[arg(long, conflicts_with_all = ["config", "seed", "views", "keypoints", "grid"])]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub device: DeviceArg,
}

#[derive(Args)]
pub struct DeviceArg {
    /// Compute device; only `cpu` is available.
    #[arg(long, default_value = "cpu")]
    pub device: String,
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory or a single sample bundle.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Expected keypoint count; must match the checkpoint.
    #[arg(long)]
    pub keypoints: Option<usize>,
    /// Expected grid resolution; must match the checkpoint.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Also write PNGs with the projected keypoints drawn on every view.
    #[arg(long)]
    pub overlays: bool,
    #[command(flatten)]
    pub device: DeviceArg,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "mlp")]
    pub regressor: RegressorChoice,
    /// Number of final samples held out from regressor fitting.
    #[arg(long, default_value_t = 50)]
    pub held_out: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub device: DeviceArg,
}

#[derive(Args)]
pub struct RigArgs {
    /// Keypoint set JSON as written by `infer`.
    #[arg(long)]
    pub keypoints: PathBuf,
    /// Rest-pose mesh (OBJ).
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Take the learned adjacency from this checkpoint.
    #[arg(long, conflicts_with = "adjacency")]
    pub checkpoint: Option<PathBuf>,
    /// Adjacency as a JSON array of N rows; defaults to 0.5 everywhere off the diagonal.
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
    #[arg(long)]
    pub root: Option<usize>,
    /// Skinning width; defaults to 0.1 of the skeleton's bounding-box diagonal.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
}

#[derive(Args)]
pub struct PoseArgs {
    #[arg(long)]
    pub rig: PathBuf,
    #[arg(long)]
    pub pose: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct MakeTestRigArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 8000)]
    pub port: u16,
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

impl From<keyvol::Error> for Failure {
    fn from(e: keyvol::Error) -> Self {
        use keyvol::error::ErrorClass;
        let code = match e.class() {
            ErrorClass::Config => EXIT_CONFIG,
            ErrorClass::Data => EXIT_DATA,
            ErrorClass::Numeric => EXIT_NUMERIC,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self { code: EXIT_DATA, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateSynthetic(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Rig(a) => commands::rig(a),
        Command::Pose(a) => commands::pose(a),
        Command::MakeTestRig(a) => commands::make_test_rig(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
