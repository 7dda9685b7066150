//! `recist`: batch driver for target rendering, detection, fusion,
//! evaluation and synthetic data generation.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use recist_core::ErrorClass;

/// A mistake in how the tool was invoked (flags, config file).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "recist", version, about = "Keypoint lesion detection toolkit", long_about = None)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for per-image work (0 = all cores). Outputs do not
    /// depend on this value. [default: 0]
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render keypoint and offset targets for every image of an annotation file.
    RenderTargets(RenderTargetsArgs),
    /// Group heatmap files into scored detections.
    Detect(DetectArgs),
    /// Fuse original and mirrored-view detections with Soft-NMS.
    Fuse(FuseArgs),
    /// Sensitivity at fixed false positives per image.
    Eval(EvalArgs),
    /// Generate synthetic scenes, their heatmaps and a ground-truth CSV.
    Simulate(SimulateArgs),
    /// Compare analytic loss gradients with finite differences.
    CheckGradients(CheckGradientsArgs),
    /// Map raw Hounsfield values to [0, 1] with a CT window.
    Window(WindowArgs),
}

#[derive(Debug, Args)]
pub struct RenderTargetsArgs {
    /// Annotation CSV.
    #[arg(long, value_name = "CSV")]
    pub annotations: PathBuf,
    /// Image keys to skip, one per line.
    #[arg(long, value_name = "FILE")]
    pub exclude: Option<PathBuf>,
    /// Square input resolution in pixels. [default: 511]
    #[arg(long, value_name = "PX")]
    pub input_size: Option<u32>,
    /// Heatmap stride. [default: 4]
    #[arg(long)]
    pub stride: Option<u32>,
    /// Output directory; one `<image key>.rkhm` per image.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct GroupingFlags {
    /// Extreme-point peak threshold. [default: 0.1]
    #[arg(long)]
    pub tau_e: Option<f64>,
    /// Center validation threshold. [default: 0.1]
    #[arg(long)]
    pub tau_c: Option<f64>,
    /// Peaks kept per extreme map. [default: 40]
    #[arg(long)]
    pub k1: Option<usize>,
    /// Detections kept per image. [default: 100]
    #[arg(long)]
    pub k2: Option<usize>,
    /// Max-pooling window side. [default: 3]
    #[arg(long)]
    pub kernel: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Directory of `.rkhm` heatmap files.
    #[arg(long, value_name = "DIR")]
    pub heatmaps: PathBuf,
    #[command(flatten)]
    pub grouping: GroupingFlags,
    /// Detections JSON to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Detections on the original view.
    #[arg(long, value_name = "FILE")]
    pub original: PathBuf,
    /// Detections on the mirrored view, in mirrored coordinates.
    #[arg(long, value_name = "FILE")]
    pub flipped: PathBuf,
    /// Width of the mirrored image (x maps to width - 1 - x). [default: input_size]
    #[arg(long, value_name = "PX")]
    pub image_width: Option<u32>,
    /// The second view is mirrored top-bottom instead of left-right.
    #[arg(long)]
    pub vertical: bool,
    /// Height of the mirrored image, used with --vertical. [default: input_size]
    #[arg(long, value_name = "PX")]
    pub image_height: Option<u32>,
    /// Gaussian Soft-NMS sigma. [default: 0.5]
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Drop decayed detections below this score. [default: 0.001]
    #[arg(long)]
    pub score_floor: Option<f64>,
    /// Fused detections JSON to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detections JSON.
    #[arg(long, value_name = "FILE")]
    pub detections: PathBuf,
    /// Ground-truth annotation CSV.
    #[arg(long, value_name = "CSV")]
    pub annotations: PathBuf,
    /// Image keys to skip, one per line.
    #[arg(long, value_name = "FILE")]
    pub exclude: Option<PathBuf>,
    /// Only evaluate images of this split (train, val, test). [default: all]
    #[arg(long)]
    pub split: Option<String>,
    /// IoU needed for a match. [default: 0.5]
    #[arg(long)]
    pub iou: Option<f64>,
    /// Padding added to detection boxes before matching. [default: 5]
    #[arg(long)]
    pub pad: Option<f64>,
    /// Comma-separated FPs-per-image targets. [default: 0.5,1,2,3,4]
    #[arg(long, value_delimiter = ',')]
    pub fps: Option<Vec<f64>>,
    /// Also report per-stratum results: type, diameter or interval.
    #[arg(long)]
    pub stratify: Option<String>,
    /// Report path prefix; writes `<out>.txt` and `<out>.json`.
    #[arg(long, value_name = "PREFIX")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Seed of the first scene; scene i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub scene_seed: u64,
    /// Number of scenes.
    #[arg(long, default_value_t = 1)]
    pub images: u64,
    /// Lesions per scene.
    #[arg(long, default_value_t = 3)]
    pub n_lesions: usize,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 512)]
    pub image_size: u32,
    /// Shortest lesion long axis, mm.
    #[arg(long, default_value_t = 10.0)]
    pub min_size_mm: f64,
    /// Longest lesion long axis, mm.
    #[arg(long, default_value_t = 60.0)]
    pub max_size_mm: f64,
    /// Heatmap stride. [default: 4]
    #[arg(long)]
    pub stride: Option<u32>,
    /// Additive Gaussian noise sigma on keypoint maps.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Probability of dropping a keypoint.
    #[arg(long, default_value_t = 0.0)]
    pub drop: f64,
    /// Expected spurious peaks per map.
    #[arg(long, default_value_t = 0.0)]
    pub spurious: f64,
    /// Max peak displacement in cells.
    #[arg(long, default_value_t = 0)]
    pub jitter: u32,
    /// Seed of the degradation draws; scene i uses seed + i. [default: scene seed]
    #[arg(long)]
    pub noise_seed: Option<u64>,
    /// Also write mirrored-view heatmaps under `<out>/flipped/`.
    #[arg(long)]
    pub flipped: bool,
    /// Mirror the flipped view top-bottom instead of left-right.
    #[arg(long, requires = "flipped")]
    pub vertical: bool,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckGradientsArgs {
    /// Random 8x8 instances to check.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Largest relative error allowed.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    /// Seed of the instance generator.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional JSON report.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WindowArgs {
    /// Window level (HU).
    #[arg(long, allow_negative_numbers = true)]
    pub level: Option<f64>,
    /// Window width (HU).
    #[arg(long)]
    pub width: Option<f64>,
    /// Named preset from the config instead of level/width (wide, lung, soft-tissue).
    #[arg(long, conflicts_with_all = ["level", "width"])]
    pub preset: Option<String>,
    /// Raw little-endian f32 values.
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Windowed little-endian f32 values.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

fn classify(err: &anyhow::Error) -> ErrorClass {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<recist_core::Error>() {
            return e.class();
        }
        if cause.is::<UsageError>() {
            return ErrorClass::Usage;
        }
    }
    ErrorClass::InputFormat
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 2,
        ErrorClass::InputFormat => 3,
        ErrorClass::Invariant => 4,
    }
}

fn fail(class: ErrorClass, message: &str) -> ExitCode {
    let one_line = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("recist: error[{}]: {one_line}", class.as_str());
    ExitCode::from(exit_code(class))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid usage");
            return fail(ErrorClass::Usage, first.trim_start_matches("error: "));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(classify(&e), &format!("{e:#}")),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = config::RunConfig::load(cli.config.as_deref())?;
    let workers = cli.workers.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| UsageError(format!("cannot start {workers} workers: {e}")))?;
    match cli.command {
        Command::RenderTargets(a) => commands::render_targets(&mut cfg, a),
        Command::Detect(a) => commands::detect(&mut cfg, a),
        Command::Fuse(a) => commands::fuse(&mut cfg, a),
        Command::Eval(a) => commands::eval(&mut cfg, a),
        Command::Simulate(a) => commands::simulate(&mut cfg, a),
        Command::CheckGradients(a) => commands::check_gradients(&mut cfg, a),
        Command::Window(a) => commands::window(&mut cfg, a),
    }
}
