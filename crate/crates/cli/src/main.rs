//! `acmseg` command-line tool.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use acmseg_core::acm::{
    AcmParams, LambdaMode, RegionMode, DEFAULT_DT, DEFAULT_EPS, DEFAULT_ITERS, DEFAULT_MU,
    DEFAULT_WINDOW,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit code for invalid flags or parameters.
pub const EXIT_USAGE: u8 = 2;
/// Exit code for unreadable or malformed files.
pub const EXIT_IO: u8 = 3;
/// Exit code for inputs whose shapes or value ranges do not fit together.
pub const EXIT_DATA: u8 = 4;
/// Exit code when a check ran but did not pass.
pub const EXIT_CHECK_FAILED: u8 = 1;

#[derive(Parser, Debug)]
#[command(name = "acmseg", version, about = "Level-set active contour segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Evolve an initial level set on an image and write the final mask.
    Evolve(EvolveArgs),
    /// Segment from a probability map: its signed distance map seeds the
    /// contour and its values set per-pixel lambda weights.
    SegmentDals(SegmentDalsArgs),
    /// Train the level-set predictor on a directory of image/mask pairs.
    Train(TrainArgs),
    /// Run a trained model on one image.
    Predict(PredictArgs),
    /// Score predicted masks against ground truth and write a metrics CSV.
    Eval(EvalArgs),
    /// Compare backpropagated and finite-difference gradients of the full
    /// training objective.
    Gradcheck(GradcheckArgs),
    /// Generate synthetic scenes with ground-truth masks.
    Synth(SynthArgs),
    /// Overlay a mask on an image and write a color PPM.
    Render(RenderArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    Localized,
    Global,
}

#[derive(Args, Debug, Clone)]
pub struct AcmArgs {
    /// Curvature weight
    #[arg(long, default_value_t = DEFAULT_MU)]
    pub mu: f64,
    /// Heaviside smoothing width
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    /// Time step
    #[arg(long, default_value_t = DEFAULT_DT)]
    pub dt: f64,
    /// Number of evolution steps
    #[arg(long, default_value_t = DEFAULT_ITERS)]
    pub iters: usize,
    /// Half-size f of the (2f+1)x(2f+1) statistics window
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    /// Region statistics: per-window (localized) or whole-image (global)
    #[arg(long, value_enum, default_value_t = ModeArg::Localized)]
    pub mode: ModeArg,
}

impl AcmArgs {
    pub fn params(&self, lambda_mode: LambdaMode) -> AcmParams {
        AcmParams {
            mu: self.mu,
            eps: self.eps,
            dt: self.dt,
            iters: self.iters,
            window: self.window,
            region_mode: match self.mode {
                ModeArg::Localized => RegionMode::Localized,
                ModeArg::Global => RegionMode::Global,
            },
            lambda_mode,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvolveArgs {
    /// Input image (PGM or FGRD)
    #[arg(long)]
    pub image: PathBuf,
    /// Initial level set (FGRD), interior positive
    #[arg(long)]
    pub phi0: PathBuf,
    /// Interior weight map (FGRD)
    #[arg(long, conflicts_with = "l1")]
    pub lambda1: Option<PathBuf>,
    /// Constant interior weight, used when no map is given [default: 1]
    #[arg(long)]
    pub l1: Option<f64>,
    /// Exterior weight map (FGRD)
    #[arg(long, conflicts_with = "l2")]
    pub lambda2: Option<PathBuf>,
    /// Constant exterior weight, used when no map is given [default: 1]
    #[arg(long)]
    pub l2: Option<f64>,
    /// Output mask (PGM)
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for level-set snapshots (FGRD)
    #[arg(long)]
    pub history_dir: Option<PathBuf>,
    /// Snapshot every k steps when --history-dir is set
    #[arg(long, default_value_t = 10)]
    pub dump_every: usize,
    #[command(flatten)]
    pub acm: AcmArgs,
}

#[derive(Args, Debug)]
pub struct SegmentDalsArgs {
    /// Foreground probability map (FGRD), values in [0, 1]
    #[arg(long)]
    pub prob: PathBuf,
    /// Input image (PGM or FGRD)
    #[arg(long)]
    pub image: PathBuf,
    /// Output mask (PGM)
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the soft interior H(phi) of the result (FGRD)
    #[arg(long)]
    pub prob_out: Option<PathBuf>,
    /// Write the derived lambda1.fgrd and lambda2.fgrd into this directory
    #[arg(long)]
    pub dump_lambdas: Option<PathBuf>,
    #[command(flatten)]
    pub acm: AcmArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of <name>.pgm / <name>_gt.pgm pairs
    #[arg(long)]
    pub data: PathBuf,
    /// Output model file (MODL)
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training configuration; flags given explicitly override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Per-epoch history CSV [default: <out>.history.csv]
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Training epochs [default: 30]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Base learning rate, decayed polynomially over the epochs [default: 0.01]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Evolution steps inside the training loop [default: 20]
    #[arg(long)]
    pub acm_iters: Option<usize>,
    /// Scenes per batch [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed for initialization and shuffling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scenes held out from the end of the sorted dataset for validation [default: 0]
    #[arg(long)]
    pub held_out: Option<usize>,
    /// Momentum coefficient; 0 selects plain SGD [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Rescale each batch gradient to at most this L2 norm; 0 disables [default: 1]
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Train two scalar lambdas, both starting at this value, instead of lambda maps
    #[arg(long)]
    pub constant_lambda: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Trained model (MODL)
    #[arg(long)]
    pub model: PathBuf,
    /// Input image (PGM or FGRD)
    #[arg(long)]
    pub image: PathBuf,
    /// Output mask (PGM)
    #[arg(long)]
    pub out: PathBuf,
    /// Evolution steps
    #[arg(long, default_value_t = 20)]
    pub acm_iters: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of predicted masks
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth masks
    #[arg(long)]
    pub gt: PathBuf,
    /// Output CSV
    #[arg(long)]
    pub csv: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Side length of the synthetic test scene
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    /// Evolution steps between the predictor and the loss
    #[arg(long, default_value_t = 5)]
    pub acm_iters: usize,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-3)]
    pub h: f64,
    /// Seed for the scene, the weights and the sampled coordinates
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of weight coordinates checked
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// Pass threshold on the maximum relative error
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeArg {
    Rects,
    Disks,
    Blobs,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of scenes
    #[arg(long)]
    pub n: usize,
    /// Scene side length in pixels
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Dataset seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Shape kinds to draw from
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [ShapeArg::Rects])]
    pub shapes: Vec<ShapeArg>,
    /// Fewest instances per scene
    #[arg(long, default_value_t = 1)]
    pub min_instances: usize,
    /// Most instances per scene
    #[arg(long, default_value_t = 3)]
    pub max_instances: usize,
    /// Foreground intensity
    #[arg(long, default_value_t = 0.8)]
    pub fg: f64,
    /// Background intensity
    #[arg(long, default_value_t = 0.2)]
    pub bg: f64,
    /// Gaussian noise standard deviation
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Amplitude of the left-to-right illumination ramp
    #[arg(long, default_value_t = 0.0)]
    pub gradient: f64,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Grayscale image (PGM or FGRD)
    #[arg(long)]
    pub image: PathBuf,
    /// Binary mask (PGM or FGRD)
    #[arg(long)]
    pub mask: PathBuf,
    /// Output color image (P6 PPM)
    #[arg(long)]
    pub out: PathBuf,
    /// Draw the one-pixel mask boundary instead of a translucent fill
    #[arg(long)]
    pub contour: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
