use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use varflow::defaults::{DELTA, EDGE_GAMMA, RANGE, TGV_BETA};
use varflow::{CheckpointMode, Model, Precision};

#[derive(Parser, Debug)]
#[command(name = "varflow", version, about = "Variational flow inpainting and matching tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Densify a flow field with the TV or TGV solver.
    Inpaint(InpaintArgs),
    /// Correlate two feature maps and write the argmin flow.
    Costvol(CostvolArgs),
    /// Refine a strided integer flow to sub-pixel accuracy.
    Quadfit(QuadfitArgs),
    /// Compare reverse-pass gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Evaluate the TV or TGV energy of a flow.
    Energy(EnergyArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModelArg {
    Tv,
    Tgv,
}

impl From<ModelArg> for Model {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Tv => Model::Tv,
            ModelArg::Tgv => Model::Tgv,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PrecisionArg {
    F64,
    Mixed,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F64 => Precision::Double,
            PrecisionArg::Mixed => Precision::Mixed,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CheckpointArg {
    Sqrt,
    Full,
}

impl From<CheckpointArg> for CheckpointMode {
    fn from(c: CheckpointArg) -> Self {
        match c {
            CheckpointArg::Sqrt => CheckpointMode::Sqrt,
            CheckpointArg::Full => CheckpointMode::Full,
        }
    }
}

/// Energy inputs shared by `inpaint` and `energy`.
#[derive(Args, Debug)]
pub struct ProblemArgs {
    /// Initial flow estimate (.flo).
    #[arg(long)]
    pub uhat: PathBuf,
    /// Confidence map (single-channel F32M, values in [0, 1]).
    #[arg(long)]
    pub conf: PathBuf,
    /// Diffusion tensor (two-channel F32M).
    #[arg(long, conflicts_with = "image")]
    pub tensor: Option<PathBuf>,
    /// Reference image (PNG) for an edge-based tensor.
    #[arg(long, required_unless_present = "tensor")]
    pub image: Option<PathBuf>,
    #[arg(long, default_value_t = EDGE_GAMMA)]
    pub gamma: f64,
    #[arg(long, value_enum, default_value_t = ModelArg::Tv)]
    pub model: ModelArg,
    #[arg(long, default_value_t = DELTA)]
    pub delta: f64,
    #[arg(long, default_value_t = TGV_BETA)]
    pub beta: f64,
}

#[derive(Args, Debug)]
pub struct InpaintArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Number of pyramid levels.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Iterations per level, coarsest first.
    #[arg(long, value_delimiter = ',')]
    pub level_iters: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
    pub precision: PrecisionArg,
    #[arg(long, value_enum, default_value_t = CheckpointArg::Sqrt)]
    pub checkpoint: CheckpointArg,
    /// Output flow (.flo).
    #[arg(long)]
    pub out: PathBuf,
    /// Optional color-coded PNG of the result.
    #[arg(long)]
    pub png: Option<PathBuf>,
    /// Flow magnitude mapped to full saturation; defaults to the maximum.
    #[arg(long)]
    pub png_max: Option<f64>,
}

#[derive(Args, Debug)]
pub struct CostvolArgs {
    /// Strided feature map of the first frame (F32M).
    #[arg(long)]
    pub feat0: PathBuf,
    /// Strided feature map of the second frame (F32M).
    #[arg(long)]
    pub feat1: PathBuf,
    /// Displacement range d; candidates are -d..d-1.
    #[arg(long, default_value_t = RANGE)]
    pub range: usize,
    /// Argmin flow output (.flo).
    #[arg(long)]
    pub out: PathBuf,
    /// Softmax pseudo-likelihoods along x (F32M, 2d channels).
    #[arg(long)]
    pub prob0: Option<PathBuf>,
    /// Softmax pseudo-likelihoods along y (F32M, 2d channels).
    #[arg(long)]
    pub prob1: Option<PathBuf>,
    /// Also run sub-pixel refinement.
    #[arg(long, requires_all = ["hr0", "hr1", "refined"])]
    pub refine: bool,
    #[command(flatten)]
    pub refinement: RefineOutputs,
}

/// Full-resolution inputs and outputs of the refinement step.
#[derive(Args, Debug)]
pub struct RefineOutputs {
    /// Full-resolution features of the first frame (F32M).
    #[arg(long)]
    pub hr0: Option<PathBuf>,
    /// Full-resolution features of the second frame (F32M).
    #[arg(long)]
    pub hr1: Option<PathBuf>,
    /// Refined flow output (.flo).
    #[arg(long)]
    pub refined: Option<PathBuf>,
    /// Fitted cost per pixel (F32M).
    #[arg(long)]
    pub fit_cost: Option<PathBuf>,
    /// 1 where the fit failed, else 0 (F32M).
    #[arg(long)]
    pub fail_mask: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct QuadfitArgs {
    /// Strided integer flow (.flo).
    #[arg(long)]
    pub ubar: PathBuf,
    #[command(flatten)]
    pub refinement: RefineOutputs,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = ModelArg::Tv)]
    pub model: ModelArg,
    /// Grid size as WxH.
    #[arg(long, default_value = "8x8", value_parser = parse_grid)]
    pub grid: (usize, usize),
    #[arg(long, default_value_t = 50)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub fd_step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DELTA)]
    pub delta: f64,
}

#[derive(Args, Debug)]
pub struct EnergyArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Flow to evaluate (.flo).
    #[arg(long)]
    pub flow: PathBuf,
    /// TGV auxiliary field of the first flow component (two-channel F32M).
    #[arg(long)]
    pub w0: Option<PathBuf>,
    /// TGV auxiliary field of the second flow component (two-channel F32M).
    #[arg(long)]
    pub w1: Option<PathBuf>,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got '{s}'"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad grid size '{v}': {e}"));
    let (w, h) = (parse(w)?, parse(h)?);
    if w == 0 || h == 0 {
        return Err("grid sides must be positive".into());
    }
    Ok((w, h))
}
