use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "codedlf", version, about = "Coded spectral light-field simulation, reconstruction and calibration")]
pub struct Cli {
    /// Omit wall-clock timestamps from JSON reports.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a scene and write its central view, disparity and light field.
    GenScene(GenScene),
    /// Draw a random one-hot coding mask.
    MaskGen(MaskGen),
    /// Apply a coding mask to a light field.
    Encode(Encode),
    /// Sum a coded light field over its spectral axis.
    Project(Project),
    /// Redistribute a projection onto the channels selected by a mask.
    Lift(Lift),
    /// Sparse reconstruction in the 5D-DCT basis.
    ReconstructDct(ReconstructDct),
    /// Learn a patch dictionary from light fields.
    TrainDict(TrainDict),
    /// Patch-wise sparse reconstruction with a learned dictionary.
    ReconstructDict(ReconstructDict),
    /// Train the toy two-head network with a multi-task strategy.
    TrainToy(TrainToy),
    /// Run a trained toy network on a coded light field.
    PredictToy(PredictToy),
    /// Compare a prediction with ground truth.
    Evaluate(Evaluate),
    /// Fit dark signal, vignetting and filter responsivities.
    Calibrate(Calibrate),
}

#[derive(Debug, Args)]
pub struct GenScene {
    /// checker, gradient-ramp, spectral-stripes or random-smooth.
    #[arg(long)]
    pub pattern: String,
    /// constant:D, step:D1,D2 or linear-ramp:DMIN,DMAX.
    #[arg(long)]
    pub disparity: String,
    /// U,V,S,T,L.
    #[arg(long, value_parser = parse_dims5)]
    pub dims: [usize; 5],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Standard deviation of additive Gaussian noise on the light field.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f32,
    #[arg(long)]
    pub out_prefix: String,
    #[arg(long)]
    pub png_preview: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaskGen {
    /// S,T,L.
    #[arg(long, value_parser = parse_dims3)]
    pub dims: [usize; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Encode {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Existing mask; when absent a mask is drawn from --seed.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_coded: PathBuf,
    #[arg(long)]
    pub out_mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Project {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Lift {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructDct {
    /// Coded light field, or its projection when the last dim is 1.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub lambda: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 10)]
    pub memory: usize,
    #[arg(long)]
    pub grad_tol: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub png_preview: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GridPreset {
    Desk,
    Large,
}

#[derive(Debug, Args)]
pub struct TrainDict {
    /// Training light fields; repeat the flag for several files.
    #[arg(long = "in", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = GridPreset::Desk)]
    pub grid: GridPreset,
    #[arg(long, default_value_t = 2)]
    pub overcompleteness: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub fista_iters: usize,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructDict {
    /// Coded light field, or its projection when the last dim is 1.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long, value_enum, default_value_t = GridPreset::Desk)]
    pub grid: GridPreset,
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    #[arg(long, default_value_t = 200)]
    pub iters: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub png_preview: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Args)]
pub struct TrainToy {
    /// st-cv, st-disp, naive, mtu, gradnorm, gradsim, normgradsim or mtu+al.
    #[arg(long)]
    pub strategy: String,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// U,V,S,T,L of the generated scenes.
    #[arg(long, value_parser = parse_dims5, default_value = "3,3,8,8,5")]
    pub dims: [usize; 5],
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Samples used for training; the rest validate.
    #[arg(long, default_value_t = 160)]
    pub train_samples: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Momentum of the sgd optimizer.
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long)]
    pub log: PathBuf,
    /// Trained network (LFNN).
    #[arg(long)]
    pub out_net: Option<PathBuf>,
    /// Summary with baselines and final validation losses.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictToy {
    #[arg(long)]
    pub net: PathBuf,
    /// Coded light field matching the network input dims.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out_prefix: String,
    #[arg(long)]
    pub png_preview: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalKind {
    /// Central view `(1,1,S,T,L)`: PSNR, SSIM, spectral angle, SID.
    Cv,
    /// Disparity `(1,1,S,T,1)`: MAE, MSE, BadPix.
    Disp,
    /// Any tensor: PSNR, relative error, exact equality.
    Lf,
}

#[derive(Debug, Args)]
pub struct Evaluate {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalKind::Lf)]
    pub kind: EvalKind,
    #[arg(long, default_value_t = 1.0)]
    pub peak: f64,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DarkModeArg {
    PerPixel,
    Global,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AxisArg {
    Rows,
    Columns,
}

#[derive(Debug, Args)]
pub struct Calibrate {
    /// Dark means `(1,Ld,I,J,1)`.
    #[arg(long)]
    pub dark: PathBuf,
    /// Bright means `(1,L,I,J,K)`.
    #[arg(long)]
    pub bright: PathBuf,
    /// Exposure times of the bright series, one per line.
    #[arg(long)]
    pub times: PathBuf,
    /// Exposure times of the dark series; defaults to --times.
    #[arg(long)]
    pub dark_times: Option<PathBuf>,
    /// Bayer types `(1,1,I,J,1)` with values 0, 1, 2.
    #[arg(long)]
    pub bayer: PathBuf,
    #[arg(long, value_enum, default_value_t = DarkModeArg::PerPixel)]
    pub dark_mode: DarkModeArg,
    #[arg(long, value_enum, default_value_t = AxisArg::Rows)]
    pub readout_axis: AxisArg,
    #[arg(long, default_value_t = codedlf::calib::SATURATION_THRESHOLD)]
    pub saturation: f64,
    #[arg(long, default_value_t = codedlf::calib::LINE_REACH)]
    pub line_reach: usize,
    #[arg(long, default_value_t = 200)]
    pub max_sweeps: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub rel_tol: f64,
    /// SIZE,OVERLAP for tiled fitting.
    #[arg(long, value_parser = parse_pair)]
    pub tile: Option<(usize, usize)>,
    /// Report path; the vignetting map goes next to it as `<stem>.v.lf5d`.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_list(s: &str, n: usize) -> Result<Vec<usize>, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != n {
        return Err(format!("expected {n} comma-separated integers, got {}", v.len()));
    }
    if v.contains(&0) {
        return Err("dims must be positive".into());
    }
    Ok(v)
}

fn parse_dims5(s: &str) -> Result<[usize; 5], String> {
    parse_list(s, 5).map(|v| [v[0], v[1], v[2], v[3], v[4]])
}

fn parse_dims3(s: &str) -> Result<[usize; 3], String> {
    parse_list(s, 3).map(|v| [v[0], v[1], v[2]])
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected SIZE,OVERLAP")?;
    Ok((a.trim().parse().map_err(|e| format!("{e}"))?, b.trim().parse().map_err(|e| format!("{e}"))?))
}
