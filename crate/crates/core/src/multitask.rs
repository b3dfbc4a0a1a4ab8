//! Multi-task loss combination and the toy training loop.
//!
//! Two tasks share a trunk: central-view estimation (`cv`) and disparity
//! estimation (`disp`). Each task has a Huber main loss and two auxiliary
//! losses. Task weights come from static values, learned uncertainties (MTU)
//! or GradNorm; auxiliary weights come from gradient similarity (GradSim) or
//! the normalised variant NormGradSim. All weights are constants with respect
//! to the network parameters, so the total gradient is the same linear
//! combination of per-loss parameter gradients as the total loss is of the
//! per-loss values.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, LayerSpec, Optimizer, OptimizerKind, ParamGroup, ToyNet};
use crate::coding::{encode, random_mask, MaskSeed};
use crate::losses::{self, Image};
use crate::rng::{self, streams};
use crate::scenegen::{make_scene, render_lightfield, DisparityProfile, Pattern, SceneSpec};
use crate::{CentralView, DisparityMap, Error, Result, Tensor5};

pub const TASKS: usize = 2;
pub const CV: usize = 0;
pub const DISP: usize = 1;
pub const HUBER_DELTA: f64 = 1.0;

/// Flattened gradient with a label naming its loss and parameter subset.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub tag: String,
    pub data: Vec<f64>,
}

impl GradientVector {
    pub fn new(tag: impl Into<String>, data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        Ok(GradientVector { tag: tag.into(), data })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_lens(g_main: &[f64], g_aux: &[&[f64]]) -> Result<()> {
    if g_aux.iter().any(|g| g.len() != g_main.len()) {
        return Err(Error::dims("gradient vectors differ in length"));
    }
    Ok(())
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = norm(a) * norm(b);
    (n > 0.0).then(|| (dot(a, b) / n).clamp(-1.0, 1.0))
}

/// `Σ w_i L_i`; the gradient field holds `∂/∂L_i = w_i`.
pub fn combine_naive(losses: &[f64], w: &[f64]) -> Result<losses::LossValue> {
    if losses.len() != w.len() {
        return Err(Error::dims(format!("{} losses vs {} weights", losses.len(), w.len())));
    }
    Ok(losses::LossValue {
        value: losses.iter().zip(w).map(|(l, w)| l * w).sum(),
        grad: w.iter().map(|&x| x as f32).collect(),
    })
}

/// Per-task log-variances `s_i = log σ_i²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtuState {
    pub s: Vec<f64>,
}

impl MtuState {
    pub fn new(tasks: usize) -> Self {
        MtuState { s: vec![0.0; tasks] }
    }

    /// Multipliers `½·exp(−s_i)` of the task losses.
    pub fn loss_weights(&self) -> Vec<f64> {
        self.s.iter().map(|s| 0.5 * (-s).exp()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtuLoss {
    pub value: f64,
    /// `∂L/∂s_i = ½(1 − exp(−s_i)·L_i)`.
    pub grad_s: Vec<f64>,
}

/// `Σ ½·exp(−s_i)·L_i + ½·s_i`.
pub fn mtu_loss(losses: &[f64], state: &MtuState) -> Result<MtuLoss> {
    if losses.len() != state.s.len() {
        return Err(Error::dims("MTU state and losses differ in length"));
    }
    let value = losses.iter().zip(&state.s).map(|(l, s)| 0.5 * (-s).exp() * l + 0.5 * s).sum();
    let grad_s = losses.iter().zip(&state.s).map(|(l, s)| 0.5 * (1.0 - (-s).exp() * l)).collect();
    Ok(MtuLoss { value, grad_s })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradNormState {
    pub w: Vec<f64>,
    pub initial_losses: Option<Vec<f64>>,
    pub gamma: f64,
    pub lr: f64,
}

/// Smallest weight kept before renormalisation.
pub const GRADNORM_MIN_WEIGHT: f64 = 1e-3;

impl GradNormState {
    pub fn new(tasks: usize, gamma: f64, lr: f64) -> Self {
        GradNormState { w: vec![1.0; tasks], initial_losses: None, gamma, lr }
    }
}

/// One sub-gradient step on `Σ |w_i‖G_i‖ − Ḡ·r_i^γ|` with `Ḡ` held fixed,
/// followed by renormalisation to `Σ w_i = N`. The first call records the
/// initial losses. Returns `false` (and leaves the weights alone) when a
/// gradient norm is zero or a loss ratio is undefined.
pub fn gradnorm_update(grad_norms: &[f64], losses: &[f64], state: &mut GradNormState) -> Result<bool> {
    let n = state.w.len();
    if grad_norms.len() != n || losses.len() != n {
        return Err(Error::dims("GradNorm inputs differ in length"));
    }
    let l0 = state.initial_losses.get_or_insert_with(|| losses.to_vec()).clone();
    if grad_norms.iter().any(|&g| g <= 0.0 || !g.is_finite()) || l0.iter().any(|&l| l <= 0.0) {
        log::warn!("GradNorm update skipped: degenerate gradient norms or losses");
        return Ok(false);
    }
    let ratios: Vec<f64> = losses.iter().zip(&l0).map(|(l, l0)| l / l0).collect();
    let mean_ratio = ratios.iter().sum::<f64>() / n as f64;
    let wg: Vec<f64> = state.w.iter().zip(grad_norms).map(|(w, g)| w * g).collect();
    let g_bar = wg.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        let target = g_bar * (ratios[i] / mean_ratio).powf(state.gamma);
        let d = wg[i] - target;
        let sub = if d == 0.0 { 0.0 } else { d.signum() * grad_norms[i] };
        state.w[i] = (state.w[i] - state.lr * sub).max(GRADNORM_MIN_WEIGHT);
    }
    let sum: f64 = state.w.iter().sum();
    state.w.iter_mut().for_each(|w| *w *= n as f64 / sum);
    Ok(true)
}

/// `max(0, cos(g_main, g_aux,j))`, zero for zero-norm vectors.
pub fn gradsim_weights(g_main: &[f64], g_aux: &[&[f64]]) -> Result<Vec<f64>> {
    check_lens(g_main, g_aux)?;
    Ok(g_aux.iter().map(|g| cosine(g_main, g).map_or(0.0, |c| c.max(0.0))).collect())
}

/// NormGradSim weights of one task's auxiliary losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxWeights {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

pub const BETA_MIN: f64 = 1e-4;
pub const DEFAULT_AUX_STEP: f64 = 0.1;

impl AuxWeights {
    pub fn new(n_aux: usize) -> Self {
        AuxWeights { alpha: vec![0.5; n_aux], beta: vec![1.0; n_aux] }
    }

    pub fn zero_alpha(n_aux: usize) -> Self {
        AuxWeights { alpha: vec![0.0; n_aux], beta: vec![1.0; n_aux] }
    }

    /// Coefficients `(c_main, c_j)` with `L = c_main·L_main + Σ c_j·L_aux,j`.
    pub fn coefficients(&self) -> (f64, Vec<f64>) {
        let den = 1.0 + self.alpha.iter().sum::<f64>();
        let c = self.alpha.iter().zip(&self.beta).map(|(a, b)| a * b / den).collect();
        (1.0 / den, c)
    }
}

fn step_toward(cur: f64, target: f64, step: f64) -> f64 {
    cur + (target - cur).signum() * step.min((target - cur).abs())
}

/// Move each `α_j` toward `max(0, cos)` and each `β_j` toward
/// `‖g_main‖/‖g_aux,j‖` by at most `step`, then clamp `α ∈ [0,1]`,
/// `β ≥ BETA_MIN`. Auxiliary losses with a zero-norm gradient are skipped.
pub fn normgradsim_update(g_main: &[f64], g_aux: &[&[f64]], weights: &mut AuxWeights, step: f64) -> Result<()> {
    check_lens(g_main, g_aux)?;
    if g_aux.len() != weights.alpha.len() {
        return Err(Error::dims("auxiliary gradients and weights differ in count"));
    }
    let nm = norm(g_main);
    for (j, g) in g_aux.iter().enumerate() {
        let na = norm(g);
        if nm == 0.0 || na == 0.0 {
            log::warn!("NormGradSim update of auxiliary loss {j} skipped: zero gradient norm");
            continue;
        }
        let a_target = (dot(g_main, g) / (nm * na)).clamp(-1.0, 1.0).max(0.0);
        weights.alpha[j] = step_toward(weights.alpha[j], a_target, step).clamp(0.0, 1.0);
        weights.beta[j] = step_toward(weights.beta[j], nm / na, step).max(BETA_MIN);
    }
    Ok(())
}

/// `(L_main + Σ α_j β_j L_aux,j) / (1 + Σ α_j)`.
pub fn normgradsim_loss(l_main: f64, l_aux: &[f64], weights: &AuxWeights) -> Result<f64> {
    if l_aux.len() != weights.alpha.len() {
        return Err(Error::dims("auxiliary losses and weights differ in count"));
    }
    let (cm, ca) = weights.coefficients();
    Ok(cm * l_main + ca.iter().zip(l_aux).map(|(c, l)| c * l).sum::<f64>())
}

/// `Σ_i w_i · normgradsim_loss(i)`.
pub fn combined_loss(mains: &[f64], aux: &[Vec<f64>], tw: &[f64], aw: &[AuxWeights]) -> Result<f64> {
    if mains.len() != tw.len() || aux.len() != tw.len() || aw.len() != tw.len() {
        return Err(Error::dims("per-task inputs differ in count"));
    }
    let mut total = 0.0;
    for i in 0..tw.len() {
        total += tw[i] * normgradsim_loss(mains[i], &aux[i], &aw[i])?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    StCv,
    StDisp,
    Naive,
    Mtu,
    Gradnorm,
    Gradsim,
    Normgradsim,
    #[serde(rename = "mtu+al")]
    MtuAl,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::StCv,
        Strategy::StDisp,
        Strategy::Naive,
        Strategy::Mtu,
        Strategy::Gradnorm,
        Strategy::Gradsim,
        Strategy::Normgradsim,
        Strategy::MtuAl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::StCv => "st-cv",
            Strategy::StDisp => "st-disp",
            Strategy::Naive => "naive",
            Strategy::Mtu => "mtu",
            Strategy::Gradnorm => "gradnorm",
            Strategy::Gradsim => "gradsim",
            Strategy::Normgradsim => "normgradsim",
            Strategy::MtuAl => "mtu+al",
        }
    }

    pub fn task_mode(self) -> TaskMode {
        match self {
            Strategy::StCv => TaskMode::Static([1.0, 0.0]),
            Strategy::StDisp => TaskMode::Static([0.0, 1.0]),
            Strategy::Naive | Strategy::Gradsim | Strategy::Normgradsim => TaskMode::Static([0.5, 0.5]),
            Strategy::Mtu | Strategy::MtuAl => TaskMode::Mtu,
            Strategy::Gradnorm => TaskMode::GradNorm,
        }
    }

    pub fn aux_mode(self) -> AuxMode {
        match self {
            Strategy::Gradsim => AuxMode::GradSim,
            Strategy::Normgradsim | Strategy::MtuAl => AuxMode::NormGradSim,
            _ => AuxMode::None,
        }
    }

    /// Tasks whose main loss carries a nonzero weight.
    pub fn active_tasks(self) -> [bool; TASKS] {
        match self.task_mode() {
            TaskMode::Static(w) => [w[0] != 0.0, w[1] != 0.0],
            _ => [true; TASKS],
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskMode {
    Static([f64; TASKS]),
    Mtu,
    GradNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxMode {
    None,
    GradSim,
    NormGradSim,
}

/// Loss slots: per task one main loss followed by its auxiliary losses.
pub const N_AUX: usize = 2;
const SLOTS: usize = TASKS * (1 + N_AUX);

fn slot(task: usize, k: usize) -> usize {
    task * (1 + N_AUX) + k
}

pub const LOSS_NAMES: [&str; SLOTS] = ["cv_huber", "cv_ssim", "cv_spectral_cos", "disp_huber", "disp_tv", "disp_normal"];

#[derive(Debug, Clone)]
pub struct ToySample {
    pub lf: Tensor5,
    pub cv: CentralView,
    pub disp: DisparityMap,
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub dims: [usize; 5],
    pub samples: Vec<ToySample>,
}

impl ToyDataset {
    /// `n` scenes with random patterns and disparity profiles in `[-1, 1]`.
    pub fn generate(n: usize, dims: [usize; 5], seed: u64) -> Result<Self> {
        let [u, v, s, t, lambda] = dims;
        let mut r = rng::stream(seed, streams::DATASET);
        let patterns = [Pattern::Checker, Pattern::GradientRamp, Pattern::SpectralStripes, Pattern::RandomSmooth];
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let pattern = patterns[rng::index_below(&mut r, patterns.len())];
            let mut d = || (2.0 * rng::unit(&mut r) - 1.0) as f32;
            let disparity = match i % 3 {
                0 => DisparityProfile::Constant(d()),
                1 => DisparityProfile::Step(d(), d()),
                _ => DisparityProfile::LinearRamp(d(), d()),
            };
            let spec = SceneSpec { u, v, s, t, lambda, pattern, disparity, seed: rng::derive(seed, &[i as u64]) };
            let (cv, disp) = make_scene(&spec)?;
            let lf = render_lightfield(&cv, &disp, u, v)?;
            samples.push(ToySample { lf, cv, disp });
        }
        Ok(ToyDataset { dims, samples })
    }

    pub fn split_at(mut self, n_train: usize) -> (ToyDataset, ToyDataset) {
        let rest = self.samples.split_off(n_train.min(self.samples.len()));
        let dims = self.dims;
        (self, ToyDataset { dims, samples: rest })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Seed of the fixed validation masks.
    pub eval_seed: u64,
    pub gradnorm_gamma: f64,
    pub gradnorm_lr: f64,
    pub aux_step: f64,
    /// Similarities and norms over all parameters instead of the shared trunk.
    pub all_params_similarity: bool,
}

impl TrainConfig {
    pub fn new(strategy: Strategy) -> Self {
        TrainConfig {
            strategy,
            epochs: 50,
            batch_size: 16,
            optimizer: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            eval_seed: 0x5eed,
            gradnorm_gamma: 1.5,
            gradnorm_lr: 0.025,
            aux_step: DEFAULT_AUX_STEP,
            all_params_similarity: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::arg("epochs and batch size must be positive"));
        }
        let rule_ok = match self.optimizer {
            OptimizerKind::Sgd { momentum } => (0.0..1.0).contains(&momentum),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if !(rule_ok && self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::arg("invalid optimizer settings"));
        }
        if !(self.aux_step > 0.0 && self.gradnorm_lr >= 0.0) {
            return Err(Error::arg("invalid weighting step sizes"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_cv: f64,
    pub loss_disp: f64,
    pub alphas: Vec<Vec<f64>>,
    pub betas: Vec<Vec<f64>>,
    pub task_weights: Vec<f64>,
    pub val_loss_cv: f64,
    pub val_loss_disp: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ToyNet,
    pub log: Vec<EpochLog>,
    /// Validation Huber loss of the constant training-mean predictor per task.
    pub baseline: [f64; TASKS],
}

/// Batch-mean loss values and (optionally) full parameter gradients.
struct BatchEval {
    losses: [f64; SLOTS],
    grads: Vec<Option<Vec<f64>>>,
}

/// Batch mean of a per-sample loss over the rows of `pred`.
fn rowwise(
    pred: &[f64],
    truths: &[&[f32]],
    dims: [usize; 3],
    f: impl Fn(Image, Image) -> Result<losses::LossValue>,
) -> Result<(f64, Vec<f64>)> {
    let n = dims.iter().product::<usize>();
    let b = truths.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (row, truth) in pred.chunks_exact(n).zip(truths) {
        let p: Vec<f32> = row.iter().map(|&x| x as f32).collect();
        let lv = f(Image::new(dims[0], dims[1], dims[2], &p)?, Image::new(dims[0], dims[1], dims[2], truth)?)?;
        value += lv.value / b;
        grad.extend(lv.grad.iter().map(|&g| g as f64 / b));
    }
    Ok((value, grad))
}

fn batch_eval(net: &ToyNet, coded: &[Tensor5], samples: &[&ToySample], need: &[bool; SLOTS]) -> Result<BatchEval> {
    let mut g = Graph::new();
    let vars = net.build_batch(&mut g, coded)?;
    let [s, t, l] = net.spec().cv_dims();
    let rows = samples.len();
    let flat = |f: &dyn Fn(&ToySample) -> &[f32]| samples.iter().flat_map(|x| f(x).iter().map(|&v| v as f64)).collect::<Vec<f64>>();
    let cv_truth = g.constant(flat(&|x| x.cv.data()), rows)?;
    let disp_truth = g.constant(flat(&|x| x.disp.data()), rows)?;
    let cv_rows: Vec<&[f32]> = samples.iter().map(|x| x.cv.data()).collect();
    let d_rows: Vec<&[f32]> = samples.iter().map(|x| x.disp.data()).collect();
    let cv_pred = g.value(vars.cv).to_vec();
    let d_pred = g.value(vars.disp).to_vec();
    let aux = [
        rowwise(&cv_pred, &cv_rows, [s, t, l], losses::ssim_loss)?,
        rowwise(&cv_pred, &cv_rows, [s, t, l], losses::spectral_cos_loss)?,
        rowwise(&d_pred, &d_rows, [s, t, 1], losses::tv_smoothness)?,
        rowwise(&d_pred, &d_rows, [s, t, 1], losses::normal_similarity)?,
    ];
    let [a0, a1, a2, a3] = aux;
    let nodes = [
        g.huber(vars.cv, cv_truth, HUBER_DELTA)?,
        g.external(vars.cv, a0.0, a0.1)?,
        g.external(vars.cv, a1.0, a1.1)?,
        g.huber(vars.disp, disp_truth, HUBER_DELTA)?,
        g.external(vars.disp, a2.0, a2.1)?,
        g.external(vars.disp, a3.0, a3.1)?,
    ];
    let mut out = BatchEval { losses: [0.0; SLOTS], grads: vec![None; SLOTS] };
    for k in 0..SLOTS {
        out.losses[k] = g.value(nodes[k])[0];
        if need[k] {
            g.zero_grad();
            g.backward(nodes[k])?;
            out.grads[k] = Some(net.gradient(&g, &vars));
        }
    }
    Ok(out)
}

fn coded_sample(sample: &ToySample, seed: u64) -> Result<Tensor5> {
    let [_, _, s, t, l] = sample.lf.dims();
    encode(&sample.lf, &random_mask(s, t, l, MaskSeed(seed))?)
}

fn restrict(g: &[f64], ranges: &[std::ops::Range<usize>]) -> Vec<f64> {
    ranges.iter().flat_map(|r| g[r.clone()].iter().copied()).collect()
}

/// Mean validation Huber losses with fixed masks derived from `eval_seed`.
pub fn validation_losses(net: &ToyNet, val: &ToyDataset, eval_seed: u64) -> Result<[f64; TASKS]> {
    if val.is_empty() {
        return Err(Error::arg("empty validation set"));
    }
    let mut acc = [0.0; TASKS];
    for (start, chunk) in val.samples.chunks(EVAL_BATCH).enumerate() {
        let coded: Vec<Tensor5> = chunk
            .iter()
            .enumerate()
            .map(|(k, s)| eval_input(s, eval_seed, start * EVAL_BATCH + k))
            .collect::<Result<_>>()?;
        for ((cv, d), s) in net.forward_batch(&coded)?.iter().zip(chunk) {
            acc[0] += losses::huber(cv.data(), s.cv.data(), HUBER_DELTA)?.value;
            acc[1] += losses::huber(d.data(), s.disp.data(), HUBER_DELTA)?.value;
        }
    }
    Ok(acc.map(|a| a / val.len() as f64))
}

const EVAL_BATCH: usize = 32;

/// Validation loss of predicting the training-target mean everywhere.
pub fn constant_baseline(train: &ToyDataset, val: &ToyDataset) -> Result<[f64; TASKS]> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::arg("empty dataset"));
    }
    let mean = |f: &dyn Fn(&ToySample) -> &[f32]| {
        let (sum, n) = train
            .samples
            .iter()
            .fold((0.0f64, 0usize), |(s, n), x| (s + f(x).iter().map(|&v| v as f64).sum::<f64>(), n + f(x).len()));
        (sum / n as f64) as f32
    };
    let m_cv = mean(&|s| s.cv.data());
    let m_d = mean(&|s| s.disp.data());
    let mut acc = [0.0; TASKS];
    for s in &val.samples {
        acc[0] += losses::huber(&vec![m_cv; s.cv.data().len()], s.cv.data(), HUBER_DELTA)?.value;
        acc[1] += losses::huber(&vec![m_d; s.disp.data().len()], s.disp.data(), HUBER_DELTA)?.value;
    }
    Ok(acc.map(|a| a / val.len() as f64))
}

/// Balancing state carried across batches.
#[derive(Debug, Clone)]
struct Weighting {
    mtu: MtuState,
    mtu_opt: Optimizer,
    gradnorm: GradNormState,
    aux: Vec<AuxWeights>,
}

impl Weighting {
    fn task_weights(&self, mode: TaskMode) -> [f64; TASKS] {
        match mode {
            TaskMode::Static(w) => w,
            TaskMode::Mtu => {
                let w = self.mtu.loss_weights();
                [w[0], w[1]]
            }
            TaskMode::GradNorm => [self.gradnorm.w[0], self.gradnorm.w[1]],
        }
    }
}

fn loss_mask(strategy: Strategy) -> [bool; SLOTS] {
    let active = strategy.active_tasks();
    let aux = strategy.aux_mode() != AuxMode::None;
    let mut need = [false; SLOTS];
    for task in 0..TASKS {
        if active[task] {
            need[slot(task, 0)] = true;
            for j in 0..N_AUX {
                need[slot(task, 1 + j)] = aux;
            }
        }
    }
    need
}

/// One balancing-and-combination step; returns the total parameter gradient.
fn combine_step(
    cfg: &TrainConfig,
    net: &ToyNet,
    ev: &BatchEval,
    state: &mut Weighting,
) -> Result<Vec<f64>> {
    let ranges = if cfg.all_params_similarity {
        vec![0..net.param_count()]
    } else {
        net.group_ranges(ParamGroup::Shared)
    };
    let active = cfg.strategy.active_tasks();
    let mut task_grads: Vec<Option<Vec<f64>>> = vec![None; TASKS];
    let mut task_losses = [0.0; TASKS];
    for task in 0..TASKS {
        if !active[task] {
            continue;
        }
        let main = ev.grads[slot(task, 0)].as_ref().expect("main gradient computed");
        let aux: Vec<&Vec<f64>> = (0..N_AUX).filter_map(|j| ev.grads[slot(task, 1 + j)].as_ref()).collect();
        let l_main = ev.losses[slot(task, 0)];
        let l_aux: Vec<f64> = (0..N_AUX).map(|j| ev.losses[slot(task, 1 + j)]).collect();
        let coeffs: (f64, Vec<f64>) = match cfg.strategy.aux_mode() {
            AuxMode::None => (1.0, vec![]),
            AuxMode::GradSim => {
                let sm = restrict(main, &ranges);
                let sa: Vec<Vec<f64>> = aux.iter().map(|g| restrict(g, &ranges)).collect();
                let refs: Vec<&[f64]> = sa.iter().map(|v| v.as_slice()).collect();
                let w = gradsim_weights(&sm, &refs)?;
                state.aux[task].alpha = w.clone();
                (1.0, w)
            }
            AuxMode::NormGradSim => {
                let sm = restrict(main, &ranges);
                let sa: Vec<Vec<f64>> = aux.iter().map(|g| restrict(g, &ranges)).collect();
                let refs: Vec<&[f64]> = sa.iter().map(|v| v.as_slice()).collect();
                normgradsim_update(&sm, &refs, &mut state.aux[task], cfg.aux_step)?;
                state.aux[task].coefficients()
            }
        };
        let mut g: Vec<f64> = main.iter().map(|x| coeffs.0 * x).collect();
        task_losses[task] = coeffs.0 * l_main;
        for (j, c) in coeffs.1.iter().enumerate() {
            if *c != 0.0 {
                g.iter_mut().zip(aux[j].iter()).for_each(|(x, y)| *x += c * y);
            }
            task_losses[task] += c * l_aux[j];
        }
        task_grads[task] = Some(g);
    }

    let mode = cfg.strategy.task_mode();
    match mode {
        TaskMode::Static(_) => {}
        TaskMode::Mtu => {
            let m = mtu_loss(&task_losses, &state.mtu)?;
            state.mtu_opt.step_values(&mut state.mtu.s, &m.grad_s)?;
        }
        TaskMode::GradNorm => {
            let norms: Vec<f64> = task_grads
                .iter()
                .map(|g| g.as_ref().map_or(0.0, |g| norm(&restrict(g, &ranges))))
                .collect();
            gradnorm_update(&norms, &task_losses, &mut state.gradnorm)?;
        }
    }
    let w = state.task_weights(mode);
    let mut total = vec![0.0; net.param_count()];
    for task in 0..TASKS {
        if let Some(g) = &task_grads[task] {
            if w[task] != 0.0 {
                total.iter_mut().zip(g).for_each(|(x, y)| *x += w[task] * y);
            }
        }
    }
    Ok(total)
}

/// Train `net` with fresh random masks per sample and epoch.
pub fn train(mut net: ToyNet, train: &ToyDataset, val: &ToyDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::arg("training and validation sets must be nonempty"));
    }
    if train.dims != net.spec().input_dims || val.dims != net.spec().input_dims {
        return Err(Error::dims("dataset dims differ from the network input"));
    }
    let baseline = constant_baseline(train, val)?;
    let need = loss_mask(cfg.strategy);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay);
    let mut state = Weighting {
        mtu: MtuState::new(TASKS),
        mtu_opt: Optimizer::new(cfg.optimizer, cfg.lr, 0.0),
        gradnorm: GradNormState::new(TASKS, cfg.gradnorm_gamma, cfg.gradnorm_lr),
        aux: (0..TASKS)
            .map(|_| match cfg.strategy.aux_mode() {
                AuxMode::None => AuxWeights::zero_alpha(N_AUX),
                _ => AuxWeights::new(N_AUX),
            })
            .collect(),
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut shuffle = rng::stream(rng::derive(cfg.seed, &[epoch as u64]), streams::SHUFFLE);
        let order = rng::permutation(&mut shuffle, train.len());
        let (mut sum_cv, mut sum_d) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&ToySample> = batch.iter().map(|&i| &train.samples[i]).collect();
            let coded: Vec<Tensor5> = batch
                .iter()
                .map(|&i| coded_sample(&train.samples[i], rng::derive(cfg.seed, &[epoch as u64, i as u64, streams::MASK])))
                .collect::<Result<_>>()?;
            let ev = batch_eval(&net, &coded, &samples, &need)?;
            let grad = combine_step(cfg, &net, &ev, &mut state)?;
            if grad.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient in epoch {epoch}")));
            }
            opt.step(&mut net, &grad)?;
            sum_cv += ev.losses[slot(CV, 0)] * batch.len() as f64;
            sum_d += ev.losses[slot(DISP, 0)] * batch.len() as f64;
        }
        let [val_cv, val_d] = validation_losses(&net, val, cfg.eval_seed)?;
        let mode = cfg.strategy.task_mode();
        log.push(EpochLog {
            epoch,
            loss_cv: sum_cv / train.len() as f64,
            loss_disp: sum_d / train.len() as f64,
            alphas: state.aux.iter().map(|a| a.alpha.clone()).collect(),
            betas: state.aux.iter().map(|a| a.beta.clone()).collect(),
            task_weights: state.task_weights(mode).to_vec(),
            val_loss_cv: val_cv,
            val_loss_disp: val_d,
        });
        log::info!("epoch {epoch}: val cv {val_cv:.5} disp {val_d:.5}");
    }
    Ok(TrainOutcome { net, log, baseline })
}

/// Gradient of the strategy's combined loss for one batch, without updating
/// any state; used to check which parameters a strategy can touch.
pub fn combined_gradient(net: &ToyNet, coded: &[Tensor5], samples: &[&ToySample], strategy: Strategy) -> Result<Vec<f64>> {
    let cfg = TrainConfig::new(strategy);
    let ev = batch_eval(net, coded, samples, &loss_mask(strategy))?;
    let mut state = Weighting {
        mtu: MtuState::new(TASKS),
        mtu_opt: Optimizer::sgd(0.0, 0.0, 0.0),
        gradnorm: GradNormState::new(TASKS, cfg.gradnorm_gamma, cfg.gradnorm_lr),
        aux: vec![AuxWeights::new(N_AUX); TASKS],
    };
    combine_step(&cfg, net, &ev, &mut state)
}

/// Default toy architecture for a given input shape.
pub fn default_spec(dims: [usize; 5]) -> LayerSpec {
    LayerSpec::new(dims, 64, 64)
}

/// Coded input for sample `i` of a validation or prediction set.
pub fn eval_input(sample: &ToySample, eval_seed: u64, i: usize) -> Result<Tensor5> {
    coded_sample(sample, rng::derive(eval_seed, &[i as u64]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_combination_cases() {
        assert_eq!(combine_naive(&[0.4, 0.8], &[0.5, 0.5]).unwrap().value, 0.6000000000000001);
        assert_eq!(combine_naive(&[0.4, 0.8], &[1.0, 0.0]).unwrap().value, 0.4);
        assert_eq!(combine_naive(&[0.3, 0.3], &[0.25, 0.75]).unwrap().value, 0.3);
        assert!(combine_naive(&[0.3], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn mtu_values_and_stationarity() {
        let st = MtuState::new(2);
        let m = mtu_loss(&[4.0, 1.0], &st).unwrap();
        assert_eq!(m.value, 2.5);
        let st = MtuState { s: vec![4f64.ln(), 0.0] };
        let m = mtu_loss(&[4.0, 1.0], &st).unwrap();
        assert!(m.grad_s.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn gradnorm_fixed_points() {
        let mut st = GradNormState::new(2, 1.5, 0.01);
        for _ in 0..50 {
            gradnorm_update(&[1.0, 1.0], &[0.5, 0.5], &mut st).unwrap();
        }
        assert_eq!(st.w, vec![1.0, 1.0]);
        let mut st = GradNormState::new(2, 0.0, 1e-3);
        for _ in 0..3000 {
            gradnorm_update(&[2.0, 1.0], &[1.0, 1.0], &mut st).unwrap();
        }
        assert!((st.w[0] - 2.0 / 3.0).abs() < 1e-2 && (st.w[1] - 4.0 / 3.0).abs() < 1e-2, "{:?}", st.w);
        assert!((st.w.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert!(!gradnorm_update(&[0.0, 1.0], &[1.0, 1.0], &mut st).unwrap());
    }

    #[test]
    fn gradsim_cases() {
        let g = [1.0, -2.0, 0.5];
        let neg = [-1.0, 2.0, -0.5];
        let orth = [2.0, 1.0, 0.0];
        let w = gradsim_weights(&g, &[&g, &neg, &orth, &[0.0; 3]]).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert_eq!(&w[1..], &[0.0, 0.0, 0.0]);
        assert!(gradsim_weights(&g, &[&[1.0]]).is_err());
    }

    #[test]
    fn normgradsim_converges_to_targets() {
        let g = [0.3, -0.1, 0.7, 0.2];
        let big: Vec<f64> = g.iter().map(|x| 10.0 * x).collect();
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        let mut w = AuxWeights::new(3);
        for _ in 0..200 {
            normgradsim_update(&g, &[&g, &big, &neg], &mut w, DEFAULT_AUX_STEP).unwrap();
        }
        assert!((w.alpha[0] - 1.0).abs() < 1e-3 && (w.beta[0] - 1.0).abs() < 1e-3);
        assert!((w.beta[1] - 0.1).abs() < 1e-3);
        assert_eq!(w.alpha[2], 0.0);
    }

    #[test]
    fn normgradsim_loss_cases() {
        let w = AuxWeights::zero_alpha(2);
        assert_eq!(normgradsim_loss(0.7, &[3.0, 9.0], &w).unwrap(), 0.7);
        let w = AuxWeights { alpha: vec![1.0], beta: vec![1.0] };
        assert_eq!(normgradsim_loss(0.7, &[0.7], &w).unwrap(), 0.7);
        let aw = vec![AuxWeights::zero_alpha(1), AuxWeights::zero_alpha(1)];
        let c = combined_loss(&[0.2, 0.6], &[vec![5.0], vec![5.0]], &[0.5, 0.5], &aw).unwrap();
        assert!((c - 0.4).abs() < 1e-15);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert!("bogus".parse::<Strategy>().is_err());
    }
}
