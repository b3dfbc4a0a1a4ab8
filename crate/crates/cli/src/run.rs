use std::path::{Path, PathBuf};

use codedlf::autodiff::{read_net, write_net, LayerSpec, OptimizerKind, ToyNet};
use codedlf::calib::{self, DarkMode, ExposureSeries, FitOptions, ReadoutAxis};
use codedlf::coding::{self, CodingMask, MaskSeed};
use codedlf::cs_dct::{self, OwlqnOptions};
use codedlf::cs_dict::{self, DictTrainOptions, PatchGrid};
use codedlf::losses::{self, Image};
use codedlf::multitask::{self, Strategy, ToyDataset, TrainConfig};
use codedlf::scenegen::{self, DisparityProfile, Pattern, SceneSpec};
use codedlf::tensor::{read_lf5d, slice_central_view, write_lf5d};
use codedlf::{CentralView, DisparityMap, Tensor5};
use serde_json::{json, Value};

use crate::args::*;
use crate::output::{number, object, render_json, write_json, write_preview};
use crate::{CliError, CliResult};

pub fn dispatch(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(e.to_string()))?;
    }
    let nt = cli.no_timestamp;
    match cli.command {
        Command::GenScene(a) => gen_scene(a),
        Command::MaskGen(a) => mask_gen(a),
        Command::Encode(a) => encode(a),
        Command::Project(a) => project(a),
        Command::Lift(a) => lift(a),
        Command::ReconstructDct(a) => reconstruct_dct(a, nt),
        Command::TrainDict(a) => train_dict(a, nt),
        Command::ReconstructDict(a) => reconstruct_dict(a),
        Command::TrainToy(a) => train_toy(a, nt),
        Command::PredictToy(a) => predict_toy(a),
        Command::Evaluate(a) => evaluate(a, nt),
        Command::Calibrate(a) => calibrate(a, nt),
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn prefixed(prefix: &str, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{prefix}.{suffix}"))
}

fn read_mask(path: &Path) -> CliResult<CodingMask> {
    Ok(CodingMask::from_tensor(&read_lf5d(path)?)?)
}

/// Coded light field from either a full coded tensor or a `Λ = 1`
/// projection, lifted with `m`.
fn coded_projection(t: &Tensor5, m: &CodingMask) -> CliResult<Tensor5> {
    let [_, _, s, tt, l] = t.dims();
    if [s, tt] != m.dims()[..2] {
        return Err(invalid(format!("input spatial dims {:?} do not match the mask {:?}", [s, tt], m.dims())));
    }
    if l == 1 && m.dims()[2] != 1 {
        return Ok(t.clone());
    }
    if l != m.dims()[2] {
        return Err(invalid(format!("input has {l} channels, mask has {}", m.dims()[2])));
    }
    Ok(coding::project(t))
}

fn preview_of(l: &Tensor5, path: &Option<PathBuf>) -> CliResult<()> {
    match path {
        Some(p) => write_preview(&slice_central_view(l)?, p),
        None => Ok(()),
    }
}

fn gen_scene(a: GenScene) -> CliResult<()> {
    let [u, v, s, t, lambda] = a.dims;
    let spec = SceneSpec {
        u,
        v,
        s,
        t,
        lambda,
        pattern: a.pattern.parse::<Pattern>()?,
        disparity: a.disparity.parse::<DisparityProfile>()?,
        seed: a.seed,
    };
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(invalid("--noise must be finite and >= 0"));
    }
    let (cv, disp) = scenegen::make_scene(&spec)?;
    let mut lf = scenegen::render_lightfield(&cv, &disp, u, v)?;
    scenegen::add_gaussian_noise(&mut lf, a.noise, a.seed);
    write_lf5d(&cv.to_tensor(), prefixed(&a.out_prefix, "cv.lf5d"))?;
    write_lf5d(&disp.to_tensor(), prefixed(&a.out_prefix, "disp.lf5d"))?;
    write_lf5d(&lf, prefixed(&a.out_prefix, "lf.lf5d"))?;
    if let Some(p) = &a.png_preview {
        write_preview(&cv, p)?;
    }
    Ok(())
}

fn mask_gen(a: MaskGen) -> CliResult<()> {
    let [s, t, l] = a.dims;
    let m = coding::random_mask(s, t, l, MaskSeed(a.seed))?;
    Ok(write_lf5d(&m.to_tensor(), &a.out)?)
}

fn encode(a: Encode) -> CliResult<()> {
    let lf = read_lf5d(&a.input)?;
    let [_, _, s, t, l] = lf.dims();
    let m = match &a.mask {
        Some(p) => read_mask(p)?,
        None => coding::random_mask(s, t, l, MaskSeed(a.seed))?,
    };
    let coded = coding::encode(&lf, &m)?;
    write_lf5d(&coded, &a.out_coded)?;
    if let Some(p) = &a.out_mask {
        write_lf5d(&m.to_tensor(), p)?;
    }
    Ok(())
}

fn project(a: Project) -> CliResult<()> {
    let t = read_lf5d(&a.input)?;
    Ok(write_lf5d(&coding::project(&t), &a.out)?)
}

fn lift(a: Lift) -> CliResult<()> {
    let t = read_lf5d(&a.input)?;
    let m = read_mask(&a.mask)?;
    Ok(write_lf5d(&coding::lift(&t, &m)?, &a.out)?)
}

fn reconstruct_dct(a: ReconstructDct, nt: bool) -> CliResult<()> {
    let m = read_mask(&a.mask)?;
    let lp = coded_projection(&read_lf5d(&a.input)?, &m)?;
    let opts = OwlqnOptions {
        lambda: a.lambda,
        max_iters: a.max_iters,
        memory: a.memory,
        grad_tol: a.grad_tol,
        ..OwlqnOptions::default()
    };
    opts.validate()?;
    let (rec, report) = cs_dct::owlqn_reconstruct(&lp, &m, &opts)?;
    write_lf5d(&rec, &a.out)?;
    preview_of(&rec, &a.png_preview)?;
    if let Some(p) = &a.report {
        let mut v = serde_json::to_value(&report).map_err(|e| invalid(e.to_string()))?;
        v["lambda"] = json!(a.lambda);
        write_json(p, v, nt)?;
    }
    Ok(())
}

fn grid_for(preset: GridPreset, source: [usize; 5]) -> CliResult<PatchGrid> {
    Ok(match preset {
        GridPreset::Desk => PatchGrid::desk_default(source)?,
        GridPreset::Large => PatchGrid::large_preset(source)?,
    })
}

fn train_dict(a: TrainDict, nt: bool) -> CliResult<()> {
    let data: Vec<Tensor5> = a.inputs.iter().map(read_lf5d).collect::<Result<_, _>>()?;
    let source = data[0].dims();
    if let Some(bad) = data.iter().find(|t| t.dims() != source) {
        return Err(invalid(format!("training light fields differ in dims: {:?} vs {source:?}", bad.dims())));
    }
    let grid = grid_for(a.grid, source)?;
    let opts = DictTrainOptions {
        overcompleteness: a.overcompleteness,
        lambda: a.lambda,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        fista_iters: a.fista_iters,
        epochs: a.epochs,
        seed: a.seed,
    };
    let (d, log) = cs_dict::train_dictionary(&data, &grid, &opts)?;
    cs_dict::write_dictionary(&d, &a.out)?;
    if let Some(p) = &a.report {
        let v = object([
            ("atom_len", json!(d.atom_len())),
            ("n_atoms", json!(d.n_atoms())),
            ("patches_per_field", json!(grid.len())),
            ("options", serde_json::to_value(&opts).map_err(|e| invalid(e.to_string()))?),
            ("epoch_objective", json!(log.epoch_objective)),
            ("max_norm_deviation", json!(log.max_norm_deviation)),
        ]);
        write_json(p, v, nt)?;
    }
    Ok(())
}

fn reconstruct_dict(a: ReconstructDict) -> CliResult<()> {
    let m = read_mask(&a.mask)?;
    let lp = coded_projection(&read_lf5d(&a.input)?, &m)?;
    let d = cs_dict::read_dictionary(&a.dict)?;
    let [u, v, s, t, _] = lp.dims();
    let grid = grid_for(a.grid, [u, v, s, t, m.dims()[2]])?;
    let rec = cs_dict::dict_reconstruct(&lp, &m, &d, &grid, a.lambda, a.iters)?;
    write_lf5d(&rec, &a.out)?;
    preview_of(&rec, &a.png_preview)
}

fn train_toy(a: TrainToy, nt: bool) -> CliResult<()> {
    let strategy: Strategy = a.strategy.parse()?;
    if a.train_samples == 0 || a.train_samples >= a.samples {
        return Err(invalid("--train-samples must lie in 1..samples"));
    }
    let (train, val) = ToyDataset::generate(a.samples, a.dims, a.seed)?.split_at(a.train_samples);
    let net = ToyNet::init(LayerSpec::new(a.dims, a.hidden, a.hidden), a.seed)?;
    let mut cfg = TrainConfig::new(strategy);
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch_size;
    cfg.lr = a.lr;
    cfg.weight_decay = a.weight_decay;
    cfg.seed = a.seed;
    if let OptimizerArg::Sgd = a.optimizer {
        cfg.optimizer = OptimizerKind::Sgd { momentum: a.momentum };
    }
    let out = multitask::train(net, &train, &val, &cfg)?;
    let log = serde_json::to_value(&out.log).map_err(|e| invalid(e.to_string()))?;
    write_json(&a.log, log, true)?;
    if let Some(p) = &a.out_net {
        write_net(&out.net, p)?;
    }
    if let Some(p) = &a.report {
        let last = out.log.last().expect("epochs >= 1");
        let v = object([
            ("strategy", json!(strategy.name())),
            ("epochs", json!(a.epochs)),
            ("baseline_cv", json!(out.baseline[0])),
            ("baseline_disp", json!(out.baseline[1])),
            ("val_loss_cv", json!(last.val_loss_cv)),
            ("val_loss_disp", json!(last.val_loss_disp)),
        ]);
        write_json(p, v, nt)?;
    }
    Ok(())
}

fn predict_toy(a: PredictToy) -> CliResult<()> {
    let net = read_net(&a.net)?;
    let coded = read_lf5d(&a.input)?;
    let (cv, disp) = net.forward(&coded)?;
    write_lf5d(&cv.to_tensor(), prefixed(&a.out_prefix, "cv.lf5d"))?;
    write_lf5d(&disp.to_tensor(), prefixed(&a.out_prefix, "disp.lf5d"))?;
    if let Some(p) = &a.png_preview {
        write_preview(&cv, p)?;
    }
    Ok(())
}

fn evaluate(a: Evaluate, nt: bool) -> CliResult<()> {
    let pred = read_lf5d(&a.pred)?;
    let truth = read_lf5d(&a.truth)?;
    if pred.dims() != truth.dims() {
        return Err(invalid(format!("prediction {:?} and truth {:?} differ in dims", pred.dims(), truth.dims())));
    }
    let (p, t) = (pred.data(), truth.data());
    let max_abs = p.iter().zip(t).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max);
    let common = [("exact_equal", json!(p == t)), ("max_abs_diff", json!(max_abs))];
    let report = match a.kind {
        EvalKind::Cv => {
            let (pc, tc) = (CentralView::from_tensor(&pred)?, CentralView::from_tensor(&truth)?);
            let (pi, ti) = (Image::from(&pc), Image::from(&tc));
            let ssim = losses::ssim(ti, pi, losses::SSIM_WINDOW, losses::SSIM_K1, losses::SSIM_K2)?;
            object(
                [
                    ("kind", json!("cv")),
                    ("psnr_db", number(losses::psnr(p, t, a.peak)?)),
                    ("ssim", number(ssim)),
                    ("sa_deg", number(losses::spectral_angle(pi, ti)?)),
                    ("sid", number(losses::sid(pi, ti)?)),
                ]
                .into_iter()
                .chain(common),
            )
        }
        EvalKind::Disp => {
            DisparityMap::from_tensor(&pred)?;
            DisparityMap::from_tensor(&truth)?;
            object(
                [
                    ("kind", json!("disp")),
                    ("mae_px", number(losses::mae(p, t)?)),
                    ("mse_px2", number(losses::mse(p, t)?)),
                    ("badpix07_pct", number(losses::badpix(p, t, losses::BADPIX_TAU)?)),
                ]
                .into_iter()
                .chain(common),
            )
        }
        EvalKind::Lf => {
            let rel = if truth.norm() > 0.0 {
                number(l2_diff(p, t) / truth.norm())
            } else {
                Value::Null
            };
            object(
                [("kind", json!("lf")), ("psnr_db", number(losses::psnr(p, t, a.peak)?)), ("rel_l2", rel)]
                    .into_iter()
                    .chain(common),
            )
        }
    };
    match &a.report {
        Some(path) => write_json(path, report, nt),
        None => {
            print!("{}", render_json(report, nt)?);
            Ok(())
        }
    }
}

fn l2_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

/// One float per non-empty line.
fn read_times(path: &Path) -> CliResult<Vec<f64>> {
    std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.parse::<f64>().map_err(|e| invalid(format!("{}: {l:?}: {e}", path.display()))))
        .collect()
}

fn calibrate(a: Calibrate, nt: bool) -> CliResult<()> {
    let times = read_times(&a.times)?;
    let dark_times = match &a.dark_times {
        Some(p) => read_times(p)?,
        None => times.clone(),
    };
    let bayer = calib::bayer_from_tensor(&read_lf5d(&a.bayer)?)?;
    let series = ExposureSeries::new(read_lf5d(&a.bright)?, times, bayer)?;
    let mode = match a.dark_mode {
        DarkModeArg::PerPixel => DarkMode::PerPixel,
        DarkModeArg::Global => DarkMode::Global,
    };
    let dark = calib::fit_dark(&read_lf5d(&a.dark)?, &dark_times, mode)?;
    let axis = match a.readout_axis {
        AxisArg::Rows => ReadoutAxis::Rows,
        AxisArg::Columns => ReadoutAxis::Columns,
    };
    let mask = calib::saturation_mask(&series, a.saturation, a.line_reach, axis);
    let opts = FitOptions { max_sweeps: a.max_sweeps, rel_tol: a.rel_tol, tile: a.tile };
    let res = calib::fit_vignetting_responsivity(&series, &dark, &mask, &opts)?;

    let v_path = a.out.with_extension("v.lf5d");
    let [ni, nj] = res.dims;
    let v = Tensor5::from_vec([1, 1, ni, nj, 1], res.v.iter().map(|&x| x as f32).collect())
        .map_err(|_| CliError::Numerical("vignetting map is not finite".into()))?;
    write_lf5d(&v, &v_path)?;
    let report = object([
        ("v", json!(v_path.file_name().map(|f| f.to_string_lossy().into_owned()))),
        ("dims", json!(res.dims)),
        ("r", json!(res.r)),
        ("dark", json!(dark)),
        ("residual", number(res.residual)),
        ("sweeps", json!(res.sweeps)),
        ("objective_history", json!(res.objective_history)),
        ("masked_measurements", json!(mask.count())),
        ("unrecoverable", json!(res.unrecoverable)),
    ]);
    write_json(&a.out, report, nt)
}
