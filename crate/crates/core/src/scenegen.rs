//! Procedural Lambertian scenes.
//!
//! A scene is a central view and a disparity map; the light field is rendered
//! by backward warping
//! `L[u,v,s,t,λ] = I_c(s + (u−u_c)·D[s,t], t + (v−v_c)·D[s,t], λ)`
//! with bilinear interpolation and clamp-to-edge sampling. Occlusion is not
//! modelled.

use serde::{Deserialize, Serialize};

use crate::rng::{self, streams};
use crate::{CentralView, DisparityMap, Error, Result, Tensor5};

/// Largest admissible absolute disparity in pixels.
pub const MAX_DISPARITY: f32 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    Checker,
    GradientRamp,
    SpectralStripes,
    RandomSmooth,
}

impl std::str::FromStr for Pattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checker" => Ok(Pattern::Checker),
            "gradient-ramp" => Ok(Pattern::GradientRamp),
            "spectral-stripes" => Ok(Pattern::SpectralStripes),
            "random-smooth" => Ok(Pattern::RandomSmooth),
            _ => Err(Error::arg(format!("unknown pattern {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisparityProfile {
    Constant(f32),
    /// `d1` for `s < S/2`, `d2` below.
    Step(f32, f32),
    /// Linear in `s` from `dmin` at the first row to `dmax` at the last.
    LinearRamp(f32, f32),
}

impl DisparityProfile {
    fn bounds(&self) -> [f32; 2] {
        match *self {
            DisparityProfile::Constant(d) => [d, d],
            DisparityProfile::Step(a, b) | DisparityProfile::LinearRamp(a, b) => [a, b],
        }
    }
}

/// `constant:D`, `step:D1,D2` or `linear-ramp:DMIN,DMAX`.
impl std::str::FromStr for DisparityProfile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (kind, args) = s
            .split_once(':')
            .ok_or_else(|| Error::arg(format!("disparity profile {s:?} lacks ':'")))?;
        let vals: Vec<f32> = args
            .split(',')
            .map(|a| a.trim().parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::arg(format!("disparity profile {s:?}: {e}")))?;
        match (kind, vals.as_slice()) {
            ("constant", [d]) => Ok(DisparityProfile::Constant(*d)),
            ("step", [a, b]) => Ok(DisparityProfile::Step(*a, *b)),
            ("linear-ramp", [a, b]) => Ok(DisparityProfile::LinearRamp(*a, *b)),
            _ => Err(Error::arg(format!("malformed disparity profile {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub u: usize,
    pub v: usize,
    pub s: usize,
    pub t: usize,
    pub lambda: usize,
    pub pattern: Pattern,
    pub disparity: DisparityProfile,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.u.is_multiple_of(2) || self.v.is_multiple_of(2) {
            return Err(Error::arg(format!(
                "angular dims ({}, {}) must be odd",
                self.u, self.v
            )));
        }
        if self.s == 0 || self.t == 0 || self.lambda == 0 {
            return Err(Error::arg("spatial and spectral dims must be positive"));
        }
        for d in self.disparity.bounds() {
            if !d.is_finite() || d.abs() > MAX_DISPARITY {
                return Err(Error::arg(format!(
                    "disparity {d} outside [-{MAX_DISPARITY}, {MAX_DISPARITY}]"
                )));
            }
        }
        Ok(())
    }
}

/// Central view (values in `[0, 1]`) and disparity map for a spec.
pub fn make_scene(spec: &SceneSpec) -> Result<(CentralView, DisparityMap)> {
    spec.validate()?;
    let (s, t, k) = (spec.s, spec.t, spec.lambda);
    let mut rng = rng::stream(spec.seed, streams::SCENE);
    let mut cv = vec![0.0f32; s * t * k];
    let at = |si: usize, ti: usize, ki: usize| (si * t + ti) * k + ki;
    let frac = |i: usize, n: usize| if n > 1 { i as f32 / (n - 1) as f32 } else { 0.5 };

    match spec.pattern {
        Pattern::Checker => {
            let cell = 4;
            let bright: Vec<f32> = (0..k).map(|c| 0.55 + 0.35 * frac(c, k)).collect();
            let dark: Vec<f32> = (0..k).map(|c| 0.1 + 0.15 * (1.0 - frac(c, k))).collect();
            for si in 0..s {
                for ti in 0..t {
                    let spec = if (si / cell + ti / cell) % 2 == 0 { &bright } else { &dark };
                    for c in 0..k {
                        cv[at(si, ti, c)] = spec[c];
                    }
                }
            }
        }
        Pattern::GradientRamp => {
            // Affine in (s, t) per channel, so bilinear resampling is exact.
            for si in 0..s {
                for ti in 0..t {
                    for c in 0..k {
                        let w = 0.5 + 0.5 * frac(c, k);
                        cv[at(si, ti, c)] = w * (0.1 + 0.4 * frac(si, s) + 0.4 * frac(ti, t));
                    }
                }
            }
        }
        Pattern::SpectralStripes => {
            let sigma = (k as f32 / 4.0).max(0.5);
            for ti in 0..t {
                let center = (ti as f32 + 0.5) / t as f32 * k as f32 - 0.5;
                for c in 0..k {
                    let d = c as f32 - center;
                    let val = 0.05 + 0.9 * (-(d * d) / (2.0 * sigma * sigma)).exp();
                    for si in 0..s {
                        cv[at(si, ti, c)] = val;
                    }
                }
            }
        }
        Pattern::RandomSmooth => {
            // Sum of a few random low-frequency cosines per channel.
            const MODES: usize = 4;
            for c in 0..k {
                let mut modes = Vec::with_capacity(MODES);
                for _ in 0..MODES {
                    let fs = rng::unit(&mut rng) * 1.5;
                    let ft = rng::unit(&mut rng) * 1.5;
                    let phase = rng::unit(&mut rng) * std::f64::consts::TAU;
                    let amp = 0.5 + 0.5 * rng::unit(&mut rng);
                    modes.push((fs, ft, phase, amp));
                }
                let total: f64 = modes.iter().map(|m| m.3).sum();
                for si in 0..s {
                    for ti in 0..t {
                        let x = si as f64 / s as f64;
                        let y = ti as f64 / t as f64;
                        let sum: f64 = modes
                            .iter()
                            .map(|&(fs, ft, ph, a)| {
                                a * (std::f64::consts::TAU * (fs * x + ft * y) + ph).cos()
                            })
                            .sum();
                        cv[at(si, ti, c)] = (0.5 + 0.45 * sum / total) as f32;
                    }
                }
            }
        }
    }

    let disp: Vec<f32> = (0..s)
        .flat_map(|si| {
            let d = match spec.disparity {
                DisparityProfile::Constant(d) => d,
                DisparityProfile::Step(a, b) => {
                    if si < s / 2 {
                        a
                    } else {
                        b
                    }
                }
                DisparityProfile::LinearRamp(a, b) => a + (b - a) * frac(si, s),
            };
            std::iter::repeat_n(d, t)
        })
        .collect();

    Ok((
        CentralView::from_vec([s, t, k], cv)?,
        DisparityMap::from_vec([s, t], disp)?,
    ))
}

/// Bilinear sample with clamp-to-edge; `(x, y)` are continuous `(s, t)`.
fn sample(cv: &CentralView, x: f32, y: f32, c: usize) -> f32 {
    let [s, t, _] = cv.dims();
    let x = x.clamp(0.0, (s - 1) as f32);
    let y = y.clamp(0.0, (t - 1) as f32);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(s - 1);
    let y1 = (y0 + 1).min(t - 1);
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    let a = cv.get(x0, y0, c);
    let b = cv.get(x0, y1, c);
    let cc = cv.get(x1, y0, c);
    let d = cv.get(x1, y1, c);
    // Exact copies for integer sample points keep the zero-offset view bit-identical.
    if fx == 0.0 && fy == 0.0 {
        return a;
    }
    (1.0 - fx) * ((1.0 - fy) * a + fy * b) + fx * ((1.0 - fy) * cc + fy * d)
}

/// Render the full light field of a Lambertian, non-occluding scene.
pub fn render_lightfield(cv: &CentralView, d: &DisparityMap, u: usize, v: usize) -> Result<Tensor5> {
    if u.is_multiple_of(2) || v.is_multiple_of(2) {
        return Err(Error::arg(format!("angular dims ({u}, {v}) must be odd")));
    }
    let [s, t, k] = cv.dims();
    if d.dims() != [s, t] {
        return Err(Error::dims(format!(
            "disparity dims {:?} do not match central view {:?}",
            d.dims(),
            [s, t]
        )));
    }
    let (uc, vc) = ((u / 2) as f32, (v / 2) as f32);
    Ok(Tensor5::from_fn([u, v, s, t, k], |[ui, vi, si, ti, c]| {
        let disp = d.get(si, ti);
        let x = si as f32 + (ui as f32 - uc) * disp;
        let y = ti as f32 + (vi as f32 - vc) * disp;
        sample(cv, x, y, c)
    }))
}

/// Add i.i.d. Gaussian noise of standard deviation `sigma`.
pub fn add_gaussian_noise(l: &mut Tensor5, sigma: f32, seed: u64) {
    if sigma <= 0.0 {
        return;
    }
    let mut rng = rng::stream(seed, streams::NOISE);
    for x in l.data_mut() {
        *x += sigma * rng::normal(&mut rng) as f32;
    }
}
