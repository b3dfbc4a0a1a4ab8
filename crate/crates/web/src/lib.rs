//! WebAssembly bindings for the static demo page in `www/`.
//!
//! A [`Demo`] holds one synthetic scene, its coding mask and the coded
//! measurement; images are returned as RGBA bytes for a canvas.

use codedlf::coding::{encode, project, random_mask, CodingMask, MaskSeed};
use codedlf::cs_dct::{owlqn_reconstruct, OwlqnOptions};
use codedlf::losses;
use codedlf::multitask::{normgradsim_update, AuxWeights, DEFAULT_AUX_STEP};
use codedlf::scenegen::{make_scene, render_lightfield, DisparityProfile, Pattern, SceneSpec};
use codedlf::{CentralView, Tensor5};
use wasm_bindgen::prelude::*;

const ANGULAR: usize = 5;
const SPATIAL: usize = 16;

fn js_err(e: codedlf::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Channels `(Λ−1, Λ/2, 0)` as RGB, scaled so the largest value is white.
fn rgba(cv: &CentralView) -> Vec<u8> {
    let [s, t, l] = cv.dims();
    let chans = [l - 1, l / 2, 0];
    let max = cv.data().iter().copied().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut out = Vec::with_capacity(s * t * 4);
    for p in 0..s * t {
        for &c in &chans {
            out.push((cv.get(p / t, p % t, c) * scale).round().clamp(0.0, 255.0) as u8);
        }
        out.push(255);
    }
    out
}

/// Hue of channel `c` out of `n` on the red-to-blue arc.
fn channel_colour(c: usize, n: usize) -> [u8; 3] {
    let f = if n > 1 { c as f32 / (n - 1) as f32 } else { 0.0 };
    let r = (255.0 * (1.0 - f)).round() as u8;
    let g = (255.0 * (1.0 - (2.0 * f - 1.0).abs())).round() as u8;
    let b = (255.0 * f).round() as u8;
    [r, g, b]
}

#[wasm_bindgen]
pub struct Demo {
    lf: Tensor5,
    mask: CodingMask,
    measured: Tensor5,
    recon: Option<Tensor5>,
}

#[wasm_bindgen]
impl Demo {
    /// `pattern` is one of `checker`, `gradient-ramp`, `spectral-stripes`,
    /// `random-smooth`; `disparity` is constant across the scene.
    #[wasm_bindgen(constructor)]
    pub fn new(pattern: &str, disparity: f32, channels: usize, seed: u64) -> Result<Demo, JsError> {
        let pattern: Pattern = pattern.parse().map_err(js_err)?;
        let spec = SceneSpec {
            u: ANGULAR,
            v: ANGULAR,
            s: SPATIAL,
            t: SPATIAL,
            lambda: channels,
            pattern,
            disparity: DisparityProfile::Constant(disparity),
            seed,
        };
        let (cv, d) = make_scene(&spec).map_err(js_err)?;
        let lf = render_lightfield(&cv, &d, ANGULAR, ANGULAR).map_err(js_err)?;
        let mask = random_mask(SPATIAL, SPATIAL, channels, MaskSeed(seed)).map_err(js_err)?;
        let measured = project(&encode(&lf, &mask).map_err(js_err)?);
        Ok(Demo { lf, mask, measured, recon: None })
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        SPATIAL
    }

    #[wasm_bindgen(getter)]
    pub fn views(&self) -> usize {
        ANGULAR
    }

    pub fn central_rgba(&self) -> Vec<u8> {
        rgba(&self.lf.view(ANGULAR / 2, ANGULAR / 2))
    }

    /// Open channel of every mask pixel, colour-coded.
    pub fn mask_rgba(&self) -> Vec<u8> {
        let [s, t, l] = self.mask.dims();
        (0..s * t)
            .flat_map(|p| {
                let [r, g, b] = self.mask.channel(p / t, p % t).map_or([0; 3], |c| channel_colour(c, l));
                [r, g, b, 255]
            })
            .collect()
    }

    /// Grey epipolar image at the middle spatial row: `views` rows (angular
    /// `v`) by `size` columns (spatial `t`), channel mean. Line slopes encode
    /// disparity.
    pub fn epi_rgba(&self) -> Vec<u8> {
        let [u, v, s, t, l] = self.lf.dims();
        let mut out = Vec::with_capacity(v * t * 4);
        for vi in 0..v {
            for ti in 0..t {
                let m = (0..l).map(|c| self.lf.get([u / 2, vi, s / 2, ti, c])).sum::<f32>() / l as f32;
                let g = (255.0 * m).round().clamp(0.0, 255.0) as u8;
                out.extend_from_slice(&[g, g, g, 255]);
            }
        }
        out
    }

    /// OWL-QN reconstruction of the coded measurement; returns the PSNR in
    /// dB of the full light field.
    pub fn reconstruct(&mut self, lambda: f64, max_iters: usize) -> Result<f64, JsError> {
        let opts = OwlqnOptions { lambda, max_iters, ..Default::default() };
        let (rec, _) = owlqn_reconstruct(&self.measured, &self.mask, &opts).map_err(js_err)?;
        let psnr = losses::psnr(rec.data(), self.lf.data(), 1.0).map_err(js_err)?;
        self.recon = Some(rec);
        Ok(psnr)
    }

    /// Central view of the last reconstruction, or of the lifted
    /// measurement before any reconstruction.
    pub fn recon_rgba(&self) -> Result<Vec<u8>, JsError> {
        match &self.recon {
            Some(r) => Ok(rgba(&r.view(ANGULAR / 2, ANGULAR / 2))),
            None => {
                let lifted = codedlf::coding::lift(&self.measured, &self.mask).map_err(js_err)?;
                Ok(rgba(&lifted.view(ANGULAR / 2, ANGULAR / 2)))
            }
        }
    }
}

/// NormGradSim weight trajectory for one auxiliary loss whose gradient has
/// cosine `cos` with the main gradient and `norm_ratio = ‖g_aux‖/‖g_main‖`.
/// Returns `[α_0, β_0, α_1, β_1, …]` for `steps + 1` states.
#[wasm_bindgen]
pub fn normgradsim_trace(cos: f64, norm_ratio: f64, alpha0: f64, beta0: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    if !(-1.0..=1.0).contains(&cos) || !(norm_ratio > 0.0) {
        return Err(JsError::new("need cos in [-1, 1] and a positive norm ratio"));
    }
    let g_main = [1.0, 0.0];
    let sin = (1.0 - cos * cos).sqrt();
    let g_aux = [norm_ratio * cos, norm_ratio * sin];
    let mut w = AuxWeights { alpha: vec![alpha0], beta: vec![beta0] };
    let mut out = vec![alpha0, beta0];
    for _ in 0..steps {
        normgradsim_update(&g_main, &[&g_aux], &mut w, DEFAULT_AUX_STEP).map_err(js_err)?;
        out.extend([w.alpha[0], w.beta[0]]);
    }
    Ok(out)
}
