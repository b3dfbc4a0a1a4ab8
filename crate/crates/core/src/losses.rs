//! Training losses with analytic gradients and evaluation metrics.
//!
//! Images are `(S, T, C)` row-major with the channel fastest, matching
//! [`CentralView`]; disparity maps are single-channel images. Spatial
//! derivatives use forward differences, `∂x` along `t` (columns) and `∂y`
//! along `s` (rows). Scalars are accumulated and returned in `f64`; every
//! cosine or logarithm denominator is guarded with [`EPS`].

use crate::{CentralView, DisparityMap, Error, Result};

pub const EPS: f64 = 1e-8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 7;
pub const BADPIX_TAU: f64 = 0.07;

/// Borrowed `(S, T, C)` image.
#[derive(Debug, Clone, Copy)]
pub struct Image<'a> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: &'a [f32],
}

impl<'a> Image<'a> {
    pub fn new(height: usize, width: usize, channels: usize, data: &'a [f32]) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dims(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Image { height, width, channels, data })
    }

    #[inline]
    fn at(&self, s: usize, t: usize, c: usize) -> f64 {
        self.data[(s * self.width + t) * self.channels + c] as f64
    }

    fn same_shape(&self, other: &Image) -> Result<()> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels) {
            return Err(Error::dims(format!(
                "image shapes differ: {:?} vs {:?}",
                (self.height, self.width, self.channels),
                (other.height, other.width, other.channels)
            )));
        }
        Ok(())
    }
}

impl<'a> From<&'a CentralView> for Image<'a> {
    fn from(cv: &'a CentralView) -> Self {
        let [s, t, c] = cv.dims();
        Image { height: s, width: t, channels: c, data: cv.data() }
    }
}

impl<'a> From<&'a DisparityMap> for Image<'a> {
    fn from(d: &'a DisparityMap) -> Self {
        let [s, t] = d.dims();
        Image { height: s, width: t, channels: 1, data: d.data() }
    }
}

/// Loss value with its gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f32>,
}

fn check_len(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dims(format!("lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::arg("empty input"));
    }
    Ok(())
}

/// Mean of the element-wise Huber loss `e²` for `e < δ`, else `2δ(e − δ/2)`.
pub fn huber(pred: &[f32], truth: &[f32], delta: f64) -> Result<LossValue> {
    check_len(pred, truth)?;
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(truth)
        .map(|(&p, &y)| {
            let d = p as f64 - y as f64;
            let e = d.abs();
            if e < delta {
                value += e * e;
                (2.0 * d / n) as f32
            } else {
                value += 2.0 * delta * (e - 0.5 * delta);
                (2.0 * delta * d.signum() / n) as f32
            }
        })
        .collect();
    Ok(LossValue { value: value / n, grad })
}

pub fn mse(pred: &[f32], truth: &[f32]) -> Result<f64> {
    check_len(pred, truth)?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(&p, &y)| (p as f64 - y as f64).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn mae(pred: &[f32], truth: &[f32]) -> Result<f64> {
    check_len(pred, truth)?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(&p, &y)| (p as f64 - y as f64).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// `10·log10(peak² / MSE)`; `+∞` for identical inputs.
pub fn psnr(pred: &[f32], truth: &[f32], peak: f64) -> Result<f64> {
    let m = mse(pred, truth)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / m).log10()
    })
}

/// Percentage of pixels with `|D̂ − D| > τ`.
pub fn badpix(pred: &[f32], truth: &[f32], tau: f64) -> Result<f64> {
    check_len(pred, truth)?;
    let bad = pred
        .iter()
        .zip(truth)
        .filter(|(&p, &y)| (p as f64 - y as f64).abs() > tau)
        .count();
    Ok(100.0 * bad as f64 / pred.len() as f64)
}

struct WindowStats {
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

fn window_stats(a: &Image, b: &Image, s0: usize, t0: usize, w: [usize; 2], c: usize) -> WindowStats {
    let n = (w[0] * w[1]) as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for s in s0..s0 + w[0] {
        for t in t0..t0 + w[1] {
            sa += a.at(s, t, c);
            sb += b.at(s, t, c);
        }
    }
    let (mu_a, mu_b) = (sa / n, sb / n);
    let (mut va, mut vb, mut cv) = (0.0, 0.0, 0.0);
    for s in s0..s0 + w[0] {
        for t in t0..t0 + w[1] {
            let da = a.at(s, t, c) - mu_a;
            let db = b.at(s, t, c) - mu_b;
            va += da * da;
            vb += db * db;
            cv += da * db;
        }
    }
    WindowStats { mu_a, mu_b, var_a: va / n, var_b: vb / n, cov: cv / n }
}

fn ssim_impl(a: &Image, b: &Image, window: usize, k1: f64, k2: f64, mut grad_b: Option<&mut [f64]>) -> f64 {
    let c1 = (k1 * 1.0).powi(2);
    let c2 = (k2 * 1.0).powi(2);
    let w = [window.min(a.height), window.min(a.width)];
    let ns = a.height - w[0] + 1;
    let nt = a.width - w[1] + 1;
    let n_win = (ns * nt * a.channels) as f64;
    let npx = (w[0] * w[1]) as f64;
    let mut total = 0.0;
    for c in 0..a.channels {
        for s0 in 0..ns {
            for t0 in 0..nt {
                let st = window_stats(a, b, s0, t0, w, c);
                let a1 = 2.0 * st.mu_a * st.mu_b + c1;
                let a2 = 2.0 * st.cov + c2;
                let b1 = st.mu_a * st.mu_a + st.mu_b * st.mu_b + c1;
                let b2 = st.var_a + st.var_b + c2;
                total += a1 * a2 / (b1 * b2);
                if let Some(g) = grad_b.as_deref_mut() {
                    let den = b1 * b2;
                    for s in s0..s0 + w[0] {
                        for t in t0..t0 + w[1] {
                            let da1 = 2.0 * st.mu_a / npx;
                            let da2 = 2.0 * (a.at(s, t, c) - st.mu_a) / npx;
                            let db1 = 2.0 * st.mu_b / npx;
                            let db2 = 2.0 * (b.at(s, t, c) - st.mu_b) / npx;
                            let d = (da1 * a2 + a1 * da2) / den - a1 * a2 * (db1 * b2 + b1 * db2) / (den * den);
                            g[(s * a.width + t) * a.channels + c] += d / n_win;
                        }
                    }
                }
            }
        }
    }
    total / n_win
}

/// Channel-wise SSIM over all valid `window × window` positions (the window
/// shrinks to the image size for small images), averaged. Data range is 1.
pub fn ssim(a: Image, b: Image, window: usize, k1: f64, k2: f64) -> Result<f64> {
    a.same_shape(&b)?;
    if window == 0 || a.data.is_empty() {
        return Err(Error::arg("SSIM needs a nonempty image and window"));
    }
    Ok(ssim_impl(&a, &b, window, k1, k2, None))
}

/// `(1 − SSIM(truth, pred)) / 2` with default constants.
pub fn ssim_loss(pred: Image, truth: Image) -> Result<LossValue> {
    pred.same_shape(&truth)?;
    if pred.data.is_empty() {
        return Err(Error::arg("empty image"));
    }
    let mut g = vec![0.0f64; pred.data.len()];
    let s = ssim_impl(&truth, &pred, SSIM_WINDOW, SSIM_K1, SSIM_K2, Some(&mut g));
    Ok(LossValue {
        value: 0.5 * (1.0 - s),
        grad: g.iter().map(|&x| (-0.5 * x) as f32).collect(),
    })
}

/// Cosine between two spectra with a guarded denominator, plus `∂cos/∂p`.
fn cosine_with_grad(p: &[f64], y: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let dot: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    let den = np * ny;
    if den <= EPS {
        if let Some(g) = grad {
            for (gi, yi) in g.iter_mut().zip(y) {
                *gi = yi / EPS;
            }
        }
        return dot / EPS;
    }
    let cos = dot / den;
    if let Some(g) = grad {
        for ((gi, pi), yi) in g.iter_mut().zip(p).zip(y) {
            *gi = yi / den - cos * pi / (np * np);
        }
    }
    cos
}

fn spectra<'a>(img: &'a Image) -> impl Iterator<Item = Vec<f64>> + 'a {
    img.data
        .chunks_exact(img.channels)
        .map(|px| px.iter().map(|&x| x as f64).collect())
}

/// `½(1 − cos)` of the spectra at every pixel, spatially averaged.
pub fn spectral_cos_loss(pred: Image, truth: Image) -> Result<LossValue> {
    pred.same_shape(&truth)?;
    let npx = (pred.height * pred.width) as f64;
    if npx == 0.0 {
        return Err(Error::arg("empty image"));
    }
    let mut grad = Vec::with_capacity(pred.data.len());
    let mut value = 0.0;
    let mut g = vec![0.0; pred.channels];
    for (p, y) in spectra(&pred).zip(spectra(&truth)) {
        let cos = cosine_with_grad(&p, &y, Some(&mut g));
        value += 0.5 * (1.0 - cos);
        grad.extend(g.iter().map(|&gi| (-0.5 * gi / npx) as f32));
    }
    Ok(LossValue { value: value / npx, grad })
}

/// Angle between two spectra as `2·atan2(‖p̂ − ŷ‖, ‖p̂ + ŷ‖)`, which stays
/// exact near 0 and π where `acos` of the cosine loses half the digits.
/// Degenerate spectra fall back to the guarded cosine.
fn angle(p: &[f64], y: &[f64]) -> f64 {
    let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    if np * ny <= EPS {
        return cosine_with_grad(p, y, None).clamp(-1.0, 1.0).acos();
    }
    let (mut d, mut s) = (0.0, 0.0);
    for (a, b) in p.iter().zip(y) {
        let (ua, ub) = (a / np, b / ny);
        d += (ua - ub) * (ua - ub);
        s += (ua + ub) * (ua + ub);
    }
    2.0 * d.sqrt().atan2(s.sqrt())
}

/// Mean spectral angle in degrees.
pub fn spectral_angle(pred: Image, truth: Image) -> Result<f64> {
    pred.same_shape(&truth)?;
    let npx = (pred.height * pred.width) as f64;
    if npx == 0.0 {
        return Err(Error::arg("empty image"));
    }
    let total: f64 = spectra(&pred)
        .zip(spectra(&truth))
        .map(|(p, y)| angle(&p, &y).to_degrees())
        .sum();
    Ok(total / npx)
}

/// Spectral information divergence: symmetric KL divergence of the
/// ℓ1-normalised spectra (values clamped to `EPS`), averaged over pixels.
pub fn sid(pred: Image, truth: Image) -> Result<f64> {
    pred.same_shape(&truth)?;
    let npx = (pred.height * pred.width) as f64;
    if npx == 0.0 {
        return Err(Error::arg("empty image"));
    }
    let normalise = |x: Vec<f64>| {
        let x: Vec<f64> = x.into_iter().map(|v| v.max(EPS)).collect();
        let s: f64 = x.iter().sum();
        x.into_iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let total: f64 = spectra(&pred)
        .zip(spectra(&truth))
        .map(|(p, y)| {
            let (p, q) = (normalise(p), normalise(y));
            p.iter().zip(&q).map(|(a, b)| a * (a / b).ln() + b * (b / a).ln()).sum::<f64>()
        })
        .sum();
    Ok(total / npx)
}

fn check_disp(pred: &Image, truth: &Image) -> Result<()> {
    pred.same_shape(truth)?;
    if pred.channels != 1 {
        return Err(Error::dims("disparity maps must have a single channel"));
    }
    Ok(())
}

/// Edge-aware total variation
/// `|∂x D̂|·exp(−|∂x D|) + |∂y D̂|·exp(−|∂y D|)`, summed over all forward
/// difference sites in both directions and divided by the number of sites.
pub fn tv_smoothness(pred: Image, truth: Image) -> Result<LossValue> {
    check_disp(&pred, &truth)?;
    let (h, w) = (pred.height, pred.width);
    let sites = (h * w.saturating_sub(1) + h.saturating_sub(1) * w) as f64;
    let mut grad = vec![0.0f64; h * w];
    if sites == 0.0 {
        return Ok(LossValue { value: 0.0, grad: vec![0.0; h * w] });
    }
    let mut value = 0.0;
    let mut term = |i0: usize, i1: usize| {
        let dp = pred.data[i1] as f64 - pred.data[i0] as f64;
        let dt = truth.data[i1] as f64 - truth.data[i0] as f64;
        let wgt = (-dt.abs()).exp();
        value += dp.abs() * wgt;
        let g = dp.signum() * wgt * if dp == 0.0 { 0.0 } else { 1.0 };
        grad[i1] += g;
        grad[i0] -= g;
    };
    for s in 0..h {
        for t in 0..w {
            let i = s * w + t;
            if t + 1 < w {
                term(i, i + 1);
            }
            if s + 1 < h {
                term(i, i + w);
            }
        }
    }
    Ok(LossValue {
        value: value / sites,
        grad: grad.iter().map(|&g| (g / sites) as f32).collect(),
    })
}

/// `½(1 − cos(n, n̂))` with `n = (−∂x D, −∂y D, 1)`, averaged over the
/// `(S−1)·(T−1)` pixels where both forward differences exist.
pub fn normal_similarity(pred: Image, truth: Image) -> Result<LossValue> {
    check_disp(&pred, &truth)?;
    let (h, w) = (pred.height, pred.width);
    let mut grad = vec![0.0f64; h * w];
    if h < 2 || w < 2 {
        return Ok(LossValue { value: 0.0, grad: vec![0.0; h * w] });
    }
    let npx = ((h - 1) * (w - 1)) as f64;
    let mut value = 0.0;
    let mut g = [0.0f64; 3];
    for s in 0..h - 1 {
        for t in 0..w - 1 {
            let i = s * w + t;
            let p = |k: usize| pred.data[k] as f64;
            let y = |k: usize| truth.data[k] as f64;
            let n_hat = [-(p(i + 1) - p(i)), -(p(i + w) - p(i)), 1.0];
            let n = [-(y(i + 1) - y(i)), -(y(i + w) - y(i)), 1.0];
            let cos = cosine_with_grad(&n_hat, &n, Some(&mut g));
            value += 0.5 * (1.0 - cos);
            // n̂_x = p(i) − p(i+1), n̂_y = p(i) − p(i+w).
            let gx = -0.5 * g[0] / npx;
            let gy = -0.5 * g[1] / npx;
            grad[i] += gx + gy;
            grad[i + 1] -= gx;
            grad[i + w] -= gy;
        }
    }
    Ok(LossValue {
        value: value / npx,
        grad: grad.iter().map(|&x| x as f32).collect(),
    })
}
