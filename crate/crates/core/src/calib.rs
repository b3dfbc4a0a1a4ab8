//! Radiometric calibration: dark-signal regression, saturation and blooming
//! masks, and the factorised vignetting × responsivity fit.
//!
//! Exposure series are stored as 5D tensors `(1, L, I, J, K)`: exposure
//! index `l`, pixel `(i, j)`, spectral filter `k`. Dark series use `K = 1`.
//! The camera model is `μ̃[i,j,k,l] = v[i,j] · r[k][n(i,j)] · t[l]` on the
//! dark-corrected signal `μ̃ = μ − μ_d0 − μ_I·t`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tensor5};

pub const SATURATION_THRESHOLD: f64 = 0.985;
pub const LINE_REACH: usize = 5;
/// Number of Bayer filter types.
pub const BAYER_TYPES: usize = 3;
/// Guard below which `v·r·t` marks a pixel invalid.
pub const APPLY_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ExposureSeries {
    /// `(1, L, I, J, K)` grey means.
    pub means: Tensor5,
    /// Exposure times in seconds, strictly increasing.
    pub times: Vec<f64>,
    /// Bayer type `n(i,j) ∈ 0..3`, row-major.
    pub bayer: Vec<u8>,
}

impl ExposureSeries {
    pub fn new(means: Tensor5, times: Vec<f64>, bayer: Vec<u8>) -> Result<Self> {
        let [one, l, i, j, _] = means.dims();
        if one != 1 {
            return Err(Error::dims("exposure series must have leading dim 1"));
        }
        if times.len() != l {
            return Err(Error::dims(format!("{} exposure times for {l} exposures", times.len())));
        }
        if times.iter().any(|&t| !(t > 0.0)) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::arg("exposure times must be positive and strictly increasing"));
        }
        if bayer.len() != i * j {
            return Err(Error::dims(format!("bayer map has {} entries for {i}x{j} pixels", bayer.len())));
        }
        if bayer.iter().any(|&n| n as usize >= BAYER_TYPES) {
            return Err(Error::arg("bayer indices must be 0, 1 or 2"));
        }
        Ok(ExposureSeries { means, times, bayer })
    }

    /// `(L, I, J, K)`.
    pub fn shape(&self) -> [usize; 4] {
        let [_, l, i, j, k] = self.means.dims();
        [l, i, j, k]
    }

    #[inline]
    fn at(&self, l: usize, i: usize, j: usize, k: usize) -> f64 {
        self.means.get([0, l, i, j, k]) as f64
    }
}

/// Bayer map from a `(1, 1, I, J, 1)` tensor of values `0..3`.
pub fn bayer_from_tensor(t: &Tensor5) -> Result<Vec<u8>> {
    let [u, v, _, _, k] = t.dims();
    if (u, v, k) != (1, 1, 1) {
        return Err(Error::dims("bayer map must have dims (1, 1, I, J, 1)"));
    }
    t.data()
        .iter()
        .map(|&x| {
            if x == x.round() && (0.0..BAYER_TYPES as f32).contains(&x) {
                Ok(x as u8)
            } else {
                Err(Error::arg(format!("bayer value {x} not in {{0, 1, 2}}")))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DarkMode {
    PerPixel,
    Global,
}

/// `μ_d(t) = offset + current · t`, per pixel or as one global pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DarkModel {
    pub mode: DarkMode,
    pub offset: Vec<f64>,
    pub current: Vec<f64>,
}

impl DarkModel {
    pub fn zero() -> Self {
        DarkModel { mode: DarkMode::Global, offset: vec![0.0], current: vec![0.0] }
    }

    /// Dark signal of pixel `p = i·J + j` at exposure `t`.
    pub fn signal(&self, p: usize, t: f64) -> f64 {
        match self.mode {
            DarkMode::PerPixel => self.offset[p] + self.current[p] * t,
            DarkMode::Global => self.offset[0] + self.current[0] * t,
        }
    }
}

fn line_fit(ts: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = ts.len() as f64;
    let mt = ts.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = ts.iter().map(|t| (t - mt).powi(2)).sum();
    let sxy: f64 = ts.iter().zip(ys).map(|(t, y)| (t - mt) * (y - my)).sum();
    let slope = sxy / sxx;
    (my - slope * mt, slope)
}

/// Least-squares line through the dark means of a `(1, L_d, I, J, 1)` series.
/// Negative fitted offsets are clamped to zero.
pub fn fit_dark(dark: &Tensor5, times: &[f64], mode: DarkMode) -> Result<DarkModel> {
    let [one, l, i, j, k] = dark.dims();
    if one != 1 || k != 1 {
        return Err(Error::dims("dark series must have dims (1, L, I, J, 1)"));
    }
    if times.len() != l {
        return Err(Error::dims(format!("{} dark times for {l} exposures", times.len())));
    }
    if l < 2 {
        return Err(Error::arg("dark fit needs at least two exposures"));
    }
    let mt = times.iter().sum::<f64>() / l as f64;
    if times.iter().all(|&t| t == mt) {
        return Err(Error::Numerical("dark fit design is singular: all exposure times equal".into()));
    }
    let npx = i * j;
    let px = |p: usize| -> Vec<f64> { (0..l).map(|li| dark.data()[li * npx + p] as f64).collect() };
    match mode {
        DarkMode::PerPixel => {
            let (offset, current) = (0..npx).map(|p| line_fit(times, &px(p))).map(|(o, c)| (o.max(0.0), c)).unzip();
            Ok(DarkModel { mode, offset, current })
        }
        DarkMode::Global => {
            let ys: Vec<f64> = (0..l)
                .map(|li| dark.data()[li * npx..(li + 1) * npx].iter().map(|&x| x as f64).sum::<f64>() / npx as f64)
                .collect();
            let (o, c) = line_fit(times, &ys);
            Ok(DarkModel { mode, offset: vec![o.max(0.0)], current: vec![c] })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadoutAxis {
    Rows,
    Columns,
}

/// `true` marks an excluded measurement; layout matches the series.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturationMask {
    pub shape: [usize; 4],
    pub excluded: Vec<bool>,
}

impl SaturationMask {
    pub fn none(shape: [usize; 4]) -> Self {
        SaturationMask { shape, excluded: vec![false; shape.iter().product()] }
    }

    pub fn count(&self) -> usize {
        self.excluded.iter().filter(|&&x| x).count()
    }

    #[inline]
    pub fn index(&self, l: usize, i: usize, j: usize, k: usize) -> usize {
        let [_, ni, nj, nk] = self.shape;
        ((l * ni + i) * nj + j) * nk + k
    }

    pub fn get(&self, l: usize, i: usize, j: usize, k: usize) -> bool {
        self.excluded[self.index(l, i, j, k)]
    }
}

/// Mask every measurement above `threshold`, its 8-connected neighbours and
/// the pixels up to `line_reach` beyond the direct neighbours along the
/// readout line (same filter and exposure).
pub fn saturation_mask(series: &ExposureSeries, threshold: f64, line_reach: usize, axis: ReadoutAxis) -> SaturationMask {
    let shape = series.shape();
    let [nl, ni, nj, nk] = shape;
    let mut m = SaturationMask::none(shape);
    let reach = 1 + line_reach as isize;
    for l in 0..nl {
        for k in 0..nk {
            for i in 0..ni {
                for j in 0..nj {
                    if series.at(l, i, j, k) <= threshold {
                        continue;
                    }
                    let mut mark = |di: isize, dj: isize| {
                        let (a, b) = (i as isize + di, j as isize + dj);
                        if a >= 0 && b >= 0 && (a as usize) < ni && (b as usize) < nj {
                            let at = m.index(l, a as usize, b as usize, k);
                            m.excluded[at] = true;
                        }
                    };
                    for di in -1..=1 {
                        for dj in -1..=1 {
                            mark(di, dj);
                        }
                    }
                    for d in -reach..=reach {
                        match axis {
                            ReadoutAxis::Rows => mark(0, d),
                            ReadoutAxis::Columns => mark(d, 0),
                        }
                    }
                }
            }
        }
    }
    m
}

/// `w_l = (1/t_l) / Σ 1/t`.
pub fn exposure_weights(times: &[f64]) -> Vec<f64> {
    let s: f64 = times.iter().map(|t| 1.0 / t).sum();
    times.iter().map(|t| 1.0 / t / s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_sweeps: usize,
    pub rel_tol: f64,
    /// Square tiles fitted independently as `(size, overlap)`.
    pub tile: Option<(usize, usize)>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_sweeps: 200, rel_tol: 1e-8, tile: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Unrecoverable {
    Pixel { i: usize, j: usize },
    Filter { k: usize, n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibResult {
    /// `I × J` row-major; unrecoverable pixels hold 1.
    pub v: Vec<f64>,
    pub dims: [usize; 2],
    /// `r[k][n]`; unrecoverable entries hold 0.
    pub r: Vec<[f64; BAYER_TYPES]>,
    /// Weighted objective of the returned factors.
    pub residual: f64,
    /// Objective after the initial responsivity fit and after every half sweep.
    pub objective_history: Vec<f64>,
    pub sweeps: usize,
    pub unrecoverable: Vec<Unrecoverable>,
}

struct Problem<'a> {
    series: &'a ExposureSeries,
    mask: &'a SaturationMask,
    /// Dark-corrected signal in series layout.
    resid: Vec<f64>,
    w: Vec<f64>,
    pixels: Vec<(usize, usize)>,
}

impl<'a> Problem<'a> {
    fn new(series: &'a ExposureSeries, dark: &DarkModel, mask: &'a SaturationMask, pixels: Vec<(usize, usize)>) -> Self {
        let [nl, ni, nj, nk] = series.shape();
        let mut resid = vec![0.0; nl * ni * nj * nk];
        for l in 0..nl {
            for i in 0..ni {
                for j in 0..nj {
                    let d = dark.signal(i * nj + j, series.times[l]);
                    for k in 0..nk {
                        resid[mask.index(l, i, j, k)] = series.at(l, i, j, k) - d;
                    }
                }
            }
        }
        Problem { series, mask, resid, w: exposure_weights(&series.times), pixels }
    }

    fn objective(&self, v: &[f64], r: &[[f64; BAYER_TYPES]]) -> f64 {
        let [nl, _, nj, nk] = self.series.shape();
        let mut f = 0.0;
        for &(i, j) in &self.pixels {
            let n = self.series.bayer[i * nj + j] as usize;
            for l in 0..nl {
                for k in 0..nk {
                    let at = self.mask.index(l, i, j, k);
                    if self.mask.excluded[at] {
                        continue;
                    }
                    let e = self.resid[at] - v[i * nj + j] * r[k][n] * self.series.times[l];
                    f += self.w[l] * e * e;
                }
            }
        }
        f
    }

    /// Exact minimiser over `r` for fixed `v`; `None` where no measurement constrains it.
    fn update_r(&self, v: &[f64]) -> Vec<[Option<f64>; BAYER_TYPES]> {
        let [nl, _, nj, nk] = self.series.shape();
        let mut num = vec![[0.0; BAYER_TYPES]; nk];
        let mut den = vec![[0.0; BAYER_TYPES]; nk];
        for &(i, j) in &self.pixels {
            let n = self.series.bayer[i * nj + j] as usize;
            let vij = v[i * nj + j];
            for l in 0..nl {
                let t = self.series.times[l];
                for k in 0..nk {
                    let at = self.mask.index(l, i, j, k);
                    if !self.mask.excluded[at] {
                        num[k][n] += self.w[l] * self.resid[at] * vij * t;
                        den[k][n] += self.w[l] * vij * vij * t * t;
                    }
                }
            }
        }
        (0..nk)
            .map(|k| std::array::from_fn(|n| (den[k][n] > 0.0).then(|| num[k][n] / den[k][n])))
            .collect()
    }

    /// Exact minimiser over `v` for fixed `r`.
    fn update_v(&self, v: &mut [f64], r: &[[f64; BAYER_TYPES]]) {
        let [nl, _, nj, nk] = self.series.shape();
        for &(i, j) in &self.pixels {
            let n = self.series.bayer[i * nj + j] as usize;
            let (mut num, mut den) = (0.0, 0.0);
            for l in 0..nl {
                let t = self.series.times[l];
                for k in 0..nk {
                    let at = self.mask.index(l, i, j, k);
                    if !self.mask.excluded[at] {
                        num += self.w[l] * self.resid[at] * r[k][n] * t;
                        den += self.w[l] * (r[k][n] * t).powi(2);
                    }
                }
            }
            if den > 0.0 {
                v[i * nj + j] = num / den;
            }
        }
    }
}

fn unwrap_r(r: Vec<[Option<f64>; BAYER_TYPES]>) -> Vec<[f64; BAYER_TYPES]> {
    r.iter().map(|row| row.map(|x| x.unwrap_or(0.0))).collect()
}

fn check_inputs(series: &ExposureSeries, dark: &DarkModel, mask: &SaturationMask) -> Result<()> {
    let [_, ni, nj, _] = series.shape();
    if mask.shape != series.shape() {
        return Err(Error::dims("saturation mask and series differ in shape"));
    }
    if dark.mode == DarkMode::PerPixel && (dark.offset.len() != ni * nj || dark.current.len() != ni * nj) {
        return Err(Error::dims("per-pixel dark model does not match the series"));
    }
    Ok(())
}

/// Weighted alternating least squares for `v` and `r`, gauge-fixed so that
/// `mean(v) = 1` over recoverable pixels.
pub fn fit_vignetting_responsivity(
    series: &ExposureSeries,
    dark: &DarkModel,
    mask: &SaturationMask,
    opts: &FitOptions,
) -> Result<CalibResult> {
    check_inputs(series, dark, mask)?;
    match opts.tile {
        None => fit_region(series, dark, mask, opts, None),
        Some((size, overlap)) => fit_tiled(series, dark, mask, opts, size, overlap),
    }
}

fn fit_region(
    series: &ExposureSeries,
    dark: &DarkModel,
    mask: &SaturationMask,
    opts: &FitOptions,
    region: Option<([usize; 2], [usize; 2])>,
) -> Result<CalibResult> {
    let [nl, ni, nj, nk] = series.shape();
    let (lo, hi) = region.unwrap_or(([0, 0], [ni, nj]));
    let mut unrecoverable = Vec::new();
    let mut pixels = Vec::new();
    for i in lo[0]..hi[0] {
        for j in lo[1]..hi[1] {
            if (0..nl).any(|l| (0..nk).any(|k| !mask.get(l, i, j, k))) {
                pixels.push((i, j));
            } else {
                unrecoverable.push(Unrecoverable::Pixel { i, j });
            }
        }
    }
    if pixels.is_empty() {
        return Err(Error::Numerical("no unmasked measurements".into()));
    }
    let prob = Problem::new(series, dark, mask, pixels);
    let mut v = vec![1.0; ni * nj];
    let r_first = prob.update_r(&v);
    for (k, row) in r_first.iter().enumerate() {
        for (n, x) in row.iter().enumerate() {
            if x.is_none() {
                unrecoverable.push(Unrecoverable::Filter { k, n });
            }
        }
    }
    let mut r = unwrap_r(r_first);
    let mut history = vec![prob.objective(&v, &r)];
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let before = *history.last().unwrap();
        prob.update_v(&mut v, &r);
        history.push(prob.objective(&v, &r));
        r = unwrap_r(prob.update_r(&v));
        let after = prob.objective(&v, &r);
        history.push(after);
        if before <= 0.0 || (before - after) <= opts.rel_tol * before {
            break;
        }
    }
    let v_out = fix_gauge(&mut v, &mut r, &prob.pixels, &series.bayer, nj)?;
    let residual = prob.objective(&v_out, &r);
    Ok(CalibResult { v: v_out, dims: [ni, nj], r, residual, objective_history: history, sweeps, unrecoverable })
}

/// Each Bayer type carries its own scale freedom `(c·v, r/c)`; fix all of
/// them by rescaling so that `v` averages to one over the recoverable pixels
/// of every type. Unrecoverable pixels are set to one.
fn fix_gauge(v: &mut [f64], r: &mut [[f64; BAYER_TYPES]], pixels: &[(usize, usize)], bayer: &[u8], nj: usize) -> Result<Vec<f64>> {
    let mut sum = [0.0; BAYER_TYPES];
    let mut count = [0usize; BAYER_TYPES];
    for &(i, j) in pixels {
        let n = bayer[i * nj + j] as usize;
        sum[n] += v[i * nj + j];
        count[n] += 1;
    }
    let mut c = [1.0; BAYER_TYPES];
    for n in 0..BAYER_TYPES {
        if count[n] > 0 {
            c[n] = sum[n] / count[n] as f64;
            if !(c[n] > 0.0 && c[n].is_finite()) {
                return Err(Error::Numerical(format!("degenerate vignetting scale {} for bayer type {n}", c[n])));
            }
        }
    }
    let mut out = vec![1.0; v.len()];
    for &(i, j) in pixels {
        let p = i * nj + j;
        out[p] = v[p] / c[bayer[p] as usize];
    }
    for row in r.iter_mut() {
        for n in 0..BAYER_TYPES {
            row[n] *= c[n];
        }
    }
    v.copy_from_slice(&out);
    Ok(out)
}

fn tile_starts(n: usize, size: usize, overlap: usize) -> Vec<usize> {
    if size >= n {
        return vec![0];
    }
    let stride = size - overlap;
    let mut s: Vec<usize> = (0..).map(|k| k * stride).take_while(|&x| x + size < n).collect();
    s.push(n - size);
    s
}

/// Fit square tiles independently, align each tile's gauge to the first
/// fitted tile through their common responsivities, average `v` in the
/// overlaps and refit `r` on the assembled `v`.
fn fit_tiled(
    series: &ExposureSeries,
    dark: &DarkModel,
    mask: &SaturationMask,
    opts: &FitOptions,
    size: usize,
    overlap: usize,
) -> Result<CalibResult> {
    if size == 0 || overlap >= size {
        return Err(Error::arg("tile size must exceed the overlap"));
    }
    let [_, ni, nj, _] = series.shape();
    let mut acc = vec![0.0; ni * nj];
    let mut hits = vec![0usize; ni * nj];
    let mut reference: Option<Vec<[f64; BAYER_TYPES]>> = None;
    let (si, sj) = (size.min(ni), size.min(nj));
    for &i0 in &tile_starts(ni, si, overlap.min(si - 1)) {
        for &j0 in &tile_starts(nj, sj, overlap.min(sj - 1)) {
            let hi = [i0 + si, j0 + sj];
            let Ok(tile) = fit_region(series, dark, mask, opts, Some(([i0, j0], hi))) else {
                continue;
            };
            // Per Bayer type, the geometric mean ratio of the shared responsivities.
            let mut scale = [1.0; BAYER_TYPES];
            match &reference {
                None => reference = Some(tile.r.clone()),
                Some(rf) => {
                    for (n, sc) in scale.iter_mut().enumerate() {
                        let logs: Vec<f64> = rf
                            .iter()
                            .zip(&tile.r)
                            .filter(|(a, b)| a[n] > 0.0 && b[n] > 0.0)
                            .map(|(a, b)| (b[n] / a[n]).ln())
                            .collect();
                        if !logs.is_empty() {
                            *sc = (logs.iter().sum::<f64>() / logs.len() as f64).exp();
                        }
                    }
                }
            }
            for i in i0..hi[0] {
                for j in j0..hi[1] {
                    if !tile.unrecoverable.contains(&Unrecoverable::Pixel { i, j }) {
                        let p = i * nj + j;
                        acc[p] += tile.v[p] * scale[series.bayer[p] as usize];
                        hits[p] += 1;
                    }
                }
            }
        }
    }
    let good: Vec<usize> = (0..ni * nj).filter(|&p| hits[p] > 0).collect();
    if good.is_empty() {
        return Err(Error::Numerical("no tile could be fitted".into()));
    }
    let mut v = vec![1.0; ni * nj];
    for &p in &good {
        v[p] = acc[p] / hits[p] as f64;
    }
    let mut unrecoverable: Vec<Unrecoverable> =
        (0..ni * nj).filter(|&p| hits[p] == 0).map(|p| Unrecoverable::Pixel { i: p / nj, j: p % nj }).collect();
    let prob = Problem::new(series, dark, mask, good.iter().map(|&p| (p / nj, p % nj)).collect());
    let r_opt = prob.update_r(&v);
    for (k, row) in r_opt.iter().enumerate() {
        for (n, x) in row.iter().enumerate() {
            if x.is_none() {
                unrecoverable.push(Unrecoverable::Filter { k, n });
            }
        }
    }
    let mut r = unwrap_r(r_opt);
    let v = fix_gauge(&mut v, &mut r, &prob.pixels, &series.bayer, nj)?;
    let residual = prob.objective(&v, &r);
    Ok(CalibResult { v, dims: [ni, nj], r, residual, objective_history: vec![residual], sweeps: 0, unrecoverable })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedImage {
    /// `I × J × K`, zero at invalid entries.
    pub data: Vec<f32>,
    pub valid: Vec<bool>,
}

/// `(raw − μ_d0 − μ_I·t) / (v·r·t)` for a `(1, 1, I, J, K)` raw image.
pub fn apply_calibration(raw: &Tensor5, t: f64, calib: &CalibResult, dark: &DarkModel, bayer: &[u8]) -> Result<CorrectedImage> {
    let [u, v, ni, nj, nk] = raw.dims();
    if (u, v) != (1, 1) || [ni, nj] != calib.dims || calib.r.len() != nk || bayer.len() != ni * nj {
        return Err(Error::dims("raw image does not match the calibration"));
    }
    if !(t > 0.0) {
        return Err(Error::arg("exposure time must be positive"));
    }
    let mut data = vec![0.0f32; ni * nj * nk];
    let mut valid = vec![false; ni * nj * nk];
    for p in 0..ni * nj {
        let d = dark.signal(p, t);
        for k in 0..nk {
            let g = calib.v[p] * calib.r[k][bayer[p] as usize] * t;
            let at = p * nk + k;
            if g.abs() >= APPLY_GUARD {
                data[at] = ((raw.data()[at] as f64 - d) / g) as f32;
                valid[at] = true;
            }
        }
    }
    Ok(CorrectedImage { data, valid })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(ni: usize, nj: usize, nk: usize, times: &[f64], v: &[f64], r: &[[f64; 3]], dark: (f64, f64)) -> ExposureSeries {
        let bayer: Vec<u8> = (0..ni * nj).map(|p| ((p / nj) % 2 + (p % nj) % 2) as u8).collect();
        let means = Tensor5::from_fn([1, times.len(), ni, nj, nk], |[_, l, i, j, k]| {
            let p = i * nj + j;
            (dark.0 + dark.1 * times[l] + v[p] * r[k][bayer[p] as usize] * times[l]) as f32
        });
        ExposureSeries::new(means, times.to_vec(), bayer).unwrap()
    }

    fn gauge_aligned(v: &[f64], r: &[[f64; 3]], bayer: &[u8]) -> (Vec<f64>, Vec<[f64; 3]>) {
        let mut c = [0.0; 3];
        let mut cnt = [0.0; 3];
        for (p, &n) in bayer.iter().enumerate() {
            c[n as usize] += v[p];
            cnt[n as usize] += 1.0;
        }
        let c: Vec<f64> = c.iter().zip(cnt).map(|(s, n)| if n > 0.0 { s / n } else { 1.0 }).collect();
        let gv = v.iter().zip(bayer).map(|(x, &n)| x / c[n as usize]).collect();
        let gr = r.iter().map(|row| std::array::from_fn(|n| row[n] * c[n])).collect();
        (gv, gr)
    }

    #[test]
    fn dark_fit_exact_line() {
        let times = [0.5, 1.0, 2.0, 4.0];
        let dark = Tensor5::from_fn([1, 4, 2, 3, 1], |[_, l, ..]| (0.02 + 0.001 * times[l]) as f32);
        for mode in [DarkMode::PerPixel, DarkMode::Global] {
            let m = fit_dark(&dark, &times, mode).unwrap();
            assert!(m.offset.iter().all(|o| (o - 0.02).abs() < 1e-8));
            assert!(m.current.iter().all(|c| (c - 0.001).abs() < 1e-8));
        }
        let flat = Tensor5::filled([1, 3, 2, 2, 1], 0.05);
        let m = fit_dark(&flat, &[1.0, 2.0, 3.0], DarkMode::PerPixel).unwrap();
        assert!(m.current.iter().all(|c| c.abs() < 1e-12));
        assert!(fit_dark(&Tensor5::zeros([1, 1, 2, 2, 1]), &[1.0], DarkMode::Global).is_err());
        assert!(fit_dark(&Tensor5::zeros([1, 2, 2, 2, 1]), &[1.0, 1.0], DarkMode::Global).is_err());
    }

    #[test]
    fn blooming_mask_enumeration() {
        let mut means = Tensor5::filled([1, 1, 13, 13, 1], 0.5);
        means.set([0, 0, 6, 6, 0], 0.99);
        let s = ExposureSeries::new(means, vec![1.0], vec![0; 169]).unwrap();
        let m = saturation_mask(&s, SATURATION_THRESHOLD, LINE_REACH, ReadoutAxis::Rows);
        assert_eq!(m.count(), 19);
        assert!(m.get(0, 6, 0, 0) && m.get(0, 6, 12, 0) && m.get(0, 5, 5, 0));
        assert!(!m.get(0, 5, 4, 0));
        let cols = saturation_mask(&s, SATURATION_THRESHOLD, LINE_REACH, ReadoutAxis::Columns);
        assert!(cols.get(0, 0, 6, 0) && !cols.get(0, 6, 0, 0));
        let flat = ExposureSeries::new(Tensor5::filled([1, 1, 4, 4, 1], 0.9), vec![1.0], vec![0; 16]).unwrap();
        assert_eq!(saturation_mask(&flat, SATURATION_THRESHOLD, LINE_REACH, ReadoutAxis::Rows).count(), 0);
        assert!((1008.0f64 / 1023.0 - SATURATION_THRESHOLD).abs() < 5e-4);
    }

    #[test]
    fn noiseless_recovery_and_monotone_objective() {
        let (ni, nj, nk) = (6, 5, 2);
        let v: Vec<f64> = (0..ni * nj).map(|p| 0.7 + 0.02 * p as f64).collect();
        let r = [[0.3, 0.5, 0.2], [0.15, 0.25, 0.35]];
        let times = [0.1, 0.2, 0.4, 0.8];
        let s = synthetic(ni, nj, nk, &times, &v, &r, (0.0, 0.0));
        let mask = saturation_mask(&s, SATURATION_THRESHOLD, LINE_REACH, ReadoutAxis::Rows);
        let res = fit_vignetting_responsivity(&s, &DarkModel::zero(), &mask, &FitOptions::default()).unwrap();
        let (gv, gr) = gauge_aligned(&v, &r, &s.bayer);
        for (a, b) in res.v.iter().zip(&gv) {
            assert!((a - b).abs() < 1e-3 * b);
        }
        for k in 0..nk {
            for n in 0..3 {
                assert!((res.r[k][n] - gr[k][n]).abs() < 1e-3 * gr[k][n]);
            }
        }
        assert!(res.objective_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-18), "{:?}", res.objective_history);
        assert!((res.v.iter().sum::<f64>() / res.v.len() as f64 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn masked_entries_have_no_influence() {
        let v = vec![1.0; 16];
        let r = [[0.4, 0.6, 0.5]];
        let times = [0.5, 1.0, 1.5];
        let mut s = synthetic(4, 4, 1, &times, &v, &r, (0.01, 0.002));
        s.means.set([0, 2, 1, 1, 0], 0.995);
        let dark = DarkModel { mode: DarkMode::Global, offset: vec![0.01], current: vec![0.002] };
        let mask = saturation_mask(&s, SATURATION_THRESHOLD, LINE_REACH, ReadoutAxis::Rows);
        let a = fit_vignetting_responsivity(&s, &dark, &mask, &FitOptions::default()).unwrap();
        s.means.set([0, 2, 1, 1, 0], 0.999);
        let b = fit_vignetting_responsivity(&s, &dark, &mask, &FitOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fully_masked_pixel_is_unrecoverable() {
        let v = vec![1.0; 9];
        let s = synthetic(3, 3, 1, &[1.0, 2.0], &v, &[[0.2, 0.2, 0.2]], (0.0, 0.0));
        let mut mask = SaturationMask::none(s.shape());
        for l in 0..2 {
            let at = mask.index(l, 1, 1, 0);
            mask.excluded[at] = true;
        }
        let res = fit_vignetting_responsivity(&s, &DarkModel::zero(), &mask, &FitOptions::default()).unwrap();
        assert_eq!(res.unrecoverable, vec![Unrecoverable::Pixel { i: 1, j: 1 }, Unrecoverable::Filter { k: 0, n: 2 }]);
        assert_eq!(res.v[4], 1.0);
    }

    #[test]
    fn tiled_fit_matches_direct_fit() {
        let (ni, nj) = (8, 8);
        let v: Vec<f64> = (0..ni * nj).map(|p| 0.8 + 0.4 * ((p as f64) * 0.37).sin().abs()).collect();
        let r = [[0.3, 0.5, 0.4]];
        let s = synthetic(ni, nj, 1, &[0.2, 0.4, 0.8], &v, &r, (0.0, 0.0));
        let mask = SaturationMask::none(s.shape());
        let direct = fit_vignetting_responsivity(&s, &DarkModel::zero(), &mask, &FitOptions::default()).unwrap();
        let opts = FitOptions { tile: Some((4, 2)), ..Default::default() };
        let tiled = fit_vignetting_responsivity(&s, &DarkModel::zero(), &mask, &opts).unwrap();
        for (a, b) in direct.v.iter().zip(&tiled.v) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn apply_inverts_the_model() {
        let v: Vec<f64> = (0..12).map(|p| 0.9 + 0.01 * p as f64).collect();
        let r = [[0.3, 0.5, 0.4], [0.2, 0.1, 0.6]];
        let calib = CalibResult {
            v: v.clone(),
            dims: [3, 4],
            r: r.to_vec(),
            residual: 0.0,
            objective_history: vec![],
            sweeps: 0,
            unrecoverable: vec![],
        };
        let dark = DarkModel { mode: DarkMode::Global, offset: vec![0.01], current: vec![0.003] };
        let bayer: Vec<u8> = (0..12).map(|p| (p % 3) as u8).collect();
        let alpha = 0.6;
        for t in [0.5, 1.0] {
            let raw = Tensor5::from_fn([1, 1, 3, 4, 2], |[_, _, i, j, k]| {
                let p = i * 4 + j;
                (0.01 + 0.003 * t + alpha * v[p] * r[k][bayer[p] as usize] * t) as f32
            });
            let out = apply_calibration(&raw, t, &calib, &dark, &bayer).unwrap();
            assert!(out.valid.iter().all(|&x| x));
            assert!(out.data.iter().all(|&x| (x as f64 - alpha).abs() < 1e-5));
        }
        let raw = Tensor5::filled([1, 1, 3, 4, 2], (0.01 + 0.003 * 2.0) as f32);
        let out = apply_calibration(&raw, 2.0, &calib, &dark, &bayer).unwrap();
        assert!(out.data.iter().all(|&x| x.abs() < 1e-6));
    }
}
