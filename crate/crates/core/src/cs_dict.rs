//! Dictionary-learning reconstruction: light-field patching, FISTA sparse
//! coding, alternating mini-batch SGD dictionary updates with atom
//! normalisation, and overlap-averaged de-patching.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coding::{self, CodingMask};
use crate::rng::{self, streams};
use crate::{Error, Result, Tensor5};

pub const LFDC_MAGIC: [u8; 4] = *b"LFDC";

/// Patch origins over the angular and spatial axes. The spectral axis is
/// never patched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    /// `(u_a, v_a, s_a, t_a, Λ)`.
    pub atom: [usize; 5],
    /// `(o_u, o_v)`.
    pub angular_overlap: [usize; 2],
    /// `(o_s, o_t)`.
    pub spatial_overlap: [usize; 2],
    pub source: [usize; 5],
    /// `(u, v, s, t)` origin of every patch.
    pub origins: Vec<[usize; 4]>,
}

/// Origins at multiples of `atom − overlap`, the last one clamped to
/// `dim − atom` so the far edge is always covered.
fn axis_origins(dim: usize, atom: usize, overlap: usize) -> Vec<usize> {
    let step = atom - overlap;
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        out.push(o.min(dim - atom));
        if o + atom >= dim {
            break;
        }
        o += step;
    }
    out.dedup();
    out
}

impl PatchGrid {
    pub fn new(
        source: [usize; 5],
        atom_shape: [usize; 4],
        angular_overlap: [usize; 2],
        spatial_overlap: [usize; 2],
    ) -> Result<Self> {
        let overlap = [angular_overlap[0], angular_overlap[1], spatial_overlap[0], spatial_overlap[1]];
        for a in 0..4 {
            if atom_shape[a] == 0 || atom_shape[a] > source[a] {
                return Err(Error::arg(format!(
                    "atom shape {atom_shape:?} does not fit source {source:?}"
                )));
            }
            if overlap[a] >= atom_shape[a] {
                return Err(Error::arg(format!(
                    "overlap {overlap:?} must be smaller than atom shape {atom_shape:?}"
                )));
            }
        }
        let per_axis: Vec<Vec<usize>> = (0..4)
            .map(|a| axis_origins(source[a], atom_shape[a], overlap[a]))
            .collect();
        let mut origins = Vec::new();
        for &u in &per_axis[0] {
            for &v in &per_axis[1] {
                for &s in &per_axis[2] {
                    for &t in &per_axis[3] {
                        origins.push([u, v, s, t]);
                    }
                }
            }
        }
        let [ua, va, sa, ta] = atom_shape;
        Ok(PatchGrid {
            atom: [ua, va, sa, ta, source[4]],
            angular_overlap,
            spatial_overlap,
            source,
            origins,
        })
    }

    /// Desk-scale default: atoms `(3, 3, 6, 6, Λ)` with overlaps `(1, 1)` and `(3, 3)`.
    pub fn desk_default(source: [usize; 5]) -> Result<Self> {
        PatchGrid::new(source, [3, 3, 6, 6], [1, 1], [3, 3])
    }

    /// Larger preset: atoms `(5, 5, 8, 8, Λ)` with overlaps `(1, 1)` and `(4, 4)`.
    pub fn large_preset(source: [usize; 5]) -> Result<Self> {
        PatchGrid::new(source, [5, 5, 8, 8], [1, 1], [4, 4])
    }

    pub fn atom_len(&self) -> usize {
        self.atom.iter().product()
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Visit every `(patch element, source offset)` pair of one patch.
    fn for_each_offset(&self, origin: [usize; 4], mut f: impl FnMut(usize, usize)) {
        let [ua, va, sa, ta, k] = self.atom;
        let src = self.source;
        let mut p = 0;
        for u in 0..ua {
            for v in 0..va {
                for s in 0..sa {
                    for t in 0..ta {
                        let base = crate::tensor::linear_index(
                            src,
                            [origin[0] + u, origin[1] + v, origin[2] + s, origin[3] + t, 0],
                        );
                        for l in 0..k {
                            f(p, base + l);
                            p += 1;
                        }
                    }
                }
            }
        }
    }

    /// Number of patches covering every source element.
    pub fn coverage(&self) -> Vec<u32> {
        let mut c = vec![0u32; self.source.iter().product()];
        for &o in &self.origins {
            self.for_each_offset(o, |_, off| c[off] += 1);
        }
        c
    }
}

/// Vectorised sub-tensors at every grid origin.
pub fn patch(l: &Tensor5, g: &PatchGrid) -> Result<Vec<Vec<f32>>> {
    if l.dims() != g.source {
        return Err(Error::dims(format!(
            "light field dims {:?} do not match patch grid source {:?}",
            l.dims(),
            g.source
        )));
    }
    let data = l.data();
    Ok(g.origins
        .iter()
        .map(|&o| {
            let mut p = vec![0.0; g.atom_len()];
            g.for_each_offset(o, |i, off| p[i] = data[off]);
            p
        })
        .collect())
}

/// Average overlapping patches back into a light field.
pub fn depatch(patches: &[Vec<f32>], g: &PatchGrid) -> Result<Tensor5> {
    if patches.len() != g.len() {
        return Err(Error::dims(format!(
            "{} patches for a grid of {}",
            patches.len(),
            g.len()
        )));
    }
    let n = g.atom_len();
    if let Some(p) = patches.iter().find(|p| p.len() != n) {
        return Err(Error::dims(format!("patch of length {} (atom length {n})", p.len())));
    }
    let total: usize = g.source.iter().product();
    let mut acc = vec![0.0f64; total];
    let mut count = vec![0u32; total];
    for (p, &o) in patches.iter().zip(&g.origins) {
        g.for_each_offset(o, |i, off| {
            acc[off] += p[i] as f64;
            count[off] += 1;
        });
    }
    let data = acc
        .iter()
        .zip(&count)
        .map(|(&a, &c)| if c > 0 { (a / c as f64) as f32 } else { 0.0 })
        .collect();
    Tensor5::from_vec(g.source, data)
}

/// Overcomplete dictionary with `n_atoms` unit-norm columns of length `atom_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atom_len: usize,
    n_atoms: usize,
    /// Column major: atom `j` is `data[j·atom_len .. (j+1)·atom_len]`.
    data: Vec<f32>,
}

impl Dictionary {
    pub fn from_columns(atom_len: usize, n_atoms: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != atom_len * n_atoms {
            return Err(Error::dims(format!(
                "{} values for a {atom_len}x{n_atoms} dictionary",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Dictionary { atom_len, n_atoms, data })
    }

    /// Truncated-normal initialisation followed by atom normalisation.
    pub fn random(atom_len: usize, overcompleteness: usize, seed: u64) -> Result<Self> {
        if atom_len == 0 || overcompleteness == 0 {
            return Err(Error::arg("atom length and overcompleteness must be positive"));
        }
        let n_atoms = overcompleteness * atom_len;
        let mut rng = rng::stream(seed, streams::INIT);
        let data = (0..atom_len * n_atoms)
            .map(|_| rng::truncated_normal(&mut rng) as f32)
            .collect();
        let mut d = Dictionary { atom_len, n_atoms, data };
        d.normalize();
        Ok(d)
    }

    pub fn atom_len(&self) -> usize {
        self.atom_len
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn atom(&self, j: usize) -> &[f32] {
        &self.data[j * self.atom_len..(j + 1) * self.atom_len]
    }

    /// Rescale every atom to unit ℓ2 norm; zero atoms are left untouched.
    pub fn normalize(&mut self) {
        for col in self.data.chunks_exact_mut(self.atom_len) {
            let n = col.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if n > 1e-12 {
                col.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
            }
        }
    }

    /// `‖d_j‖₂` of every atom.
    pub fn atom_norms(&self) -> Vec<f64> {
        self.data
            .chunks_exact(self.atom_len)
            .map(|c| c.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt())
            .collect()
    }

    /// `D α`.
    pub fn synthesize(&self, alpha: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; self.atom_len];
        matvec(&self.data, self.atom_len, alpha, &mut out);
        out
    }

    /// Dense `n × K` sub-dictionary holding only the listed rows.
    fn rows(&self, rows: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(rows.len() * self.n_atoms);
        for col in self.data.chunks_exact(self.atom_len) {
            out.extend(rows.iter().map(|&r| col[r]));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        out.extend_from_slice(&LFDC_MAGIC);
        out.extend_from_slice(&(self.atom_len as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_atoms as u32).to_le_bytes());
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Truncated { expected: 12, found: bytes.len() });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != LFDC_MAGIC {
            return Err(Error::BadMagic { expected: LFDC_MAGIC, found: magic });
        }
        let atom_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let n_atoms = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = atom_len
            .checked_mul(n_atoms)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Malformed("dictionary size overflows".into()))?;
        let payload = &bytes[12..];
        if payload.len() < n {
            return Err(Error::Truncated { expected: n, found: payload.len() });
        }
        if payload.len() > n {
            return Err(Error::TrailingBytes(payload.len() - n));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Dictionary::from_columns(atom_len, n_atoms, data)
    }
}

pub fn read_dictionary(path: impl AsRef<Path>) -> Result<Dictionary> {
    Dictionary::from_bytes(&fs::read(path)?)
}

pub fn write_dictionary(d: &Dictionary, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, d.to_bytes())?;
    Ok(())
}

/// `out = A x` for a column-major `rows × cols` matrix.
fn matvec(a: &[f32], rows: usize, x: &[f32], out: &mut [f32]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (col, &xj) in a.chunks_exact(rows).zip(x) {
        if xj != 0.0 {
            for (o, &c) in out.iter_mut().zip(col) {
                *o += c * xj;
            }
        }
    }
}

/// `out = Aᵀ r` for a column-major `rows × cols` matrix.
fn matvec_t(a: &[f32], rows: usize, r: &[f32], out: &mut [f32]) {
    for (o, col) in out.iter_mut().zip(a.chunks_exact(rows)) {
        *o = col.iter().zip(r).map(|(c, v)| c * v).sum();
    }
}

/// Largest eigenvalue of `AᵀA` from 30 power iterations.
fn largest_eigenvalue(a: &[f32], rows: usize, cols: usize) -> f64 {
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let mut x = vec![1.0f32 / (cols as f32).sqrt(); cols];
    let mut ax = vec![0.0f32; rows];
    let mut ev = 0.0;
    for _ in 0..30 {
        matvec(a, rows, &x, &mut ax);
        let mut y = vec![0.0f32; cols];
        matvec_t(a, rows, &ax, &mut y);
        let n = y.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        ev = n;
        x.iter_mut().zip(&y).for_each(|(xi, &yi)| *xi = (yi as f64 / n) as f32);
    }
    ev
}

/// Lipschitz constant `2·λ_max(DᵀD)` of `∇‖x − Dα‖²`, with 1% headroom for
/// the power-iteration underestimate.
pub fn fista_lipschitz(d: &Dictionary) -> f64 {
    2.0 * 1.01 * largest_eigenvalue(&d.data, d.atom_len, d.n_atoms)
}

/// Sparse code `α` of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode(pub Vec<f32>);

fn lasso_objective(residual: &[f32], alpha: &[f32], lambda: f64) -> f64 {
    residual.iter().map(|&r| r as f64 * r as f64).sum::<f64>()
        + lambda * alpha.iter().map(|a| a.abs() as f64).sum::<f64>()
}

fn soft_threshold(x: f32, thr: f32) -> f32 {
    if x > thr {
        x - thr
    } else if x < -thr {
        x + thr
    } else {
        0.0
    }
}

/// Monotone FISTA on `‖x − Aα‖² + λ‖α‖₁` with step `1/lipschitz`.
///
/// When an accelerated step would raise the objective, the momentum restarts
/// and a plain proximal-gradient step is taken from the current iterate, so
/// the objective never increases. Returns the code and the objective after
/// every iteration (index 0 is the objective at `α = 0`).
fn fista(a: &[f32], rows: usize, x: &[f32], lambda: f64, iters: usize, lipschitz: f64) -> (Vec<f32>, Vec<f64>) {
    let cols = a.len().checked_div(rows).unwrap_or(0);
    let mut alpha = vec![0.0f32; cols];
    let mut history = Vec::with_capacity(iters + 1);
    if cols == 0 || rows == 0 {
        history.push(0.0);
        return (alpha, history);
    }
    // Residuals r = Aα − x are tracked for α, z and the extrapolated y.
    let mut r_alpha: Vec<f32> = x.iter().map(|v| -v).collect();
    let mut f_alpha = lasso_objective(&r_alpha, &alpha, lambda);
    history.push(f_alpha);
    if lipschitz <= 0.0 {
        return (alpha, history);
    }
    let step = (1.0 / lipschitz) as f32;
    let thr = (lambda / lipschitz) as f32;
    let mut y = alpha.clone();
    let mut r_y = r_alpha.clone();
    let mut t = 1.0f64;
    let mut grad = vec![0.0f32; cols];
    let mut z = vec![0.0f32; cols];
    let mut r_z = vec![0.0f32; rows];

    let prox_step = |from: &[f32], r_from: &[f32], grad: &mut [f32], z: &mut [f32], r_z: &mut [f32]| {
        matvec_t(a, rows, r_from, grad);
        for ((zi, &fi), &gi) in z.iter_mut().zip(from).zip(grad.iter()) {
            *zi = soft_threshold(fi - step * 2.0 * gi, thr);
        }
        matvec(a, rows, z, r_z);
        for (rz, &xi) in r_z.iter_mut().zip(x) {
            *rz -= xi;
        }
    };

    for _ in 0..iters {
        prox_step(&y, &r_y, &mut grad, &mut z, &mut r_z);
        let mut f_z = lasso_objective(&r_z, &z, lambda);
        if f_z > f_alpha {
            t = 1.0;
            prox_step(&alpha, &r_alpha, &mut grad, &mut z, &mut r_z);
            f_z = lasso_objective(&r_z, &z, lambda);
            if f_z > f_alpha {
                // Rounding noise at the optimum; keep the current iterate.
                history.push(f_alpha);
                y.copy_from_slice(&alpha);
                r_y.copy_from_slice(&r_alpha);
                continue;
            }
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = ((t - 1.0) / t_next) as f32;
        for i in 0..cols {
            y[i] = z[i] + beta * (z[i] - alpha[i]);
        }
        for i in 0..rows {
            r_y[i] = r_z[i] + beta * (r_z[i] - r_alpha[i]);
        }
        std::mem::swap(&mut alpha, &mut z);
        std::mem::swap(&mut r_alpha, &mut r_z);
        f_alpha = f_z;
        t = t_next;
        history.push(f_alpha);
    }
    (alpha, history)
}

/// Sparse-code one patch against `d`.
pub fn fista_encode(d: &Dictionary, x: &[f32], lambda: f64, iters: usize) -> Result<SparseCode> {
    Ok(fista_encode_with_history(d, x, lambda, iters, fista_lipschitz(d))?.0)
}

/// As [`fista_encode`] with a precomputed Lipschitz constant, also returning
/// the per-iteration objective.
pub fn fista_encode_with_history(
    d: &Dictionary,
    x: &[f32],
    lambda: f64,
    iters: usize,
    lipschitz: f64,
) -> Result<(SparseCode, Vec<f64>)> {
    if x.len() != d.atom_len {
        return Err(Error::dims(format!(
            "patch of length {} for atoms of length {}",
            x.len(),
            d.atom_len
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::arg("lambda must be >= 0"));
    }
    let (alpha, hist) = fista(&d.data, d.atom_len, x, lambda, iters, lipschitz);
    Ok((SparseCode(alpha), hist))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DictTrainOptions {
    /// Overcompleteness `k`: the dictionary has `k·N` atoms.
    pub overcompleteness: usize,
    /// ℓ1 coupling used for sparse coding during training.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub fista_iters: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DictTrainOptions {
    fn default() -> Self {
        DictTrainOptions {
            overcompleteness: 2,
            lambda: 0.05,
            learning_rate: 1e-2,
            batch_size: 16,
            fista_iters: 100,
            epochs: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DictTrainLog {
    /// Mean mini-batch objective `‖x − Dα‖² + λ‖α‖₁` per patch, per epoch.
    pub epoch_objective: Vec<f64>,
    /// Largest `|‖d_j‖ − 1|` seen after any update.
    pub max_norm_deviation: f64,
}

/// Train from raw patch vectors (each of length `atom_len`).
pub fn train_dictionary_from_patches(
    patches: &[Vec<f32>],
    atom_len: usize,
    opts: &DictTrainOptions,
) -> Result<(Dictionary, DictTrainLog)> {
    train_from_init(patches, Dictionary::random(atom_len, opts.overcompleteness, opts.seed)?, opts)
}

/// Alternating training from a given initial dictionary.
pub fn train_from_init(
    patches: &[Vec<f32>],
    mut d: Dictionary,
    opts: &DictTrainOptions,
) -> Result<(Dictionary, DictTrainLog)> {
    if patches.is_empty() {
        return Err(Error::arg("dictionary training needs a nonempty dataset"));
    }
    if opts.batch_size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    let n = d.atom_len;
    if let Some(p) = patches.iter().find(|p| p.len() != n) {
        return Err(Error::dims(format!("patch of length {} (atom length {n})", p.len())));
    }
    let k = d.n_atoms;
    let mut rng = rng::stream(opts.seed, streams::SHUFFLE);
    let mut log = DictTrainLog::default();
    let mut grad = vec![0.0f64; n * k];

    for _ in 0..opts.epochs {
        let order = rng::permutation(&mut rng, patches.len());
        let mut epoch_obj = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let lip = fista_lipschitz(&d);
            // Sparse coding step with D fixed.
            let codes: Vec<(Vec<f32>, f64)> = batch
                .par_iter()
                .map(|&i| {
                    let (a, h) = fista(&d.data, n, &patches[i], opts.lambda, opts.fista_iters, lip);
                    (a, *h.last().unwrap())
                })
                .collect();
            epoch_obj += codes.iter().map(|c| c.1).sum::<f64>();
            if opts.learning_rate == 0.0 {
                continue;
            }
            // Dictionary step with A fixed: ∇_D ‖X − DA‖² / B = −2 (X − DA) Aᵀ / B.
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (&i, (alpha, _)) in batch.iter().zip(&codes) {
                let rec = d.synthesize(alpha);
                let resid: Vec<f64> = patches[i].iter().zip(&rec).map(|(&x, &r)| (x - r) as f64).collect();
                for (j, &aj) in alpha.iter().enumerate() {
                    if aj != 0.0 {
                        let gcol = &mut grad[j * n..(j + 1) * n];
                        for (g, &r) in gcol.iter_mut().zip(&resid) {
                            *g -= 2.0 * r * aj as f64;
                        }
                    }
                }
            }
            let scale = opts.learning_rate / batch.len() as f64;
            for (w, g) in d.data.iter_mut().zip(&grad) {
                *w = (*w as f64 - scale * g) as f32;
            }
            d.normalize();
            let dev = d
                .atom_norms()
                .iter()
                .fold(0.0f64, |m, &nrm| m.max((nrm - 1.0).abs()));
            log.max_norm_deviation = log.max_norm_deviation.max(dev);
        }
        log.epoch_objective.push(epoch_obj / patches.len() as f64);
    }
    Ok((d, log))
}

/// Patch every light field of `dataset` with `g` and train on the union.
pub fn train_dictionary(
    dataset: &[Tensor5],
    g: &PatchGrid,
    opts: &DictTrainOptions,
) -> Result<(Dictionary, DictTrainLog)> {
    if dataset.is_empty() {
        return Err(Error::arg("dictionary training needs a nonempty dataset"));
    }
    let mut patches = Vec::new();
    for l in dataset {
        patches.extend(patch(l, g)?);
    }
    train_dictionary_from_patches(&patches, g.atom_len(), opts)
}

/// Reconstruct a light field from its spectral projection: lift, patch the
/// coded field and the mask, sparse-code each patch on its observed entries
/// only, synthesise the full patch and average overlaps.
pub fn dict_reconstruct(
    l_star_p: &Tensor5,
    m: &CodingMask,
    d: &Dictionary,
    g: &PatchGrid,
    lambda: f64,
    iters: usize,
) -> Result<Tensor5> {
    let coded = coding::lift(l_star_p, m)?;
    if coded.dims() != g.source {
        return Err(Error::dims(format!(
            "coded light field {:?} does not match grid source {:?}",
            coded.dims(),
            g.source
        )));
    }
    if d.atom_len != g.atom_len() {
        return Err(Error::dims(format!(
            "dictionary atom length {} does not match grid atom length {}",
            d.atom_len,
            g.atom_len()
        )));
    }
    let [u, v, ..] = coded.dims();
    let mut full_mask = Tensor5::filled(coded.dims(), 1.0);
    m.apply_in_place(full_mask.data_mut(), u * v);
    let x_patches = patch(&coded, g)?;
    let m_patches = patch(&full_mask, g)?;

    let recon: Vec<Vec<f32>> = x_patches
        .par_iter()
        .zip(m_patches.par_iter())
        .map(|(x, mp)| {
            let rows: Vec<usize> = mp.iter().enumerate().filter(|(_, &o)| o != 0.0).map(|(i, _)| i).collect();
            let sub = d.rows(&rows);
            let x_obs: Vec<f32> = rows.iter().map(|&r| x[r]).collect();
            let lip = 2.0 * 1.01 * largest_eigenvalue(&sub, rows.len(), d.n_atoms);
            let (alpha, _) = fista(&sub, rows.len(), &x_obs, lambda, iters, lip);
            d.synthesize(&alpha)
        })
        .collect();
    depatch(&recon, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(dims: [usize; 5], seed: u64) -> Tensor5 {
        let mut r = rng::stream(seed, 17);
        Tensor5::from_fn(dims, |_| rng::normal(&mut r) as f32)
    }

    #[test]
    fn whole_tensor_grid_has_one_patch() {
        let l = random_tensor([3, 3, 4, 4, 2], 0);
        let g = PatchGrid::new(l.dims(), [3, 3, 4, 4], [1, 1], [2, 2]).unwrap();
        let p = patch(&l, &g).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0], l.data());
    }

    #[test]
    fn large_preset_tiling() {
        let g = PatchGrid::large_preset([5, 5, 12, 12, 13]).unwrap();
        assert_eq!(g.len(), 4);
        let mut st: Vec<[usize; 2]> = g.origins.iter().map(|o| [o[2], o[3]]).collect();
        st.sort();
        assert_eq!(st, vec![[0, 0], [0, 4], [4, 0], [4, 4]]);
        assert!(patch(&Tensor5::zeros([5, 5, 12, 12, 13]), &g)
            .unwrap()
            .iter()
            .all(|p| p.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn edge_origin_is_clamped() {
        assert_eq!(axis_origins(16, 6, 3), vec![0, 3, 6, 9, 10]);
        assert_eq!(axis_origins(5, 3, 1), vec![0, 2]);
        assert_eq!(axis_origins(4, 4, 0), vec![0]);
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(PatchGrid::new([3, 3, 4, 4, 1], [5, 3, 4, 4], [1, 1], [1, 1]).is_err());
        assert!(PatchGrid::new([3, 3, 4, 4, 1], [3, 3, 4, 4], [3, 1], [1, 1]).is_err());
    }

    #[test]
    fn depatch_averages_disagreeing_patches() {
        let g = PatchGrid::new([1, 1, 1, 3, 1], [1, 1, 1, 2], [0, 0], [0, 1]).unwrap();
        assert_eq!(g.len(), 2);
        let eps = 0.25;
        let out = depatch(&[vec![1.0, 2.0 + eps], vec![2.0 - eps, 3.0]], &g).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0]);
        assert!(depatch(&[vec![1.0, 2.0]], &g).is_err());
    }

    #[test]
    fn patch_depatch_round_trip() {
        let l = random_tensor([5, 5, 16, 16, 3], 1);
        let g = PatchGrid::desk_default(l.dims()).unwrap();
        let back = depatch(&patch(&l, &g).unwrap(), &g).unwrap();
        for (a, b) in back.data().iter().zip(l.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
        assert!(g.coverage().iter().all(|&c| c >= 1));
    }

    #[test]
    fn initial_atoms_are_unit_norm() {
        let d = Dictionary::random(40, 2, 3).unwrap();
        assert_eq!(d.n_atoms(), 80);
        assert!(d.atom_norms().iter().all(|n| (n - 1.0).abs() < 1e-6));
    }

    #[test]
    fn lfdc_round_trip_and_errors() {
        let d = Dictionary::random(6, 2, 1).unwrap();
        let bytes = d.to_bytes();
        assert_eq!(&bytes[..4], b"LFDC");
        assert_eq!(Dictionary::from_bytes(&bytes).unwrap(), d);
        assert!(matches!(
            Dictionary::from_bytes(&bytes[..bytes.len() - 2]),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(matches!(Dictionary::from_bytes(&bad), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn least_squares_with_orthonormal_dictionary() {
        // Orthonormal DCT basis as dictionary, λ = 0: α = Dᵀx.
        let n = 8;
        let c = crate::transforms::dct_matrix(n);
        let data: Vec<f32> = c.iter().map(|&v| v as f32).collect();
        let d = Dictionary::from_columns(n, n, data).unwrap();
        let x: Vec<f32> = (0..n).map(|i| (i as f32 * 0.7).sin()).collect();
        let code = fista_encode(&d, &x, 0.0, 200).unwrap();
        for j in 0..n {
            let proj: f32 = d.atom(j).iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((code.0[j] - proj).abs() < 1e-5);
        }
    }

    #[test]
    fn fista_objective_is_monotone() {
        let d = Dictionary::random(20, 2, 9).unwrap();
        let mut r = rng::stream(4, 0);
        let x: Vec<f32> = (0..20).map(|_| rng::normal(&mut r) as f32).collect();
        let (_, hist) = fista_encode_with_history(&d, &x, 0.1, 100, fista_lipschitz(&d)).unwrap();
        assert!(hist.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_learning_rate_leaves_dictionary_unchanged() {
        let mut r = rng::stream(5, 0);
        let patches: Vec<Vec<f32>> = (0..20).map(|_| (0..10).map(|_| rng::normal(&mut r) as f32).collect()).collect();
        let init = Dictionary::random(10, 2, 5).unwrap();
        let opts = DictTrainOptions {
            learning_rate: 0.0,
            epochs: 1,
            ..Default::default()
        };
        let (d, _) = train_from_init(&patches, init.clone(), &opts).unwrap();
        assert_eq!(d, init);
        assert!(train_dictionary(&[], &PatchGrid::new([1, 1, 2, 2, 1], [1, 1, 2, 2], [0, 0], [0, 0]).unwrap(), &opts).is_err());
    }

    #[test]
    fn zero_measurement_gives_zero_reconstruction() {
        let dims = [3, 3, 6, 6, 2];
        let g = PatchGrid::new(dims, [3, 3, 6, 6], [1, 1], [3, 3]).unwrap();
        let d = Dictionary::random(g.atom_len(), 2, 1).unwrap();
        let m = coding::random_mask(6, 6, 2, coding::MaskSeed(0)).unwrap();
        let rec = dict_reconstruct(&Tensor5::zeros([3, 3, 6, 6, 1]), &m, &d, &g, 0.1, 20).unwrap();
        assert!(rec.data().iter().all(|&x| x == 0.0));
    }
}
