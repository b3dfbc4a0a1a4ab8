//! Orthonormal separable 5D DCT-II and the data-fidelity gradient of the
//! coded measurement model.
//!
//! The basis `Ψ` is never materialised: the analysis transform `Ψᵀ`
//! ([`dct5_forward`]) and the synthesis transform `Ψ` ([`dct5_inverse`]) run
//! axis by axis with a cached `n × n` cosine matrix per axis length.
//! Accumulation is done in `f64`.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::coding::CodingMask;
use crate::{Error, Result, Tensor5};

/// DCT coefficient vector `α` laid out like the light field it represents.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefTensor(Tensor5);

impl CoefTensor {
    pub fn new(t: Tensor5) -> Self {
        CoefTensor(t)
    }

    pub fn zeros(dims: [usize; 5]) -> Self {
        CoefTensor(Tensor5::zeros(dims))
    }

    pub fn dims(&self) -> [usize; 5] {
        self.0.dims()
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn as_tensor(&self) -> &Tensor5 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor5 {
        self.0
    }
}

/// Orthonormal DCT-II matrix, row `k` holds basis function `k`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for k in 0..n {
        let a = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            c[k * n + i] = a * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    c
}

/// Cached per-axis matrices for one tensor shape.
#[derive(Debug, Clone)]
pub struct Dct5 {
    dims: [usize; 5],
    mats: HashMap<usize, Vec<f64>>,
}

impl Dct5 {
    pub fn new(dims: [usize; 5]) -> Self {
        let mut mats = HashMap::new();
        for &n in &dims {
            if n > 1 {
                mats.entry(n).or_insert_with(|| dct_matrix(n));
            }
        }
        Dct5 { dims, mats }
    }

    pub fn dims(&self) -> [usize; 5] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `x ← Ψᵀ x`.
    pub fn forward(&self, x: &mut [f64]) {
        self.apply(x, false);
    }

    /// `x ← Ψ x`.
    pub fn inverse(&self, x: &mut [f64]) {
        self.apply(x, true);
    }

    fn apply(&self, x: &mut [f64], transpose: bool) {
        assert_eq!(x.len(), self.len());
        let mut fiber = Vec::new();
        let mut out = Vec::new();
        for axis in 0..5 {
            let n = self.dims[axis];
            if n == 1 {
                continue;
            }
            let c = &self.mats[&n];
            let inner: usize = self.dims[axis + 1..].iter().product();
            let outer: usize = self.dims[..axis].iter().product();
            fiber.resize(n, 0.0);
            out.resize(n, 0.0);
            for o in 0..outer {
                let base = o * n * inner;
                for i in 0..inner {
                    for (j, f) in fiber.iter_mut().enumerate() {
                        *f = x[base + j * inner + i];
                    }
                    if transpose {
                        out.iter_mut().for_each(|v| *v = 0.0);
                        for (k, &fk) in fiber.iter().enumerate() {
                            let row = &c[k * n..(k + 1) * n];
                            for (v, &ck) in out.iter_mut().zip(row) {
                                *v += ck * fk;
                            }
                        }
                    } else {
                        for (k, v) in out.iter_mut().enumerate() {
                            let row = &c[k * n..(k + 1) * n];
                            *v = row.iter().zip(&fiber).map(|(a, b)| a * b).sum();
                        }
                    }
                    for (j, v) in out.iter().enumerate() {
                        x[base + j * inner + i] = *v;
                    }
                }
            }
        }
    }
}

pub(crate) fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

pub(crate) fn to_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

/// Analysis transform `α = Ψᵀ l`.
pub fn dct5_forward(l: &Tensor5) -> CoefTensor {
    let plan = Dct5::new(l.dims());
    let mut x = to_f64(l.data());
    plan.forward(&mut x);
    CoefTensor(Tensor5::from_vec(l.dims(), to_f32(&x)).expect("finite transform"))
}

/// Synthesis transform `l = Ψ α`.
pub fn dct5_inverse(a: &CoefTensor) -> Tensor5 {
    let plan = Dct5::new(a.dims());
    let mut x = to_f64(a.data());
    plan.inverse(&mut x);
    Tensor5::from_vec(a.dims(), to_f32(&x)).expect("finite transform")
}

/// Fidelity term `f(α) = ‖l* − m ⊙ Ψα‖²` and its gradient
/// `2(Ψᵀ(m ⊙ Ψα) − Ψᵀ(m ⊙ l*))`, evaluated in `f64`.
///
/// `mask` is the broadcast mask over the whole light field (0/1 per entry)
/// and `target` is `m ⊙ l*`, both flattened.
pub(crate) fn fidelity_value_grad(
    plan: &Dct5,
    mask: &[bool],
    target: &[f64],
    alpha: &[f64],
    grad: &mut Vec<f64>,
) -> f64 {
    grad.clear();
    grad.extend_from_slice(alpha);
    plan.inverse(grad);
    let mut f = 0.0;
    for ((g, &m), &y) in grad.iter_mut().zip(mask).zip(target) {
        // m ⊙ Ψα − m ⊙ l*; unobserved entries do not contribute.
        let r = if m { *g - y } else { 0.0 };
        f += r * r;
        *g = 2.0 * r;
    }
    plan.forward(grad);
    f
}

pub(crate) fn broadcast_mask(dims: [usize; 5], m: &CodingMask) -> Result<Vec<bool>> {
    let [u, v, s, t, k] = dims;
    if m.dims() != [s, t, k] {
        return Err(Error::dims(format!(
            "mask dims {:?} do not match light field {:?}",
            m.dims(),
            dims
        )));
    }
    let px: Vec<bool> = m.data().iter().map(|&x| x != 0.0).collect();
    Ok((0..u * v).flat_map(|_| px.iter().copied()).collect())
}

/// `∇f(α)` for `f(α) = ‖l* − m ⊙ Ψα‖²`, where `l_star` is the coded
/// (non-projected) light field.
pub fn fidelity_gradient(a: &CoefTensor, l_star: &Tensor5, m: &CodingMask) -> Result<CoefTensor> {
    if a.dims() != l_star.dims() {
        return Err(Error::dims(format!(
            "coefficient dims {:?} do not match measurement {:?}",
            a.dims(),
            l_star.dims()
        )));
    }
    let mask = broadcast_mask(l_star.dims(), m)?;
    let plan = Dct5::new(a.dims());
    // M is diagonal and idempotent, so M l* is a plain masked copy.
    let target: Vec<f64> = l_star
        .data()
        .iter()
        .zip(&mask)
        .map(|(&y, &m)| if m { y as f64 } else { 0.0 })
        .collect();
    let mut grad = Vec::new();
    fidelity_value_grad(&plan, &mask, &target, &to_f64(a.data()), &mut grad);
    Ok(CoefTensor(Tensor5::from_vec(a.dims(), to_f32(&grad))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coding::{random_mask, MaskSeed};
    use crate::rng;

    fn random_tensor(dims: [usize; 5], seed: u64) -> Tensor5 {
        let mut r = rng::stream(seed, 42);
        Tensor5::from_fn(dims, |_| rng::normal(&mut r) as f32)
    }

    fn rel(a: &[f32], b: &[f32]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
        let den: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum();
        (num / den).sqrt()
    }

    #[test]
    fn constant_has_single_dc_coefficient() {
        let dims = [3, 3, 4, 4, 5];
        let c = 0.7f32;
        let a = dct5_forward(&Tensor5::filled(dims, c));
        let n = (dims.iter().product::<usize>() as f64).sqrt();
        assert!((a.data()[0] as f64 - c as f64 * n).abs() < 1e-4);
        assert!(a.data()[1..].iter().all(|x| x.abs() < 1e-5));
    }

    #[test]
    fn parseval_and_round_trip() {
        let l = random_tensor([3, 3, 8, 8, 5], 1);
        let a = dct5_forward(&l);
        assert!((a.as_tensor().norm() - l.norm()).abs() / l.norm() < 1e-5);
        assert!(rel(dct5_inverse(&a).data(), l.data()) < 1e-5);
        assert_eq!(dct5_inverse(&CoefTensor::zeros([2, 1, 3, 3, 2])), Tensor5::zeros([2, 1, 3, 3, 2]));
    }

    #[test]
    fn single_axis_mode_hits_one_coefficient() {
        // Direct O(n²) DCT oracle on (1,1,8,1,1).
        let n = 8;
        for k in 0..n {
            let l = Tensor5::from_fn([1, 1, n, 1, 1], |[_, _, s, _, _]| {
                (PI * (2 * s + 1) as f64 * k as f64 / (2 * n) as f64).cos() as f32
            });
            let direct: Vec<f64> = (0..n)
                .map(|kk| {
                    let a = if kk == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
                    (0..n)
                        .map(|s| {
                            a * (PI * (2 * s + 1) as f64 * kk as f64 / (2 * n) as f64).cos()
                                * l.data()[s] as f64
                        })
                        .sum()
                })
                .collect();
            let a = dct5_forward(&l);
            for kk in 0..n {
                assert!((a.data()[kk] as f64 - direct[kk]).abs() < 1e-5);
                if kk != k {
                    assert!(a.data()[kk].abs() < 1e-5);
                }
            }
            assert!(a.data()[k].abs() > 1.0);
        }
    }

    #[test]
    fn adjoint_identity() {
        let dims = [3, 3, 8, 8, 5];
        let alpha = CoefTensor::new(random_tensor(dims, 2));
        let l = random_tensor(dims, 3);
        let lhs: f64 = dct5_inverse(&alpha)
            .data()
            .iter()
            .zip(l.data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        let rhs: f64 = alpha
            .data()
            .iter()
            .zip(dct5_forward(&l).data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0));
    }

    #[test]
    fn gradient_vanishes_at_unconstrained_minimiser() {
        let dims = [1, 1, 4, 4, 1];
        let l = random_tensor(dims, 4);
        let m = CodingMask::all_pass([4, 4, 1]);
        let g = fidelity_gradient(&dct5_forward(&l), &l, &m).unwrap();
        assert!(g.data().iter().all(|x| x.abs() < 1e-5));
    }

    #[test]
    fn gradient_with_zero_measurement() {
        let dims = [1, 1, 4, 4, 3];
        let m = random_mask(4, 4, 3, MaskSeed(1)).unwrap();
        let alpha = CoefTensor::new(random_tensor(dims, 5));
        let g = fidelity_gradient(&alpha, &Tensor5::zeros(dims), &m).unwrap();
        let mut expect = dct5_inverse(&alpha);
        let [u, v, ..] = dims;
        m.apply_in_place(expect.data_mut(), u * v);
        let expect = dct5_forward(&expect);
        for (a, b) in g.data().iter().zip(expect.data()) {
            assert!((a - 2.0 * b).abs() < 1e-5);
        }
    }

    #[test]
    fn mask_is_a_projection() {
        let m = random_mask(4, 4, 3, MaskSeed(9)).unwrap();
        let mut x = random_tensor([2, 2, 4, 4, 3], 6);
        m.apply_in_place(x.data_mut(), 4);
        let once = x.clone();
        m.apply_in_place(x.data_mut(), 4);
        assert_eq!(x, once);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = random_mask(4, 4, 3, MaskSeed(1)).unwrap();
        let a = CoefTensor::zeros([1, 1, 4, 4, 3]);
        assert!(fidelity_gradient(&a, &Tensor5::zeros([1, 1, 4, 4, 2]), &m).is_err());
        let m2 = random_mask(4, 5, 3, MaskSeed(1)).unwrap();
        assert!(fidelity_gradient(&a, &Tensor5::zeros([1, 1, 4, 4, 3]), &m2).is_err());
    }
}
