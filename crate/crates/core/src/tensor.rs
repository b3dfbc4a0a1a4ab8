//! Dense light-field tensors and the LF5D container format.
//!
//! Index order is `[u][v][s][t][λ]`, row major with the spectral index
//! fastest. The same container stores light fields, coding masks (`U = V = 1`),
//! central views (`U = V = 1`) and disparity maps (`U = V = Λ = 1`).
//!
//! LF5D layout, all little endian:
//!
//! | bytes | content                         |
//! |-------|---------------------------------|
//! | 4     | magic `LF5D`                    |
//! | 2     | version `u16` = 1               |
//! | 20    | dims `U, V, S, T, Λ` as `u32`   |
//! | 4·N   | `f32` payload in index order    |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

pub const LF5D_MAGIC: [u8; 4] = *b"LF5D";
pub const LF5D_VERSION: u16 = 1;
pub const LF5D_HEADER_LEN: usize = 4 + 2 + 5 * 4;

/// Dense 5D `f32` radiance tensor `L[u,v,s,t,λ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5 {
    dims: [usize; 5],
    data: Vec<f32>,
}

impl Tensor5 {
    pub fn zeros(dims: [usize; 5]) -> Self {
        Tensor5 {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn filled(dims: [usize; 5], value: f32) -> Self {
        Tensor5 {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    /// Wrap an existing buffer. Fails if the length does not match `dims` or
    /// a value is not finite.
    pub fn from_vec(dims: [usize; 5], data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::dims(format!(
                "buffer of {} values for dims {:?} ({} expected)",
                data.len(),
                dims,
                n
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Tensor5 { dims, data })
    }

    pub fn from_fn(dims: [usize; 5], mut f: impl FnMut([usize; 5]) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for u in 0..dims[0] {
            for v in 0..dims[1] {
                for s in 0..dims[2] {
                    for t in 0..dims[3] {
                        for l in 0..dims[4] {
                            data.push(f([u, v, s, t, l]));
                        }
                    }
                }
            }
        }
        Tensor5 { dims, data }
    }

    pub fn dims(&self) -> [usize; 5] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Flat offset of `(u,v,s,t,λ)`.
    #[inline]
    pub fn offset(&self, idx: [usize; 5]) -> usize {
        linear_index(self.dims, idx)
    }

    #[inline]
    pub fn get(&self, idx: [usize; 5]) -> f32 {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 5], value: f32) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Sub-aperture view at angular position `(u, v)`.
    pub fn view(&self, u: usize, v: usize) -> CentralView {
        let [_, _, s, t, l] = self.dims;
        let start = self.offset([u, v, 0, 0, 0]);
        CentralView {
            dims: [s, t, l],
            data: self.data[start..start + s * t * l].to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(LF5D_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&LF5D_MAGIC);
        out.extend_from_slice(&LF5D_VERSION.to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < LF5D_HEADER_LEN {
            return Err(Error::Truncated {
                expected: LF5D_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != LF5D_MAGIC {
            return Err(Error::BadMagic {
                expected: LF5D_MAGIC,
                found: magic,
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != LF5D_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut dims = [0usize; 5];
        for (i, d) in dims.iter_mut().enumerate() {
            let o = 6 + 4 * i;
            *d = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Malformed(format!("dims {dims:?} overflow")))?;
        let payload = &bytes[LF5D_HEADER_LEN..];
        if payload.len() < n {
            return Err(Error::Truncated {
                expected: n,
                found: payload.len(),
            });
        }
        if payload.len() > n {
            return Err(Error::TrailingBytes(payload.len() - n));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor5::from_vec(dims, data)
    }
}

/// Flat offset `((((u·V+v)·S+s)·T+t)·Λ+λ)`.
#[inline]
pub fn linear_index(dims: [usize; 5], idx: [usize; 5]) -> usize {
    debug_assert!(idx.iter().zip(&dims).all(|(i, d)| i < d));
    (((idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]) * dims[3] + idx[3]) * dims[4] + idx[4]
}

/// Inverse of [`linear_index`].
pub fn unravel_index(dims: [usize; 5], mut offset: usize) -> [usize; 5] {
    let mut idx = [0usize; 5];
    for a in (0..5).rev() {
        idx[a] = offset % dims[a];
        offset /= dims[a];
    }
    idx
}

pub fn read_lf5d(path: impl AsRef<Path>) -> Result<Tensor5> {
    let bytes = fs::read(path)?;
    Tensor5::from_bytes(&bytes)
}

pub fn write_lf5d(t: &Tensor5, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&t.to_bytes())?;
    Ok(())
}

/// Central sub-aperture `I_c[s,t,λ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralView {
    dims: [usize; 3],
    data: Vec<f32>,
}

impl CentralView {
    pub fn zeros(dims: [usize; 3]) -> Self {
        CentralView {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::dims(format!(
                "central view buffer of {} values for dims {:?}",
                data.len(),
                dims
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(CentralView { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, s: usize, t: usize, l: usize) -> f32 {
        self.data[(s * self.dims[1] + t) * self.dims[2] + l]
    }

    /// Stored as a `(1, 1, S, T, Λ)` tensor.
    pub fn to_tensor(&self) -> Tensor5 {
        let [s, t, l] = self.dims;
        Tensor5 {
            dims: [1, 1, s, t, l],
            data: self.data.clone(),
        }
    }

    /// Accepts a `(1, 1, S, T, Λ)` tensor, or slices the central view out of
    /// a full light field.
    pub fn from_tensor(t: &Tensor5) -> Result<Self> {
        let [u, v, ..] = t.dims();
        if u == 1 && v == 1 {
            Ok(t.view(0, 0))
        } else {
            slice_central_view(t)
        }
    }
}

/// Disparity map `D_c[s,t]` in pixels per angular step.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    dims: [usize; 2],
    data: Vec<f32>,
}

impl DisparityMap {
    pub fn filled(dims: [usize; 2], value: f32) -> Self {
        DisparityMap {
            dims,
            data: vec![value; dims[0] * dims[1]],
        }
    }

    pub fn from_vec(dims: [usize; 2], data: Vec<f32>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] {
            return Err(Error::dims(format!(
                "disparity buffer of {} values for dims {:?}",
                data.len(),
                dims
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(DisparityMap { dims, data })
    }

    pub fn dims(&self) -> [usize; 2] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, s: usize, t: usize) -> f32 {
        self.data[s * self.dims[1] + t]
    }

    /// Stored as a `(1, 1, S, T, 1)` tensor.
    pub fn to_tensor(&self) -> Tensor5 {
        Tensor5 {
            dims: [1, 1, self.dims[0], self.dims[1], 1],
            data: self.data.clone(),
        }
    }

    pub fn from_tensor(t: &Tensor5) -> Result<Self> {
        match t.dims() {
            [1, 1, s, tt, 1] => DisparityMap::from_vec([s, tt], t.data().to_vec()),
            d => Err(Error::dims(format!(
                "disparity must have dims (1,1,S,T,1), got {d:?}"
            ))),
        }
    }
}

/// Extract the central sub-aperture at `(⌊U/2⌋, ⌊V/2⌋)`. Even angular
/// resolutions have no central view and are rejected.
pub fn slice_central_view(l: &Tensor5) -> Result<CentralView> {
    let [u, v, ..] = l.dims();
    if u % 2 == 0 || v % 2 == 0 {
        return Err(Error::dims(format!(
            "angular dims ({u}, {v}) must be odd to define a central view"
        )));
    }
    Ok(l.view(u / 2, v / 2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reads_hand_built_file() {
        let mut bytes = b"LF5D".to_vec();
        bytes.extend_from_slice(&1u16.to_le_bytes());
        for d in [1u32, 1, 2, 2, 1] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        for x in [0f32, 1., 2., 3.] {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let t = Tensor5::from_bytes(&bytes).unwrap();
        assert_eq!(t.dims(), [1, 1, 2, 2, 1]);
        assert_eq!(t.data(), &[0., 1., 2., 3.]);
    }

    #[test]
    fn zero_tensor_file_size() {
        let t = Tensor5::zeros([1, 1, 1, 1, 1]);
        assert_eq!(t.to_bytes().len(), LF5D_HEADER_LEN + 4);
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = Tensor5::zeros([1, 1, 2, 2, 1]).to_bytes();
        let err = Tensor5::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Truncated { expected: 16, found: 15 }));
        let err = Tensor5::from_bytes(&bytes[..10]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }));
    }

    #[test]
    fn bad_magic_and_non_finite_rejected() {
        let mut bytes = Tensor5::zeros([1, 1, 1, 1, 2]).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Tensor5::from_bytes(&bytes),
            Err(Error::BadMagic { .. })
        ));
        let mut bytes = Tensor5::zeros([1, 1, 1, 1, 2]).to_bytes();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(Tensor5::from_bytes(&bytes), Err(Error::NonFinite(1))));
        let mut bytes = Tensor5::zeros([1, 1, 1, 1, 1]).to_bytes();
        bytes[4] = 2;
        assert!(matches!(
            Tensor5::from_bytes(&bytes),
            Err(Error::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn file_overwrite_succeeds() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.lf5d");
        write_lf5d(&Tensor5::filled([1, 1, 3, 3, 1], 2.0), &p).unwrap();
        let t = Tensor5::filled([1, 2, 1, 1, 1], -1.5);
        write_lf5d(&t, &p).unwrap();
        assert_eq!(read_lf5d(&p).unwrap(), t);
    }

    #[test]
    fn central_view_slicing() {
        let l = Tensor5::from_fn([9, 9, 2, 3, 2], |[u, v, s, t, k]| {
            (u * 10000 + v * 1000 + s * 100 + t * 10 + k) as f32
        });
        let cv = slice_central_view(&l).unwrap();
        assert_eq!(cv.dims(), [2, 3, 2]);
        assert_eq!(cv.get(1, 2, 1), 44121.0);

        let single = Tensor5::from_fn([1, 1, 2, 2, 3], |[_, _, s, t, k]| (s + t + k) as f32);
        assert_eq!(slice_central_view(&single).unwrap().data(), single.data());

        let c = Tensor5::filled([3, 5, 4, 4, 2], 0.25);
        assert!(slice_central_view(&c)
            .unwrap()
            .data()
            .iter()
            .all(|&x| x == 0.25));

        assert!(slice_central_view(&Tensor5::zeros([2, 3, 1, 1, 1])).is_err());
    }

    proptest! {
        #[test]
        fn index_linearization_is_bijective(
            dims in prop::array::uniform5(1usize..6),
            seed in any::<usize>(),
        ) {
            let n: usize = dims.iter().product();
            let off = seed % n;
            let idx = unravel_index(dims, off);
            prop_assert_eq!(linear_index(dims, idx), off);
        }

        #[test]
        fn byte_round_trip_preserves_bits(
            dims in prop::array::uniform5(1usize..4),
            vals in prop::collection::vec(-1e30f32..1e30, 243),
        ) {
            let n: usize = dims.iter().product();
            let t = Tensor5::from_vec(dims, vals[..n].to_vec()).unwrap();
            let back = Tensor5::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
