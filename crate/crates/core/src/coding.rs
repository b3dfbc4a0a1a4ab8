//! Spatio-spectral coding: one-hot masks, coding, spectral projection and
//! lifting of the projection back to the coded light field.

use crate::rng::{self, streams};
use crate::{Error, Result, Tensor5};

/// Binary spectral mask `M[s,t,λ]` with exactly one open channel per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct CodingMask {
    dims: [usize; 3],
    data: Vec<f32>,
}

/// Seed of the deterministic mask generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct MaskSeed(pub u64);

impl CodingMask {
    /// All channels open. Only one-hot when `Λ = 1`.
    pub fn all_pass(dims: [usize; 3]) -> Self {
        CodingMask {
            dims,
            data: vec![1.0; dims.iter().product()],
        }
    }

    /// Build from an explicit channel index per pixel (row major over `(s,t)`).
    pub fn from_channels(s: usize, t: usize, lambda: usize, channels: &[usize]) -> Result<Self> {
        if channels.len() != s * t {
            return Err(Error::dims(format!(
                "{} channel indices for a {s}x{t} mask",
                channels.len()
            )));
        }
        let mut data = vec![0.0; s * t * lambda];
        for (p, &c) in channels.iter().enumerate() {
            if c >= lambda {
                return Err(Error::arg(format!("channel {c} out of range 0..{lambda}")));
            }
            data[p * lambda + c] = 1.0;
        }
        Ok(CodingMask {
            dims: [s, t, lambda],
            data,
        })
    }

    /// Wrap a raw binary mask. Entries must be exactly 0 or 1 but need not be
    /// one-hot; see [`CodingMask::check_one_hot`].
    pub fn from_vec(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::dims(format!(
                "mask buffer of {} values for dims {:?}",
                data.len(),
                dims
            )));
        }
        if let Some(i) = data.iter().position(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::Malformed(format!(
                "mask value {} at index {i} is not binary",
                data[i]
            )));
        }
        Ok(CodingMask { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, s: usize, t: usize, l: usize) -> f32 {
        self.data[(s * self.dims[1] + t) * self.dims[2] + l]
    }

    /// Open channel at `(s, t)`, if the pixel is one-hot.
    pub fn channel(&self, s: usize, t: usize) -> Option<usize> {
        let l = self.dims[2];
        let px = &self.data[(s * self.dims[1] + t) * l..][..l];
        let mut open = px.iter().enumerate().filter(|(_, &x)| x == 1.0);
        match (open.next(), open.next()) {
            (Some((c, _)), None) => Some(c),
            _ => None,
        }
    }

    pub fn is_one_hot(&self) -> bool {
        self.check_one_hot().is_ok()
    }

    pub fn check_one_hot(&self) -> Result<()> {
        let [s, t, _] = self.dims;
        for si in 0..s {
            for ti in 0..t {
                if self.channel(si, ti).is_none() {
                    return Err(Error::NotOneHot { s: si, t: ti });
                }
            }
        }
        Ok(())
    }

    /// Stored as a `(1, 1, S, T, Λ)` tensor.
    pub fn to_tensor(&self) -> Tensor5 {
        let [s, t, l] = self.dims;
        Tensor5::from_vec([1, 1, s, t, l], self.data.clone()).expect("mask values are finite")
    }

    pub fn from_tensor(t: &Tensor5) -> Result<Self> {
        match t.dims() {
            [1, 1, s, tt, l] => CodingMask::from_vec([s, tt, l], t.data().to_vec()),
            d => Err(Error::dims(format!("mask must have dims (1,1,S,T,Λ), got {d:?}"))),
        }
    }

    /// Broadcast the mask over the angular axes, `m ⊙ x` in place.
    pub(crate) fn apply_in_place(&self, x: &mut [f32], angular: usize) {
        let px = self.data.len();
        debug_assert_eq!(x.len(), angular * px);
        for view in x.chunks_exact_mut(px) {
            for (v, &m) in view.iter_mut().zip(&self.data) {
                if m == 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Draw a one-hot mask: every pixel, in row-major `(s, t)` order, opens channel
/// `index_below(next_u64, Λ)` of the ChaCha8 stream `(seed, MASK)`.
pub fn random_mask(s: usize, t: usize, lambda: usize, seed: MaskSeed) -> Result<CodingMask> {
    if s == 0 || t == 0 || lambda == 0 {
        return Err(Error::arg(format!("mask dims ({s}, {t}, {lambda}) must be positive")));
    }
    let mut rng = rng::stream(seed.0, streams::MASK);
    let channels: Vec<usize> = (0..s * t).map(|_| rng::index_below(&mut rng, lambda)).collect();
    CodingMask::from_channels(s, t, lambda, &channels)
}

fn check_mask_dims(l: &Tensor5, m: &CodingMask) -> Result<()> {
    let [_, _, s, t, k] = l.dims();
    if [s, t, k] != m.dims() {
        return Err(Error::dims(format!(
            "light field spatial/spectral dims {:?} do not match mask {:?}",
            [s, t, k],
            m.dims()
        )));
    }
    Ok(())
}

/// `L*[u,v,s,t,λ] = M[s,t,λ] · L[u,v,s,t,λ]`.
///
/// Masked entries are written as `+0.0` and open entries are copied, which is
/// the product for a binary mask without producing `-0.0`.
pub fn encode(l: &Tensor5, m: &CodingMask) -> Result<Tensor5> {
    check_mask_dims(l, m)?;
    let [u, v, ..] = l.dims();
    let mut out = l.clone();
    m.apply_in_place(out.data_mut(), u * v);
    Ok(out)
}

/// Sum over the spectral axis; the result has `Λ = 1`.
pub fn project(l_star: &Tensor5) -> Tensor5 {
    let [u, v, s, t, k] = l_star.dims();
    let data = l_star
        .data()
        .chunks_exact(k)
        .map(|px| px.iter().fold(0.0f32, |acc, &x| acc + x))
        .collect();
    Tensor5::from_vec([u, v, s, t, 1], data).expect("sum of finite values")
}

/// Place each projected value back into the channel the mask opens at that
/// pixel. Exact inverse of [`project`] on fields coded with `m`.
pub fn lift(lp: &Tensor5, m: &CodingMask) -> Result<Tensor5> {
    let [u, v, s, t, one] = lp.dims();
    if one != 1 {
        return Err(Error::dims(format!("projection must have Λ = 1, got {one}")));
    }
    let [ms, mt, k] = m.dims();
    if [s, t] != [ms, mt] {
        return Err(Error::dims(format!(
            "projection spatial dims {:?} do not match mask {:?}",
            [s, t],
            [ms, mt]
        )));
    }
    let mut channels = Vec::with_capacity(s * t);
    for si in 0..s {
        for ti in 0..t {
            channels.push(m.channel(si, ti).ok_or(Error::NotOneHot { s: si, t: ti })?);
        }
    }
    let mut out = Tensor5::zeros([u, v, s, t, k]);
    let px = s * t;
    let dst = out.data_mut();
    for (i, &val) in lp.data().iter().enumerate() {
        dst[i * k + channels[i % px]] = val;
    }
    Ok(out)
}
