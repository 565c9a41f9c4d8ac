//! Single-level orthonormal 2-D Haar transform.
//!
//! For each 2×2 block `[a b; c d]`:
//!
//! ```text
//! ll = (a + b + c + d) / 2     lh = (a - b + c - d) / 2
//! hl = (a + b - c - d) / 2     hh = (a - b - c + d) / 2
//! ```
//!
//! `lh` responds to horizontal change (vertical edges), `hl` to vertical
//! change (horizontal edges). The transform is its own transpose, so energy is
//! preserved and the inverse is exact.

use alloc::vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// The four sub-bands of one decomposition level, each C×H/2×W/2.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBands<T> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

fn chw(x: &Tensor<impl Real>, op: &'static str) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::invalid(op, "expects a C×H×W tensor"));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

/// Forward transform. Rejects odd spatial sizes.
pub fn wt<T: Real>(x: &Tensor<T>) -> Result<WaveletBands<T>> {
    let (c, h, w) = chw(x, "wt")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "wt",
            alloc::format!("spatial size {}x{} must be even", h, w),
        ));
    }
    let (h2, w2) = (h / 2, w / 2);
    let n = c * h2 * w2;
    let (mut ll, mut lh, mut hl, mut hh) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    let half = T::from_f64(0.5);
    let d = x.data();
    for ci in 0..c {
        for i in 0..h2 {
            let r0 = (ci * h + 2 * i) * w;
            let r1 = r0 + w;
            for j in 0..w2 {
                let a = d[r0 + 2 * j];
                let b = d[r0 + 2 * j + 1];
                let cc = d[r1 + 2 * j];
                let dd = d[r1 + 2 * j + 1];
                let k = (ci * h2 + i) * w2 + j;
                ll[k] = (a + b + cc + dd) * half;
                lh[k] = (a - b + cc - dd) * half;
                hl[k] = (a + b - cc - dd) * half;
                hh[k] = (a - b - cc + dd) * half;
            }
        }
    }
    let s = [c, h2, w2];
    Ok(WaveletBands {
        ll: Tensor::new(&s, ll)?,
        lh: Tensor::new(&s, lh)?,
        hl: Tensor::new(&s, hl)?,
        hh: Tensor::new(&s, hh)?,
    })
}

/// Inverse transform.
pub fn iwt<T: Real>(bands: &WaveletBands<T>) -> Result<Tensor<T>> {
    let (c, h2, w2) = chw(&bands.ll, "iwt")?;
    for b in [&bands.lh, &bands.hl, &bands.hh] {
        if b.shape() != bands.ll.shape() {
            return Err(Error::shape("iwt", bands.ll.shape(), b.shape()));
        }
    }
    let (h, w) = (2 * h2, 2 * w2);
    let mut out = vec![T::zero(); c * h * w];
    let half = T::from_f64(0.5);
    let (ll, lh, hl, hh) = (bands.ll.data(), bands.lh.data(), bands.hl.data(), bands.hh.data());
    for ci in 0..c {
        for i in 0..h2 {
            let r0 = (ci * h + 2 * i) * w;
            let r1 = r0 + w;
            for j in 0..w2 {
                let k = (ci * h2 + i) * w2 + j;
                let (s, x, y, z) = (ll[k], lh[k], hl[k], hh[k]);
                out[r0 + 2 * j] = (s + x + y + z) * half;
                out[r0 + 2 * j + 1] = (s - x + y - z) * half;
                out[r1 + 2 * j] = (s + x - y - z) * half;
                out[r1 + 2 * j + 1] = (s - x - y + z) * half;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Low-frequency image (`ll`, C channels) and high-frequency image
/// (`[lh, hl, hh]` stacked, 3C channels).
pub fn split_freq<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let b = wt(x)?;
    let hf = Tensor::concat0(&[&b.lh, &b.hl, &b.hh])?;
    Ok((b.ll, hf))
}

/// Inverse of [`split_freq`].
pub fn merge_freq<T: Real>(lf: &Tensor<T>, hf: &Tensor<T>) -> Result<Tensor<T>> {
    let c = lf.shape().first().copied().unwrap_or(0);
    if hf.rank() != 3 || lf.rank() != 3 || hf.shape()[0] != 3 * c || hf.shape()[1..] != lf.shape()[1..] {
        return Err(Error::shape("merge_freq", lf.shape(), hf.shape()));
    }
    iwt(&WaveletBands {
        ll: lf.clone(),
        lh: hf.slice0(0, c)?,
        hl: hf.slice0(c, c)?,
        hh: hf.slice0(2 * c, c)?,
    })
}
