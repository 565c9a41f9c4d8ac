//! PSNR and SSIM.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math methods when built without std
use num_traits::Float;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Side of the SSIM Gaussian window.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Stabilizers for unit-range images: `(0.01)²` and `(0.03)²`.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", a.shape(), b.shape()));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// `10·log10(max² / MSE)` in dB; identical inputs give `f64::INFINITY`.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / m).log10())
}

/// ITU-R BT.601 luma of a 3×H×W image, as H×W values.
pub fn luma<T: Real>(x: &Tensor<T>) -> Result<(Vec<f64>, usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid("luma", "expects a 3×H×W image"));
    }
    let (h, w) = (s[1], s[2]);
    let d = x.data();
    let n = h * w;
    Ok((
        (0..n)
            .map(|i| 0.299 * d[i].as_f64() + 0.587 * d[n + i].as_f64() + 0.114 * d[2 * n + i].as_f64())
            .collect(),
        h,
        w,
    ))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_1d(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut g: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-mode filtering of an H×W plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            let mut s = 0.0;
            for (j, &gv) in g.iter().enumerate() {
                s += gv * x[y * w + xo + j];
            }
            rows[y * ow + xo] = s;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            let mut s = 0.0;
            for (i, &gv) in g.iter().enumerate() {
                s += gv * rows[(yo + i) * ow + xo];
            }
            out[yo * ow + xo] = s;
        }
    }
    out
}

/// Mean SSIM over all valid 11×11 Gaussian windows of the luma planes.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let (ya, h, w) = luma(a)?;
    let (yb, _, _) = luma(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            alloc::format!("image {}x{} smaller than the {}-pixel window", h, w, SSIM_WINDOW),
        ));
    }
    let g = gaussian_1d(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(&ya, h, w, &g);
    let mu_b = filter_valid(&yb, h, w, &g);
    let aa = filter_valid(&prod(&ya, &ya), h, w, &g);
    let bb = filter_valid(&prod(&yb, &yb), h, w, &g);
    let ab = filter_valid(&prod(&ya, &yb), h, w, &g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        total += num / den;
    }
    Ok(total / n as f64)
}
