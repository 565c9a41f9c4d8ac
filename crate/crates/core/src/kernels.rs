//! Slice-level numeric kernels shared by the tape and the plain-tensor code.
//!
//! All reductions run in a fixed order so results are bitwise reproducible.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// `sqrt(2/pi)`, the tanh-approximation constant of GELU.
pub const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044_715;

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub fn matmul_tn_acc<T: Real>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub fn matmul_nt_acc<T: Real>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let s = dot(grow, &b[p * n..(p + 1) * n]);
            out[i * k + p] = out[i * k + p] + s;
        }
    }
}

/// Dot product over eight interleaved partial sums, combined pairwise. The
/// order is fixed, so results do not depend on how the loop is compiled.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    const L: usize = 8;
    let mut acc = [T::zero(); L];
    let (ca, cb) = (a.chunks_exact(L), b.chunks_exact(L));
    let tail = ca.remainder().iter().zip(cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..L {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in tail {
        s = s + x * y;
    }
    s
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mx = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - mx).exp();
            s = s + *o;
        }
        let inv = T::one() / s;
        for o in or.iter_mut() {
            *o = *o * inv;
        }
    }
    out
}

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

#[inline]
pub fn leaky_relu<T: Real>(x: T) -> T {
    if x >= T::zero() {
        x
    } else {
        x * T::from_f64(LEAKY_SLOPE)
    }
}

/// Split a shape into `(outer, n, inner)` around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Unfold 3×3-style patches of a C×H×W image into `[(c·k·k) × (oh·ow)]` columns.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); c * k * k * oh * ow];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a C×H×W gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<T: Real>(
    cols: &[T],
    out: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            prow[ix as usize] = prow[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Valid destination range `lo..hi` for a tap offset `d ∈ {-1,0,1}` over length `n`.
#[inline]
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { n - 1 } else { n };
    (lo, hi)
}

/// Depthwise 3×3 correlation with zero padding 1.
pub fn dwconv3x3<T: Real>(x: &[T], wt: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (ylo, yhi) = tap_range(dy, h);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let (xlo, xhi) = tap_range(dx, w);
                let wv = wt[ci * 9 + ky * 3 + kx];
                for y in ylo..yhi {
                    let sy = (y as isize + dy) as usize;
                    let srow = &src[sy * w..(sy + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let sx0 = (xlo as isize + dx) as usize;
                    for (d, &s) in drow[xlo..xhi].iter_mut().zip(&srow[sx0..]) {
                        *d = *d + wv * s;
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`dwconv3x3`] with respect to input and weights.
#[allow(clippy::too_many_arguments)]
pub fn dwconv3x3_backward<T: Real>(
    x: &[T],
    wt: &[T],
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        for ci in 0..c {
            let gp = &g[ci * h * w..(ci + 1) * h * w];
            let dp = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (ylo, yhi) = tap_range(dy, h);
                for kx in 0..3 {
                    let dxo = kx as isize - 1;
                    let (xlo, xhi) = tap_range(dxo, w);
                    let wv = wt[ci * 9 + ky * 3 + kx];
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let grow = &gp[y * w..(y + 1) * w];
                        let drow = &mut dp[sy * w..(sy + 1) * w];
                        let sx0 = (xlo as isize + dxo) as usize;
                        for (d, &gv) in drow[sx0..].iter_mut().zip(&grow[xlo..xhi]) {
                            *d = *d + wv * gv;
                        }
                    }
                }
            }
        }
    }
    if let Some(dw) = dw {
        for ci in 0..c {
            let gp = &g[ci * h * w..(ci + 1) * h * w];
            let xp = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (ylo, yhi) = tap_range(dy, h);
                for kx in 0..3 {
                    let dxo = kx as isize - 1;
                    let (xlo, xhi) = tap_range(dxo, w);
                    let mut s = T::zero();
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let grow = &gp[y * w..(y + 1) * w];
                        let xrow = &xp[sy * w..(sy + 1) * w];
                        let sx0 = (xlo as isize + dxo) as usize;
                        for (&gv, &xv) in grow[xlo..xhi].iter().zip(&xrow[sx0..]) {
                            s = s + gv * xv;
                        }
                    }
                    dw[ci * 9 + ky * 3 + kx] = dw[ci * 9 + ky * 3 + kx] + s;
                }
            }
        }
    }
}

/// Source index range `[lo, hi)` averaged into output cell `i` when pooling `n` inputs to `m` cells.
#[inline]
pub fn pool_range(i: usize, n: usize, m: usize) -> (usize, usize) {
    let lo = (i * n) / m;
    let hi = ((i + 1) * n).div_ceil(m);
    (lo, hi)
}

pub fn adaptive_avg_pool<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); c * th * tw];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for i in 0..th {
            let (y0, y1) = pool_range(i, h, th);
            for j in 0..tw {
                let (x0, x1) = pool_range(j, w, tw);
                let mut s = 0.0f64;
                for y in y0..y1 {
                    for xv in &plane[y * w + x0..y * w + x1] {
                        s += xv.as_f64();
                    }
                }
                let cnt = ((y1 - y0) * (x1 - x0)) as f64;
                out[(ci * th + i) * tw + j] = T::from_f64(s / cnt);
            }
        }
    }
    out
}

/// Sum reduced in `f64`.
pub fn sum_f64<T: Real>(x: &[T]) -> f64 {
    x.iter().map(|v| v.as_f64()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_ranges_cover_input() {
        assert_eq!(pool_range(0, 4, 2), (0, 2));
        assert_eq!(pool_range(1, 4, 2), (2, 4));
        // overlapping windows when the size does not divide
        assert_eq!(pool_range(0, 5, 2), (0, 3));
        assert_eq!(pool_range(1, 5, 2), (2, 5));
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, k) = (2, 5, 4, 3);
        let (stride, pad) = (2, 1);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * k * k * oh * ow).map(|i| (i as f64 * 0.11).cos()).collect();
        let cols = im2col(&x, c, h, w, k, stride, pad, oh, ow);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; c * h * w];
        col2im_acc(&y, &mut back, c, h, w, k, stride, pad, oh, ow);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
