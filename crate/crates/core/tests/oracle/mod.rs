//! Direct-sum reference implementations, written without reusing library
//! helpers.
#![allow(dead_code, clippy::needless_range_loop)]

use promptrr_core::Tensor;

/// Mirror index without edge repetition, by walking back and forth.
fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Full 2-D Gaussian normalized over the whole square.
pub fn gaussian_2d(size: usize, sigma: f64) -> Vec<Vec<f64>> {
    let r = (size / 2) as f64;
    let mut k: Vec<Vec<f64>> = (0..size)
        .map(|i| {
            (0..size)
                .map(|j| {
                    let (dy, dx) = (i as f64 - r, j as f64 - r);
                    (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
                })
                .collect()
        })
        .collect();
    let total: f64 = k.iter().flatten().sum();
    k.iter_mut().flatten().for_each(|v| *v /= total);
    k
}

/// `B + w · (R ∗ K)` by direct summation with reflect padding.
pub fn composite(b: &Tensor<f32>, r: &Tensor<f32>, size: usize, sigma: f64, w: f64) -> Vec<f64> {
    let (c, h, wd) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    let k = gaussian_2d(size, sigma);
    let rad = (size / 2) as isize;
    let mut out = vec![0.0; c * h * wd];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..wd {
                let mut acc = 0.0;
                for (i, row) in k.iter().enumerate() {
                    for (j, kv) in row.iter().enumerate() {
                        let sy = mirror(y as isize + i as isize - rad, h);
                        let sx = mirror(x as isize + j as isize - rad, wd);
                        acc += kv * r.at3(ch, sy, sx) as f64;
                    }
                }
                out[(ch * h + y) * wd + x] = b.at3(ch, y, x) as f64 + w * acc;
            }
        }
    }
    out
}

/// Mean SSIM of the BT.601 luma over all valid 11×11 windows, with
/// two-pass window statistics.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let luma = |t: &Tensor<f32>, y: usize, x: usize| {
        0.299 * t.at3(0, y, x) as f64 + 0.587 * t.at3(1, y, x) as f64 + 0.114 * t.at3(2, y, x) as f64
    };
    let k = gaussian_2d(11, 1.5);
    let (c1, c2) = (0.0001, 0.0009);
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    ma += k[i][j] * luma(a, y0 + i, x0 + j);
                    mb += k[i][j] * luma(b, y0 + i, x0 + j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let da = luma(a, y0 + i, x0 + j) - ma;
                    let db = luma(b, y0 + i, x0 + j) - mb;
                    va += k[i][j] * da * da;
                    vb += k[i][j] * db * db;
                    cov += k[i][j] * da * db;
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}
