//! Synthetic reflection data: `Q = clamp(B + w · (R ∗ K), 0, 1)` with `K` a
//! normalized Gaussian and `∗` a 2-D convolution with reflect padding.
//!
//! Background and reflection layers are procedurally generated scenes made
//! of smooth colour gradients overlaid with random rectangles and ellipses.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math methods when built without std
use num_traits::Float;

use crate::error::{Error, Result};
use crate::metrics::gaussian_1d;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Reflection-contaminated input and its clean background, in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub input: Tensor<f32>,
    pub gt: Tensor<f32>,
    pub reflection: Option<Tensor<f32>>,
    pub kernel: Option<Vec<f64>>,
    pub weight: Option<f64>,
}

impl ImagePair {
    pub fn new(input: Tensor<f32>, gt: Tensor<f32>) -> Result<Self> {
        if input.shape() != gt.shape() {
            return Err(Error::shape("image_pair", input.shape(), gt.shape()));
        }
        Ok(ImagePair {
            input,
            gt,
            reflection: None,
            kernel: None,
            weight: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub kernel_size: usize,
    pub sigma_range: (f64, f64),
    pub weight_range: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            kernel_size: 11,
            sigma_range: (1.0, 3.0),
            weight_range: (0.2, 0.8),
        }
    }
}

/// Normalized 1-D Gaussian; the 2-D kernel is its outer product.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size.is_multiple_of(2) || sigma <= 0.0 {
        return Err(Error::invalid("gaussian_kernel", "size must be odd and sigma positive"));
    }
    Ok(gaussian_1d(size, sigma))
}

/// Mirror an index into `0..n` without repeating the edge sample.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Separable blur of every channel with reflect padding.
pub fn blur(x: &Tensor<f32>, taps: &[f64]) -> Result<Tensor<f32>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::invalid("blur", "expects C×H×W"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let r = (taps.len() / 2) as isize;
    let d = x.data();
    let mut tmp = vec![0.0f64; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (j, &t) in taps.iter().enumerate() {
                    let sx = reflect(xx as isize + j as isize - r, w);
                    acc += t * d[(ci * h + y) * w + sx] as f64;
                }
                tmp[(ci * h + y) * w + xx] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (i, &t) in taps.iter().enumerate() {
                    let sy = reflect(y as isize + i as isize - r, h);
                    acc += t * tmp[(ci * h + sy) * w + xx];
                }
                out[(ci * h + y) * w + xx] = acc as f32;
            }
        }
    }
    Tensor::new(s, out)
}

/// `B + weight · (R ∗ K)` before clamping.
pub fn composite(b: &Tensor<f32>, r: &Tensor<f32>, taps: &[f64], weight: f64) -> Result<Tensor<f32>> {
    if b.shape() != r.shape() {
        return Err(Error::shape("synthesize", b.shape(), r.shape()));
    }
    let blurred = blur(r, taps)?;
    b.zip_map(&blurred, |bv, rv| bv + weight as f32 * rv)
}

/// Compose an input image from background `b` and reflection `r`, drawing
/// the blur width and reflection strength from `spec`.
pub fn synthesize(b: &Tensor<f32>, r: &Tensor<f32>, spec: &SynthSpec, rng: &mut Rng) -> Result<ImagePair> {
    let sigma = rng.uniform_in(spec.sigma_range.0, spec.sigma_range.1);
    let weight = rng.uniform_in(spec.weight_range.0, spec.weight_range.1);
    let taps = gaussian_kernel(spec.kernel_size, sigma)?;
    synthesize_with(b, r, taps, weight)
}

pub fn synthesize_with(b: &Tensor<f32>, r: &Tensor<f32>, taps: Vec<f64>, weight: f64) -> Result<ImagePair> {
    let q = composite(b, r, &taps, weight)?.map(|v| v.clamp(0.0, 1.0));
    Ok(ImagePair {
        input: q,
        gt: b.clone(),
        reflection: Some(r.clone()),
        kernel: Some(taps),
        weight: Some(weight),
    })
}

/// Random RGB scene in `[0, 1]`: a linear colour gradient plus a few
/// rectangles and ellipses.
pub fn random_scene(rng: &mut Rng, h: usize, w: usize) -> Tensor<f32> {
    let mut img = vec![0.0f32; 3 * h * w];
    let c0: [f64; 3] = core::array::from_fn(|_| rng.uniform_in(0.1, 0.9));
    let c1: [f64; 3] = core::array::from_fn(|_| rng.uniform_in(0.1, 0.9));
    let angle = rng.uniform_in(0.0, core::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let norm = (h.max(w)) as f64;
    for y in 0..h {
        for x in 0..w {
            let t = (((x as f64 - w as f64 / 2.0) * dx + (y as f64 - h as f64 / 2.0) * dy) / norm + 0.5).clamp(0.0, 1.0);
            for ch in 0..3 {
                img[(ch * h + y) * w + x] = (c0[ch] * (1.0 - t) + c1[ch] * t) as f32;
            }
        }
    }
    let shapes = 2 + rng.below(4);
    for _ in 0..shapes {
        let color: [f64; 3] = core::array::from_fn(|_| rng.uniform());
        let cy = rng.uniform_in(0.0, h as f64);
        let cx = rng.uniform_in(0.0, w as f64);
        let ry = rng.uniform_in(0.08, 0.35) * h as f64;
        let rx = rng.uniform_in(0.08, 0.35) * w as f64;
        let ellipse = rng.uniform() < 0.5;
        for y in 0..h {
            for x in 0..w {
                let (u, v) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if ellipse { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if inside {
                    for ch in 0..3 {
                        img[(ch * h + y) * w + x] = color[ch] as f32;
                    }
                }
            }
        }
    }
    Tensor::new(&[3, h, w], img).expect("shape matches buffer")
}

/// One synthetic training pair from a seeded generator.
pub fn random_pair(rng: &mut Rng, h: usize, w: usize, spec: &SynthSpec) -> Result<ImagePair> {
    let b = random_scene(rng, h, w);
    let r = random_scene(rng, h, w);
    synthesize(&b, &r, spec, rng)
}
