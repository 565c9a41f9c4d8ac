//! Restoration of arbitrarily sized images.

use anyhow::ensure;
use promptrr_core::pipeline::{Models, Weights};
use promptrr_core::synth::reflect;
use promptrr_core::Tensor;

/// Mirror-pad the bottom and right edges of a `C×H×W` image to `h × w`.
pub fn reflect_pad(img: &Tensor<f32>, h: usize, w: usize) -> anyhow::Result<Tensor<f32>> {
    let s = img.shape();
    ensure!(s.len() == 3 && h >= s[1] && w >= s[2], "cannot pad {s:?} to {h}×{w}");
    let (ih, iw) = (s[1], s[2]);
    Ok(Tensor::from_fn(&[s[0], h, w], |i| {
        let (c, y, x) = (i / (h * w), i / w % h, i % w);
        img.at3(c, reflect(y as isize, ih), reflect(x as isize, iw))
    }))
}

/// Top-left `h × w` window.
pub fn crop(img: &Tensor<f32>, h: usize, w: usize) -> anyhow::Result<Tensor<f32>> {
    let s = img.shape();
    ensure!(s.len() == 3 && h <= s[1] && w <= s[2], "cannot crop {h}×{w} from {s:?}");
    Ok(Tensor::from_fn(&[s[0], h, w], |i| img.at3(i / (h * w), i / w % h, i % w)))
}

/// Restore `input`, padding it up to the size the network accepts and
/// cropping the result back.
pub fn restore(models: &Models, weights: &Weights<f32>, input: &Tensor<f32>, seed: u64) -> anyhow::Result<Tensor<f32>> {
    let s = input.shape();
    ensure!(s.len() == 3 && s[0] == 3, "expected a 3×H×W image, got {s:?}");
    let m = models.cfg.former.size_multiple().max(2);
    let up = |n: usize| n.div_ceil(m) * m;
    let (h, w) = (s[1], s[2]);
    if h % m == 0 && w % m == 0 {
        return Ok(models.infer(weights, input, seed)?);
    }
    let padded = reflect_pad(input, up(h), up(w))?;
    crop(&models.infer(weights, &padded, seed)?, h, w)
}
