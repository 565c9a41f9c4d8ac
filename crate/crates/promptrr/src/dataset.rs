//! Paired image directories: `NNNN_input.ppm` next to `NNNN_gt.ppm`.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context};
use promptrr_core::rng::Rng;
use promptrr_core::synth::{random_pair, ImagePair, SynthSpec};
use promptrr_core::Tensor;

use crate::ppm;

/// `count` synthetic pairs of `size × size`, deterministic in `seed`.
pub fn synth_pairs(count: usize, size: usize, seed: u64) -> anyhow::Result<Vec<ImagePair>> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|_| random_pair(&mut rng, size, size, &SynthSpec::default()).map_err(Into::into))
        .collect()
}

pub fn write_pairs(dir: &Path, pairs: &[ImagePair]) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, p) in pairs.iter().enumerate() {
        ppm::write(dir.join(format!("{i:04}_input.ppm")), &p.input)?;
        ppm::write(dir.join(format!("{i:04}_gt.ppm")), &p.gt)?;
    }
    Ok(())
}

/// Every complete pair in `dir`, in name order.
pub fn read_pairs(dir: &Path) -> anyhow::Result<Vec<ImagePair>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let name = entry?.file_name();
        if let Some(stem) = name.to_str().and_then(|n| n.strip_suffix("_input.ppm")) {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    let mut pairs = Vec::with_capacity(stems.len());
    for stem in stems {
        let gt_path = dir.join(format!("{stem}_gt.ppm"));
        ensure!(gt_path.exists(), "{} has no matching ground truth", stem);
        let input = ppm::read(dir.join(format!("{stem}_input.ppm")))?;
        let gt = ppm::read(&gt_path)?;
        pairs.push(ImagePair::new(input, gt).with_context(|| format!("pair {stem}"))?);
    }
    if pairs.is_empty() {
        bail!("no *_input.ppm files in {}", dir.display());
    }
    Ok(pairs)
}

/// Central `size × size` window of a `C×H×W` image.
pub fn center_crop(img: &Tensor<f32>, size: usize) -> anyhow::Result<Tensor<f32>> {
    let s = img.shape();
    ensure!(s.len() == 3 && s[1] >= size && s[2] >= size, "cannot crop {size}×{size} from {s:?}");
    let (top, left) = ((s[1] - size) / 2, (s[2] - size) / 2);
    Ok(Tensor::from_fn(&[s[0], size, size], |i| {
        let (c, y, x) = (i / (size * size), i / size % size, i % size);
        img.at3(c, top + y, left + x)
    }))
}

/// Crop both images of every pair to `size × size`.
pub fn crop_pairs(pairs: &[ImagePair], size: usize) -> anyhow::Result<Vec<ImagePair>> {
    pairs
        .iter()
        .map(|p| Ok(ImagePair::new(center_crop(&p.input, size)?, center_crop(&p.gt, size)?)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_takes_the_middle() {
        let img = Tensor::from_fn(&[1, 4, 6], |i| i as f32);
        let c = center_crop(&img, 2).unwrap();
        assert_eq!(c.data(), &[8.0, 9.0, 14.0, 15.0]);
        assert!(center_crop(&img, 5).is_err());
    }

    #[test]
    fn synth_is_seeded() {
        assert_eq!(synth_pairs(2, 8, 1).unwrap(), synth_pairs(2, 8, 1).unwrap());
        assert_ne!(synth_pairs(1, 8, 1).unwrap(), synth_pairs(1, 8, 2).unwrap());
    }
}
