mod oracle;

use promptrr_core::metrics::{psnr, ssim, SSIM_C1};
use promptrr_core::rng::Rng;
use promptrr_core::synth::random_scene;
use promptrr_core::Tensor;
use proptest::prelude::*;

#[test]
fn psnr_uniform_one_level_error() {
    let mut rng = Rng::new(1);
    let a: Tensor<f64> = rng.uniform_tensor(&[3, 16, 16], 0.0, 0.9);
    let b = a.map(|v| v + 1.0 / 255.0);
    let p = psnr(&a, &b, 1.0).unwrap();
    assert!((p - 48.1308).abs() < 1e-3, "{p}");
    assert!((p - 20.0 * 255f64.log10()).abs() < 1e-9);
}

#[test]
fn psnr_halving_law() {
    let mut rng = Rng::new(2);
    let a: Tensor<f64> = rng.uniform_tensor(&[3, 20, 12], 0.0, 1.0);
    let e: Tensor<f64> = rng.normal_tensor(&[3, 20, 12]);
    let full = a.zip_map(&e, |x, d| x + 0.1 * d).unwrap();
    let half = a.zip_map(&e, |x, d| x + 0.05 * d).unwrap();
    let gain = psnr(&a, &half, 1.0).unwrap() - psnr(&a, &full, 1.0).unwrap();
    assert!((gain - 6.0206).abs() < 1e-3, "{gain}");
    assert!((gain - 20.0 * 2f64.log10()).abs() < 1e-9);
}

#[test]
fn psnr_identical_is_infinite() {
    let a = Tensor::<f32>::full(&[3, 4, 4], 0.3);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
}

#[test]
fn ssim_constant_images() {
    for (c1, c2) in [(0.2, 0.7), (0.5, 0.5), (0.0, 1.0), (0.9, 0.1), (0.33, 0.34)] {
        let a = Tensor::<f64>::full(&[3, 16, 16], c1);
        let b = Tensor::<f64>::full(&[3, 16, 16], c2);
        let want = (2.0 * c1 * c2 + SSIM_C1) / (c1 * c1 + c2 * c2 + SSIM_C1);
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-6, "{c1} {c2}: {got} vs {want}");
    }
}

#[test]
fn ssim_matches_reference() {
    let mut rng = Rng::new(3);
    for i in 0..20 {
        let (h, w) = (11 + rng.below(14), 11 + rng.below(14));
        let a = random_scene(&mut rng, h, w);
        let b = if i % 2 == 0 {
            random_scene(&mut rng, h, w)
        } else {
            let noise: Tensor<f32> = rng.normal_tensor(&[3, h, w]);
            a.zip_map(&noise, |x, n| (x + 0.05 * n).clamp(0.0, 1.0)).unwrap()
        };
        let got = ssim(&a, &b).unwrap();
        let want = oracle::ssim(&a, &b);
        assert!((got - want).abs() < 1e-6, "pair {i}: {got} vs {want}");
    }
}

#[test]
fn ssim_identical_is_one() {
    let a = random_scene(&mut Rng::new(4), 24, 24);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_symmetric_and_bounded(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let a = random_scene(&mut rng, 16, 16);
        let b = random_scene(&mut rng, 16, 16);
        let ab = ssim(&a, &b).unwrap();
        prop_assert_eq!(ab, ssim(&b, &a).unwrap());
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn psnr_decreases_with_error(seed in 0u64..10_000, k in 1.01f64..4.0) {
        let mut rng = Rng::new(seed);
        let a: Tensor<f64> = rng.uniform_tensor(&[3, 8, 8], 0.0, 1.0);
        let e: Tensor<f64> = rng.normal_tensor(&[3, 8, 8]);
        let small = a.zip_map(&e, |x, d| x + 0.01 * d).unwrap();
        let big = a.zip_map(&e, |x, d| x + 0.01 * k * d).unwrap();
        prop_assert!(psnr(&a, &big, 1.0).unwrap() < psnr(&a, &small, 1.0).unwrap());
    }
}
