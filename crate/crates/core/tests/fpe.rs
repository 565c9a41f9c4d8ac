use promptrr_core::blocks::PromptShape;
use promptrr_core::fpe::{Fpe, FpeConfig};
use promptrr_core::params::{Init, ParamStore};
use promptrr_core::rng::Rng;
use promptrr_core::wavelet::{merge_freq, split_freq};
use promptrr_core::{Tape, Tensor};

fn build(images: usize, seed: u64) -> (Fpe, ParamStore<f64>) {
    let cfg = FpeConfig {
        images,
        features: 8,
        res_blocks: 2,
        prompt: PromptShape::default(),
    };
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let fpe = Fpe::new(&mut Init::new(&mut store, &mut rng), cfg).unwrap();
    (fpe, store)
}

#[test]
fn prompt_shapes_and_determinism() {
    let (fpe, store) = build(1, 1);
    let mut rng = Rng::new(2);
    for (h, w) in [(8, 8), (16, 24), (32, 10)] {
        let x: Tensor<f64> = rng.uniform_tensor(&[3, h, w], 0.0, 1.0);
        let run = || {
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            fpe.encode(&p, &x).unwrap().values()
        };
        let a = run();
        assert_eq!(a.low.shape(), &[4, 16]);
        assert_eq!(a.high.shape(), &[4, 16]);
        assert_eq!(a, run());
    }
}

#[test]
fn stacked_inputs() {
    let (fpe, store) = build(2, 3);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let x: Tensor<f64> = Rng::new(4).uniform_tensor(&[6, 8, 8], 0.0, 1.0);
    assert!(fpe.encode(&p, &x).is_ok());
    assert!(fpe.encode(&p, &x.slice0(0, 3).unwrap()).is_err());
    assert!(fpe.encode(&p, &Tensor::zeros(&[6, 7, 8])).is_err());
}

#[test]
fn zero_image_gives_zero_prompts() {
    let (fpe, store) = build(1, 5);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let out = fpe.encode(&p, &Tensor::zeros(&[3, 16, 16])).unwrap().values();
    assert!(out.low.data().iter().chain(out.high.data()).all(|&v| v == 0.0));
}

#[test]
fn low_prompt_ignores_high_frequencies() {
    let (fpe, store) = build(1, 6);
    let mut rng = Rng::new(7);
    let x: Tensor<f64> = rng.uniform_tensor(&[3, 16, 16], 0.0, 1.0);
    let (lf, hf) = split_freq(&x).unwrap();
    let other_hf: Tensor<f64> = rng.normal_tensor(hf.shape());
    let y = merge_freq(&lf, &other_hf).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let a = fpe.encode(&p, &x).unwrap().values();
    let b = fpe.encode(&p, &y).unwrap().values();
    assert!(a.low.max_abs_diff(&b.low) < 1e-12);
    assert!(a.high.max_abs_diff(&b.high) > 1e-6);
}
