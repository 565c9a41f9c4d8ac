//! Core of a frequency-prompt guided single-image reflection remover.
//!
//! Everything in this crate is pure computation over `alloc` collections:
//! a small dense tensor type with a recording tape for reverse-mode
//! differentiation, the Haar wavelet split that defines low/high frequency
//! prompts, the prompt-guided transformer blocks, the frequency prompt
//! encoder, the U-shaped restorer, the dual diffusion prompt generator,
//! image-quality metrics and synthetic reflection data.
//!
//! File formats, the command line and the training drivers live in the
//! `promptrr` companion crate.
#![no_std]
#![forbid(unsafe_code)]
// `Float` supplies the math methods without std; tests link std, which has them inherently.
#![cfg_attr(test, allow(unused_imports))]

extern crate alloc;

pub mod autodiff;
pub mod blocks;
pub mod diffusion;
mod error;
pub mod fpe;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod promptformer;
mod real;
pub mod rng;
pub mod synth;
mod tensor;
pub mod train;
pub mod wavelet;

pub use crate::autodiff::{Gradients, Tape, Var};
pub use crate::error::{Error, Result};
pub use crate::real::Real;
pub use crate::tensor::Tensor;
