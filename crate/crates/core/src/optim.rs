//! Adam with optional decoupled weight decay (AdamW).

use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math methods when built without std
use num_traits::Float;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied as `p ← p − lr·wd·p`; zero gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            weight_decay,
            ..Self::adam(lr)
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(
                "adam",
                alloc::format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (p, g) in params.tensors().iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64(c.lr / bc1);
        let inv_bc2_sqrt = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(c.eps);
        let decay = T::from_f64(1.0 - c.lr * c.weight_decay);
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                if c.weight_decay != 0.0 {
                    *pv = *pv * decay;
                }
                *pv = *pv - step_size * *mv / ((*vv).sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn store(vals: &[f32]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.push("p", Tensor::new(&[vals.len()], vals.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = store(&[1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::adam(1e-3), &p);
        opt.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        assert_eq!(p, before);
        assert!(opt.moments().0[0].data().iter().all(|&m| m == 0.0));
        assert!(opt.moments().1[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(&[0.0; 4]);
        let mut opt = Adam::new(AdamConfig::adam(1e-4), &p);
        opt.step(&mut p, &[Tensor::ones(&[4])]).unwrap();
        // m̂ = v̂ = 1 → Δ = −lr / (1 + eps), up to f32 rounding of 1 − β₂
        let expect = -1e-4 / (1.0 + 1e-8);
        for &v in p.tensors()[0].data() {
            assert!((v as f64 / expect - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let mut p = store(&[2.0]);
        let mut opt = Adam::new(AdamConfig::adamw(0.1, 0.5), &p);
        opt.step(&mut p, &[Tensor::zeros(&[1])]).unwrap();
        assert!((p.tensors()[0].data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-6);
    }

    #[test]
    fn identical_inputs_identical_trajectories() {
        let mut a = store(&[0.3, -0.7]);
        let mut b = a.clone();
        let mut oa = Adam::new(AdamConfig::adamw(1e-2, 1e-4), &a);
        let mut ob = oa.clone();
        for k in 0..20 {
            let g = Tensor::new(&[2], vec![(k as f32).sin(), (k as f32 * 0.3).cos()]).unwrap();
            oa.step(&mut a, core::slice::from_ref(&g)).unwrap();
            ob.step(&mut b, &[g]).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let mut p = store(&[1.0, 2.0]);
        let mut opt = Adam::new(AdamConfig::adam(1e-3), &p);
        assert!(opt.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
        assert!(opt.step(&mut p, &[]).is_err());
    }
}
