//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// `lr(step) = lr_min + (lr0 - lr_min) * (1 + cos(pi * step / (total - 1))) / 2`,
/// so the first step uses `lr0` and step `total - 1` uses `lr_min`. Steps
/// past the end stay at `lr_min`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total <= 1 {
        return lr0;
    }
    let t = (step.min(total - 1)) as f64 / (total - 1) as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + libm::cos(core::f64::consts::PI * t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    /// Completed updates.
    pub t: u64,
    /// First moments, one per parameter in store order.
    pub m: Vec<Tensor<T>>,
    /// Second moments.
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Replaces the moments, checking them against the store's shapes.
    pub fn restore(&mut self, t: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, store: &ParamStore<T>) -> Result<()> {
        if m.len() != store.len() || v.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimizer state has {}/{} moments for {} parameters",
                m.len(),
                v.len(),
                store.len()
            )));
        }
        for ((name, p), (a, b)) in store.iter().zip(m.iter().zip(&v)) {
            if a.shape() != p.shape() || b.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "optimizer state for {name} has shape {:?}/{:?}, parameter {:?}",
                    a.shape(),
                    b.shape(),
                    p.shape()
                )));
            }
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update with gradients in store order. Weight decay applies only
    /// to parameters of rank 2 or more.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.t += 1;
        let c = self.cfg;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - libm::pow(c.beta1, self.t as f64));
        let bc2 = T::of(1.0 - libm::pow(c.beta2, self.t as f64));
        let lr_t = T::of(lr);
        let eps = T::of(c.eps);
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let decay = if p.shape().len() >= 2 {
                one - lr_t * T::of(c.weight_decay)
            } else {
                one
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w = *w * decay - lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(
        grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&x| x.f64() * x.f64())
            .sum::<f64>(),
    );
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 3e-4, 3e-6), 3e-4);
        assert!((cosine_lr(99, 100, 3e-4, 3e-6) - 3e-6).abs() < 1e-20);
        let mid = cosine_lr(50, 101, 1.0, 0.0);
        assert!((mid - 0.5).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr * sign(g).
        let mut store = ParamStore::<f64>::new(0);
        store.add("b", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(
            AdamWConfig {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-12,
                weight_decay: 0.5,
            },
            &store,
        );
        let g = Tensor::new(&[2], vec![3.0, -0.5]).unwrap();
        opt.step(&mut store, &[g], 0.1).unwrap();
        let d = store.tensors()[0].data();
        assert!((d[0] - 0.9).abs() < 1e-9 && (d[1] + 0.9).abs() < 1e-9);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::new(&[2], vec![3.0f64, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
    }
}
