//! Optimizers: Adam for diffusion training, SGD with weight decay and
//! cosine learning-rate decay for contrastive pretraining.

use super::params::ParamStore;
use crate::scalar::{Scalar, Tensor};

pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Option<Tensor<F>>]) {
        if self.m.is_empty() {
            for (_, t) in store.iter() {
                self.m.push(Tensor::zeros(t.raw_dim()));
                self.v.push(Tensor::zeros(t.raw_dim()));
            }
        }
        self.t += 1;
        let b1 = F::of(self.beta1);
        let b2 = F::of(self.beta2);
        let one = F::one();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr_t = F::of(self.lr * bc2.sqrt() / bc1);
        let eps = F::of(self.eps);
        for (i, (_, p)) in store.tensors_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mv, gv| {
                *mv = b1 * *mv + (one - b1) * *gv;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vv, gv| {
                *vv = b2 * *vv + (one - b2) * *gv * *gv;
            });
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pv, mv, vv| {
                *pv = *pv - lr_t * *mv / (vv.sqrt() + eps);
            });
        }
    }
}

pub struct Sgd<F: Scalar> {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lr: f64,
    bufs: Vec<Tensor<F>>,
}

impl<F: Scalar> Sgd<F> {
    /// Classic heavy-ball SGD (momentum 0.9) with decoupled-style L2 decay.
    pub fn new(base_lr: f64, weight_decay: f64) -> Self {
        Sgd {
            base_lr,
            weight_decay,
            momentum: 0.9,
            lr: base_lr,
            bufs: Vec::new(),
        }
    }

    /// Cosine decay from `base_lr` to 0 across `total` epochs.
    pub fn set_cosine_epoch(&mut self, epoch: usize, total: usize) {
        let frac = if total <= 1 {
            0.0
        } else {
            epoch as f64 / total as f64
        };
        self.lr = self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Option<Tensor<F>>]) {
        if self.bufs.is_empty() {
            for (_, t) in store.iter() {
                self.bufs.push(Tensor::zeros(t.raw_dim()));
            }
        }
        let lr = F::of(self.lr);
        let wd = F::of(self.weight_decay);
        let mu = F::of(self.momentum);
        for (i, (_, p)) in store.tensors_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let buf = &mut self.bufs[i];
            ndarray::Zip::from(&mut *buf)
                .and(g)
                .and(&*p)
                .for_each(|bv, gv, pv| {
                    *bv = mu * *bv + *gv + wd * *pv;
                });
            ndarray::Zip::from(p).and(&*buf).for_each(|pv, bv| {
                *pv = *pv - lr * *bv;
            });
        }
    }
}
