//! Adam and step learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `lr(epoch) = base * factor ^ floor(epoch / every)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub factor: f64,
    pub every: usize,
}

impl StepSchedule {
    /// Halving every 200 epochs from 1e-4.
    pub const SR: Self = Self { base_lr: 1e-4, factor: 0.5, every: 200 };
    /// Tenfold decay every 10 epochs from 1e-4.
    pub const FINETUNE: Self = Self { base_lr: 1e-4, factor: 0.1, every: 10 };

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite() && self.factor > 0.0 && self.factor <= 1.0 && self.every > 0) {
            return Err(invalid!("bad learning-rate schedule {self:?}"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.factor.powi((epoch / self.every) as i32)
    }
}

/// Adam with bias correction; moments are indexed like the parameter store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl<T: Scalar> Adam<T> {
    /// Applies one update from the accumulated gradients; frozen or
    /// gradient-free parameters are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid!("learning rate must be positive, got {lr}"));
        }
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(lr / c1);
        let inv_c2 = T::from_f64_lossy(1.0 / c2);
        let eps = T::from_f64_lossy(self.eps);
        for (id, p) in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let Some(g) = p.grad.as_ref() else { continue };
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (((w, &gv), mv), vv) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                *w -= step_size * *mv / ((*vv * inv_c2).sqrt() + eps);
            }
        }
        store.version += 1;
        Ok(())
    }

    /// First and second moments for parameter slot `index`, if it was ever updated.
    pub fn moments(&self, index: usize) -> Option<(&Tensor<T>, &Tensor<T>)> {
        match (self.m.get(index), self.v.get(index)) {
            (Some(Some(m)), Some(Some(v))) => Some((m, v)),
            _ => None,
        }
    }

    pub fn set_moments(&mut self, index: usize, m: Tensor<T>, v: Tensor<T>) -> Result<()> {
        if m.shape() != v.shape() {
            return Err(invalid!("Adam moments disagree in shape: {:?} vs {:?}", m.shape(), v.shape()));
        }
        if self.m.len() <= index {
            self.m.resize(index + 1, None);
            self.v.resize(index + 1, None);
        }
        self.m[index] = Some(m);
        self.v[index] = Some(v);
        Ok(())
    }
}
