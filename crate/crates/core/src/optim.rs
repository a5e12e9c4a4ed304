//! AdamW with decoupled weight decay and the warmup + cosine learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::{contract, Result};
use crate::nn::ParameterStore;
use crate::tensor::{Scalar, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 1e-5,
        }
    }
}

/// AdamW state: first/second moments aligned to the parameter store's slot
/// order, plus the step counter.
pub struct AdamW<S: Scalar> {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(store: &ParameterStore<S>, hyper: AdamHyper) -> Self {
        let m = (0..store.len())
            .map(|i| Tensor::zeros(store.by_index(i).1.shape().to_vec()))
            .collect();
        let v = (0..store.len())
            .map(|i| Tensor::zeros(store.by_index(i).1.shape().to_vec()))
            .collect();
        Self {
            hyper,
            step: 0,
            m,
            v,
        }
    }

    /// One optimizer step. Parameters with no recorded gradient receive only
    /// weight decay (their moments decay toward zero).
    pub fn apply(
        &mut self,
        store: &mut ParameterStore<S>,
        grads: &Gradients<S>,
        lr: f64,
    ) -> Result<()> {
        self.apply_filtered(store, grads, lr, |_| true)
    }

    /// Like [`AdamW::apply`], but slots whose name fails `include` are left
    /// entirely untouched — no update, no decay, no moment change. Used for
    /// head-only fine-tuning.
    pub fn apply_filtered(
        &mut self,
        store: &mut ParameterStore<S>,
        grads: &Gradients<S>,
        lr: f64,
        include: impl Fn(&str) -> bool,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(contract("gradient slot count does not match store"));
        }
        self.step += 1;
        let b1 = S::from_f64(self.hyper.beta1);
        let b2 = S::from_f64(self.hyper.beta2);
        let one = S::one();
        let eps = S::from_f64(ADAM_EPS);
        let lr_s = S::from_f64(lr);
        let wd = S::from_f64(self.hyper.weight_decay);
        let bc1 = S::from_f64(1.0 - self.hyper.beta1.powi(self.step as i32));
        let bc2 = S::from_f64(1.0 - self.hyper.beta2.powi(self.step as i32));
        for i in 0..store.len() {
            let (name, theta) = store.by_index_mut(i);
            if !include(name) {
                continue;
            }
            let g_zero;
            let g = match grads.get(i) {
                Some(g) => g,
                None => {
                    g_zero = Tensor::zeros(theta.shape().to_vec());
                    &g_zero
                }
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let md = m.data_mut();
            let vd = v.data_mut();
            let td = theta.data_mut();
            let gd = g.data();
            for j in 0..td.len() {
                md[j] = b1 * md[j] + (one - b1) * gd[j];
                vd[j] = b2 * vd[j] + (one - b2) * gd[j] * gd[j];
                let m_hat = md[j] / bc1;
                let v_hat = vd[j] / bc2;
                // decoupled decay alongside the Adam update
                td[j] = td[j] - lr_s * wd * td[j] - lr_s * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak`, then cosine decay to `min`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, min: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if !(0.0 < min && min <= peak) {
            return Err(contract("lr schedule requires 0 < min <= peak"));
        }
        if warmup_steps >= total_steps {
            return Err(contract("lr schedule requires warmup < total"));
        }
        Ok(Self {
            peak,
            min,
            warmup_steps,
            total_steps,
        })
    }

    pub fn at(&self, step: u64) -> f64 {
        if step > self.total_steps {
            return self.min;
        }
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.min + 0.5 * (self.peak - self.min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
