//! Adam over the trainable entries of a parameter store.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected update. Gradients for frozen parameters are an
    /// error; trainable parameters without a gradient are left alone.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            let p = store.get(*id);
            if !p.trainable {
                return Err(Error::invalid(format!("gradient supplied for frozen parameter {}", p.name)));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (id, g) in grads {
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let value = store.value_mut(*id);
            for (((w, m), v), &g) in value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
