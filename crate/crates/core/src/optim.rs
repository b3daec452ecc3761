use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SGD with classical momentum: `v <- momentum * v + g`, `w <- w - lr * v`.
/// Velocity buffers persist across calls, keyed like the parameters.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    #[serde(skip)]
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, velocity: BTreeMap::new() }
    }

    pub fn velocity(&self) -> &BTreeMap<String, Tensor> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: BTreeMap<String, Tensor>) {
        self.velocity = velocity;
    }

    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        learning_rate: f64,
    ) -> Result<()> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::invalid("sgd_step", format!("learning rate {learning_rate} is not a nonnegative number")));
        }
        if !(self.momentum >= 0.0) {
            return Err(Error::invalid("sgd_step", format!("momentum {} is negative", self.momentum)));
        }
        if params.len() != grads.len() || params.keys().zip(grads.keys()).any(|(a, b)| a != b) {
            let missing: Vec<_> = params.keys().filter(|k| !grads.contains_key(*k)).collect();
            let extra: Vec<_> = grads.keys().filter(|k| !params.contains_key(*k)).collect();
            return Err(Error::invalid(
                "sgd_step",
                format!("parameter/gradient key mismatch: missing gradients {missing:?}, unknown gradients {extra:?}"),
            ));
        }
        for (key, w) in params.iter_mut() {
            let g = &grads[key];
            if g.shape() != w.shape() {
                return Err(Error::shape("sgd_step", w.shape(), g.shape()));
            }
            let v = self.velocity.entry(key.clone()).or_insert_with(|| w.zeros_like());
            if v.shape() != w.shape() {
                *v = w.zeros_like();
            }
            for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi;
                *wi -= learning_rate * *vi;
            }
        }
        Ok(())
    }
}
