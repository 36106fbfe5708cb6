use serde::{Deserialize, Serialize};

use crate::error::{FlatError, Result};

use super::tape::ParamSet;
use super::Scalar;

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epoch: usize,
    /// One buffer per parameter name, created on the first step.
    #[serde(skip)]
    pub velocity: Vec<(String, Vec<f32>)>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(FlatError::config("learning_rate", format!("must be non-negative, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(FlatError::config("momentum", format!("must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(FlatError::config("weight_decay", format!("must be non-negative, got {weight_decay}")));
        }
        Ok(SgdState { learning_rate, momentum, weight_decay, epoch: 0, velocity: Vec::new() })
    }

    pub fn velocity(&self, name: &str) -> Option<&[f32]> {
        self.velocity.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    fn velocity_mut(&mut self, name: &str, len: usize) -> &mut Vec<f32> {
        let i = match self.velocity.iter().position(|(n, _)| n == name) {
            Some(i) => i,
            None => {
                self.velocity.push((name.to_string(), vec![0.0; len]));
                self.velocity.len() - 1
            }
        };
        &mut self.velocity[i].1
    }
}

/// One update of the parameters named in `trainable`:
/// `v = momentum * v + grad + weight_decay * p; p -= lr * v`.
///
/// Every trainable parameter must carry a gradient.
pub fn sgd_step<T: Scalar>(params: &mut ParamSet<T>, trainable: &[String], state: &mut SgdState) -> Result<()> {
    for name in trainable {
        let p = params
            .by_name(name)
            .ok_or_else(|| FlatError::State(format!("no parameter named `{name}`")))?;
        if p.grad().is_none() {
            return Err(FlatError::Contract(format!("parameter `{name}` has no gradient")));
        }
    }
    let lr = T::of(state.learning_rate);
    let mu = T::of(state.momentum);
    let wd = T::of(state.weight_decay);
    for name in trainable {
        let p = params.by_name_mut(name).expect("checked above");
        let n = p.numel();
        let v = state.velocity_mut(name, n);
        if v.len() != n {
            return Err(FlatError::Dimension(format!(
                "velocity for `{name}` has {} elements, parameter has {n}",
                v.len()
            )));
        }
        let grad = p.grad().expect("checked above").to_vec();
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(grad).zip(v.iter_mut()) {
            let vel = mu * T::of(*vi as f64) + gi + wd * *pi;
            *vi = vel.f64() as f32;
            *pi = *pi - lr * vel;
        }
    }
    Ok(())
}

/// Step decay: `base_lr * decay_rate^floor(epoch / decay_every)`.
pub fn lr_at_epoch(base_lr: f64, epoch: usize, decay_rate: f64, decay_every: usize) -> f64 {
    let steps = epoch / decay_every.max(1);
    base_lr * decay_rate.powi(steps as i32)
}
