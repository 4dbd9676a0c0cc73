//! SGD with momentum and decoupled-from-nothing classic weight decay:
//! the decay term joins the gradient before the velocity update.

use std::collections::BTreeMap;

use crate::params::ParamSet;

use super::TrainError;

/// Per-parameter velocity buffers plus the fixed update hyperparameters.
pub struct OptimState {
    velocities: BTreeMap<String, Vec<f64>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        OptimState {
            velocities: BTreeMap::new(),
            momentum,
            weight_decay,
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocities.get(name).map(Vec::as_slice)
    }

    /// All buffers in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.velocities
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub(crate) fn set_velocity(&mut self, name: &str, buffer: Vec<f64>) {
        self.velocities.insert(name.to_string(), buffer);
    }
}

/// One update over every trainable parameter:
/// `g' = g + wd * p; v = m * v + g'; p = p - lr * v`.
///
/// Parameters without a gradient this step are treated as zero-gradient,
/// so weight decay and momentum still apply. Normalization running stats
/// are state entries, not trainable, and are never touched.
pub fn sgd_step(params: &ParamSet, state: &mut OptimState, lr: f64) -> Result<(), TrainError> {
    for (name, tensor) in params.trainable() {
        let n = tensor.numel();
        let velocity = state
            .velocities
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        if velocity.len() != n {
            return Err(TrainError::VelocityShape {
                name: name.to_string(),
                expected: n,
                actual: velocity.len(),
            });
        }
        let grad = tensor.grad();
        let (momentum, weight_decay) = (state.momentum, state.weight_decay);
        tensor.update_data(|p| {
            for i in 0..n {
                let g = grad.as_ref().map_or(0.0, |g| g[i]) + weight_decay * p[i];
                velocity[i] = momentum * velocity[i] + g;
                p[i] -= lr * velocity[i];
            }
        });
    }
    Ok(())
}
