use serde::{Deserialize, Serialize};

use super::{shape_err, ParamSet, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub decay: f64,
    /// Added to the root mean square, outside the square root.
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            learning_rate: 1e-4,
            decay: 0.99,
            epsilon: 0.1,
            momentum: 0.0,
        }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<(), String> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        let lr_ok = self.learning_rate.is_finite() && self.learning_rate >= 0.0;
        if !lr_ok || !ok(self.epsilon) || !ok(self.decay) || self.decay >= 1.0 {
            return Err(format!("rmsprop: need lr >= 0, epsilon > 0, 0 < decay < 1, got {self:?}"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("rmsprop: momentum must be in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }
}

/// RMSprop state: running mean of squared gradients, plus a velocity
/// buffer only when momentum is non-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp<T> {
    config: RmsPropConfig,
    mean_square: Vec<Tensor<T>>,
    velocity: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(config: RmsPropConfig, params: &ParamSet<T>) -> Self {
        RmsProp {
            config,
            mean_square: params.zeros_like(),
            velocity: (config.momentum > 0.0).then(|| params.zeros_like()),
        }
    }

    pub fn config(&self) -> &RmsPropConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn mean_square(&self) -> &[Tensor<T>] {
        &self.mean_square
    }

    pub fn velocity(&self) -> Option<&[Tensor<T>]> {
        self.velocity.as_deref()
    }

    /// Restores saved accumulators; shapes must match `params`.
    pub fn restore(
        &mut self,
        params: &ParamSet<T>,
        mean_square: Vec<Tensor<T>>,
        velocity: Option<Vec<Tensor<T>>>,
    ) -> Result<(), TensorError> {
        let fits = |ts: &[Tensor<T>]| {
            ts.len() == params.len() && ts.iter().zip(params.tensors()).all(|(a, b)| a.shape() == b.shape())
        };
        if !fits(&mean_square) || velocity.as_deref().is_some_and(|v| !fits(v)) {
            return shape_err("rmsprop restore", "optimizer state does not match parameters");
        }
        if velocity.is_some() != (self.config.momentum > 0.0) {
            return shape_err("rmsprop restore", "velocity buffer presence does not match momentum");
        }
        self.mean_square = mean_square;
        self.velocity = velocity;
        Ok(())
    }

    /// One step: `v = decay v + (1 - decay) g^2`, `p -= lr g / (sqrt(v) + eps)`.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<(), TensorError> {
        if grads.len() != params.len() || self.mean_square.len() != params.len() {
            return shape_err(
                "rmsprop",
                format!("{} params, {} grads, {} state", params.len(), grads.len(), self.mean_square.len()),
            );
        }
        for (slot, g) in grads.iter().enumerate() {
            if g.shape() != params.get(slot).shape() {
                return shape_err(
                    "rmsprop",
                    format!("slot {slot}: grad {:?} vs param {:?}", g.shape(), params.get(slot).shape()),
                );
            }
        }
        let c = |v: f64| T::from_f64_lossy(v);
        let (decay, lr, eps, mom) = (
            c(self.config.decay),
            c(self.config.learning_rate),
            c(self.config.epsilon),
            c(self.config.momentum),
        );
        let keep = T::one() - decay;
        for (slot, g) in grads.iter().enumerate() {
            let v = self.mean_square[slot].data_mut();
            let p = params.get_mut(slot).data_mut();
            match self.velocity.as_mut() {
                None => {
                    for ((pi, vi), &gi) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                        *vi = decay * *vi + keep * gi * gi;
                        *pi = *pi - lr * gi / (vi.sqrt() + eps);
                    }
                }
                Some(vel) => {
                    let m = vel[slot].data_mut();
                    for (((pi, vi), mi), &gi) in p.iter_mut().zip(v.iter_mut()).zip(m.iter_mut()).zip(g.data()) {
                        *vi = decay * *vi + keep * gi * gi;
                        *mi = mom * *mi + lr * gi / (vi.sqrt() + eps);
                        *pi = *pi - *mi;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before scaling.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64_lossy(max_norm / norm);
        for t in grads.iter_mut() {
            for v in t.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}
