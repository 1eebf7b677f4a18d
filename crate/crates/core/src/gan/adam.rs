use serde::{Deserialize, Serialize};

use super::network::{Network, NetworkGrads};
use super::GanError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConstants {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub delta: f64,
}

impl Default for AdamConstants {
    fn default() -> Self {
        Self {
            learning_rate: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            delta: 1e-7,
        }
    }
}

impl AdamConstants {
    pub fn validate(&self) -> Result<(), GanError> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.delta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(GanError::InvalidConfig(format!("bad Adam constants {self:?}")))
        }
    }
}

/// One Adam update of `params` descending along `grads`.
///
/// With `k = step`:
/// `v = b2 v + (1 - b2) g*g`, `m = b1 m + (1 - b1) g`,
/// `w -= lr * sqrt(1 - b2^(k+1)) / (1 - b1^(k+1)) * m / (sqrt(v) + delta)`.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    c: &AdamConstants,
) -> Result<(), GanError> {
    let n = params.len();
    if grads.len() != n || m.len() != n || v.len() != n {
        return Err(GanError::ShapeMismatch);
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(GanError::NonFiniteGradient);
    }
    let power = i32::try_from(step.saturating_add(1)).unwrap_or(i32::MAX);
    let correction = (1.0 - c.beta2.powi(power)).sqrt() / (1.0 - c.beta1.powi(power));
    let rate = c.learning_rate * correction;
    for i in 0..n {
        let g = grads[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
        params[i] -= rate * m[i] / (v[i].sqrt() + c.delta);
    }
    Ok(())
}

/// Moment estimates for every parameter tensor of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub constants: AdamConstants,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(net: &mut Network, constants: AdamConstants) -> Self {
        let sizes: Vec<usize> = net.param_slices_mut().iter().map(|s| s.len()).collect();
        Self {
            constants,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn apply(&mut self, net: &mut Network, grads: &NetworkGrads) -> Result<(), GanError> {
        let g = grads.slices();
        let mut params = net.param_slices_mut();
        if g.len() != params.len() || params.len() != self.first.len() {
            return Err(GanError::ShapeMismatch);
        }
        // validate everything before touching any tensor
        if g.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(GanError::NonFiniteGradient);
        }
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(g)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            adam_step(p, g, m, v, self.step, &self.constants)?;
        }
        self.step += 1;
        Ok(())
    }
}
