use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{HvpError, Result};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient. Gradients
    /// are validated up front so a bad step leaves all parameters untouched.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (String, &'a mut Tensor)>,
        grads: &HashMap<String, Tensor>,
    ) -> Result<()> {
        let params: Vec<(String, &mut Tensor)> = params.into_iter().collect();
        for (name, p) in &params {
            if let Some(g) = grads.get(name) {
                if g.len() != p.len() {
                    return Err(HvpError::Dimension(format!("gradient shape for `{name}`")));
                }
                if !g.is_finite() {
                    return Err(HvpError::numeric(name.clone(), "gradient is not finite"));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params {
            let Some(g) = grads.get(&name) else { continue };
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (p.zeros_like(), p.zeros_like()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Functional form: one Adam update of `params` in place.
pub fn adam_step<'a>(
    state: &mut AdamState,
    params: impl IntoIterator<Item = (String, &'a mut Tensor)>,
    grads: &HashMap<String, Tensor>,
) -> Result<()> {
    state.step(params, grads)
}
