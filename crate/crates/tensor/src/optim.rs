use crate::error::shape_err;
use crate::{ParamId, ParamStore, Real, Result, Tensor};

/// Adam hyperparameters. Defaults: learning rate 1e-4, betas (0.9, 0.999).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Real>,
    pub v: Vec<Real>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [Real],
    grads: &[Real],
    state: &mut AdamState,
    lr: Real,
    beta1: Real,
    beta2: Real,
    eps: Real,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return shape_err(format!(
            "adam_step: {} params, {} grads, state of {}",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over every trainable entry of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<(ParamId, AdamState)>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let states = store
            .trainable_ids()
            .map(|id| (id, AdamState::new(store.value(id).numel())))
            .collect();
        Self { config, states }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let c = self.config;
        for (id, state) in &mut self.states {
            let p = store.get_mut(*id);
            let (value, grad) = (&mut p.value, &p.grad);
            adam_step(value.data_mut(), grad.data(), state, c.lr, c.beta1, c.beta2, c.eps)?;
        }
        Ok(())
    }

    pub fn states(&self) -> &[(ParamId, AdamState)] {
        &self.states
    }

    /// Step counter shared by all parameters (0 before the first step).
    pub fn steps(&self) -> u64 {
        self.states.first().map_or(0, |(_, s)| s.t)
    }

    /// Rebuilds optimizer state from saved moments.
    pub fn restore(config: AdamConfig, states: Vec<(ParamId, AdamState)>) -> Self {
        Self { config, states }
    }

    pub fn moments_as_tensors(&self, store: &ParamStore) -> Vec<(String, Tensor, Tensor)> {
        self.states
            .iter()
            .map(|(id, s)| {
                let shape = store.value(*id).shape().to_vec();
                (
                    store.get(*id).name.clone(),
                    Tensor::new(shape.clone(), s.m.clone()).expect("shape"),
                    Tensor::new(shape, s.v.clone()).expect("shape"),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![0.5];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, 1e-4, 0.9, 0.999, 1e-8).unwrap();
        assert!((0.5 - p[0] - 1e-4).abs() < 1e-10);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.5, -2.0];
        let mut s = AdamState::new(2);
        for _ in 0..10 {
            adam_step(&mut p, &[0.0, 0.0], &mut s, 1e-2, 0.9, 0.999, 1e-8).unwrap();
        }
        assert_eq!(p, vec![0.5, -2.0]);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut x = vec![1.0];
        let mut s = AdamState::new(1);
        for _ in 0..500 {
            let g = [2.0 * x[0]];
            adam_step(&mut x, &g, &mut s, 1e-2, 0.9, 0.999, 1e-8).unwrap();
        }
        assert!(x[0].abs() < 0.05, "x = {}", x[0]);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0; 2];
        let mut s = AdamState::new(3);
        assert!(adam_step(&mut p, &[0.0, 0.0], &mut s, 1e-3, 0.9, 0.999, 1e-8).is_err());
    }
}
