//! Bias-corrected Adam.

use mondeq::{GradientBundle, MonDEQModel};

use crate::error::{Result, TrainError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one flat parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TrainError::StateMismatch(format!(
            "{} parameters, {} gradients, state of {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient("parameter".into()));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mh = *m / bc1;
        let vh = *v / bc2;
        *p -= lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over every named parameter of a model.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    states: Vec<(String, AdamState)>,
}

impl Adam {
    pub fn new(model: &MonDEQModel, cfg: AdamConfig) -> Self {
        let states = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, AdamState::new(t.len())))
            .collect();
        Self { cfg, states }
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.first().map_or(0, |(_, s)| s.t)
    }

    /// Updates the model, then restores the parameter constraints. Nothing is
    /// changed if any gradient is non-finite.
    pub fn step(&mut self, model: &mut MonDEQModel, grads: &GradientBundle, lr: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient(name.to_string()));
            }
        }
        let cfg = self.cfg;
        let mut params = model.named_params_mut();
        if params.len() != self.states.len() {
            return Err(TrainError::StateMismatch(format!(
                "{} parameters, {} optimizer states",
                params.len(),
                self.states.len()
            )));
        }
        for ((name, p), (sname, state)) in params.iter_mut().zip(&mut self.states) {
            if name != sname {
                return Err(TrainError::StateMismatch(format!("{name} vs {sname}")));
            }
            let g = grads
                .get(name)
                .ok_or_else(|| TrainError::StateMismatch(format!("no gradient for {name}")))?;
            adam_step(p.data_mut(), g.data(), state, lr, &cfg)?;
        }
        model.project_constraints();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_is_about_lr() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &[1.0], &mut s, 0.1, &cfg).unwrap();
        assert!((p[0] + 0.1 / (1.0 + cfg.eps)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let r = adam_step(&mut p, &[f64::NAN], &mut s, 0.1, &AdamConfig::default());
        assert!(matches!(r, Err(TrainError::NonFiniteGradient(_))));
        assert_eq!((p[0], s.t), (0.0, 0));
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut p = vec![0.0; 2];
        let mut s = AdamState::new(3);
        assert!(adam_step(&mut p, &[0.0; 2], &mut s, 0.1, &AdamConfig::default()).is_err());
    }
}
