use serde::{Deserialize, Serialize};

use super::{check_len, ParamVector};
use crate::error::Result;

/// Optimizer state for one model. Never shared between models or clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        check_len(params, grad)?;
        if self.first_moment.len() != params.len() {
            return Err(crate::error::Error::dim(format!(
                "optimizer state has {} slots, parameters have {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Functional form: returns the updated parameters and state.
pub fn adam_step(
    params: &ParamVector,
    grad: &ParamVector,
    state: &AdamState,
) -> Result<(ParamVector, AdamState)> {
    let mut params = params.clone();
    let mut state = state.clone();
    state.step(&mut params, grad)?;
    Ok((params, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_on_fresh_state_leaves_params() {
        let p = ParamVector::new(vec![0.3, -1.0, 2.0]);
        let (q, s) = adam_step(&p, &ParamVector::zeros(3), &AdamState::new(3, 1e-3)).unwrap();
        assert_eq!(p, q);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut s = AdamState::new(2, 1e-3);
        s.first_moment = vec![1.0, -2.0];
        s.second_moment = vec![4.0, 8.0];
        let (_, s2) = adam_step(&ParamVector::zeros(2), &ParamVector::zeros(2), &s).unwrap();
        assert_eq!(s2.first_moment, vec![0.9, -1.8]);
        assert!((s2.second_moment[0] - 4.0 * 0.999).abs() < 1e-15);
        assert!((s2.second_moment[1] - 8.0 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_by_hand() {
        // m = 0.1 g, v = 0.001 g^2; m_hat = g, v_hat = g^2;
        // step = lr * g / (|g| + 1e-8)
        let p = ParamVector::new(vec![1.0, 1.0, 1.0]);
        let g = ParamVector::new(vec![0.5, -2.0, 1e-3]);
        let (q, _) = adam_step(&p, &g, &AdamState::new(3, 1e-3)).unwrap();
        let expect = [
            1.0 - 1e-3 * 0.5 / (0.5 + 1e-8),
            1.0 + 1e-3 * 2.0 / (2.0 + 1e-8),
            1.0 - 1e-3 * 1e-3 / (1e-3 + 1e-8),
        ];
        for (a, b) in q.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn length_mismatch() {
        let p = ParamVector::zeros(3);
        assert!(adam_step(&p, &ParamVector::zeros(2), &AdamState::new(3, 1e-3)).is_err());
        assert!(adam_step(&p, &ParamVector::zeros(3), &AdamState::new(4, 1e-3)).is_err());
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut p = ParamVector::new(vec![0.1, 0.2]);
            let mut s = AdamState::new(2, 1e-3);
            for i in 0..10 {
                let g = ParamVector::new(vec![(i as f64).sin(), (i as f64).cos()]);
                s.step(&mut p, &g).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }
}
