use serde::{Deserialize, Serialize};

use crate::autodiff::GradientVector;
use crate::error::{Error, Result};
use crate::tissue::ParamVector;

/// Adam moment estimates; `step` counts completed updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update. Pure in its arguments.
pub fn adam_step(
    theta: &ParamVector,
    grad: &GradientVector,
    state: &AdamState,
    p: &AdamParams,
) -> Result<(ParamVector, AdamState)> {
    let n = theta.len();
    if grad.0.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::ParamLength {
            len: grad.0.len(),
            labels: n / crate::tissue::NUM_FIELDS,
            expected: n,
        });
    }
    let step = state.step + 1;
    let bc1 = 1.0 - p.beta1.powf(step as f64);
    let bc2 = 1.0 - p.beta2.powf(step as f64);
    let mut next = theta.0.clone();
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    for i in 0..n {
        let g = grad.0[i];
        m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g;
        v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        next[i] -= p.learning_rate * m_hat / (v_hat.sqrt() + p.eps);
    }
    Ok((ParamVector(next), AdamState { m, v, step }))
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: AdamParams = AdamParams {
        learning_rate: 1e-3,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };

    #[test]
    fn zero_gradient_is_a_no_op() {
        let theta = ParamVector(vec![0.3, -1.0, 2.0]);
        let (next, st) = adam_step(&theta, &GradientVector(vec![0.0; 3]), &AdamState::new(3), &P).unwrap();
        assert_eq!(next, theta);
        assert!(st.m.iter().chain(&st.v).all(|&x| x == 0.0));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so Δ = lr · g / (|g| + eps)
        let (next, _) = adam_step(&ParamVector(vec![0.0]), &GradientVector(vec![1.0]), &AdamState::new(1), &P).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((next.0[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn deterministic() {
        let theta = ParamVector(vec![0.1, 0.2]);
        let g = GradientVector(vec![0.5, -3.0]);
        let s = AdamState::new(2);
        assert_eq!(adam_step(&theta, &g, &s, &P).unwrap(), adam_step(&theta, &g, &s, &P).unwrap());
    }

    #[test]
    fn length_mismatch() {
        assert!(adam_step(&ParamVector(vec![0.0; 5]), &GradientVector(vec![0.0; 4]), &AdamState::new(5), &P).is_err());
    }
}
