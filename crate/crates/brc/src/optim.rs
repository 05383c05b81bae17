//! AdamW with decoupled weight decay, and Polyak target averaging.

use std::fmt;

use crate::tensor::ParameterSet;

#[derive(Debug, Clone, PartialEq)]
pub enum OptimError {
    NonFiniteGrad { name: String },
    Misaligned { expected: String, got: String },
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::NonFiniteGrad { name } => {
                write!(f, "non-finite gradient for parameter '{name}'")
            }
            OptimError::Misaligned { expected, got } => {
                write!(f, "optimizer state misaligned: expected '{expected}', got '{got}'")
            }
        }
    }
}

impl std::error::Error for OptimError {}

/// First and second moment buffers for one parameter.
#[derive(Debug, Clone)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// AdamW state: per-parameter moments plus hyperparameters. Weight decay is
/// decoupled from the gradient-based step.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub moments: Vec<Moments>,
}

impl AdamWState {
    pub fn new(params: &ParameterSet, lr: f64, weight_decay: f64) -> Self {
        let moments = params
            .iter()
            .map(|(name, t)| Moments {
                name: name.to_string(),
                m: vec![0.0; t.numel()],
                v: vec![0.0; t.numel()],
            })
            .collect();
        AdamWState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, moments }
    }
}

/// One AdamW step: bias-corrected moment update plus decoupled decay
/// theta <- theta - lr * wd * theta. Gradients are cleared afterwards.
pub fn adamw_step(params: &mut ParameterSet, state: &mut AdamWState) -> Result<(), OptimError> {
    let t = params.bump_step();
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    for i in 0..params.len() {
        let mom = &mut state.moments[i];
        let (name, tensor) = params.entry_mut(i);
        if mom.name != name {
            return Err(OptimError::Misaligned {
                expected: mom.name.clone(),
                got: name.to_string(),
            });
        }
        let grad = tensor.grad_vec();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGrad { name: name.to_string() });
        }
        let data = tensor.data_mut();
        for j in 0..data.len() {
            let g = grad[j];
            mom.m[j] = state.beta1 * mom.m[j] + (1.0 - state.beta1) * g;
            mom.v[j] = state.beta2 * mom.v[j] + (1.0 - state.beta2) * g * g;
            let m_hat = mom.m[j] / bc1;
            let v_hat = mom.v[j] / bc2;
            let old = data[j];
            data[j] = old - state.lr * (m_hat / (v_hat.sqrt() + state.eps))
                - state.lr * state.weight_decay * old;
        }
        tensor.clear_grad();
    }
    Ok(())
}

/// Polyak averaging: target <- (1 - tau) * target + tau * online, elementwise.
pub fn polyak_update(online: &ParameterSet, target: &mut ParameterSet, tau: f64) {
    assert_eq!(online.len(), target.len(), "parameter sets differ in size");
    for i in 0..online.len() {
        let (on_name, on_t) = online.entry(i);
        let (tg_name, tg_t) = target.entry_mut(i);
        assert_eq!(on_name, tg_name, "parameter sets differ in layout");
        let src = on_t.data();
        let dst = tg_t.data_mut();
        assert_eq!(src.len(), dst.len(), "parameter '{on_name}' shape mismatch");
        for j in 0..dst.len() {
            dst[j] = (1.0 - tau) * dst[j] + tau * src[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single_param(theta: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::from_vec(&[1], vec![theta]).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_isolates_weight_decay() {
        let mut params = single_param(1.0);
        let mut state = AdamWState::new(&params, 0.01, 0.1);
        adamw_step(&mut params, &mut state).unwrap();
        let theta = params.get("w").unwrap().data()[0];
        assert!((theta - 0.999).abs() < 1e-15, "got {theta}");
    }

    #[test]
    fn single_step_matches_hand_expansion() {
        // theta=0, g=1, lr=3e-4, wd=0: bias correction makes m_hat = v_hat = 1,
        // so theta = -lr / (1 + eps).
        let mut params = single_param(0.0);
        params.get("w").unwrap().set_grad(&[1.0]);
        let mut state = AdamWState::new(&params, 3e-4, 0.0);
        adamw_step(&mut params, &mut state).unwrap();
        let theta = params.get("w").unwrap().data()[0];
        assert!((theta - (-3e-4)).abs() <= 1e-8, "got {theta}");
        // grads cleared
        assert_eq!(*params.get("w").unwrap().grad(), vec![0.0]);
    }

    #[test]
    fn constant_gradient_step_size_approaches_lr() {
        let mut params = single_param(0.0);
        let mut state = AdamWState::new(&params, 1e-3, 0.0);
        let mut prev = 0.0;
        let mut last_delta = 0.0;
        for _ in 0..5000 {
            params.get("w").unwrap().set_grad(&[0.5]);
            adamw_step(&mut params, &mut state).unwrap();
            let cur = params.get("w").unwrap().data()[0];
            last_delta = (cur - prev).abs();
            prev = cur;
        }
        assert!(
            (last_delta - 1e-3).abs() < 1e-5,
            "saturated step {last_delta} should approach lr"
        );
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut params = ParameterSet::new();
        params.insert("ok", Tensor::scalar(1.0)).unwrap();
        params.insert("bad", Tensor::scalar(1.0)).unwrap();
        params.get("bad").unwrap().set_grad(&[f64::NAN]);
        let mut state = AdamWState::new(&params, 1e-3, 0.0);
        let err = adamw_step(&mut params, &mut state).unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGrad { name: "bad".into() });
    }

    #[test]
    fn polyak_endpoints_and_interpolation() {
        let online = single_param(1.0);
        let mut target = single_param(0.0);
        polyak_update(&online, &mut target, 0.0);
        assert_eq!(target.get("w").unwrap().data()[0], 0.0);
        polyak_update(&online, &mut target, 0.005);
        assert!((target.get("w").unwrap().data()[0] - 0.005).abs() < 1e-15);
        let mut target = single_param(0.25);
        polyak_update(&online, &mut target, 1.0);
        assert_eq!(target.get("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn steps_are_deterministic_and_bit_identical() {
        let run = || {
            let mut params = single_param(0.3);
            let mut state = AdamWState::new(&params, 3e-4, 1e-4);
            for k in 0..50 {
                params.get("w").unwrap().set_grad(&[(k as f64 * 0.77).sin()]);
                adamw_step(&mut params, &mut state).unwrap();
            }
            params.get("w").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
