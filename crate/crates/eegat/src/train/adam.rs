//! Adam with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 5.8e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
}

impl AdamState {
    pub fn step_count(&self) -> usize {
        self.t
    }
}

/// One optimizer step over all parameter tensors.
///
/// Weight decay is decoupled: `p <- p - lr * wd * p` happens before the
/// moment update, which sees only the loss gradient.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() {
        return Err(TrainError::LengthMismatch(params.len(), grads.len()));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        state.v = state.m.clone();
    }
    state.t += 1;
    let t = state.t as f64;
    let bias1 = 1.0 - cfg.beta1.powf(t);
    let bias2 = 1.0 - cfg.beta2.powf(t);

    for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
        if param.shape() != grad.shape() {
            return Err(TrainError::ShapeMismatch(i));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for k in 0..param.len() {
            let p = &mut param.data_mut()[k];
            *p -= cfg.lr * cfg.weight_decay * *p;
            let g = grad.data()[k];
            let mk = &mut m.data_mut()[k];
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * g;
            let vk = &mut v.data_mut()[k];
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * g * g;
            let m_hat = *mk / bias1;
            let v_hat = *vk / bias2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_no_decay(lr: f64) -> AdamConfig {
        AdamConfig { lr, weight_decay: 0.0, ..AdamConfig::default() }
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(0.3);
        let mut state = AdamState::default();
        let cfg = cfg_no_decay(1e-3);
        adam_step(&mut [&mut p], &[g.clone()], &mut state, &cfg).unwrap();
        let delta = (p.item() - 1.0).abs();
        let expected = cfg.lr * 0.3 / (0.3 + cfg.epsilon);
        assert!((delta - expected).abs() < 1e-15, "delta {delta}");
        assert!((delta - cfg.lr).abs() < 1e-6, "first step is about lr");
    }

    #[test]
    fn zero_gradient_leaves_parameters_alone() {
        let mut p = Tensor::new(1, 3, vec![0.5, -0.25, 2.0]);
        let original = p.clone();
        let mut state = AdamState::default();
        for _ in 0..5 {
            adam_step(
                &mut [&mut p],
                &[Tensor::zeros(1, 3)],
                &mut state,
                &cfg_no_decay(0.1),
            )
            .unwrap();
        }
        assert_eq!(p, original);
    }

    // Independent scalar Adam, written directly from the update equations.
    fn reference_adam(mut p: f64, steps: usize, lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=steps {
            let g = 2.0 * p; // d/dp p^2
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p
    }

    #[test]
    fn trajectory_matches_reference_on_quadratic() {
        let mut p = Tensor::scalar(1.0);
        let mut state = AdamState::default();
        let cfg = cfg_no_decay(0.1);
        for _ in 0..10 {
            let g = Tensor::scalar(2.0 * p.item());
            adam_step(&mut [&mut p], &[g], &mut state, &cfg).unwrap();
        }
        let expected = reference_adam(1.0, 10, 0.1);
        assert!((p.item() - expected).abs() < 1e-12, "{} vs {expected}", p.item());
    }

    #[test]
    fn decoupled_decay_shrinks_before_update() {
        let mut p = Tensor::scalar(1.0);
        let mut state = AdamState::default();
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.5, ..AdamConfig::default() };
        adam_step(&mut [&mut p], &[Tensor::scalar(0.0)], &mut state, &cfg).unwrap();
        // Zero gradient: only the decay applies, p <- p - lr*wd*p = 0.95.
        assert!((p.item() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros(2, 2);
        let mut state = AdamState::default();
        let err = adam_step(
            &mut [&mut p],
            &[Tensor::zeros(2, 3)],
            &mut state,
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::ShapeMismatch(0)));
    }
}
