//! Adam with decoupled weight decay, and the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::difftensor::tensor::ParamStore;
use crate::error::{HvprError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates, one slot per entry of the [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |_: ()| -> Vec<Vec<f64>> {
            store
                .iter()
                .map(|(_, p)| vec![0.0; p.tensor.numel()])
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }
}

/// One bias-corrected Adam update over every trainable parameter, reading the
/// gradients from each tensor's `grad` slot.
///
/// Weight decay is decoupled: `p -= lr * wd * p` is applied next to the
/// adaptive step instead of being folded into the gradient.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    lr: f64,
    config: &AdamConfig,
) -> Result<()> {
    for p in store.iter_mut() {
        if p.tensor.requires_grad && p.tensor.grad.is_none() {
            return Err(HvprError::MissingGradient {
                name: p.name.clone(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        if !p.tensor.requires_grad {
            continue;
        }
        let grad = p.tensor.grad.take().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let values = p.tensor.data_mut();
        for j in 0..values.len() {
            let g = grad[j];
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            values[j] -= lr * (mhat / (vhat.sqrt() + config.eps) + config.weight_decay * values[j]);
        }
    }
    Ok(())
}

/// `lr_min + 0.5 (lr_max - lr_min) (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(HvprError::InvalidArgument(format!(
            "cosine_lr: step {step} outside [0, {total_steps}]"
        )));
    }
    let phase = PI * step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::difftensor::tensor::Tensor;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[values.len()], values.to_vec()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = store_with(&[1.0, -2.0]);
        let mut st = AdamState::new(&s);
        let id = s.id("w").unwrap();
        s.accumulate_grad(id, &[0.0, 0.0]);
        adam_step(&mut s, &mut st, 1e-2, &AdamConfig::default()).unwrap();
        assert_eq!(s.tensor(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // Bias-corrected first moments: mhat = g, vhat = g^2, so the step is
        // lr * g / (|g| + eps).
        let mut s = store_with(&[0.0, 0.0]);
        let mut st = AdamState::new(&s);
        let id = s.id("w").unwrap();
        s.accumulate_grad(id, &[0.5, -3.0]);
        let cfg = AdamConfig::default();
        adam_step(&mut s, &mut st, 1e-3, &cfg).unwrap();
        let got = s.tensor(id).data();
        assert!((got[0] + 1e-3 * 0.5 / (0.5 + cfg.eps)).abs() < 1e-15);
        assert!((got[1] - 1e-3 * 3.0 / (3.0 + cfg.eps)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = store_with(&[1.0]);
        let mut st = AdamState::new(&s);
        let err = adam_step(&mut s, &mut st, 1e-3, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, HvprError::MissingGradient { name } if name == "w"));
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = store_with(&[0.3, 0.7, -0.1]);
            let mut st = AdamState::new(&s);
            let id = s.id("w").unwrap();
            for k in 0..10 {
                let g: Vec<f64> = s
                    .tensor(id)
                    .data()
                    .iter()
                    .map(|v| v * 2.0 + k as f64 * 0.01)
                    .collect();
                s.accumulate_grad(id, &g);
                adam_step(
                    &mut s,
                    &mut st,
                    3e-3,
                    &AdamConfig {
                        weight_decay: 1e-2,
                        ..Default::default()
                    },
                )
                .unwrap();
            }
            s.tensor(id).data().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 3e-3, 0.0).unwrap(), 3e-3);
        assert!((cosine_lr(100, 100, 3e-3, 1e-5).unwrap() - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 3e-3, 0.0).unwrap() - 1.5e-3).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 3e-3, 0.0).is_err());
        assert!(cosine_lr(0, 0, 3e-3, 0.0).is_err());
    }
}
