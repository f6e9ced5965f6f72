//! Adam with bias correction and optional linear learning-rate warmup.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::graph::NamedTensors;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Steps of linear warmup from 0 to `learning_rate`; 0 disables.
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_steps: 0,
        }
    }
}

/// Per-parameter moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &NamedTensors) -> Self {
        let first = params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        let second = params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        AdamState {
            config,
            first,
            second,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One bias-corrected update; increments the step counter.
    pub fn step(&mut self, params: &mut NamedTensors, grads: &NamedTensors) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let c = self.config;
        let lr = if c.warmup_steps > 0 && t <= c.warmup_steps {
            c.learning_rate * t as f64 / c.warmup_steps as f64
        } else {
            c.learning_rate
        };
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);

        for (name, param) in params.iter_mut() {
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::input(format!("missing gradient for '{name}'")))?;
            if grad.shape() != param.shape() {
                return Err(Error::input(format!(
                    "gradient shape {:?} does not match parameter '{name}' {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let m = self.first.get_mut(name).expect("moment registered");
            let v = self.second.get_mut(name).expect("moment registered");
            for i in 0..param.len() {
                let g = grad.data()[i];
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * g;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                param.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> NamedTensors {
        let mut p = NamedTensors::new();
        p.insert("w".into(), Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = single_param(1.5);
        let grads = single_param(0.0);
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(params["w"].data()[0], 1.5);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction, m_hat / sqrt(v_hat) = sign(g) at step 1.
        let mut params = single_param(1.0);
        let grads = single_param(2.0);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            epsilon: 1e-15,
            ..Default::default()
        };
        let mut adam = AdamState::new(cfg, &params);
        adam.step(&mut params, &grads).unwrap();
        assert!((params["w"].data()[0] - 0.9).abs() < 1e-9);
    }

    #[test]
    fn two_steps_match_hand_stepped_recurrences() {
        // Hand-executed Adam with constant gradient g = 1, lr = 0.1.
        let g = 1.0;
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.1);
        let mut m = 0.0;
        let mut v = 0.0;
        let mut w_ref: f64 = 0.5;
        for t in 1..=2u32 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1_pow(b1, t));
            let v_hat = v / (1.0 - b1_pow(b2, t));
            w_ref -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut params = single_param(0.5);
        let grads = single_param(g);
        let cfg = AdamConfig {
            learning_rate: lr,
            ..Default::default()
        };
        let mut adam = AdamState::new(cfg, &params);
        adam.step(&mut params, &grads).unwrap();
        adam.step(&mut params, &grads).unwrap();
        assert!((params["w"].data()[0] - w_ref).abs() < 1e-12);
    }

    fn b1_pow(b: f64, t: u32) -> f64 {
        b.powi(t as i32)
    }

    #[test]
    fn warmup_scales_the_first_steps() {
        let grads = single_param(1.0);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            warmup_steps: 4,
            epsilon: 1e-15,
            ..Default::default()
        };
        let mut params = single_param(0.0);
        let mut adam = AdamState::new(cfg, &params);
        adam.step(&mut params, &grads).unwrap();
        // Step 1 of 4 warmup steps: effective lr = 0.1 * 1/4 = 0.025.
        assert!((params["w"].data()[0] + 0.025).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_an_input_error() {
        let mut params = single_param(0.0);
        let mut grads = NamedTensors::new();
        grads.insert("w".into(), Tensor::zeros(&[2]));
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        assert!(adam.step(&mut params, &grads).is_err());
    }
}
