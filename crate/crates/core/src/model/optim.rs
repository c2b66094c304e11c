//! SGD and Adam over flat parameter vectors.

use super::{ModelError, ParamVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Adam when omitted; the federated baseline pairs weighted averaging
    /// with Adam local steps.
    #[serde(default = "default_kind")]
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_kind() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            ..OptimizerConfig::sgd(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.learning_rate <= 0.0 || self.learning_rate.is_nan() {
            return Err(ModelError::InvalidSpec(
                "learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-worker optimizer state; Adam moments match the parameter length.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, dim: usize) -> Self {
        let moments = match config.kind {
            OptimizerKind::Adam => dim,
            OptimizerKind::Sgd => 0,
        };
        OptimizerState {
            config,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            step: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.step = 0;
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<(), ModelError> {
        if params.layout() != grad.layout() {
            return Err(ModelError::LayoutMismatch);
        }
        if !grad.is_finite() {
            return Err(ModelError::NonFiniteGradient);
        }
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.values_mut().iter_mut().zip(grad.values()) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.len() {
                    return Err(ModelError::LayoutMismatch);
                }
                self.step += 1;
                let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.epsilon);
                let bc1 = 1.0 - b1.powi(self.step as i32);
                let bc2 = 1.0 - b2.powi(self.step as i32);
                for ((p, &g), (m, v)) in params
                    .values_mut()
                    .iter_mut()
                    .zip(grad.values())
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layout;

    fn one_param(value: f64) -> ParamVector {
        ParamVector::from_values(Layout::new(&[("classifier.weight", 1)]), vec![value]).unwrap()
    }

    #[test]
    fn sgd_step() {
        let mut state = OptimizerState::new(OptimizerConfig::sgd(0.1), 1);
        let mut params = one_param(1.0);
        state.step(&mut params, &one_param(1.0)).unwrap();
        assert!((params.values()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut state = OptimizerState::new(OptimizerConfig::sgd(0.5), 1);
        let mut params = one_param(2.5);
        state.step(&mut params, &one_param(0.0)).unwrap();
        assert_eq!(params.values()[0], 2.5);
    }

    #[test]
    fn adam_first_step_is_nearly_lr() {
        // bias correction makes m_hat / sqrt(v_hat) ~ 1 for any positive c
        for c in [1e-3, 0.5, 2.0, 1e3] {
            let lr = 0.01;
            let mut state = OptimizerState::new(OptimizerConfig::adam(lr), 1);
            let mut params = one_param(0.0);
            state.step(&mut params, &one_param(c)).unwrap();
            let update = params.values()[0];
            assert!((update + lr).abs() <= 1e-4 * lr, "c={c}: update={update}");
        }
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut state = OptimizerState::new(OptimizerConfig::sgd(0.1), 1);
        let mut params = one_param(0.0);
        let err = state.step(&mut params, &one_param(f64::NAN)).unwrap_err();
        assert_eq!(err, ModelError::NonFiniteGradient);
    }
}
