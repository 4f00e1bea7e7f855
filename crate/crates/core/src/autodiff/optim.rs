use crate::error::{CbbError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    /// Momentum 0.9, weight decay 1e-4, learning rate 0.01.
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// SGD with heavy-ball momentum and coupled weight decay:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * p
/// p <- p - lr * v
/// ```
///
/// Velocity buffers are matched to parameters by position, so the same
/// parameter order must be passed on every step.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one update and clears every gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(CbbError::Usage(format!("parameter {i} has no gradient")));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        } else if self.velocity.len() != params.len()
            || self
                .velocity
                .iter()
                .zip(params.iter())
                .any(|(v, p)| v.len() != p.numel())
        {
            return Err(CbbError::Usage(
                "parameter list changed between optimizer steps".into(),
            ));
        }
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let g = p.take_grad().expect("checked above");
            for ((x, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vi = momentum * *vi + gi + weight_decay * *x;
                *x -= lr * *vi;
            }
            p.check_finite("sgd_step")?;
        }
        Ok(())
    }
}
