use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::policy::PrecisionPolicy;
use super::AutodiffError;
use crate::tensor::{Precision, PrecisionMatrix};

/// Adam with coupled L2 weight decay (`g += weight_decay * w`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl AdamConfig {
    pub fn new(lr: f32, weight_decay: f32) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn classifier() -> AdamConfig {
        AdamConfig::new(0.01, 5e-4)
    }

    pub fn autoencoder() -> AdamConfig {
        AdamConfig::new(0.01, 0.0)
    }
}

/// A trainable tensor with its optimizer state.
///
/// `working` is what the tape sees. Under master-weight policies the
/// optimizer updates an FP32 `master` copy and re-narrows it into `working`.
pub struct ParamState {
    name: String,
    working: Arc<PrecisionMatrix>,
    master: Option<PrecisionMatrix>,
    m: PrecisionMatrix,
    v: PrecisionMatrix,
}

impl ParamState {
    /// `init` is the FP32 initial value; it is cast per `policy`.
    pub fn new(name: &str, init: &PrecisionMatrix, policy: &PrecisionPolicy) -> Result<ParamState, AutodiffError> {
        let acct = init.accountant();
        let (rows, cols) = init.shape();
        let working = Arc::new(init.cast(policy.weight_precision())?);
        let master = if policy.master_weights {
            Some(init.cast(Precision::Fp32)?)
        } else {
            None
        };
        let m = PrecisionMatrix::zeros(acct, rows, cols, policy.moment_precision())?;
        let v = PrecisionMatrix::zeros(acct, rows, cols, policy.moment_precision())?;
        Ok(ParamState {
            name: name.to_string(),
            working,
            master,
            m,
            v,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn working(&self) -> &Arc<PrecisionMatrix> {
        &self.working
    }

    pub fn master(&self) -> Option<&PrecisionMatrix> {
        self.master.as_ref()
    }

    pub fn moments(&self) -> (&PrecisionMatrix, &PrecisionMatrix) {
        (&self.m, &self.v)
    }

    /// The values the optimizer updates, widened to FP32.
    pub fn reference_values(&self) -> Vec<f32> {
        self.master.as_ref().unwrap_or(&self.working).to_vec()
    }

    fn write_weights(&mut self, data: &[f32]) -> Result<(), AutodiffError> {
        if let Some(master) = &mut self.master {
            master.assign_f32(data)?;
        }
        match Arc::get_mut(&mut self.working) {
            Some(w) => w.assign_f32(data)?,
            None => {
                let w = &self.working;
                self.working = Arc::new(w.new_like(w.rows(), w.cols(), data.to_vec(), w.precision())?);
            }
        }
        Ok(())
    }
}

pub struct Adam {
    config: AdamConfig,
    steps: u32,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Adam {
        Adam { config, steps: 0 }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// Updates applied so far; skipped steps are not counted.
    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// One update from unscaled FP32 gradients, `grads[i]` belonging to
    /// `params[i]`. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [ParamState], grads: &[Vec<f32>]) -> Result<(), AutodiffError> {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        for (p, g) in params.iter().zip(grads) {
            if g.len() != p.working.len() {
                return Err(crate::tensor::TensorError::ShapeMismatch {
                    op: "optimizer_step",
                    left: p.working.shape(),
                    right: (g.len(), 1),
                }
                .into());
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(AutodiffError::NonFiniteGradient {
                    param: p.name.clone(),
                });
            }
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (p, g) in params.iter_mut().zip(grads) {
            let mut w = p.reference_values();
            let mut m = p.m.to_vec();
            let mut v = p.v.to_vec();
            for i in 0..w.len() {
                let gi = g[i] + c.weight_decay * w[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                // Moments are read back at their stored precision.
                m[i] = p.m.precision().round(m[i]);
                v[i] = p.v.precision().round(v[i]);
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                w[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            p.m.assign_f32(&m)?;
            p.v.assign_f32(&v)?;
            p.write_weights(&w)?;
        }
        Ok(())
    }
}
