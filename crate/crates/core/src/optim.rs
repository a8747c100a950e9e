//! AdamW with decoupled weight decay.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::nn::Module;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimError {
    NonFiniteGrad { param: String },
    ShapeChanged { param: String },
    InvalidLr(f32),
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::NonFiniteGrad { param } => {
                write!(f, "non-finite gradient in parameter `{param}`; step aborted")
            }
            OptimError::ShapeChanged { param } => {
                write!(f, "parameter `{param}` changed size since its moments were created")
            }
            OptimError::InvalidLr(lr) => write!(f, "learning rate must be positive, got {lr}"),
        }
    }
}

impl std::error::Error for OptimError {}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Optimizer state: moment buffers keyed by qualified parameter name.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every trainable tensor carrying a gradient.
    ///
    /// Each `(prefix, module)` pair namespaces the module's parameters. All
    /// gradients are checked before any parameter is touched, so a non-finite
    /// gradient leaves the whole parameter set unchanged.
    pub fn step(&mut self, modules: &mut [(&str, &mut dyn Module)]) -> Result<(), OptimError> {
        if self.config.lr.is_nan() || self.config.lr <= 0.0 {
            return Err(OptimError::InvalidLr(self.config.lr));
        }
        let mut bad = None;
        for (prefix, module) in modules.iter() {
            module.visit(&mut |name, t| {
                if bad.is_none() && t.requires_grad() {
                    if let Some(g) = t.grad() {
                        if g.iter().any(|x| !x.is_finite()) {
                            bad = Some(format!("{prefix}{name}"));
                        }
                    }
                }
            });
        }
        if let Some(param) = bad {
            return Err(OptimError::NonFiniteGrad { param });
        }

        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut result = Ok(());
        for (prefix, module) in modules.iter_mut() {
            module.visit_mut(&mut |name, t| {
                if !t.requires_grad() || result.is_err() {
                    return;
                }
                let Some(g) = t.grad().map(|g| g.to_vec()) else { return };
                let key = format!("{prefix}{name}");
                let st = self.moments.entry(key.clone()).or_insert_with(|| Moments {
                    m: vec![0.0; g.len()],
                    v: vec![0.0; g.len()],
                });
                if st.m.len() != g.len() {
                    result = Err(OptimError::ShapeChanged { param: key });
                    return;
                }
                for (i, p) in t.data_mut().iter_mut().enumerate() {
                    *p -= lr * weight_decay * *p;
                    st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g[i];
                    st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g[i] * g[i];
                    let mhat = st.m[i] / bc1;
                    let vhat = st.v[i] / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                }
            });
        }
        result
    }
}
