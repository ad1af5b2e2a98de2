//! Standard first-order optimizers with per-parameter moment buffers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backprop::Gradients;
use crate::error::{LabError, Result};
use crate::model::{MoEModel, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adamw,
    Rmsprop,
    Adagrad,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [Self::Sgd, Self::Adam, Self::Adamw, Self::Rmsprop, Self::Adagrad];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
            Self::Adamw => "adamw",
            Self::Rmsprop => "rmsprop",
            Self::Adagrad => "adagrad",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
    }

    fn default_weight_decay(self) -> f64 {
        match self {
            Self::Adamw => 0.01,
            _ => 0.0,
        }
    }

    fn default_eps(self) -> f64 {
        match self {
            Self::Adagrad => 1e-10,
            _ => 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    /// Falls back to the kind's default (1e-10 for Adagrad, 1e-8 otherwise).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    /// Falls back to 0.01 for AdamW and 0 for the rest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    /// RMSProp smoothing constant.
    #[serde(default = "default_rms_alpha")]
    pub rms_alpha: f64,
    #[serde(default)]
    pub momentum: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_rms_alpha() -> f64 {
    0.99
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: None,
            weight_decay: None,
            rms_alpha: default_rms_alpha(),
            momentum: 0.0,
        }
    }

    pub fn eps(&self) -> f64 {
        self.eps.unwrap_or_else(|| self.kind.default_eps())
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
            .unwrap_or_else(|| self.kind.default_weight_decay())
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(LabError::config(format!("{path}.{field}"), msg))
            }
        };
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be positive")?;
        check((0.0..1.0).contains(&self.beta1), "beta1", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2", "must lie in [0, 1)")?;
        check(self.eps() > 0.0, "eps", "must be positive")?;
        check(self.weight_decay() >= 0.0, "weight_decay", "must be non-negative")?;
        check((0.0..1.0).contains(&self.rms_alpha), "rms_alpha", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.momentum), "momentum", "must lie in [0, 1)")
    }
}

/// First and second moment buffers for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseOptimizer {
    pub config: OptimizerConfig,
    step: u64,
    state: BTreeMap<ParamId, Moments>,
}

impl BaseOptimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn from_parts(config: OptimizerConfig, step: u64, state: BTreeMap<ParamId, Moments>) -> Self {
        Self { config, step, state }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.config.kind
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> &BTreeMap<ParamId, Moments> {
        &self.state
    }

    /// Number of floats held in moment buffers.
    pub fn state_floats(&self) -> usize {
        self.state
            .values()
            .map(|m| m.first.len() + m.second.len())
            .sum()
    }

    /// Floats this optimizer kind keeps per parameter.
    pub fn floats_per_param(&self) -> usize {
        match self.config.kind {
            OptimizerKind::Sgd => usize::from(self.config.momentum > 0.0),
            OptimizerKind::Adam | OptimizerKind::Adamw => 2,
            OptimizerKind::Rmsprop | OptimizerKind::Adagrad => 1,
        }
    }

    /// Applies one step to every parameter of `model`.
    pub fn step(&mut self, model: &mut MoEModel, grads: &Gradients) -> Result<()> {
        self.step += 1;
        for id in model.param_ids() {
            self.update_param(model, id, grads)?;
        }
        Ok(())
    }

    fn update_param(&mut self, model: &mut MoEModel, id: ParamId, grads: &Gradients) -> Result<()> {
        let g = grads.get(id).as_slice();
        let cfg = &self.config;
        let lr = cfg.lr;
        let eps = cfg.eps();
        let wd = cfg.weight_decay();
        let t = self.step as i32;
        let params = model.param_mut(id);
        if params.len() != g.len() {
            return Err(LabError::contract(format!(
                "gradient for {} has {} entries, parameter has {}",
                id.name(),
                g.len(),
                params.len()
            )));
        }
        let n = params.len();
        let mom = self.state.entry(id).or_default();
        match cfg.kind {
            OptimizerKind::Sgd => {
                if cfg.momentum > 0.0 {
                    mom.first.resize(n, 0.0);
                    for ((p, gi), b) in params.iter_mut().zip(g).zip(mom.first.iter_mut()) {
                        *b = cfg.momentum * *b + gi + wd * *p;
                        *p -= lr * *b;
                    }
                } else {
                    for (p, gi) in params.iter_mut().zip(g) {
                        *p -= lr * (gi + wd * *p);
                    }
                }
            }
            OptimizerKind::Adam | OptimizerKind::Adamw => {
                mom.first.resize(n, 0.0);
                mom.second.resize(n, 0.0);
                let decoupled = cfg.kind == OptimizerKind::Adamw;
                let bc1 = 1.0 - cfg.beta1.powi(t);
                let bc2 = 1.0 - cfg.beta2.powi(t);
                for (((p, gi), m), v) in params
                    .iter_mut()
                    .zip(g)
                    .zip(mom.first.iter_mut())
                    .zip(mom.second.iter_mut())
                {
                    let grad = if decoupled {
                        *p *= 1.0 - lr * wd;
                        *gi
                    } else {
                        gi + wd * *p
                    };
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * grad;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * grad * grad;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            OptimizerKind::Rmsprop => {
                mom.second.resize(n, 0.0);
                for ((p, gi), v) in params.iter_mut().zip(g).zip(mom.second.iter_mut()) {
                    let grad = gi + wd * *p;
                    *v = cfg.rms_alpha * *v + (1.0 - cfg.rms_alpha) * grad * grad;
                    *p -= lr * grad / (v.sqrt() + eps);
                }
            }
            OptimizerKind::Adagrad => {
                mom.second.resize(n, 0.0);
                for ((p, gi), v) in params.iter_mut().zip(g).zip(mom.second.iter_mut()) {
                    let grad = gi + wd * *p;
                    *v += grad * grad;
                    *p -= lr * grad / (v.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
