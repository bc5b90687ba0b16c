//! First-order optimizers ("kongfu") and learning-rate schemes.
//!
//! One optimizer owns one velocity tensor per parameter and applies classical
//! momentum:
//!
//! ```text
//! v ← μ·v + g        θ ← θ − η(clock)·v
//! ```
//!
//! With μ = 0 this is plain SGD. The learning rate η may depend on the clock
//! (the global step counter) through a scheme; weight decay is not handled
//! here — blocks add their decay terms to the loss, so decay gradients arrive
//! through `g` like everything else.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blocks::Param;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the learning rate evolves over the clock.
#[derive(Clone, Debug, PartialEq)]
pub enum LrScheme {
    /// Same rate at every step.
    Constant { lr: f64 },
    /// Rate supplied from outside before each step (e.g. by a schedule the
    /// caller computes); stepping without supplying one is an error.
    Placeholder,
    /// `lr · rate^floor(clock / steps)`: multiply by `decay_rate` every
    /// `decay_steps` steps.
    ExpDecay {
        lr: f64,
        decay_rate: f64,
        decay_steps: u64,
    },
}

/// Serde form: `{"type": "constant", "lr": 0.025}`, `{"type": "placeholder"}`
/// or `{"type": "exp_decay", "lr": 0.1, "decay_rate": 0.5, "decay_steps": 10}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchemeConfig {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub decay_rate: Option<f64>,
    #[serde(default)]
    pub decay_steps: Option<u64>,
}

impl LrSchemeConfig {
    pub fn build(&self) -> Result<LrScheme> {
        let lr_field = |name: &str| {
            self.lr.ok_or_else(|| {
                Error::Config(format!("{name} learning-rate scheme needs lr"))
            })
        };
        let scheme = match self.kind.as_str() {
            "constant" => LrScheme::Constant { lr: lr_field("constant")? },
            "placeholder" => LrScheme::Placeholder,
            "exp_decay" => LrScheme::ExpDecay {
                lr: lr_field("exp_decay")?,
                decay_rate: self.decay_rate.ok_or_else(|| {
                    Error::Config("exp_decay scheme needs decay_rate".into())
                })?,
                decay_steps: self.decay_steps.ok_or_else(|| {
                    Error::Config("exp_decay scheme needs decay_steps".into())
                })?,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown learning-rate scheme {other:?} (constant, placeholder, exp_decay)"
                )))
            }
        };
        validate_scheme(&scheme)?;
        Ok(scheme)
    }
}

fn validate_scheme(scheme: &LrScheme) -> Result<()> {
    let check_lr = |lr: f64| {
        if lr > 0.0 && lr.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("learning rate must be positive, got {lr}")))
        }
    };
    match scheme {
        LrScheme::Constant { lr } => check_lr(*lr),
        LrScheme::Placeholder => Ok(()),
        LrScheme::ExpDecay {
            lr,
            decay_rate,
            decay_steps,
        } => {
            check_lr(*lr)?;
            if !(*decay_rate > 0.0 && decay_rate.is_finite()) {
                return Err(Error::Config(format!(
                    "decay_rate must be positive, got {decay_rate}"
                )));
            }
            if *decay_steps == 0 {
                return Err(Error::Config("decay_steps must be at least 1".into()));
            }
            Ok(())
        }
    }
}

/// Serde form of an optimizer:
/// `{"type": "momentum", "momentum": 0.9, "lr_scheme": {...}}` or
/// `{"type": "sgd", "lr_scheme": {...}}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KongFuConfig {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub momentum: Option<f64>,
    pub lr_scheme: LrSchemeConfig,
}

impl KongFuConfig {
    pub fn build<S: Scalar>(&self) -> Result<KongFu<S>> {
        let momentum = match self.kind.as_str() {
            "momentum" => self.momentum.unwrap_or(0.9),
            "sgd" => match self.momentum {
                None | Some(0.0) => 0.0,
                Some(mu) => {
                    return Err(Error::Config(format!(
                        "sgd does not take a momentum coefficient (got {mu}); use type \"momentum\""
                    )))
                }
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown optimizer type {other:?} (momentum or sgd)"
                )))
            }
        };
        KongFu::new(momentum, self.lr_scheme.build()?)
    }
}

/// Momentum optimizer with per-parameter velocity state.
#[derive(Clone, Debug)]
pub struct KongFu<S: Scalar> {
    momentum: f64,
    scheme: LrScheme,
    placeholder_lr: Option<f64>,
    velocity: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> KongFu<S> {
    pub fn new(momentum: f64, scheme: LrScheme) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        validate_scheme(&scheme)?;
        Ok(KongFu {
            momentum,
            scheme,
            placeholder_lr: None,
            velocity: BTreeMap::new(),
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn scheme(&self) -> &LrScheme {
        &self.scheme
    }

    /// Supplies the rate for the placeholder scheme (kept until replaced).
    pub fn set_placeholder_lr(&mut self, lr: f64) -> Result<()> {
        if !matches!(self.scheme, LrScheme::Placeholder) {
            return Err(Error::Config(
                "set_placeholder_lr only applies to the placeholder scheme".into(),
            ));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.placeholder_lr = Some(lr);
        Ok(())
    }

    /// The rate the next step at this clock would use.
    pub fn learning_rate(&self, clock: u64) -> Result<f64> {
        match &self.scheme {
            LrScheme::Constant { lr } => Ok(*lr),
            LrScheme::Placeholder => self.placeholder_lr.ok_or_else(|| {
                Error::Config("placeholder learning rate was never supplied".into())
            }),
            LrScheme::ExpDecay {
                lr,
                decay_rate,
                decay_steps,
            } => Ok(lr * decay_rate.powi((clock / decay_steps) as i32)),
        }
    }

    /// Applies one update to every given parameter. `grads` must contain an
    /// entry per parameter, keyed by the parameter's (scoped) name.
    pub fn step(
        &mut self,
        params: &[Param<S>],
        grads: &BTreeMap<String, Tensor<S>>,
        clock: u64,
    ) -> Result<()> {
        let lr = S::from_f64_lossy(self.learning_rate(clock)?);
        let mu = S::from_f64_lossy(self.momentum);
        for param in params {
            let name = param.name();
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            let shape = param.shape();
            if grad.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "kongfu.step",
                    format!(
                        "gradient for {name} has shape {:?}, parameter has {:?}",
                        grad.shape(),
                        shape
                    ),
                ));
            }
            let velocity = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(shape));
            for (v, &g) in velocity.data_mut().iter_mut().zip(grad.data()) {
                *v = mu * *v + g;
            }
            let velocity = &*velocity;
            param.update_with(|value| {
                for (p, &v) in value.data_mut().iter_mut().zip(velocity.data()) {
                    *p = *p - lr * v;
                }
            });
        }
        Ok(())
    }

    /// Velocity snapshot for checkpointing (empty until the first step).
    pub fn velocity(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.velocity
    }

    /// Restores velocity state from a checkpoint.
    pub fn set_velocity(&mut self, velocity: BTreeMap<String, Tensor<S>>) {
        self.velocity = velocity;
    }
}
