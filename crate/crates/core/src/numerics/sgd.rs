use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// How `clip_norm` bounds the gradients before an update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Rescale all gradients jointly so their global l2 norm is at most
    /// `clip_norm`.
    Norm,
    /// Clamp every gradient entry to `[-clip_norm, clip_norm]`.
    #[default]
    Value,
    /// No clipping.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub clip_mode: ClipMode,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            weight_decay: 1e-4,
            clip_norm: 0.1,
            clip_mode: ClipMode::default(),
        }
    }
}

impl SgdConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        SgdConfig {
            learning_rate,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// Global l2 norm over every parameter gradient.
pub fn grad_norm(params: &[&mut Tensor]) -> f64 {
    params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// One SGD update: clip, then `p <- p - lr * (grad + weight_decay * p)`,
/// then zero the gradients.
pub fn sgd_step(params: &mut [&mut Tensor], cfg: &SgdConfig) -> Result<()> {
    cfg.validate()?;
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::MissingGrad(i));
    }
    if params.iter().any(|p| p.grad().unwrap().iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFinite("gradient"));
    }

    let rescale = match cfg.clip_mode {
        ClipMode::Norm => {
            let norm = grad_norm(params);
            (norm > cfg.clip_norm).then(|| cfg.clip_norm / norm)
        }
        _ => None,
    };

    for p in params.iter_mut() {
        let (values, grad) = p.split_mut();
        let grad = grad.expect("checked above");
        for (v, g) in values.iter_mut().zip(grad.iter_mut()) {
            let mut eff = *g;
            match cfg.clip_mode {
                ClipMode::Norm => {
                    if let Some(s) = rescale {
                        eff *= s;
                    }
                }
                ClipMode::Value => eff = eff.clamp(-cfg.clip_norm, cfg.clip_norm),
                ClipMode::Off => {}
            }
            *v -= cfg.learning_rate * (eff + cfg.weight_decay * *v);
            *g = 0.0;
        }
    }
    Ok(())
}
