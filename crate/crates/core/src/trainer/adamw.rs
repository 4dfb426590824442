//! Decoupled-weight-decay Adam with bias correction, plus global-norm
//! gradient clipping. Moments are kept in f64 keyed by parameter name, so
//! the update is a pure deterministic function of (state, gradients).

use super::TrainError;
use crate::model::Model;
use crate::numerics::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Accumulated gradients for one optimizer step, keyed by parameter name.
pub type GradMap = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0) || !(0.0 < self.beta2 && self.beta2 < 1.0) {
            return bad(format!(
                "betas must lie in (0, 1), got {} / {}",
                self.beta1, self.beta2
            ));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        Ok(())
    }
}

/// Adam moment state for one parameter tensor.
#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    t: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            t: 0,
            state: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter named in `grads`. Parameters
    /// absent from the map (the frozen base) are untouched, including by
    /// weight decay. Non-finite gradients abort before any mutation.
    pub fn step<S: Scalar>(
        &mut self,
        model: &mut Model<S>,
        grads: &GradMap,
    ) -> Result<(), TrainError> {
        for (name, g) in grads {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGrad {
                    param: name.clone(),
                    index: i,
                    value: g[i],
                });
            }
        }
        // Shape-check against the model before mutating anything.
        let mut seen = 0usize;
        let mut shape_err: Option<TrainError> = None;
        model.for_each_param(|name, t| {
            if let Some(g) = grads.get(name) {
                seen += 1;
                if g.len() != t.numel() && shape_err.is_none() {
                    shape_err = Some(TrainError::GradShape {
                        param: name.to_owned(),
                        expected: t.numel(),
                        found: g.len(),
                    });
                }
            }
        });
        if let Some(e) = shape_err {
            return Err(e);
        }
        if seen != grads.len() {
            let mut names: std::collections::BTreeSet<&str> =
                grads.keys().map(|s| s.as_str()).collect();
            model.for_each_param(|name, _| {
                names.remove(name);
            });
            return Err(TrainError::UnknownParam {
                param: names
                    .iter()
                    .next()
                    .map(|s| (*s).to_owned())
                    .unwrap_or_default(),
            });
        }

        self.t += 1;
        let t = self.t as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let state = &mut self.state;
        model.for_each_param_mut(|name, tensor| {
            let Some(g) = grads.get(name) else { return };
            let n = tensor.numel();
            let mom = state.entry(name.to_owned()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let data = tensor.data_mut();
            for i in 0..n {
                let gi = g[i];
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * gi;
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                let theta = data[i].as_f64();
                let update = m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * theta;
                data[i] = S::from_f64(theta - c.lr * update);
            }
        });
        Ok(())
    }
}

/// Scales `grads` in place so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&x| x * x)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Global L2 norm of a gradient map.
pub fn global_norm(grads: &GradMap) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&x| x * x)
        .sum::<f64>()
        .sqrt()
}
