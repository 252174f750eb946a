use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::numerics::DenseArray;

use super::{TrainConfig, TrainError};

/// Warmup length actually used for a run of `total_steps` updates.
///
/// The configured warmup applies when the run is longer than it; shorter
/// runs fall back to `short_run_warmup_steps`, capped so that at least one step
/// is left for decay.
pub fn effective_warmup(cfg: &TrainConfig, total_steps: usize) -> usize {
    if total_steps > cfg.warmup_steps {
        cfg.warmup_steps
    } else {
        cfg.short_run_warmup_steps.min(total_steps.saturating_sub(1))
    }
}

/// Linear warmup from 0, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig, total_steps: usize) -> f64 {
    let warmup = effective_warmup(cfg, total_steps);
    let base = cfg.learning_rate;
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    base * 0.5 * (1.0 + (PI * progress).cos())
}

/// Global L2 norm over every gradient array.
pub fn global_norm(grads: &BTreeMap<String, DenseArray>) -> f64 {
    grads.values().map(DenseArray::sum_squares).sum::<f64>().sqrt()
}

/// Rescales all gradients jointly so their global norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_gradients(grads: &mut BTreeMap<String, DenseArray>, max_norm: f64) -> Result<f64, TrainError> {
    if !(max_norm > 0.0) {
        return Err(TrainError::Config(format!("grad_clip_norm must be positive, got {max_norm}")));
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(TrainError::NonFinite {
            step: None,
            detail: format!("gradient of {name} is not finite"),
        });
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
    Ok(norm)
}

/// Decoupled weight-decay Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update. Weight decay touches only arrays for which
    /// `decayed(name, array)` is true.
    pub fn update<'a>(
        &mut self,
        params: impl Iterator<Item = (&'a String, &'a mut DenseArray)>,
        grads: &BTreeMap<String, DenseArray>,
        lr: f64,
        decayed: impl Fn(&str, &DenseArray) -> bool,
    ) -> Result<(), TrainError> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params {
            let g = grads
                .get(name)
                .ok_or_else(|| TrainError::Usage(format!("no gradient for parameter {name}")))?;
            if g.shape() != p.shape() {
                return Err(TrainError::Usage(format!(
                    "gradient shape {:?} differs from parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let decay = if decayed(name, p) { self.weight_decay } else { 0.0 };
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w *= 1.0 - lr * decay;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }
}
