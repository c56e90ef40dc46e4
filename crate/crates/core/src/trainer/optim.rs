use serde::{Deserialize, Serialize};

use super::schedule::FreezePolicy;
use crate::error::Result;
use crate::model::{group_of, Model};
use crate::tensor::Params;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_visual: usize,
    pub batch_text: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_visual: 64,
            batch_text: 10,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite()
            || self.lr <= 0.0
            || self.weight_decay < 0.0
            || self.batch_visual == 0
            || self.batch_text == 0
        {
            return Err(crate::Error::Config(
                "optimizer.lr and batch sizes must be positive, weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Cosine decay from `peak` at step 0 to 0 at step `total`.
pub fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return peak;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Per-tensor trainable flags, in the model's visit order.
pub fn build_freeze_mask(policy: &FreezePolicy, model: &Model) -> Result<Vec<bool>> {
    let groups = crate::model::all_groups();
    if let Some(bad) = policy.frozen.iter().find(|g| !groups.contains(g)) {
        return Err(crate::Error::Config(format!(
            "freeze policy names unknown group `{bad}`"
        )));
    }
    let mut mask = Vec::new();
    model.visit("", &mut |name, _| mask.push(!policy.frozen.contains(&group_of(name))));
    Ok(mask)
}

/// AdamW moments and per-tensor step counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let mut m = Vec::new();
        model.visit("", &mut |_, x| m.push(vec![0.0; x.len()]));
        let v = m.clone();
        let steps = vec![0; m.len()];
        Self { m, v, steps }
    }

    /// One decoupled-weight-decay Adam update on tensors where `update[i]`.
    /// Tensors not updated keep both their values and their moments.
    pub fn step(&mut self, model: &mut Model, grad: &Model, update: &[bool], lr: f64, cfg: &OptimizerConfig) {
        let mut grads: Vec<Vec<f64>> = Vec::new();
        grad.visit("", &mut |_, g| grads.push(g.to_vec()));
        let mut i = 0;
        model.visit_mut("", &mut |_, p| {
            if update[i] {
                self.steps[i] += 1;
                let t = self.steps[i] as i32;
                let bc1 = 1.0 - cfg.beta1.powi(t);
                let bc2 = 1.0 - cfg.beta2.powi(t);
                let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
                for k in 0..p.len() {
                    m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                    v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                    let mhat = m[k] / bc1;
                    let vhat = v[k] / bc2;
                    p[k] -= lr * cfg.weight_decay * p[k];
                    p[k] -= lr * mhat / (vhat.sqrt() + cfg.eps);
                }
            }
            i += 1;
        });
    }
}

/// L2 norm over the selected gradient tensors.
pub fn grad_norm(grad: &Model, select: &[bool]) -> f64 {
    let mut i = 0;
    let mut s = 0.0;
    grad.visit("", &mut |_, g| {
        if select[i] {
            s += g.iter().map(|v| v * v).sum::<f64>();
        }
        i += 1;
    });
    s.sqrt()
}

pub fn scale_grads(grad: &mut Model, factor: f64) {
    grad.visit_mut("", &mut |_, g| g.iter_mut().for_each(|v| *v *= factor));
}
