//! AdamW with decoupled weight decay, and global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use super::param::{Module, ParamVisitor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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
            weight_decay: 1e-2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn update<M: Module + ?Sized>(&mut self, model: &mut M) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        model.visit(&mut ParamVisitor::new(&mut |_, p| {
            if ms.len() <= idx {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            let decay = if p.no_decay {
                0.0
            } else {
                c.lr * c.weight_decay
            };
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value[i] -= decay * p.value[i] + c.lr * mhat / (vhat.sqrt() + c.eps);
            }
            idx += 1;
        }));
    }

    /// Moment buffers named after the parameters they belong to.
    pub fn state_tensors<M: Module + ?Sized>(
        &self,
        model: &mut M,
    ) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        if self.m.is_empty() {
            return out;
        }
        let mut idx = 0;
        model.visit(&mut ParamVisitor::new(&mut |name, p| {
            out.push((
                format!("adam.m/{name}"),
                p.shape.clone(),
                self.m[idx].clone(),
            ));
            out.push((
                format!("adam.v/{name}"),
                p.shape.clone(),
                self.v[idx].clone(),
            ));
            idx += 1;
        }));
        out
    }

    /// Restores moments saved by `state_tensors`; `lookup` resolves a tensor by name.
    pub fn load_state<M: Module + ?Sized>(
        &mut self,
        model: &mut M,
        step: u64,
        lookup: &dyn Fn(&str) -> Option<Vec<f32>>,
    ) -> Result<()> {
        let mut ms = Vec::new();
        let mut vs = Vec::new();
        let mut missing = None;
        model.visit(&mut ParamVisitor::new(&mut |name, p| match (
            lookup(&format!("adam.m/{name}")),
            lookup(&format!("adam.v/{name}")),
        ) {
            (Some(m), Some(v)) if m.len() == p.len() && v.len() == p.len() => {
                ms.push(m);
                vs.push(v);
            }
            _ => {
                missing.get_or_insert_with(|| name.to_string());
            }
        }));
        if let Some(name) = missing {
            return Err(Error::Checkpoint(format!(
                "optimizer state for `{name}` missing or malformed"
            )));
        }
        self.m = ms;
        self.v = vs;
        self.step = step;
        Ok(())
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<M: Module + ?Sized>(model: &mut M, max_norm: f32) -> f32 {
    let mut sq = 0f64;
    model.visit(&mut ParamVisitor::new(&mut |_, p| {
        sq += p.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>();
    }));
    let norm = sq.sqrt() as f32;
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        model.visit(&mut ParamVisitor::new(&mut |_, p| {
            p.grad.iter_mut().for_each(|g| *g *= s)
        }));
    }
    norm
}
