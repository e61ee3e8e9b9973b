//! AdamW with decoupled weight decay, global-norm clipping and the stepped
//! learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BASE_LR: f64 = 1e-3;
pub const WEIGHT_DECAY: f64 = 1e-6;
/// Fractions of the schedule length at which the rate drops by 10×.
pub const LR_MILESTONES: [f64; 2] = [0.3, 0.6];

/// Piecewise-constant rate: `base`, `base/10` from 30% of
/// `schedule_epochs`, `base/100` from 60%.
pub fn lr_schedule(epoch: usize, schedule_epochs: usize, base: f64) -> f64 {
    let e = epoch as f64;
    let s = schedule_epochs as f64;
    if e >= LR_MILESTONES[1] * s {
        base * 1e-2
    } else if e >= LR_MILESTONES[0] * s {
        base * 1e-1
    } else {
        base
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// First and second moments keyed by parameter name.
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update from the gradient buffers in `params`. Gradients are left
    /// untouched. A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        for (name, t) in params.iter() {
            if let Some(g) = &t.grad {
                if let Some((i, v)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "gradient of `{name}` {:?} is {v} at flat index {i} (optimizer step {})",
                        t.shape(),
                        self.step + 1
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (name, p) in params.iter_mut() {
            let Some(g) = p.grad.take() else { continue };
            let n = p.numel();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let upd = lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                *x = ((*x as f64) * decay - upd) as f32;
            }
            p.grad = Some(g);
        }
        Ok(())
    }

    /// Serializable view: `adam.m/<name>`, `adam.v/<name>`, and `adam.step`.
    pub fn to_entries(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, (m, v)) in &self.moments {
            let shape = params.get(name).map(|t| t.shape().to_vec()).unwrap_or_else(|| vec![m.len()]);
            out.push((format!("adam.m/{name}"), Tensor::new(&shape, m.clone()).expect("moment size")));
            out.push((format!("adam.v/{name}"), Tensor::new(&shape, v.clone()).expect("moment size")));
        }
        // u64 step split into two exactly representable halves
        let lo = (self.step & 0xFFFF) as f32;
        let hi = (self.step >> 16) as f32;
        out.push(("adam.step".into(), Tensor::new(&[2], vec![lo, hi]).expect("step")));
        out
    }

    pub fn from_entries<'a>(weight_decay: f64, entries: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<Self> {
        let mut opt = AdamW::new(weight_decay);
        let mut ms: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut vs: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for (name, t) in entries {
            if let Some(n) = name.strip_prefix("adam.m/") {
                ms.insert(n.to_string(), t.data().to_vec());
            } else if let Some(n) = name.strip_prefix("adam.v/") {
                vs.insert(n.to_string(), t.data().to_vec());
            } else if name == "adam.step" {
                let d = t.data();
                opt.step = d[0] as u64 | ((d[1] as u64) << 16);
            }
        }
        for (n, m) in ms {
            let v = vs.remove(&n).ok_or_else(|| Error::Format(format!("missing second moment for `{n}`")))?;
            opt.moments.insert(n, (m, v));
        }
        Ok(opt)
    }
}

/// Scales all gradient buffers so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|(_, t)| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}
