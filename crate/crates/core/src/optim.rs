//! Adam and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{path}.lr"), "must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{path}.{name}"), "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("{path}.eps"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Fresh state with zero moments shaped like `shapes`.
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        Self { config, step_count: 0, m: zeros.clone(), v: zeros }
    }

    pub fn for_params(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self::new(config, &params.iter().map(|p| p.shape()).collect::<Vec<_>>())
    }

    /// State over `n` scalars.
    pub fn scalars(config: AdamConfig, n: usize) -> Self {
        Self::new(config, &vec![(1, 1); n])
    }

    fn check(&self, params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("{} moments, {} params, {} grads", self.m.len(), params.len(), grads.len()),
            });
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: format!("slot {i}: moment {:?}, param {:?}, grad {:?}", m.shape(), p.shape(), g.shape()),
                });
            }
        }
        Ok(())
    }

    /// One bias-corrected Adam update in place.
    pub fn step(&mut self, mut params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        self.check(&params, grads)?;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step_count += 1;
        let k = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(k);
        let c2 = 1.0 - beta2.powi(k);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Convenience update for scalar parameters held as plain numbers.
    pub fn step_scalars(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let mut ts: Vec<Tensor> = params.iter().map(|&p| Tensor::scalar(p)).collect();
        let gs: Vec<Tensor> = grads.iter().map(|&g| Tensor::scalar(g)).collect();
        self.step(ts.iter_mut().collect(), &gs)?;
        for (p, t) in params.iter_mut().zip(&ts) {
            *p = t.item();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipReport {
    pub pre_norm: f64,
    pub clipped: bool,
    /// Portion of the norm removed by clipping, in `[0, 1]`.
    pub clipped_fraction: f64,
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `threshold`.
pub fn clip_global_norm(grads: &mut [Tensor], threshold: f64) -> Result<ClipReport> {
    if !(threshold > 0.0) {
        return Err(Error::config("optimizer.clip", "threshold must be positive"));
    }
    let pre_norm = global_norm(grads);
    if pre_norm > threshold {
        let s = threshold / pre_norm;
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
        Ok(ClipReport { pre_norm, clipped: true, clipped_fraction: 1.0 - s })
    } else {
        Ok(ClipReport { pre_norm, clipped: false, clipped_fraction: 0.0 })
    }
}
