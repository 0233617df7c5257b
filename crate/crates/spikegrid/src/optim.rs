//! Adam with cosine-annealing warm restarts and global-norm gradient
//! clipping.

use crate::error::{Error, Result};
use crate::network::{NetGrads, Network};

/// Warm-restart cosine schedule. The learning rate starts at `lr_max`,
/// decays to `lr_min` over a cycle of `restart_period` epochs, then jumps
/// back to `lr_max`; each cycle is `restart_mult` times longer.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub restart_period: f64,
    pub restart_mult: f64,
}

impl Schedule {
    pub fn lr_at_epoch(&self, epoch_progress: f64) -> f64 {
        let mut e = epoch_progress;
        let mut cycle = self.restart_period.max(1e-9);
        while e >= cycle {
            e -= cycle;
            cycle *= self.restart_mult.max(1.0);
        }
        self.lr_min + (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * e / cycle).cos()) / 2.0
    }
}

/// Scale gradients so the global L2 norm does not exceed `clip_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut NetGrads, clip_norm: f32) -> Result<f32> {
    let mut sumsq = 0.0f64;
    let mut finite = true;
    grads.visit(|_, g| {
        for &v in g.iter() {
            if !v.is_finite() {
                finite = false;
            }
            sumsq += (v as f64) * (v as f64);
        }
    });
    if !finite {
        return Err(Error::Numeric("non-finite gradient before clipping".into()));
    }
    let norm = sumsq.sqrt() as f32;
    if norm > clip_norm && norm > 0.0 {
        let scale = clip_norm / norm;
        grads.visit(|_, g| {
            for v in g {
                *v *= scale;
            }
        });
    }
    Ok(norm)
}

/// Adam over the network's flattened parameter slices. Moments are keyed by
/// visit order, which is fixed and matches [`NetGrads::visit`].
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    /// One update at the given learning rate. Gradients must be finite;
    /// the offending parameter block is named otherwise.
    pub fn step(&mut self, net: &mut Network, grads: &mut NetGrads, lr: f64) -> Result<()> {
        let mut flat: Vec<(String, Vec<f32>)> = Vec::new();
        grads.visit(|name, g| flat.push((name.to_string(), g.to_vec())));
        for (name, g) in &flat {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {name}")));
            }
        }
        if self.moments.is_empty() {
            self.moments = flat.iter().map(|(_, g)| (vec![0.0; g.len()], vec![0.0; g.len()])).collect();
        }
        if self.moments.len() != flat.len() {
            return Err(Error::Internal(format!(
                "optimizer state has {} blocks, gradients have {}",
                self.moments.len(),
                flat.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut idx = 0usize;
        let mut result = Ok(());
        net.visit_params(|name, p| {
            if result.is_err() {
                return;
            }
            let (gname, g) = &flat[idx];
            if gname != name || g.len() != p.len() {
                result = Err(Error::Internal(format!(
                    "parameter/gradient mismatch at {name} vs {gname}"
                )));
                return;
            }
            let (m, v) = &mut self.moments[idx];
            for i in 0..p.len() {
                let gi = g[i] as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= (lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
            idx += 1;
        });
        result
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}
