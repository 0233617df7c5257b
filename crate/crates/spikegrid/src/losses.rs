//! Spike-domain training objectives: two-point temporal focal + masked Dice
//! for keypoints, population-coded L1 regression for box dimensions, and
//! masked label-smoothed cross-entropy for rotation bins.
//!
//! Every loss operates on temporally aggregated firing rates and returns
//! both the scalar value and its gradient with respect to the per-step head
//! outputs, so the same code serves training and gradient checks.

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, SpikeTrain};
#[cfg(test)]
use crate::tensor::Shape;

/// Number of rotation bins (uniform over [0, pi]).
pub const ROT_BINS: usize = 31;

/// Clamp applied to rates before logarithms; spike rates of exactly 0/1 are
/// common.
const P_CLAMP: f64 = 1e-6;

/// Keypoint loss configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KpLossConfig {
    /// Early window fraction; `T_e = floor(alpha_t * T)`.
    pub alpha_t: f32,
    pub w_e: f32,
    pub w_f: f32,
    /// Focal exponent on the prediction.
    pub alpha: f32,
    /// Focal exponent down-weighting near-peak pixels.
    pub beta: f32,
    /// ROI dilation radius for the masked Dice term.
    pub k: usize,
    /// Dice smoothing constant.
    pub eps: f32,
    /// Dice weight, well below 1.
    pub lambda_d: f32,
    /// Epoch at which the Dice term activates.
    pub e_gate: usize,
}

impl Default for KpLossConfig {
    fn default() -> Self {
        KpLossConfig {
            alpha_t: 0.5,
            w_e: 0.3,
            w_f: 0.7,
            alpha: 2.0,
            beta: 4.0,
            k: 3,
            eps: 1.0,
            lambda_d: 0.05,
            e_gate: 5,
        }
    }
}

impl KpLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha_t && self.alpha_t < 1.0) {
            return Err(Error::Config(format!("alpha_t {} must lie in (0,1)", self.alpha_t)));
        }
        if self.w_e + self.w_f <= 0.0 {
            return Err(Error::Config("w_e + w_f must be positive".into()));
        }
        if self.lambda_d >= 1.0 {
            return Err(Error::Config(format!("lambda_d {} must be < 1", self.lambda_d)));
        }
        Ok(())
    }
}

/// Ground-truth maps for one (possibly batched) scene.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Gaussian heatmap in [0,1] with unit peaks at object centers, (B,1,H,W).
    pub kp_heatmap: DenseTensor,
    /// Binary peak mask; 1 exactly where the heatmap is 1, (B,1,H,W).
    pub kp_mask: DenseTensor,
    /// log10 box dimensions (h, w, l) clamped to [0,1], defined at peaks, (B,3,H,W).
    pub box_dims: DenseTensor,
    /// Rotation bin index per pixel, meaningful at peaks, (B,1,H,W).
    pub rot_bins: DenseTensor,
}

impl GroundTruth {
    pub fn new(
        kp_heatmap: DenseTensor,
        kp_mask: DenseTensor,
        box_dims: DenseTensor,
        rot_bins: DenseTensor,
    ) -> Result<Self> {
        let s = kp_heatmap.shape();
        if kp_mask.shape() != s || rot_bins.shape() != s {
            return Err(Error::Shape(format!(
                "ground truth: heatmap {} vs mask {} vs rot {}",
                s,
                kp_mask.shape(),
                rot_bins.shape()
            )));
        }
        let sb = box_dims.shape();
        if sb.batch != s.batch || sb.channels != 3 || sb.height != s.height || sb.width != s.width {
            return Err(Error::Shape(format!("ground truth: box dims {} must be Bx3xHxW", sb)));
        }
        for i in 0..s.len() {
            let h = kp_heatmap.data()[i];
            let m = kp_mask.data()[i];
            if !(0.0..=1.0).contains(&h) {
                return Err(Error::Domain(format!("heatmap value {h} outside [0,1]")));
            }
            if m != 0.0 && m != 1.0 {
                return Err(Error::Domain("peak mask must be binary".into()));
            }
            if (m == 1.0) != (h == 1.0) {
                return Err(Error::Domain(
                    "peak mask must be 1 exactly where the heatmap is 1".into(),
                ));
            }
            let r = rot_bins.data()[i];
            if r < 0.0 || r >= ROT_BINS as f32 || r.fract() != 0.0 {
                return Err(Error::Domain(format!("rotation bin {r} must be an integer in [0,{})", ROT_BINS)));
            }
        }
        for b in 0..s.batch {
            for c in 0..3 {
                for y in 0..s.height {
                    for x in 0..s.width {
                        if box_dims.get(b, c, y, x) != 0.0 && kp_mask.get(b, 0, y, x) != 1.0 {
                            return Err(Error::Domain(
                                "box dims must be zero away from peak cells".into(),
                            ));
                        }
                    }
                }
            }
        }
        Ok(GroundTruth { kp_heatmap, kp_mask, box_dims, rot_bins })
    }

    pub fn peak_count(&self) -> usize {
        self.kp_mask.data().iter().filter(|&&v| v == 1.0).count()
    }
}

/// Early- and full-window mean rates over the spike frames.
///
/// `T_e = floor(alpha_t * T)` and must be at least 1.
pub fn temporal_rates(frames: &[DenseTensor], alpha_t: f32) -> Result<(DenseTensor, DenseTensor)> {
    let t = frames.len();
    if t < 2 {
        return Err(Error::Config(format!("temporal rates need T >= 2, got {t}")));
    }
    let t_e = (alpha_t * t as f32).floor() as usize;
    if t_e == 0 {
        return Err(Error::Config(format!(
            "early window is empty: floor({alpha_t} * {t}) = 0"
        )));
    }
    let early = DenseTensor::mean_of(&frames[..t_e])?;
    let full = DenseTensor::mean_of(frames)?;
    Ok((early, full))
}

pub fn early_window(steps: usize, alpha_t: f32) -> usize {
    (alpha_t * steps as f32).floor() as usize
}

/// Per-pixel Gaussian focal loss, normalized by the positive count clamped
/// to a minimum of 1 (per sample, averaged over the batch).
pub fn focal_heatmap(p_hat: &DenseTensor, y: &DenseTensor, alpha: f32, beta: f32) -> Result<f64> {
    Ok(focal_with_grad(p_hat, y, alpha, beta)?.0)
}

/// Focal loss and its gradient with respect to the rate map.
pub fn focal_with_grad(
    p_hat: &DenseTensor,
    y: &DenseTensor,
    alpha: f32,
    beta: f32,
) -> Result<(f64, DenseTensor)> {
    let s = p_hat.shape();
    if y.shape() != s {
        return Err(Error::Shape(format!("focal: prediction {} vs target {}", s, y.shape())));
    }
    let (alpha, beta) = (alpha as f64, beta as f64);
    let hw = s.channels * s.height * s.width;
    let mut total = 0.0f64;
    let mut grad = DenseTensor::zeros(s);
    // The clamp applies inside the logarithms only; polynomial factors use
    // the rate clamped to [0,1]. A silent positive (p = 0) then still
    // receives the full alpha * ln(delta) push and a saturated negative
    // (p = 1) the mirror push, instead of a dead zero gradient.
    for b in 0..s.batch {
        let base = b * hw;
        let pos = y.data()[base..base + hw].iter().filter(|&&v| v == 1.0).count();
        let norm = pos.max(1) as f64;
        let mut sample = 0.0f64;
        for i in base..base + hw {
            let yv = y.data()[i] as f64;
            let raw = p_hat.data()[i] as f64;
            let pp = raw.clamp(0.0, 1.0);
            let pp_pass = (0.0..=1.0).contains(&raw);
            if yv == 1.0 {
                let pl = raw.clamp(P_CLAMP, 1.0 - P_CLAMP);
                let pl_pass = (P_CLAMP..=1.0 - P_CLAMP).contains(&raw);
                let one_m = 1.0 - pp;
                sample += -one_m.powf(alpha) * pl.ln();
                let mut d = 0.0f64;
                if pp_pass {
                    d += alpha * one_m.powf(alpha - 1.0) * pl.ln();
                }
                if pl_pass {
                    d -= one_m.powf(alpha) / pl;
                }
                grad.data_mut()[i] = (d / norm) as f32;
            } else {
                let w = (1.0 - yv).powf(beta);
                let oml = (1.0 - raw).clamp(P_CLAMP, 1.0 - P_CLAMP);
                let oml_pass = (P_CLAMP..=1.0 - P_CLAMP).contains(&(1.0 - raw));
                sample += -w * pp.powf(alpha) * oml.ln();
                let mut d = 0.0f64;
                if pp_pass {
                    d -= w * alpha * pp.powf(alpha - 1.0) * oml.ln();
                }
                if oml_pass {
                    d += w * pp.powf(alpha) / oml;
                }
                grad.data_mut()[i] = (d / norm) as f32;
            }
        }
        total += sample / norm;
    }
    let batches = s.batch as f64;
    if s.batch > 1 {
        grad.scale(1.0 / batches as f32);
    }
    Ok((total / batches, grad))
}

/// Max-pool dilation of the binary peak mask with the smallest odd window
/// >= k, defining the Dice region of interest.
pub fn roi_dilate(mask: &DenseTensor, k: usize) -> DenseTensor {
    let k_tilde = if k % 2 == 1 { k } else { k + 1 };
    let half = k_tilde / 2;
    let s = mask.shape();
    let mut out = DenseTensor::zeros(s);
    for b in 0..s.batch {
        for c in 0..s.channels {
            let src = mask.plane(b, c);
            let dst = out.plane_mut(b, c);
            for y in 0..s.height {
                for x in 0..s.width {
                    let mut m = 0.0f32;
                    for dy in y.saturating_sub(half)..=(y + half).min(s.height - 1) {
                        for dx in x.saturating_sub(half)..=(x + half).min(s.width - 1) {
                            m = m.max(src[dy * s.width + dx]);
                        }
                    }
                    dst[y * s.width + x] = m;
                }
            }
        }
    }
    out
}

/// Masked soft Dice over the ROI; returns the loss and gradient wrt the
/// full-window rate map.
fn masked_dice_with_grad(
    rate: &DenseTensor,
    target: &DenseTensor,
    roi: &DenseTensor,
    eps: f64,
) -> (f64, DenseTensor) {
    let s = rate.shape();
    let hw = s.channels * s.height * s.width;
    let mut grad = DenseTensor::zeros(s);
    let mut total = 0.0f64;
    for b in 0..s.batch {
        let base = b * hw;
        let mut inter = 0.0f64;
        let mut norm_r = 0.0f64;
        let mut norm_y = 0.0f64;
        for i in base..base + hw {
            let m = roi.data()[i] as f64;
            let r = rate.data()[i] as f64 * m;
            let y = target.data()[i] as f64 * m;
            inter += r * y;
            norm_r += r.abs();
            norm_y += y.abs();
        }
        let num = 2.0 * inter + eps;
        let den = norm_r + norm_y + eps;
        total += 1.0 - num / den;
        for i in base..base + hw {
            let m = roi.data()[i] as f64;
            if m == 0.0 {
                continue;
            }
            let r = rate.data()[i] as f64 * m;
            let y = target.data()[i] as f64 * m;
            // d(1 - num/den)/dr = -(2y*den - num*sign(r)) / den^2, through the mask.
            let sign = if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                1.0
            };
            let d = -(2.0 * y * den - num * sign) / (den * den);
            grad.data_mut()[i] = (d * m) as f32;
        }
    }
    let batches = s.batch as f64;
    grad.scale(1.0 / batches as f32);
    (total / batches, grad)
}

/// Two-point temporal focal loss plus epoch-gated masked Dice, with
/// gradients wrt the per-step keypoint head outputs.
pub fn kp_loss_with_grad(
    frames: &[DenseTensor],
    gt: &GroundTruth,
    cfg: &KpLossConfig,
    epoch: usize,
) -> Result<(f64, Vec<DenseTensor>)> {
    cfg.validate()?;
    let t = frames.len();
    let (r_early, r_full) = temporal_rates(frames, cfg.alpha_t)?;
    if r_full.shape() != gt.kp_heatmap.shape() {
        return Err(Error::Shape(format!(
            "kp loss: rates {} vs target {}",
            r_full.shape(),
            gt.kp_heatmap.shape()
        )));
    }
    let t_e = early_window(t, cfg.alpha_t);
    let (fl_e, g_e) = focal_with_grad(&r_early, &gt.kp_heatmap, cfg.alpha, cfg.beta)?;
    let (fl_f, mut g_f) = focal_with_grad(&r_full, &gt.kp_heatmap, cfg.alpha, cfg.beta)?;
    let w_sum = (cfg.w_e + cfg.w_f) as f64;
    let mut loss = (cfg.w_e as f64 * fl_e + cfg.w_f as f64 * fl_f) / w_sum;
    let we = cfg.w_e as f64 / w_sum;
    let wf = cfg.w_f as f64 / w_sum;
    // Gradients wrt the two rate maps.
    let mut g_early = g_e;
    g_early.scale(we as f32);
    g_f.scale(wf as f32);
    let mut g_full = g_f;
    if epoch >= cfg.e_gate {
        let roi = roi_dilate(&gt.kp_mask, cfg.k);
        let (dice, mut g_dice) = masked_dice_with_grad(&r_full, &gt.kp_heatmap, &roi, cfg.eps as f64);
        loss += cfg.lambda_d as f64 * dice;
        g_dice.scale(cfg.lambda_d);
        g_full.add_assign(&g_dice)?;
    }
    // Chain to per-step frames: R_early averages the first T_e steps,
    // R_full all T steps.
    let mut grads = Vec::with_capacity(t);
    for step in 0..t {
        let mut g = g_full.clone();
        g.scale(1.0 / t as f32);
        if step < t_e {
            let mut ge = g_early.clone();
            ge.scale(1.0 / t_e as f32);
            g.add_assign(&ge)?;
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Scalar keypoint loss on a binary spike train.
pub fn kp_loss(s: &SpikeTrain, gt: &GroundTruth, cfg: &KpLossConfig, epoch: usize) -> Result<f64> {
    Ok(kp_loss_with_grad(s.frames(), gt, cfg, epoch)?.0)
}

/// Same-size k x k average pooling with zero padding (always divides by k^2).
pub fn population_pool(x: &DenseTensor, k: usize) -> Result<DenseTensor> {
    if k % 2 == 0 {
        return Err(Error::Config(format!("population pooling window k={k} must be odd")));
    }
    let half = k / 2;
    let s = x.shape();
    let mut out = DenseTensor::zeros(s);
    let k2 = (k * k) as f32;
    for b in 0..s.batch {
        for c in 0..s.channels {
            let src = x.plane(b, c);
            let dst = out.plane_mut(b, c);
            for y in 0..s.height {
                for xx in 0..s.width {
                    let mut acc = 0.0f64;
                    for dy in y.saturating_sub(half)..=(y + half).min(s.height - 1) {
                        for dx in xx.saturating_sub(half)..=(xx + half).min(s.width - 1) {
                            acc += src[dy * s.width + dx] as f64;
                        }
                    }
                    dst[y * s.width + xx] = acc as f32 / k2;
                }
            }
        }
    }
    Ok(out)
}

/// Population-coded box regression loss with gradients wrt the per-step box
/// head outputs: temporal mean rate, k x k population pooling, then L1 over
/// the channel-expanded keypoint mask. An empty mask yields exactly zero
/// with a defined (zero) gradient for every step.
pub fn box_loss_with_grad(
    frames: &[DenseTensor],
    gt: &GroundTruth,
    k: usize,
) -> Result<(f64, Vec<DenseTensor>)> {
    let t = frames.len();
    if t == 0 {
        return Err(Error::Config("box loss needs at least one step".into()));
    }
    let rate = DenseTensor::mean_of(frames)?;
    let s = rate.shape();
    if s.channels != 3 || s.height != gt.box_dims.shape().height || s.width != gt.box_dims.shape().width {
        return Err(Error::Shape(format!(
            "box loss: rates {} vs targets {}",
            s,
            gt.box_dims.shape()
        )));
    }
    let pooled = population_pool(&rate, k)?;
    let half = k / 2;
    let mut loss = 0.0f64;
    let mut g_pool = DenseTensor::zeros(s);
    for b in 0..s.batch {
        for c in 0..3 {
            for y in 0..s.height {
                for x in 0..s.width {
                    if gt.kp_mask.get(b, 0, y, x) != 1.0 {
                        continue;
                    }
                    let diff = pooled.get(b, c, y, x) as f64 - gt.box_dims.get(b, c, y, x) as f64;
                    loss += diff.abs();
                    let sign = if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    g_pool.set(b, c, y, x, sign);
                }
            }
        }
    }
    // Transpose of average pooling: spread each pooled gradient over its window.
    let mut g_rate = DenseTensor::zeros(s);
    let k2 = (k * k) as f32;
    for b in 0..s.batch {
        for c in 0..3 {
            for y in 0..s.height {
                for x in 0..s.width {
                    let g = g_pool.get(b, c, y, x);
                    if g == 0.0 {
                        continue;
                    }
                    for dy in y.saturating_sub(half)..=(y + half).min(s.height - 1) {
                        for dx in x.saturating_sub(half)..=(x + half).min(s.width - 1) {
                            let cur = g_rate.get(b, c, dy, dx);
                            g_rate.set(b, c, dy, dx, cur + g / k2);
                        }
                    }
                }
            }
        }
    }
    let mut grads = Vec::with_capacity(t);
    for _ in 0..t {
        let mut g = g_rate.clone();
        g.scale(1.0 / t as f32);
        grads.push(g);
    }
    Ok((loss, grads))
}

pub fn box_loss(s: &SpikeTrain, gt: &GroundTruth, k: usize) -> Result<f64> {
    Ok(box_loss_with_grad(s.frames(), gt, k)?.0)
}

/// Label-smoothed softmax cross-entropy over the per-bin mean firing rates,
/// restricted to keypoint pixels, with gradients wrt the per-step rotation
/// head outputs. An empty keypoint set yields zero.
pub fn rot_loss_with_grad(
    frames: &[DenseTensor],
    gt: &GroundTruth,
    class_weights: &[f32],
    smoothing: f32,
) -> Result<(f64, Vec<DenseTensor>)> {
    let t = frames.len();
    if t == 0 {
        return Err(Error::Config("rotation loss needs at least one step".into()));
    }
    let rate = DenseTensor::mean_of(frames)?;
    let s = rate.shape();
    if s.channels != ROT_BINS {
        return Err(Error::Shape(format!(
            "rotation loss: expected {ROT_BINS} channels, got {}",
            s.channels
        )));
    }
    if class_weights.len() != ROT_BINS {
        return Err(Error::Config(format!(
            "rotation loss: {} class weights for {ROT_BINS} bins",
            class_weights.len()
        )));
    }
    let c = ROT_BINS;
    let sm = smoothing as f64;
    let mut g_rate = DenseTensor::zeros(s);
    let mut total = 0.0f64;
    let mut weight_sum = 0.0f64;
    let mut logits = vec![0.0f64; c];
    // First pass for the weighted-mean normalizer.
    for b in 0..s.batch {
        for y in 0..s.height {
            for x in 0..s.width {
                if gt.kp_mask.get(b, 0, y, x) == 1.0 {
                    let bin = gt.rot_bins.get(b, 0, y, x) as usize;
                    weight_sum += class_weights[bin] as f64;
                }
            }
        }
    }
    if weight_sum == 0.0 {
        return Ok((0.0, vec![DenseTensor::zeros(s); t]));
    }
    for b in 0..s.batch {
        for y in 0..s.height {
            for x in 0..s.width {
                if gt.kp_mask.get(b, 0, y, x) != 1.0 {
                    continue;
                }
                let bin = gt.rot_bins.get(b, 0, y, x) as usize;
                let w = class_weights[bin] as f64;
                for (ci, l) in logits.iter_mut().enumerate() {
                    *l = rate.get(b, ci, y, x) as f64;
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exp_sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
                let log_z = max + exp_sum.ln();
                let mut pix_loss = 0.0f64;
                for ci in 0..c {
                    let q = (1.0 - sm) * if ci == bin { 1.0 } else { 0.0 } + sm / c as f64;
                    let log_p = logits[ci] - log_z;
                    pix_loss -= q * log_p;
                    let p = log_p.exp();
                    let d = w * (p - q) / weight_sum;
                    let cur = g_rate.get(b, ci, y, x);
                    g_rate.set(b, ci, y, x, cur + d as f32);
                }
                total += w * pix_loss;
            }
        }
    }
    let loss = total / weight_sum;
    let mut grads = Vec::with_capacity(t);
    for _ in 0..t {
        let mut g = g_rate.clone();
        g.scale(1.0 / t as f32);
        grads.push(g);
    }
    Ok((loss, grads))
}

pub fn rot_loss(
    s: &SpikeTrain,
    gt: &GroundTruth,
    class_weights: &[f32],
    smoothing: f32,
) -> Result<f64> {
    Ok(rot_loss_with_grad(s.frames(), gt, class_weights, smoothing)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn shape(h: usize, w: usize) -> Shape {
        Shape::new(1, 1, h, w)
    }

    fn gt_single_peak(h: usize, w: usize, py: usize, px: usize, bin: f32) -> GroundTruth {
        let mut heat = DenseTensor::zeros(shape(h, w));
        let mut mask = DenseTensor::zeros(shape(h, w));
        let mut dims = DenseTensor::zeros(Shape::new(1, 3, h, w));
        let mut rot = DenseTensor::zeros(shape(h, w));
        heat.set(0, 0, py, px, 1.0);
        mask.set(0, 0, py, px, 1.0);
        for c in 0..3 {
            dims.set(0, c, py, px, 0.5);
        }
        rot.set(0, 0, py, px, bin);
        GroundTruth::new(heat, mask, dims, rot).unwrap()
    }

    fn empty_gt(h: usize, w: usize) -> GroundTruth {
        GroundTruth::new(
            DenseTensor::zeros(shape(h, w)),
            DenseTensor::zeros(shape(h, w)),
            DenseTensor::zeros(Shape::new(1, 3, h, w)),
            DenseTensor::zeros(shape(h, w)),
        )
        .unwrap()
    }

    #[test]
    fn gt_rejects_mask_heatmap_mismatch() {
        let mut heat = DenseTensor::zeros(shape(2, 2));
        heat.set(0, 0, 0, 0, 1.0);
        let mask = DenseTensor::zeros(shape(2, 2));
        assert!(GroundTruth::new(
            heat,
            mask,
            DenseTensor::zeros(Shape::new(1, 3, 2, 2)),
            DenseTensor::zeros(shape(2, 2)),
        )
        .is_err());
    }

    #[test]
    fn temporal_rates_windows() {
        // Spikes only at the final step: early 0, full 1/13.
        let mut frames = vec![DenseTensor::zeros(shape(1, 1)); 13];
        frames[12].set(0, 0, 0, 0, 1.0);
        let (e, f) = temporal_rates(&frames, 0.5).unwrap();
        assert_eq!(e.data()[0], 0.0);
        assert!((f.data()[0] - 1.0 / 13.0).abs() < 1e-7);
        assert_eq!(early_window(13, 0.5), 6);
    }

    #[test]
    fn temporal_rates_all_ones() {
        let frames = vec![
            DenseTensor::from_vec(shape(1, 1), vec![1.0]).unwrap();
            4
        ];
        let (e, f) = temporal_rates(&frames, 0.5).unwrap();
        assert_eq!(e.data()[0], 1.0);
        assert_eq!(f.data()[0], 1.0);
    }

    #[test]
    fn temporal_rates_rejects_empty_window() {
        let frames = vec![DenseTensor::zeros(shape(1, 1)); 3];
        assert!(temporal_rates(&frames, 0.1).is_err());
    }

    #[test]
    fn focal_peak_value() {
        // y=1, p=0.5, alpha=2: 0.25 * ln 2.
        let p = DenseTensor::from_vec(shape(1, 1), vec![0.5]).unwrap();
        let y = DenseTensor::from_vec(shape(1, 1), vec![1.0]).unwrap();
        let l = focal_heatmap(&p, &y, 2.0, 4.0).unwrap();
        assert!((l - 0.25 * 2.0f64.ln()).abs() < 1e-9);
        assert!((l - 0.17329).abs() < 1e-5);
    }

    #[test]
    fn focal_nonpeak_value() {
        // y=0.5, p=0.5, beta=4: (0.5)^4 * (0.5)^2 * ln 2.
        let p = DenseTensor::from_vec(shape(1, 1), vec![0.5]).unwrap();
        let y = DenseTensor::from_vec(shape(1, 1), vec![0.5]).unwrap();
        let l = focal_heatmap(&p, &y, 2.0, 4.0).unwrap();
        assert!((l - 0.5f64.powi(4) * 0.25 * 2.0f64.ln()).abs() < 1e-9);
        assert!((l - 0.01083).abs() < 1e-5);
    }

    #[test]
    fn focal_perfect_negative_is_tiny() {
        let p = DenseTensor::from_vec(shape(1, 1), vec![0.0]).unwrap();
        let y = DenseTensor::from_vec(shape(1, 1), vec![0.0]).unwrap();
        let l = focal_heatmap(&p, &y, 2.0, 4.0).unwrap();
        assert!(l < 1e-10);
    }

    #[test]
    fn roi_dilation_window() {
        let mut mask = DenseTensor::zeros(shape(5, 5));
        mask.set(0, 0, 2, 2, 1.0);
        let roi = roi_dilate(&mask, 3);
        for y in 0..5 {
            for x in 0..5 {
                let inside = (1..=3).contains(&y) && (1..=3).contains(&x);
                assert_eq!(roi.get(0, 0, y, x), if inside { 1.0 } else { 0.0 });
            }
        }
        // Even k dilates with the next odd window.
        let roi2 = roi_dilate(&mask, 2);
        assert_eq!(roi2.get(0, 0, 1, 1), 1.0);
    }

    #[test]
    fn kp_loss_gating_is_exact() {
        let mut rng = RngStream::new(5, 0);
        let gt = gt_single_peak(4, 4, 1, 2, 0.0);
        let frames: Vec<DenseTensor> = (0..4)
            .map(|_| {
                DenseTensor::from_vec(
                    shape(4, 4),
                    (0..16).map(|_| if rng.next_f32() < 0.4 { 1.0 } else { 0.0 }).collect(),
                )
                .unwrap()
            })
            .collect();
        let cfg = KpLossConfig { e_gate: 3, ..KpLossConfig::default() };
        let before = kp_loss_with_grad(&frames, &gt, &cfg, 2).unwrap().0;
        let cfg_no_dice = KpLossConfig { lambda_d: 0.0, ..cfg };
        let before_no_dice = kp_loss_with_grad(&frames, &gt, &cfg_no_dice, 5).unwrap().0;
        assert_eq!(before, before_no_dice);
        let after = kp_loss_with_grad(&frames, &gt, &cfg, 3).unwrap().0;
        assert!(after != before);
    }

    #[test]
    fn kp_loss_near_zero_at_optimum() {
        // Rates equal the Gaussian target in the ROI and zero outside.
        let mut heat = DenseTensor::zeros(shape(4, 4));
        heat.set(0, 0, 1, 1, 1.0);
        let mut mask = DenseTensor::zeros(shape(4, 4));
        mask.set(0, 0, 1, 1, 1.0);
        let gt = GroundTruth::new(
            heat.clone(),
            mask,
            DenseTensor::zeros(Shape::new(1, 3, 4, 4)),
            DenseTensor::zeros(shape(4, 4)),
        )
        .unwrap();
        // Perfect prediction: fire every step at the peak, never elsewhere.
        let frames = vec![heat.clone(); 4];
        let cfg = KpLossConfig { e_gate: 0, ..KpLossConfig::default() };
        let (loss, _) = kp_loss_with_grad(&frames, &gt, &cfg, 10).unwrap();
        assert!(loss < 1e-3, "loss {loss}");
    }

    #[test]
    fn box_loss_empty_mask_is_zero_with_gradient_path() {
        let gt = empty_gt(4, 4);
        let frames = vec![DenseTensor::zeros(Shape::new(1, 3, 4, 4)); 3];
        let (loss, grads) = box_loss_with_grad(&frames, &gt, 3).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.len(), 3);
        assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn box_loss_uniform_rate_hits_target() {
        // Uniform rate r everywhere pools to r; target r at the single peak.
        let mut gt = gt_single_peak(5, 5, 2, 2, 0.0);
        let r = 0.5f32;
        for c in 0..3 {
            gt.box_dims.set(0, c, 2, 2, r);
        }
        let frames: Vec<DenseTensor> = (0..2)
            .map(|t| {
                DenseTensor::from_vec(
                    Shape::new(1, 3, 5, 5),
                    vec![if t == 0 { 1.0 } else { 0.0 }; 75],
                )
                .unwrap()
            })
            .collect();
        let (loss, _) = box_loss_with_grad(&frames, &gt, 3).unwrap();
        assert!(loss < 1e-7, "loss {loss}");
    }

    #[test]
    fn box_loss_requires_odd_k() {
        let gt = empty_gt(4, 4);
        let frames = vec![DenseTensor::zeros(Shape::new(1, 3, 4, 4)); 2];
        assert!(box_loss_with_grad(&frames, &gt, 2).is_err());
    }

    #[test]
    fn pooling_is_shift_equivariant_away_from_borders() {
        let mut rng = RngStream::new(9, 9);
        let s = Shape::new(1, 1, 9, 9);
        let x = DenseTensor::from_vec(s, (0..81).map(|_| rng.next_f32()).collect()).unwrap();
        let pooled = population_pool(&x, 3).unwrap();
        // Shift the input one column right and compare interior cells.
        let mut shifted = DenseTensor::zeros(s);
        for y in 0..9 {
            for xx in 1..9 {
                shifted.set(0, 0, y, xx, x.get(0, 0, y, xx - 1));
            }
        }
        let pooled_shift = population_pool(&shifted, 3).unwrap();
        for y in 2..7 {
            for xx in 2..7 {
                assert!(
                    (pooled_shift.get(0, 0, y, xx) - pooled.get(0, 0, y, xx - 1)).abs() < 1e-6
                );
            }
        }
    }

    #[test]
    fn rot_loss_empty_keypoints_is_zero() {
        let gt = empty_gt(4, 4);
        let frames = vec![DenseTensor::zeros(Shape::new(1, ROT_BINS, 4, 4)); 2];
        let (loss, _) = rot_loss_with_grad(&frames, &gt, &[1.0; ROT_BINS], 0.1).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn rot_loss_uniform_rates_is_log_bins() {
        let gt = gt_single_peak(3, 3, 1, 1, 4.0);
        let frames = vec![DenseTensor::zeros(Shape::new(1, ROT_BINS, 3, 3)); 2];
        let (loss, _) = rot_loss_with_grad(&frames, &gt, &[1.0; ROT_BINS], 0.0).unwrap();
        assert!((loss - (ROT_BINS as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn rot_loss_one_hot_closed_form() {
        // One keypoint, rate one-hot on the true bin, no smoothing:
        // loss = -log softmax(peak) = log((e + C - 1) / e).
        let bin = 7usize;
        let gt = gt_single_peak(3, 3, 0, 2, bin as f32);
        let mut f0 = DenseTensor::zeros(Shape::new(1, ROT_BINS, 3, 3));
        f0.set(0, bin, 0, 2, 1.0);
        let frames = vec![f0; 1];
        let (loss, _) = rot_loss_with_grad(&frames, &gt, &[1.0; ROT_BINS], 0.0).unwrap();
        let e = 1.0f64.exp();
        let expect = ((e + (ROT_BINS as f64 - 1.0)) / e).ln();
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
    }

    #[test]
    fn losses_are_nonnegative_on_random_inputs() {
        let mut rng = RngStream::new(17, 3);
        for trial in 0..20 {
            let h = 3 + rng.next_below(4);
            let w = 3 + rng.next_below(4);
            let t = 2 + rng.next_below(3);
            let py = rng.next_below(h);
            let px = rng.next_below(w);
            let gt = gt_single_peak(h, w, py, px, (trial % ROT_BINS) as f32);
            let kp_frames: Vec<DenseTensor> = (0..t)
                .map(|_| {
                    DenseTensor::from_vec(
                        Shape::new(1, 1, h, w),
                        (0..h * w).map(|_| if rng.next_f32() < 0.3 { 1.0 } else { 0.0 }).collect(),
                    )
                    .unwrap()
                })
                .collect();
            let cfg = KpLossConfig { e_gate: 0, ..KpLossConfig::default() };
            let (kp, _) = kp_loss_with_grad(&kp_frames, &gt, &cfg, 1).unwrap();
            assert!(kp >= 0.0);
            let box_frames: Vec<DenseTensor> = (0..t)
                .map(|_| {
                    DenseTensor::from_vec(
                        Shape::new(1, 3, h, w),
                        (0..3 * h * w).map(|_| if rng.next_f32() < 0.3 { 1.0 } else { 0.0 }).collect(),
                    )
                    .unwrap()
                })
                .collect();
            let (bx, _) = box_loss_with_grad(&box_frames, &gt, 3).unwrap();
            assert!(bx >= 0.0);
            let rot_frames: Vec<DenseTensor> = (0..t)
                .map(|_| {
                    DenseTensor::from_vec(
                        Shape::new(1, ROT_BINS, h, w),
                        (0..ROT_BINS * h * w)
                            .map(|_| if rng.next_f32() < 0.3 { 1.0 } else { 0.0 })
                            .collect(),
                    )
                    .unwrap()
                })
                .collect();
            let (rt, _) = rot_loss_with_grad(&rot_frames, &gt, &[1.0; ROT_BINS], 0.1).unwrap();
            assert!(rt >= 0.0);
        }
    }
}
