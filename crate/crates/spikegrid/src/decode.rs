//! Head-output decoding into detections: keypoint peak extraction with
//! window NMS, population decoding of box dimensions, binned rotation
//! decoding, and assembly under the vmem and spike readout variants.

use crate::error::{Error, Result};
use crate::losses::ROT_BINS;
use crate::tensor::DenseTensor;

/// One decoded object.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub row: usize,
    pub col: usize,
    /// (h, w, l) in meters.
    pub dims: (f32, f32, f32),
    pub rot_bin: usize,
    pub score: f32,
}

/// Readout variant: continuous membrane at the heads vs binary rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Vmem,
    Spike,
}

impl Variant {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "vmem" => Ok(Variant::Vmem),
            "spike" => Ok(Variant::Spike),
            other => Err(Error::Config(format!("unknown variant '{other}' (expected vmem|spike)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Vmem => "vmem",
            Variant::Spike => "spike",
        }
    }
}

/// Decoding thresholds.
#[derive(Debug, Clone, Copy)]
pub struct DecodeConfig {
    pub threshold: f32,
    pub nms_window: usize,
    /// Population pooling window for dimension decoding.
    pub k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { threshold: 0.3, nms_window: 3, k: 3 }
    }
}

/// Local maxima of the map exceeding `threshold` within an
/// `nms_window x nms_window` neighborhood, sorted by descending score.
/// Exact ties are broken toward the earlier cell in row-major order.
pub fn decode_keypoints(
    map: &DenseTensor,
    threshold: f32,
    nms_window: usize,
) -> Result<Vec<(usize, usize, f32)>> {
    if !map.is_finite() {
        return Err(Error::Numeric("keypoint map contains non-finite values".into()));
    }
    let s = map.shape();
    let half = nms_window / 2;
    let plane = map.plane(0, 0);
    let mut peaks = Vec::new();
    for y in 0..s.height {
        for x in 0..s.width {
            let v = plane[y * s.width + x];
            if v <= threshold {
                continue;
            }
            let mut is_peak = true;
            'scan: for dy in y.saturating_sub(half)..=(y + half).min(s.height - 1) {
                for dx in x.saturating_sub(half)..=(x + half).min(s.width - 1) {
                    if (dy, dx) == (y, x) {
                        continue;
                    }
                    let n = plane[dy * s.width + dx];
                    if n > v || (n == v && (dy, dx) < (y, x)) {
                        is_peak = false;
                        break 'scan;
                    }
                }
            }
            if is_peak {
                peaks.push((y, x, v));
            }
        }
    }
    peaks.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then((a.0, a.1).cmp(&(b.0, b.1))));
    Ok(peaks)
}

/// Population decoding of dimensions: k x k mean around the center per
/// channel, inverted through the log10 target map (`10^v` meters).
/// Centers near the border use zero-padded pooling.
pub fn decode_dims(box_map: &DenseTensor, center: (usize, usize), k: usize) -> Result<(f32, f32, f32)> {
    if k % 2 == 0 {
        return Err(Error::Config(format!("decode_dims window k={k} must be odd")));
    }
    let s = box_map.shape();
    if s.channels != 3 {
        return Err(Error::Shape(format!("box map must have 3 channels, got {}", s.channels)));
    }
    let half = k / 2;
    let (cy, cx) = center;
    let mut dims = [0.0f32; 3];
    for (c, d) in dims.iter_mut().enumerate() {
        let plane = box_map.plane(0, c);
        let mut acc = 0.0f64;
        for dy in cy.saturating_sub(half)..=(cy + half).min(s.height - 1) {
            for dx in cx.saturating_sub(half)..=(cx + half).min(s.width - 1) {
                acc += plane[dy * s.width + dx] as f64;
            }
        }
        let v = acc / (k * k) as f64;
        *d = 10f64.powf(v) as f32;
    }
    Ok((dims[0], dims[1], dims[2]))
}

/// Rotation decoding: argmax over the per-bin rates at the center pixel,
/// ties broken toward the lower index.
pub fn decode_rotation(rot_map: &DenseTensor, center: (usize, usize)) -> Result<usize> {
    let s = rot_map.shape();
    if s.channels != ROT_BINS {
        return Err(Error::Shape(format!(
            "rotation map must have {ROT_BINS} channels, got {}",
            s.channels
        )));
    }
    let (cy, cx) = center;
    let mut best = 0usize;
    let mut best_v = f32::NEG_INFINITY;
    for c in 0..ROT_BINS {
        let v = rot_map.get(0, c, cy, cx);
        if v > best_v {
            best_v = v;
            best = c;
        }
    }
    Ok(best)
}

/// Head maps ready for decoding. For the spike variant these are mean
/// firing rates; for vmem, membrane readouts (the keypoint map is squashed
/// through a logistic to land in [0,1] for thresholding parity).
pub struct HeadMaps {
    pub kp: DenseTensor,
    pub boxes: DenseTensor,
    pub rot: DenseTensor,
}

fn sigmoid_map(x: &DenseTensor) -> DenseTensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Assemble detections from head maps under the given variant.
pub fn assemble(maps: &HeadMaps, variant: Variant, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    let kp_map = match variant {
        Variant::Vmem => sigmoid_map(&maps.kp),
        Variant::Spike => maps.kp.clone(),
    };
    let peaks = decode_keypoints(&kp_map, cfg.threshold, cfg.nms_window)?;
    let mut out = Vec::with_capacity(peaks.len());
    for (row, col, score) in peaks {
        let dims = decode_dims(&maps.boxes, (row, col), cfg.k)?;
        let rot_bin = decode_rotation(&maps.rot, (row, col))?;
        out.push(Detection { row, col, dims, rot_bin, score });
    }
    Ok(out)
}

/// CSV header for detection files.
pub const DETECTION_CSV_HEADER: &str = "frame,row,col,h,w,l,rot_bin,score";

pub fn detection_csv_row(frame: usize, d: &Detection) -> String {
    format!(
        "{},{},{},{:.4},{:.4},{:.4},{},{:.6}",
        frame, d.row, d.col, d.dims.0, d.dims.1, d.dims.2, d.rot_bin, d.score
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn map(h: usize, w: usize) -> DenseTensor {
        DenseTensor::zeros(Shape::new(1, 1, h, w))
    }

    #[test]
    fn zero_map_no_detections() {
        let peaks = decode_keypoints(&map(8, 8), 0.3, 3).unwrap();
        assert!(peaks.is_empty());
    }

    #[test]
    fn single_impulse_detected() {
        let mut m = map(20, 20);
        m.set(0, 0, 10, 12, 0.9);
        let peaks = decode_keypoints(&m, 0.3, 3).unwrap();
        assert_eq!(peaks, vec![(10, 12, 0.9)]);
    }

    #[test]
    fn nms_suppresses_weaker_neighbor() {
        let mut m = map(10, 10);
        m.set(0, 0, 5, 5, 0.9);
        m.set(0, 0, 5, 6, 0.8);
        let peaks = decode_keypoints(&m, 0.3, 3).unwrap();
        assert_eq!(peaks, vec![(5, 5, 0.9)]);
    }

    #[test]
    fn nms_tie_keeps_earlier_cell() {
        let mut m = map(10, 10);
        m.set(0, 0, 5, 5, 0.9);
        m.set(0, 0, 5, 6, 0.9);
        let peaks = decode_keypoints(&m, 0.3, 3).unwrap();
        assert_eq!(peaks, vec![(5, 5, 0.9)]);
    }

    #[test]
    fn distant_peaks_both_survive() {
        let mut m = map(10, 10);
        m.set(0, 0, 2, 2, 0.5);
        m.set(0, 0, 7, 7, 0.8);
        let peaks = decode_keypoints(&m, 0.3, 3).unwrap();
        assert_eq!(peaks, vec![(7, 7, 0.8), (2, 2, 0.5)]);
    }

    #[test]
    fn dims_inverse_log_map() {
        let s = Shape::new(1, 3, 7, 7);
        // Uniform rate 0 decodes to 1 m per channel.
        let zero = DenseTensor::zeros(s);
        let d = decode_dims(&zero, (3, 3), 3).unwrap();
        assert_eq!(d, (1.0, 1.0, 1.0));
        // Uniform rate log10(4.5) decodes to 4.5 m.
        let v = 4.5f32.log10();
        let uniform = DenseTensor::from_vec(s, vec![v; s.len()]).unwrap();
        let d = decode_dims(&uniform, (3, 3), 3).unwrap();
        assert!((d.2 - 4.5).abs() < 1e-3, "{d:?}");
        // Rate 1 decodes to the 10 m design ceiling.
        let ones = DenseTensor::from_vec(s, vec![1.0; s.len()]).unwrap();
        let d = decode_dims(&ones, (3, 3), 3).unwrap();
        assert!((d.0 - 10.0).abs() < 1e-4);
    }

    #[test]
    fn rotation_argmax_and_ties() {
        let s = Shape::new(1, ROT_BINS, 4, 4);
        let mut m = DenseTensor::zeros(s);
        m.set(0, 7, 1, 1, 0.9);
        assert_eq!(decode_rotation(&m, (1, 1)).unwrap(), 7);
        // Uniform rates: index 0 by the tie rule.
        let uniform = DenseTensor::from_vec(s, vec![0.2; s.len()]).unwrap();
        assert_eq!(decode_rotation(&uniform, (2, 2)).unwrap(), 0);
        // [0.2, 0.5, 0.5, ...]: argmax with tie-break gives 1.
        let mut m = DenseTensor::from_vec(s, vec![0.0; s.len()]).unwrap();
        m.set(0, 0, 0, 0, 0.2);
        m.set(0, 1, 0, 0, 0.5);
        m.set(0, 2, 0, 0, 0.5);
        assert_eq!(decode_rotation(&m, (0, 0)).unwrap(), 1);
    }

    #[test]
    fn rotation_argmax_invariant_to_monotone_transform() {
        let mut rng = crate::rng::RngStream::new(21, 4);
        let s = Shape::new(1, ROT_BINS, 2, 2);
        let m = DenseTensor::from_vec(s, (0..s.len()).map(|_| rng.next_f32()).collect()).unwrap();
        let a = decode_rotation(&m, (1, 0)).unwrap();
        let squashed = m.map(|v| (3.0 * v + 1.0).tanh());
        let b = decode_rotation(&squashed, (1, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn assemble_empty_scene() {
        // Spike variant: an empty scene is an all-zero rate map.
        let spike_maps = HeadMaps {
            kp: map(8, 8),
            boxes: DenseTensor::zeros(Shape::new(1, 3, 8, 8)),
            rot: DenseTensor::zeros(Shape::new(1, ROT_BINS, 8, 8)),
        };
        let dets = assemble(&spike_maps, Variant::Spike, &DecodeConfig::default()).unwrap();
        assert!(dets.is_empty());
        // Vmem variant: background membranes are suppressed (negative), so
        // the post-sigmoid score sits below threshold everywhere.
        let vmem_maps = HeadMaps {
            kp: map(8, 8).map(|_| -6.0),
            boxes: DenseTensor::zeros(Shape::new(1, 3, 8, 8)),
            rot: DenseTensor::zeros(Shape::new(1, ROT_BINS, 8, 8)),
        };
        let dets = assemble(&vmem_maps, Variant::Vmem, &DecodeConfig::default()).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn variants_agree_on_equivalent_maps() {
        // vmem map = logit(rate map) decodes identically to the rate map.
        let mut rate = map(10, 10);
        rate.set(0, 0, 4, 4, 0.8);
        rate.set(0, 0, 8, 2, 0.6);
        let logit = rate.map(|v| {
            let p = v.clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        });
        let boxes = DenseTensor::zeros(Shape::new(1, 3, 10, 10));
        let rot = DenseTensor::zeros(Shape::new(1, ROT_BINS, 10, 10));
        let spike_maps = HeadMaps { kp: rate, boxes: boxes.clone(), rot: rot.clone() };
        let vmem_maps = HeadMaps { kp: logit, boxes, rot };
        let a = assemble(&spike_maps, Variant::Spike, &DecodeConfig::default()).unwrap();
        let b = assemble(&vmem_maps, Variant::Vmem, &DecodeConfig::default()).unwrap();
        let centers = |v: &[Detection]| v.iter().map(|d| (d.row, d.col)).collect::<Vec<_>>();
        assert_eq!(centers(&a), centers(&b));
    }
}
