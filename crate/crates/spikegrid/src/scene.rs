//! Synthetic-scene generator: non-overlapping rotated vehicle footprints
//! rasterized into plausible pillar features, with matching heatmap, box,
//! and rotation targets. Desk-scale stand-in for real drive data.

use crate::bev::{build_frame, project_point, BevConfig, BevFrame, Point, PointCloud};
use crate::error::Result;
use crate::losses::{GroundTruth, ROT_BINS};
use crate::rng::RngStream;
use crate::tensor::{DenseTensor, Shape};

/// One planted vehicle.
#[derive(Debug, Clone)]
pub struct SceneObject {
    /// Ground-plane center in sensor meters.
    pub center: (f32, f32),
    /// Center cell on the BEV grid.
    pub cell: (usize, usize),
    /// (h, w, l) in meters.
    pub dims: (f32, f32, f32),
    /// Heading in [0, pi).
    pub rot: f32,
    pub rot_bin: usize,
}

/// Frame, ground truth, and the object list they were built from.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub frame: BevFrame,
    pub gt: GroundTruth,
    pub objects: Vec<SceneObject>,
}

const DIM_H: (f32, f32) = (1.3, 1.9);
const DIM_W: (f32, f32) = (1.5, 2.1);
const DIM_L: (f32, f32) = (3.4, 5.2);

/// Points per square meter of footprint.
const POINT_DENSITY: f32 = 14.0;
/// Fraction of ground cells receiving a low clutter return.
const GROUND_CLUTTER: f32 = 0.12;

/// Gaussian sigma in cells: at least one cell, else shorter box side / 6.
fn heatmap_sigma(dims: (f32, f32, f32), cell: f32) -> f32 {
    let shorter = dims.1.min(dims.2) / cell;
    (shorter / 6.0).max(1.0)
}

/// Generate a scene with up to `n_objects` vehicles. Placement retries are
/// bounded; when space runs out the scene simply carries fewer objects.
pub fn gen_scene(rng: &mut RngStream, cfg: &BevConfig, n_objects: usize) -> Result<SyntheticScene> {
    cfg.validate()?;
    let g = cfg.grid;
    let ground_z = -cfg.z_shift + 0.05;
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut tries = 0usize;
    while objects.len() < n_objects && tries < 40 * n_objects.max(1) {
        tries += 1;
        let dims = (
            rng.next_range(DIM_H.0, DIM_H.1),
            rng.next_range(DIM_W.0, DIM_W.1),
            rng.next_range(DIM_L.0, DIM_L.1),
        );
        let margin = dims.2 / 2.0 + 2.0 * cfg.cell;
        let x = rng.next_range(margin, cfg.x_max() - margin);
        let y = rng.next_range(-cfg.y_max() + margin, cfg.y_max() - margin);
        let rot = rng.next_range(0.0, std::f32::consts::PI - 1e-4);
        let sep = |o: &SceneObject| {
            let dx = o.center.0 - x;
            let dy = o.center.1 - y;
            let min_sep = (o.dims.2 + dims.2) / 2.0 + 2.0 * cfg.cell;
            (dx * dx + dy * dy).sqrt() >= min_sep
        };
        if !objects.iter().all(sep) {
            continue;
        }
        let center_pt = Point { x, y, z: ground_z, intensity: 0.5 };
        let Some(cell) = project_point(&center_pt, cfg) else { continue };
        let bin_width = std::f32::consts::PI / ROT_BINS as f32;
        let rot_bin = ((rot / bin_width).floor() as usize).min(ROT_BINS - 1);
        objects.push(SceneObject { center: (x, y), cell, dims, rot, rot_bin });
    }

    let mut points = Vec::new();
    for (oi, o) in objects.iter().enumerate() {
        let mut orng = rng.substream(0x5CEE + oi as u64);
        let area = o.dims.1 * o.dims.2;
        let n_pts = ((area * POINT_DENSITY) as usize).max(24);
        let (sin, cos) = o.rot.sin_cos();
        for _ in 0..n_pts {
            // Uniform in the rotated footprint, biased toward the shell in z.
            let u = orng.next_range(-0.5, 0.5) * o.dims.2;
            let v = orng.next_range(-0.5, 0.5) * o.dims.1;
            let x = o.center.0 + u * cos - v * sin;
            let y = o.center.1 + u * sin + v * cos;
            let z_frac = orng.next_f32();
            let z = ground_z + 0.15 + z_frac * (o.dims.0 - 0.15);
            let intensity = orng.next_range(0.35, 0.85);
            points.push(Point { x, y, z, intensity });
        }
        // Guarantee a return in the center pillar so the peak cell is occupied.
        points.push(Point {
            x: o.center.0,
            y: o.center.1,
            z: ground_z + o.dims.0,
            intensity: 0.6,
        });
    }
    let mut crng = rng.substream(0xC1_077E2);
    let n_clutter = ((g * g) as f32 * GROUND_CLUTTER) as usize;
    for _ in 0..n_clutter {
        let x = crng.next_range(0.0, cfg.x_max());
        let y = crng.next_range(-cfg.y_max(), cfg.y_max());
        points.push(Point {
            x,
            y,
            z: ground_z + crng.next_range(0.0, 0.12),
            intensity: crng.next_range(0.1, 0.4),
        });
    }

    let frame = build_frame(&PointCloud::new(points)?, cfg)?;

    // Targets.
    let shape = Shape::new(1, 1, g, g);
    let mut heat = DenseTensor::zeros(shape);
    let mut mask = DenseTensor::zeros(shape);
    let mut dims_map = DenseTensor::zeros(Shape::new(1, 3, g, g));
    let mut rot_map = DenseTensor::zeros(shape);
    for o in &objects {
        let sigma = heatmap_sigma(o.dims, cfg.cell);
        let (cy, cx) = o.cell;
        let reach = (3.0 * sigma).ceil() as usize;
        for y in cy.saturating_sub(reach)..=(cy + reach).min(g - 1) {
            for x in cx.saturating_sub(reach)..=(cx + reach).min(g - 1) {
                let dy = y as f32 - cy as f32;
                let dx = x as f32 - cx as f32;
                let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                let v = if (y, x) == (cy, cx) { 1.0 } else { v.min(0.999_999) };
                if v > heat.get(0, 0, y, x) {
                    heat.set(0, 0, y, x, v);
                }
            }
        }
        mask.set(0, 0, cy, cx, 1.0);
        let log_dims = [o.dims.0, o.dims.1, o.dims.2].map(|d| d.log10().clamp(0.0, 1.0));
        for (c, v) in log_dims.iter().enumerate() {
            dims_map.set(0, c, cy, cx, *v);
        }
        rot_map.set(0, 0, cy, cx, o.rot_bin as f32);
    }
    let gt = GroundTruth::new(heat, mask, dims_map, rot_map)?;
    Ok(SyntheticScene { frame, gt, objects })
}
