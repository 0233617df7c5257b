//! LiDAR point clouds and their projection into the 11-channel BEV input:
//! five per-pillar features (z_max, occupancy, mean intensity, z_min, σ_z)
//! plus six binary height-bin occupancy planes.

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Shape};
use std::io::Read;

/// One LiDAR return: position in meters plus reflectance in [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

/// A set of LiDAR returns. Intensity is clipped to [0,1] on load.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.intensity.is_finite()) {
                return Err(Error::Numeric(format!("point {i} has a non-finite coordinate")));
            }
        }
        let points = points
            .into_iter()
            .map(|mut p| {
                p.intensity = p.intensity.clamp(0.0, 1.0);
                p
            })
            .collect();
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// BEV grid geometry.
///
/// The grid covers x in [0, range_x] (forward) and y in
/// [-range_y/2, +range_y/2] (lateral, centered on the sensor), discretized
/// at `cell` meters into `grid` x `grid` cells. Heights are shifted by
/// `z_shift` to start from zero, clamped into [0, z_range], and normalized
/// by that range; σ_z is normalized by half the range since the standard
/// deviation of a bounded variable cannot exceed half its range. The z axis
/// is additionally discretized into `z_bins` occupancy bins spanning
/// [0, z_bin_top].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevConfig {
    pub range_x: f32,
    pub range_y: f32,
    pub cell: f32,
    pub grid: usize,
    pub z_bins: usize,
    pub z_bin_top: f32,
    pub z_shift: f32,
    pub z_range: f32,
}

impl Default for BevConfig {
    fn default() -> Self {
        BevConfig {
            range_x: 60.0,
            range_y: 60.0,
            cell: 0.1875,
            grid: 320,
            z_bins: 6,
            z_bin_top: 2.4,
            z_shift: 3.0,
            z_range: 6.0,
        }
    }
}

impl BevConfig {
    /// A config covering the same physical range on a grid shrunk by `scale`.
    pub fn scaled(scale: usize) -> Self {
        let base = BevConfig::default();
        BevConfig {
            cell: base.cell * scale as f32,
            grid: base.grid / scale,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.cell <= 0.0 || self.range_x <= 0.0 || self.range_y <= 0.0 {
            return Err(Error::Config("bev: grid, cell, and ranges must be positive".into()));
        }
        let expect = (self.range_x / self.cell).round() as usize;
        if expect != self.grid {
            return Err(Error::Config(format!(
                "bev: grid {} != round(range_x / cell) = {}",
                self.grid, expect
            )));
        }
        if self.z_bins < 1 {
            return Err(Error::Config("bev: z_bins must be >= 1".into()));
        }
        if self.z_bin_top <= 0.0 || self.z_range <= 0.0 || self.z_shift < 0.0 {
            return Err(Error::Config("bev: z_bin_top and z_range must be positive".into()));
        }
        Ok(())
    }

    pub fn x_max(&self) -> f32 {
        self.range_x
    }

    pub fn y_max(&self) -> f32 {
        self.range_y / 2.0
    }

    /// Total channel count of the combined frame.
    pub fn channels(&self) -> usize {
        5 + self.z_bins
    }
}

/// The 11-channel BEV input: 5 primary feature channels, `z_bins` binary
/// occupancy planes, and their channel concatenation.
#[derive(Debug, Clone)]
pub struct BevFrame {
    pub primary: DenseTensor,
    pub zbins: DenseTensor,
    pub combined: DenseTensor,
}

/// Grid indices for a point: `r = floor((x_max - x)/cell)`,
/// `c = floor((y_max - y)/cell)`. Returns `None` when either index falls
/// outside `[0, grid)`; the far edge is exclusive.
pub fn project_point(p: &Point, cfg: &BevConfig) -> Option<(usize, usize)> {
    let r = ((cfg.x_max() - p.x) / cfg.cell).floor();
    let c = ((cfg.y_max() - p.y) / cfg.cell).floor();
    let g = cfg.grid as f32;
    if r < 0.0 || r >= g || c < 0.0 || c >= g {
        return None;
    }
    Some((r as usize, c as usize))
}

#[derive(Clone, Copy)]
struct PillarAcc {
    count: u32,
    z_max: f32,
    z_min: f32,
    // Welford accumulators in f64 for numerical stability.
    mean_z: f64,
    m2_z: f64,
    sum_i: f64,
    bins: u32,
}

impl PillarAcc {
    fn empty() -> Self {
        PillarAcc {
            count: 0,
            z_max: f32::NEG_INFINITY,
            z_min: f32::INFINITY,
            mean_z: 0.0,
            m2_z: 0.0,
            sum_i: 0.0,
            bins: 0,
        }
    }

    fn push(&mut self, z: f32, intensity: f32, bin: Option<usize>) {
        self.count += 1;
        self.z_max = self.z_max.max(z);
        self.z_min = self.z_min.min(z);
        let delta = z as f64 - self.mean_z;
        self.mean_z += delta / self.count as f64;
        self.m2_z += delta * (z as f64 - self.mean_z);
        self.sum_i += intensity as f64;
        if let Some(b) = bin {
            self.bins |= 1 << b;
        }
    }

    /// Population standard deviation; zero for a single sample.
    fn sigma_z(&self) -> f32 {
        (self.m2_z / self.count as f64).sqrt() as f32
    }
}

/// Project a point cloud into the combined BEV frame.
///
/// Per occupied pillar: z_max, occupancy 1, mean intensity, z_min, and the
/// Welford population σ_z over shifted-and-clamped heights, all normalized
/// into [0,1]; plus binary z-bin occupancy. Cells with no returns stay
/// exactly zero in every channel. An empty cloud yields an all-zero frame.
pub fn build_frame(pc: &PointCloud, cfg: &BevConfig) -> Result<BevFrame> {
    cfg.validate()?;
    let g = cfg.grid;
    let mut accs = vec![PillarAcc::empty(); g * g];
    let bin_width = cfg.z_bin_top / cfg.z_bins as f32;
    for p in &pc.points {
        let Some((r, c)) = project_point(p, cfg) else { continue };
        let z = (p.z + cfg.z_shift).clamp(0.0, cfg.z_range);
        let bin = {
            let b = (z / bin_width).floor() as isize;
            (b >= 0 && (b as usize) < cfg.z_bins).then_some(b as usize)
        };
        accs[r * g + c].push(z, p.intensity, bin);
    }
    let mut primary = DenseTensor::zeros(Shape::new(1, 5, g, g));
    let mut zbins = DenseTensor::zeros(Shape::new(1, cfg.z_bins, g, g));
    let half_range = cfg.z_range / 2.0;
    for r in 0..g {
        for c in 0..g {
            let acc = &accs[r * g + c];
            if acc.count == 0 {
                continue;
            }
            primary.set(0, 0, r, c, acc.z_max / cfg.z_range);
            primary.set(0, 1, r, c, 1.0);
            primary.set(0, 2, r, c, (acc.sum_i / acc.count as f64) as f32);
            primary.set(0, 3, r, c, acc.z_min / cfg.z_range);
            primary.set(0, 4, r, c, acc.sigma_z() / half_range);
            for b in 0..cfg.z_bins {
                if acc.bins & (1 << b) != 0 {
                    zbins.set(0, b, r, c, 1.0);
                }
            }
        }
    }
    let combined = crate::tensor::tensor_concat_channels(&primary, &zbins)?;
    Ok(BevFrame { primary, zbins, combined })
}

/// Parse little-endian f32 quadruples (x, y, z, intensity).
///
/// The byte length must be divisible by 16; a truncated record reports the
/// offset where the partial record begins.
pub fn load_pointcloud(source: &mut impl Read) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("reading point cloud", e))?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Parse {
            offset: (bytes.len() - bytes.len() % 16) as u64,
            message: format!("truncated record: {} trailing bytes", bytes.len() % 16),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for rec in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes([rec[i], rec[i + 1], rec[i + 2], rec[i + 3]]);
        points.push(Point { x: f(0), y: f(4), z: f(8), intensity: f(12) });
    }
    PointCloud::new(points)
}

/// Serialize a point cloud in the same quadruple format.
pub fn write_pointcloud(pc: &PointCloud, sink: &mut impl std::io::Write) -> Result<()> {
    for p in &pc.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            sink.write_all(&v.to_le_bytes())
                .map_err(|e| Error::io("writing point cloud", e))?;
        }
    }
    Ok(())
}
