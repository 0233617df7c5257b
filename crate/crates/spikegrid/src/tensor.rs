//! Dense rank-4 tensors, binary spike trains, and the BEVT file format.
//!
//! Layout is row-major `(batch, channel, row, column)` everywhere so that
//! convolution, pooling, and serialization agree on a single convention.

use crate::error::{Error, Result};
use std::io::{Read, Write};

/// `(batch, channels, height, width)` of a [`DenseTensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape { batch, channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.channels + c) * self.height + y) * self.width + x
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.batch, self.channels, self.height, self.width)
    }
}

/// Rank-4 real-valued grid carrying BEV features, membrane potentials,
/// rate maps, and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl DenseTensor {
    pub fn zeros(shape: Shape) -> Self {
        DenseTensor { shape, data: vec![0.0; shape.len()] }
    }

    /// Build from raw data; rejects length mismatches and non-finite values.
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(DenseTensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.index(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.shape.index(b, c, y, x);
        self.data[i] = v;
    }

    /// Immutable view of one `(batch, channel)` plane.
    pub fn plane(&self, b: usize, c: usize) -> &[f32] {
        let hw = self.shape.height * self.shape.width;
        let start = (b * self.shape.channels + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f32] {
        let hw = self.shape.height * self.shape.width;
        let start = (b * self.shape.channels + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when every element is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> DenseTensor {
        DenseTensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &DenseTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add: {} vs {}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Mean over a slice of same-shaped tensors, in f64.
    pub fn mean_of(frames: &[DenseTensor]) -> Result<DenseTensor> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Config("mean over zero frames".into()))?;
        let shape = first.shape;
        let mut acc = vec![0.0f64; shape.len()];
        for f in frames {
            if f.shape != shape {
                return Err(Error::Shape(format!("mean: {} vs {}", shape, f.shape)));
            }
            for (a, &v) in acc.iter_mut().zip(&f.data) {
                *a += v as f64;
            }
        }
        let n = frames.len() as f64;
        Ok(DenseTensor {
            shape,
            data: acc.into_iter().map(|v| (v / n) as f32).collect(),
        })
    }
}

/// Concatenate along the channel axis; `a`'s channels precede `b`'s.
pub fn tensor_concat_channels(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let (sa, sb) = (a.shape, b.shape);
    if sa.batch != sb.batch || sa.height != sb.height || sa.width != sb.width {
        return Err(Error::Shape(format!(
            "concat: batch/height/width must agree, got {} vs {}",
            sa, sb
        )));
    }
    let out_shape = Shape::new(sa.batch, sa.channels + sb.channels, sa.height, sa.width);
    let mut out = DenseTensor::zeros(out_shape);
    let hw = sa.height * sa.width;
    for bi in 0..sa.batch {
        for c in 0..sa.channels {
            out.plane_mut(bi, c).copy_from_slice(a.plane(bi, c));
        }
        for c in 0..sb.channels {
            out.plane_mut(bi, sa.channels + c).copy_from_slice(b.plane(bi, c));
        }
        let _ = hw;
    }
    Ok(out)
}

const BEVT_MAGIC: &[u8; 4] = b"BEVT";
const BEVT_VERSION: u32 = 1;

/// Write a tensor in the BEVT format; returns the number of bytes written.
///
/// Layout: magic `BEVT`, u32 version, four u32 dims (batch, channels,
/// height, width), then raw f32 data. Little-endian throughout.
pub fn serialize_tensor(t: &DenseTensor, sink: &mut impl Write) -> Result<u64> {
    let ctx = "writing BEVT tensor";
    sink.write_all(BEVT_MAGIC).map_err(|e| Error::io(ctx, e))?;
    sink.write_all(&BEVT_VERSION.to_le_bytes())
        .map_err(|e| Error::io(ctx, e))?;
    let s = t.shape;
    for d in [s.batch, s.channels, s.height, s.width] {
        sink.write_all(&(d as u32).to_le_bytes())
            .map_err(|e| Error::io(ctx, e))?;
    }
    let mut buf = Vec::with_capacity(t.data.len() * 4);
    for v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf).map_err(|e| Error::io(ctx, e))?;
    Ok(4 + 4 + 16 + buf.len() as u64)
}

/// Read a BEVT tensor back; inverse of [`serialize_tensor`].
pub fn deserialize_tensor(source: &mut impl Read) -> Result<DenseTensor> {
    let ctx = "reading BEVT tensor";
    let mut magic = [0u8; 4];
    source.read_exact(&mut magic).map_err(|e| Error::io(ctx, e))?;
    if &magic != BEVT_MAGIC {
        return Err(Error::Parse { offset: 0, message: "bad BEVT magic".into() });
    }
    let mut u32buf = [0u8; 4];
    source.read_exact(&mut u32buf).map_err(|e| Error::io(ctx, e))?;
    let version = u32::from_le_bytes(u32buf);
    if version != BEVT_VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported BEVT version {version}"),
        });
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        source.read_exact(&mut u32buf).map_err(|e| Error::io(ctx, e))?;
        *d = u32::from_le_bytes(u32buf) as usize;
        let _ = i;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let mut data = vec![0.0f32; shape.len()];
    let mut fbuf = vec![0u8; shape.len() * 4];
    source.read_exact(&mut fbuf).map_err(|e| Error::io(ctx, e))?;
    for (i, chunk) in fbuf.chunks_exact(4).enumerate() {
        data[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
    }
    DenseTensor::from_vec(shape, data)
}

/// Binary grid over `T` timesteps; the sole inter-layer currency of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrain {
    frames: Vec<DenseTensor>,
}

impl SpikeTrain {
    /// Build from per-step frames, rejecting any non-binary value.
    pub fn from_frames(frames: Vec<DenseTensor>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Config("spike train needs at least one step".into()))?;
        let shape = first.shape();
        for (t, f) in frames.iter().enumerate() {
            if f.shape() != shape {
                return Err(Error::Shape(format!(
                    "spike train step {t}: {} vs {}",
                    f.shape(),
                    shape
                )));
            }
            if !f.is_binary() {
                return Err(Error::Domain(format!(
                    "spike train step {t} contains a value outside {{0,1}}"
                )));
            }
        }
        Ok(SpikeTrain { frames })
    }

    pub fn steps(&self) -> usize {
        self.frames.len()
    }

    pub fn shape(&self) -> Shape {
        self.frames[0].shape()
    }

    pub fn frame(&self, t: usize) -> &DenseTensor {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[DenseTensor] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<DenseTensor> {
        self.frames
    }

    /// Mean firing-rate map over all steps.
    pub fn rate(&self) -> DenseTensor {
        DenseTensor::mean_of(&self.frames).expect("non-empty by construction")
    }

    /// Total number of spikes in the train.
    pub fn count_spikes(&self) -> u64 {
        self.frames
            .iter()
            .map(|f| f.data().iter().filter(|&&v| v != 0.0).count() as u64)
            .sum()
    }
}

const BEVS_MAGIC: &[u8; 4] = b"BEVS";
const BEVS_VERSION: u32 = 1;

/// Write a spike train: magic `BEVS`, u32 version, u32 step count, then the
/// steps as BEVT payloads.
pub fn serialize_train(s: &SpikeTrain, sink: &mut impl Write) -> Result<u64> {
    let ctx = "writing BEVS train";
    sink.write_all(BEVS_MAGIC).map_err(|e| Error::io(ctx, e))?;
    sink.write_all(&BEVS_VERSION.to_le_bytes())
        .map_err(|e| Error::io(ctx, e))?;
    sink.write_all(&(s.steps() as u32).to_le_bytes())
        .map_err(|e| Error::io(ctx, e))?;
    let mut total = 12u64;
    for f in s.frames() {
        total += serialize_tensor(f, sink)?;
    }
    Ok(total)
}

pub fn deserialize_train(source: &mut impl Read) -> Result<SpikeTrain> {
    let ctx = "reading BEVS train";
    let mut magic = [0u8; 4];
    source.read_exact(&mut magic).map_err(|e| Error::io(ctx, e))?;
    if &magic != BEVS_MAGIC {
        return Err(Error::Parse { offset: 0, message: "bad BEVS magic".into() });
    }
    let mut u32buf = [0u8; 4];
    source.read_exact(&mut u32buf).map_err(|e| Error::io(ctx, e))?;
    let version = u32::from_le_bytes(u32buf);
    if version != BEVS_VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported BEVS version {version}"),
        });
    }
    source.read_exact(&mut u32buf).map_err(|e| Error::io(ctx, e))?;
    let steps = u32::from_le_bytes(u32buf) as usize;
    let mut frames = Vec::with_capacity(steps);
    for _ in 0..steps {
        frames.push(deserialize_tensor(source)?);
    }
    SpikeTrain::from_frames(frames)
}
