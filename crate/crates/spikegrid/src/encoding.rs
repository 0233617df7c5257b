//! Input spike coding: Poisson rate coding, latency (time-to-first-spike)
//! coding, temporal z-axis coding, and self-coding (repeated current
//! injection, letting the stem LIF layer learn the spike representation).

use crate::bev::BevFrame;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{DenseTensor, Shape, SpikeTrain};

/// Encoder selection plus the timestep budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Poisson,
    Latency,
    ZAxisTemporal,
    SelfCoding,
}

impl EncoderKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "poisson" => Ok(EncoderKind::Poisson),
            "latency" => Ok(EncoderKind::Latency),
            "zaxis" => Ok(EncoderKind::ZAxisTemporal),
            "self" => Ok(EncoderKind::SelfCoding),
            other => Err(Error::Config(format!(
                "unknown encoder '{other}' (expected poisson|latency|zaxis|self)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EncoderKind::Poisson => "poisson",
            EncoderKind::Latency => "latency",
            EncoderKind::ZAxisTemporal => "zaxis",
            EncoderKind::SelfCoding => "self",
        }
    }

    /// Channel count the stem convolution sees for a frame with `z_bins` bins.
    pub fn input_channels(&self, z_bins: usize) -> usize {
        match self {
            // 5 primary channels + one temporal bin plane.
            EncoderKind::ZAxisTemporal => 6,
            _ => 5 + z_bins,
        }
    }
}

/// Per-step drive for the stem. Spike encoders produce strictly binary
/// frames; self-coding injects the continuous frame unchanged, and the
/// z-axis encoder mixes binary bin planes with continuous feature current.
#[derive(Debug, Clone)]
pub struct InputDrive {
    frames: Vec<DenseTensor>,
    /// True when a single frame stands for every step.
    constant: bool,
    steps: usize,
}

impl InputDrive {
    pub fn from_train(train: SpikeTrain) -> Self {
        let steps = train.steps();
        InputDrive { frames: train.into_frames(), constant: false, steps }
    }

    pub fn constant(frame: DenseTensor, steps: usize) -> Self {
        InputDrive { frames: vec![frame], constant: true, steps }
    }

    pub fn from_frames(frames: Vec<DenseTensor>) -> Self {
        let steps = frames.len();
        InputDrive { frames, constant: false, steps }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn shape(&self) -> Shape {
        self.frames[0].shape()
    }

    pub fn frame(&self, t: usize) -> &DenseTensor {
        if self.constant {
            &self.frames[0]
        } else {
            &self.frames[t]
        }
    }
}

/// Poisson rate coding: each element spikes independently per step with
/// probability equal to its value.
pub fn encode_poisson(x: &DenseTensor, steps: usize, rng: &mut RngStream) -> Result<SpikeTrain> {
    if steps == 0 {
        return Err(Error::Config("poisson: steps must be >= 1".into()));
    }
    if let Some(v) = x.data().iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Domain(format!("poisson: input value {v} outside [0,1]")));
    }
    let shape = x.shape();
    let mut frames = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut f = DenseTensor::zeros(shape);
        for (o, &p) in f.data_mut().iter_mut().zip(x.data()) {
            if rng.next_f32() < p {
                *o = 1.0;
            }
        }
        frames.push(f);
    }
    SpikeTrain::from_frames(frames)
}

/// Latency (TTFS) coding: one spike per nonzero element at
/// `t* = round((1 - x) * (T - 1))` with ties to even; zero elements stay
/// silent. Larger inputs fire earlier.
pub fn encode_latency(x: &DenseTensor, steps: usize) -> Result<SpikeTrain> {
    if steps == 0 {
        return Err(Error::Config("latency: steps must be >= 1".into()));
    }
    if let Some(v) = x.data().iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Domain(format!("latency: input value {v} outside [0,1]")));
    }
    let shape = x.shape();
    let mut frames = vec![DenseTensor::zeros(shape); steps];
    for (i, &v) in x.data().iter().enumerate() {
        if v > 0.0 {
            let t = ((1.0 - v) * (steps as f32 - 1.0)).round_ties_even() as usize;
            frames[t.min(steps - 1)].data_mut()[i] = 1.0;
        }
    }
    SpikeTrain::from_frames(frames)
}

/// Temporal z-axis coding: bin plane `t` is presented as a binary spike
/// plane at step `t` (zeros once the bins are exhausted), while the five
/// primary feature channels are injected as constant current at every step.
pub fn encode_zaxis(frame: &BevFrame, steps: usize) -> Result<InputDrive> {
    let bins = frame.zbins.shape().channels;
    if steps < bins {
        return Err(Error::Config(format!(
            "zaxis: steps {steps} must be >= z_bins {bins}"
        )));
    }
    let s = frame.primary.shape();
    let out_shape = Shape::new(s.batch, 6, s.height, s.width);
    let mut frames = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut f = DenseTensor::zeros(out_shape);
        for b in 0..s.batch {
            for c in 0..5 {
                f.plane_mut(b, c).copy_from_slice(frame.primary.plane(b, c));
            }
            if t < bins {
                f.plane_mut(b, 5).copy_from_slice(frame.zbins.plane(b, t));
            }
        }
        debug_assert!(f.plane(0, 5).iter().all(|&v| v == 0.0 || v == 1.0));
        frames.push(f);
    }
    Ok(InputDrive::from_frames(frames))
}

/// Self-coding: the continuous frame is presented identically at every step
/// as injection current; the stem LIF layer produces the first spikes.
pub fn encode_self(x: &DenseTensor, steps: usize) -> Result<InputDrive> {
    if steps == 0 {
        return Err(Error::Config("self-coding: steps must be >= 1".into()));
    }
    Ok(InputDrive::constant(x.clone(), steps))
}

/// Encode a BEV frame under the selected scheme.
pub fn encode(
    kind: EncoderKind,
    frame: &BevFrame,
    steps: usize,
    rng: &mut RngStream,
) -> Result<InputDrive> {
    match kind {
        EncoderKind::Poisson => Ok(InputDrive::from_train(encode_poisson(
            &frame.combined,
            steps,
            rng,
        )?)),
        EncoderKind::Latency => Ok(InputDrive::from_train(encode_latency(&frame.combined, steps)?)),
        EncoderKind::ZAxisTemporal => encode_zaxis(frame, steps),
        EncoderKind::SelfCoding => encode_self(&frame.combined, steps),
    }
}
