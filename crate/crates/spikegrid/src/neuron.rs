//! Leaky integrate-and-fire dynamics: forward stepping with subtract-reset,
//! membrane readout, the tanh surrogate gradient, and the unrolled layer
//! used by the network with its backward rule.

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Shape};

/// Per-layer LIF parameters. `beta` is the membrane decay in (0,1),
/// `u_thr` the spike threshold, `surrogate_k` the surrogate sharpness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    pub beta: f32,
    pub u_thr: f32,
    pub surrogate_k: f32,
}

impl LifParams {
    pub fn new(beta: f32, u_thr: f32, surrogate_k: f32) -> Result<Self> {
        if !(0.0 < beta && beta < 1.0) {
            return Err(Error::Config(format!("beta {beta} must lie in (0,1)")));
        }
        if u_thr <= 0.0 {
            return Err(Error::Config(format!("u_thr {u_thr} must be positive")));
        }
        if surrogate_k <= 0.0 {
            return Err(Error::Config(format!("surrogate_k {surrogate_k} must be positive")));
        }
        Ok(LifParams { beta, u_thr, surrogate_k })
    }
}

/// Membrane potential of one LIF layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LifState {
    pub u: DenseTensor,
}

impl LifState {
    pub fn zeros(shape: Shape) -> Self {
        LifState { u: DenseTensor::zeros(shape) }
    }
}

/// One LIF update. Spikes are read from the current state, then the
/// membrane integrates the input with decay and subtract-reset:
/// `S = step(U - u_thr)`, `U' = beta*U + input - S*u_thr`.
///
/// The threshold comparison is inclusive: a membrane exactly at `u_thr` fires.
pub fn lif_step(
    state: &LifState,
    input_current: &DenseTensor,
    p: &LifParams,
) -> Result<(DenseTensor, LifState)> {
    if state.u.shape() != input_current.shape() {
        return Err(Error::Shape(format!(
            "lif_step: state {} vs input {}",
            state.u.shape(),
            input_current.shape()
        )));
    }
    if !input_current.is_finite() {
        return Err(Error::Numeric("lif_step: non-finite input current".into()));
    }
    let shape = state.u.shape();
    let mut spikes = DenseTensor::zeros(shape);
    let mut next = DenseTensor::zeros(shape);
    for i in 0..shape.len() {
        let u = state.u.data()[i];
        let s = if u >= p.u_thr { 1.0 } else { 0.0 };
        spikes.data_mut()[i] = s;
        next.data_mut()[i] = p.beta * u + input_current.data()[i] - s * p.u_thr;
    }
    Ok((spikes, LifState { u: next }))
}

/// Surrogate derivative `1 - tanh^2(k*x)` evaluated as `sech^2(k*x)`
/// to stay accurate where `tanh` saturates.
#[inline]
pub fn surrogate_grad_scalar(x: f32, k: f32) -> f32 {
    let s = 1.0 / (k * x).cosh();
    s * s
}

/// Elementwise surrogate gradient over a tensor of `U - u_thr` values.
pub fn surrogate_grad(u_minus_thr: &DenseTensor, k: f32) -> Result<DenseTensor> {
    if k <= 0.0 {
        return Err(Error::Config(format!("surrogate_k {k} must be positive")));
    }
    Ok(u_minus_thr.map(|x| surrogate_grad_scalar(x, k)))
}

/// Forward spike nonlinearity selector. `Binary` is the Heaviside step used
/// for real runs; `Relaxed` substitutes `tanh(k*x)/k`, the primitive of the
/// surrogate, so gradient checks can compare against finite differences of a
/// smooth loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeMode {
    Binary,
    Relaxed,
}

#[inline]
fn fire(x: f32, k: f32, mode: SpikeMode) -> f32 {
    match mode {
        SpikeMode::Binary => {
            if x >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        SpikeMode::Relaxed => (k * x).tanh() / k,
    }
}

/// Learnable LIF layer. `beta` is stored through a logistic map and `u_thr`
/// through a softplus map so optimizer steps cannot leave the valid ranges.
#[derive(Debug, Clone)]
pub struct LifCell {
    /// Raw parameters; `beta = sigmoid(raw)`, one entry, or one per channel.
    beta_raw: Vec<f32>,
    /// Raw parameters; `u_thr = softplus(raw)`.
    thr_raw: Vec<f32>,
    pub surrogate_k: f32,
    /// Readout cells accumulate membrane without spiking or reset.
    pub readout: bool,
    per_channel: bool,
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// d softplus / d raw.
fn softplus_grad(x: f32) -> f32 {
    sigmoid(x)
}

fn logit(p: f32) -> f32 {
    (p / (1.0 - p)).ln()
}

/// Inverse softplus.
fn softplus_inv(y: f32) -> f32 {
    if y > 20.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

/// Retained per-step state for the backward pass of one [`LifCell`].
#[derive(Debug, Clone)]
pub struct LifTrace {
    /// Membrane value at each step, before any reset is applied.
    pub u: Vec<DenseTensor>,
    /// Emitted spikes (or relaxed activations) at each step.
    pub s: Vec<DenseTensor>,
    pub mode: SpikeMode,
}

/// Gradients for the raw (reparameterized) LIF parameters.
#[derive(Debug, Clone, Default)]
pub struct LifGrads {
    pub beta_raw: Vec<f32>,
    pub thr_raw: Vec<f32>,
}

impl LifCell {
    pub fn new(beta: f32, u_thr: f32, surrogate_k: f32, channels: usize, per_channel: bool) -> Result<Self> {
        LifParams::new(beta, u_thr, surrogate_k)?;
        let n = if per_channel { channels } else { 1 };
        Ok(LifCell {
            beta_raw: vec![logit(beta); n],
            thr_raw: vec![softplus_inv(u_thr); n],
            surrogate_k,
            readout: false,
            per_channel,
        })
    }

    pub fn new_readout(beta: f32, surrogate_k: f32) -> Result<Self> {
        let mut cell = LifCell::new(beta, 1.0, surrogate_k, 1, false)?;
        cell.readout = true;
        Ok(cell)
    }

    pub fn beta(&self, channel: usize) -> f32 {
        sigmoid(self.beta_raw[if self.per_channel { channel } else { 0 }])
    }

    pub fn u_thr(&self, channel: usize) -> f32 {
        softplus(self.thr_raw[if self.per_channel { channel } else { 0 }])
    }

    pub fn raw_params(&self) -> (&[f32], &[f32]) {
        (&self.beta_raw, &self.thr_raw)
    }

    pub fn raw_params_mut(&mut self) -> (&mut [f32], &mut [f32]) {
        (&mut self.beta_raw, &mut self.thr_raw)
    }

    fn idx(&self, channel: usize) -> usize {
        if self.per_channel {
            channel
        } else {
            0
        }
    }

    /// Unroll over `inputs[t]`; returns per-step outputs and, when
    /// `record` is set, the trace needed by [`LifCell::backward`].
    ///
    /// Per step: `U[t] = beta*U[t-1] + I[t] - S[t-1]*u_thr`, then
    /// `S[t] = step(U[t] - u_thr)`. Readout cells skip the spike and reset.
    pub fn forward(
        &self,
        inputs: &[DenseTensor],
        mode: SpikeMode,
        record: bool,
    ) -> Result<(Vec<DenseTensor>, Option<LifTrace>)> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Config("lif forward over zero steps".into()))?;
        let shape = first.shape();
        let mut u_prev = DenseTensor::zeros(shape);
        let mut s_prev = DenseTensor::zeros(shape);
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut trace_u = Vec::new();
        let mut trace_s = Vec::new();
        for (t, input) in inputs.iter().enumerate() {
            if input.shape() != shape {
                return Err(Error::Shape(format!(
                    "lif forward step {t}: {} vs {}",
                    input.shape(),
                    shape
                )));
            }
            let mut u = DenseTensor::zeros(shape);
            let mut s = DenseTensor::zeros(shape);
            for c in 0..shape.channels {
                let beta = self.beta(c);
                let thr = self.u_thr(c);
                for b in 0..shape.batch {
                    let base = shape.index(b, c, 0, 0);
                    let n = shape.height * shape.width;
                    for i in base..base + n {
                        let prev = u_prev.data()[i];
                        let reset = if self.readout { 0.0 } else { s_prev.data()[i] * thr };
                        let ui = beta * prev + input.data()[i] - reset;
                        u.data_mut()[i] = ui;
                        if !self.readout {
                            s.data_mut()[i] = fire(ui - thr, self.surrogate_k, mode);
                        }
                    }
                }
            }
            if record {
                trace_u.push(u.clone());
                trace_s.push(s.clone());
            }
            outputs.push(if self.readout { u.clone() } else { s.clone() });
            u_prev = u;
            s_prev = s;
        }
        let trace = record.then_some(LifTrace { u: trace_u, s: trace_s, mode });
        Ok((outputs, trace))
    }

    /// Final membrane potential after `T` readout steps.
    ///
    /// Only valid on a readout-configured cell; spiking cells reset their
    /// membrane and have no accumulated readout.
    pub fn membrane_readout(&self, state: &LifState) -> Result<DenseTensor> {
        if !self.readout {
            return Err(Error::Config(
                "membrane_readout requires a readout-configured cell (no spiking, no reset)".into(),
            ));
        }
        Ok(state.u.clone())
    }

    /// Backward through the unrolled recurrence.
    ///
    /// `grad_out[t]` is dL/dS[t] (or dL/dU[t] outputs for readout cells);
    /// `grad_final_u` optionally seeds dL/dU[T-1] for membrane readouts
    /// captured from a spiking cell's final state. Returns dL/dI[t] and the
    /// raw parameter gradients.
    pub fn backward(
        &self,
        inputs: &[DenseTensor],
        trace: &LifTrace,
        grad_out: &[DenseTensor],
        grad_final_u: Option<&DenseTensor>,
    ) -> Result<(Vec<DenseTensor>, LifGrads)> {
        let steps = inputs.len();
        if trace.u.len() != steps || grad_out.len() != steps {
            return Err(Error::Internal(format!(
                "lif backward: inputs {steps}, trace {}, grads {}",
                trace.u.len(),
                grad_out.len()
            )));
        }
        let shape = inputs[0].shape();
        let n_param = self.beta_raw.len();
        let mut d_beta = vec![0.0f64; n_param];
        let mut d_thr = vec![0.0f64; n_param];
        let mut grad_inputs = vec![DenseTensor::zeros(shape); steps];
        // Gradient wrt U[t] accumulated while walking backward.
        let mut g_u = DenseTensor::zeros(shape);
        // Gradient wrt S[t] pending from the reset path of step t+1.
        let mut g_s_pending = DenseTensor::zeros(shape);
        for t in (0..steps).rev() {
            let u_t = &trace.u[t];
            for c in 0..shape.channels {
                let beta = self.beta(c);
                let thr = self.u_thr(c);
                let k = self.surrogate_k;
                let pi = self.idx(c);
                for b in 0..shape.batch {
                    let base = shape.index(b, c, 0, 0);
                    let n = shape.height * shape.width;
                    for i in base..base + n {
                        let mut gu = g_u.data()[i];
                        if self.readout {
                            gu += grad_out[t].data()[i];
                            if t + 1 == steps {
                                if let Some(gf) = grad_final_u {
                                    gu += gf.data()[i];
                                }
                            }
                        } else {
                            // dL/dS[t]: upstream plus the reset path of step t+1.
                            let gs = grad_out[t].data()[i] + g_s_pending.data()[i];
                            let sur = surrogate_grad_scalar(u_t.data()[i] - thr, k);
                            gu += gs * sur;
                            d_thr[pi] -= (gs * sur) as f64;
                            if t + 1 == steps {
                                if let Some(gf) = grad_final_u {
                                    gu += gf.data()[i];
                                }
                            }
                        }
                        grad_inputs[t].data_mut()[i] = gu;
                        if t > 0 {
                            let u_prev = trace.u[t - 1].data()[i];
                            let s_prev = trace.s[t - 1].data()[i];
                            g_u.data_mut()[i] = gu * beta;
                            d_beta[pi] += (gu * u_prev) as f64;
                            if !self.readout {
                                g_s_pending.data_mut()[i] = gu * -thr;
                                d_thr[pi] += (gu * -s_prev) as f64;
                            }
                        } else {
                            g_u.data_mut()[i] = 0.0;
                            g_s_pending.data_mut()[i] = 0.0;
                        }
                    }
                }
            }
        }
        // Chain through the reparameterizations.
        let mut grads = LifGrads {
            beta_raw: vec![0.0; n_param],
            thr_raw: vec![0.0; n_param],
        };
        for p in 0..n_param {
            let beta = sigmoid(self.beta_raw[p]);
            grads.beta_raw[p] = (d_beta[p] as f32) * beta * (1.0 - beta);
            grads.thr_raw[p] = (d_thr[p] as f32) * softplus_grad(self.thr_raw[p]);
        }
        Ok((grad_inputs, grads))
    }
}
