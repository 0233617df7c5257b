//! Convolution, transposed convolution, and group normalization with
//! explicit backward passes. Forward and weight-gradient loops skip zero
//! input pixels, which is where spike sparsity pays off.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{DenseTensor, Shape};

/// 2D convolution. Weights are laid out `[out_ch][in_ch][k][k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        gain: f32,
        rng: &mut RngStream,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = gain * (3.0 / fan_in as f32).sqrt();
        let weight = (0..out_ch * fan_in)
            .map(|_| rng.next_range(-bound, bound))
            .collect();
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            weight,
            bias: bias.then(|| vec![0.0; out_ch]),
        }
    }

    #[inline]
    fn w_index(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.in_ch + ci) * self.kernel + ky) * self.kernel + kx
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    /// Valid output-row range for a kernel row at stride 1:
    /// `iy = oy - p + ky` must land in `[0, h)`.
    #[inline]
    fn s1_range(p: isize, koff: usize, in_dim: usize, out_dim: usize) -> (usize, usize) {
        let lo = (p - koff as isize).max(0) as usize;
        let hi = (in_dim as isize + p - koff as isize).clamp(0, out_dim as isize) as usize;
        (lo, hi.max(lo))
    }

    /// True for the same-size stride-1 geometry (k = 2p + 1) that the
    /// padded fast path handles.
    #[inline]
    fn same_conv(&self) -> bool {
        self.stride == 1 && self.kernel == 2 * self.padding + 1
    }

    /// Copy a plane into a zero-padded buffer of (h + 2p) x (w + 2p).
    fn pad_plane(plane: &[f32], h: usize, w: usize, p: usize, out: &mut [f32]) {
        let wp = w + 2 * p;
        out.fill(0.0);
        for y in 0..h {
            out[(y + p) * wp + p..(y + p) * wp + p + w].copy_from_slice(&plane[y * w..y * w + w]);
        }
    }

    /// Accumulate one kernel row of taps into an output row:
    /// `dst[j] += sum_kx w[kx] * src[j + kx]`.
    #[inline]
    fn tap_row(dst: &mut [f32], src: &[f32], w: &[f32]) {
        match w.len() {
            1 => {
                let w0 = w[0];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w0 * s;
                }
            }
            3 => {
                let (w0, w1, w2) = (w[0], w[1], w[2]);
                for (j, d) in dst.iter_mut().enumerate() {
                    *d += w0 * src[j] + w1 * src[j + 1] + w2 * src[j + 2];
                }
            }
            5 => {
                let (w0, w1, w2, w3, w4) = (w[0], w[1], w[2], w[3], w[4]);
                for (j, d) in dst.iter_mut().enumerate() {
                    *d += w0 * src[j] + w1 * src[j + 1] + w2 * src[j + 2] + w3 * src[j + 3] + w4 * src[j + 4];
                }
            }
            _ => {
                for (j, d) in dst.iter_mut().enumerate() {
                    let mut acc = 0.0f32;
                    for (kx, &wk) in w.iter().enumerate() {
                        acc += wk * src[j + kx];
                    }
                    *d += acc;
                }
            }
        }
    }

    /// Per-tap dot products of an output row against a padded source row:
    /// `accs[kx] += sum_j dst[j] * src[j + kx]`.
    #[inline]
    fn tap_dot(dst: &[f32], src: &[f32], accs: &mut [f32]) {
        match accs.len() {
            1 => {
                let mut a0 = 0.0f32;
                for (j, &d) in dst.iter().enumerate() {
                    a0 += d * src[j];
                }
                accs[0] += a0;
            }
            3 => {
                let (mut a0, mut a1, mut a2) = (0.0f32, 0.0, 0.0);
                for (j, &d) in dst.iter().enumerate() {
                    a0 += d * src[j];
                    a1 += d * src[j + 1];
                    a2 += d * src[j + 2];
                }
                accs[0] += a0;
                accs[1] += a1;
                accs[2] += a2;
            }
            5 => {
                let (mut a0, mut a1, mut a2, mut a3, mut a4) = (0.0f32, 0.0, 0.0, 0.0, 0.0);
                for (j, &d) in dst.iter().enumerate() {
                    a0 += d * src[j];
                    a1 += d * src[j + 1];
                    a2 += d * src[j + 2];
                    a3 += d * src[j + 3];
                    a4 += d * src[j + 4];
                }
                accs[0] += a0;
                accs[1] += a1;
                accs[2] += a2;
                accs[3] += a3;
                accs[4] += a4;
            }
            _ => {
                for (kx, a) in accs.iter_mut().enumerate() {
                    let mut acc = 0.0f32;
                    for (j, &d) in dst.iter().enumerate() {
                        acc += d * src[j + kx];
                    }
                    *a += acc;
                }
            }
        }
    }

    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let s = x.shape();
        if s.channels != self.in_ch {
            return Err(Error::Shape(format!(
                "conv: input channels {} != expected {}",
                s.channels, self.in_ch
            )));
        }
        let (oh, ow) = self.out_hw(s.height, s.width);
        let out_shape = Shape::new(s.batch, self.out_ch, oh, ow);
        let mut out = DenseTensor::zeros(out_shape);
        if let Some(bias) = &self.bias {
            for b in 0..s.batch {
                for co in 0..self.out_ch {
                    out.plane_mut(b, co).fill(bias[co]);
                }
            }
        }
        let k = self.kernel;
        let p = self.padding as isize;
        let st = self.stride;
        let (h, w_in) = (s.height, s.width);
        if self.same_conv() {
            // Padded fast path: full-width fused-tap rows, no border branches.
            let pu = self.padding;
            let wp = w_in + 2 * pu;
            let hp = h + 2 * pu;
            let mut padded = vec![0.0f32; self.in_ch * hp * wp];
            for b in 0..s.batch {
                for ci in 0..self.in_ch {
                    Self::pad_plane(x.plane(b, ci), h, w_in, pu, &mut padded[ci * hp * wp..(ci + 1) * hp * wp]);
                }
                for co in 0..self.out_ch {
                    let oplane = out.plane_mut(b, co);
                    for ci in 0..self.in_ch {
                        let pad_ci = &padded[ci * hp * wp..(ci + 1) * hp * wp];
                        let wbase = self.w_index(co, ci, 0, 0);
                        for ky in 0..k {
                            let wrow = &self.weight[wbase + ky * k..wbase + ky * k + k];
                            for oy in 0..oh {
                                let src = &pad_ci[(oy + ky) * wp..(oy + ky) * wp + wp];
                                let dst = &mut oplane[oy * ow..oy * ow + ow];
                                Self::tap_row(dst, src, wrow);
                            }
                        }
                    }
                }
            }
            return Ok(out);
        }
        for b in 0..s.batch {
            for co in 0..self.out_ch {
                let oplane = out.plane_mut(b, co);
                for ci in 0..self.in_ch {
                    let xplane = x.plane(b, ci);
                    let wbase = self.w_index(co, ci, 0, 0);
                    for ky in 0..k {
                        for kx in 0..k {
                            let w = self.weight[wbase + ky * k + kx];
                            if st == 1 {
                                let (oy_lo, oy_hi) = Self::s1_range(p, ky, h, oh);
                                let (ox_lo, ox_hi) = Self::s1_range(p, kx, w_in, ow);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let len = ox_hi - ox_lo;
                                let ix0 = (ox_lo as isize - p + kx as isize) as usize;
                                for oy in oy_lo..oy_hi {
                                    let iy = (oy as isize - p + ky as isize) as usize;
                                    let src = &xplane[iy * w_in + ix0..iy * w_in + ix0 + len];
                                    let dst = &mut oplane[oy * ow + ox_lo..oy * ow + ox_lo + len];
                                    for (d, &v) in dst.iter_mut().zip(src) {
                                        *d += w * v;
                                    }
                                }
                            } else {
                                for oy in 0..oh {
                                    let iy = (oy * st) as isize + ky as isize - p;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let xrow = &xplane[iy as usize * w_in..][..w_in];
                                    let orow = &mut oplane[oy * ow..][..ow];
                                    for (ox, o) in orow.iter_mut().enumerate() {
                                        let ix = (ox * st) as isize + kx as isize - p;
                                        if ix >= 0 && ix < w_in as isize {
                                            *o += w * xrow[ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Returns (grad wrt input, grad wrt weight, grad wrt bias).
    pub fn backward(
        &self,
        x: &DenseTensor,
        grad_out: &DenseTensor,
    ) -> Result<(DenseTensor, Vec<f32>, Option<Vec<f32>>)> {
        let s = x.shape();
        let so = grad_out.shape();
        let (oh, ow) = self.out_hw(s.height, s.width);
        if so.channels != self.out_ch || so.height != oh || so.width != ow || so.batch != s.batch {
            return Err(Error::Shape(format!(
                "conv backward: grad {} incompatible with input {}",
                so, s
            )));
        }
        let mut gx = DenseTensor::zeros(s);
        let mut gw = vec![0.0f32; self.weight.len()];
        let mut gb = self.bias.as_ref().map(|_| vec![0.0f32; self.out_ch]);
        let k = self.kernel;
        let p = self.padding as isize;
        let st = self.stride;
        let (h, w_in) = (s.height, s.width);
        if self.same_conv() {
            // Padded fast path. Weight grads are per-tap dots of output
            // gradients against the padded input; the input grad is the
            // correlation of the padded output grad with the flipped kernel.
            let pu = self.padding;
            let wp = w_in + 2 * pu;
            let hp = h + 2 * pu;
            let mut xpad = vec![0.0f32; self.in_ch * hp * wp];
            let mut gpad = vec![0.0f32; self.out_ch * hp * wp];
            for b in 0..s.batch {
                for ci in 0..self.in_ch {
                    Self::pad_plane(x.plane(b, ci), h, w_in, pu, &mut xpad[ci * hp * wp..(ci + 1) * hp * wp]);
                }
                for co in 0..self.out_ch {
                    let gplane = grad_out.plane(b, co);
                    if let Some(gb) = gb.as_mut() {
                        gb[co] += gplane.iter().sum::<f32>();
                    }
                    Self::pad_plane(gplane, oh, ow, pu, &mut gpad[co * hp * wp..(co + 1) * hp * wp]);
                }
                for co in 0..self.out_ch {
                    let gplane = grad_out.plane(b, co);
                    for ci in 0..self.in_ch {
                        let xpad_ci = &xpad[ci * hp * wp..(ci + 1) * hp * wp];
                        let wbase = self.w_index(co, ci, 0, 0);
                        // Per-tap weight-gradient dots.
                        for ky in 0..k {
                            let mut accs = [0.0f32; 8];
                            let accs = &mut accs[..k];
                            for oy in 0..oh {
                                let grow = &gplane[oy * ow..oy * ow + ow];
                                let xrow = &xpad_ci[(oy + ky) * wp..(oy + ky) * wp + wp];
                                Self::tap_dot(grow, xrow, accs);
                            }
                            for (kx, a) in accs.iter().enumerate() {
                                gw[wbase + ky * k + kx] += a;
                            }
                        }
                    }
                }
                for ci in 0..self.in_ch {
                    let gxplane = gx.plane_mut(b, ci);
                    for co in 0..self.out_ch {
                        let gpad_co = &gpad[co * hp * wp..(co + 1) * hp * wp];
                        let wbase = self.w_index(co, ci, 0, 0);
                        for ky in 0..k {
                            // Flipped kernel row: w[k-1-ky][k-1-kx].
                            let mut wrow = [0.0f32; 8];
                            for kx in 0..k {
                                wrow[kx] = self.weight[wbase + (k - 1 - ky) * k + (k - 1 - kx)];
                            }
                            for iy in 0..h {
                                let src = &gpad_co[(iy + ky) * wp..(iy + ky) * wp + wp];
                                let dst = &mut gxplane[iy * w_in..iy * w_in + w_in];
                                Self::tap_row(dst, src, &wrow[..k]);
                            }
                        }
                    }
                }
            }
            return Ok((gx, gw, gb));
        }
        for b in 0..s.batch {
            for co in 0..self.out_ch {
                let gplane = grad_out.plane(b, co);
                if let Some(gb) = gb.as_mut() {
                    gb[co] += gplane.iter().sum::<f32>();
                }
                for ci in 0..self.in_ch {
                    let xplane = x.plane(b, ci);
                    let gxplane = gx.plane_mut(b, ci);
                    let wbase = self.w_index(co, ci, 0, 0);
                    for ky in 0..k {
                        for kx in 0..k {
                            let w = self.weight[wbase + ky * k + kx];
                            let mut wg = 0.0f32;
                            if st == 1 {
                                let (oy_lo, oy_hi) = Self::s1_range(p, ky, h, oh);
                                let (ox_lo, ox_hi) = Self::s1_range(p, kx, w_in, ow);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let len = ox_hi - ox_lo;
                                let ix0 = (ox_lo as isize - p + kx as isize) as usize;
                                for oy in oy_lo..oy_hi {
                                    let iy = (oy as isize - p + ky as isize) as usize;
                                    let grow = &gplane[oy * ow + ox_lo..oy * ow + ox_lo + len];
                                    let xrow = &xplane[iy * w_in + ix0..iy * w_in + ix0 + len];
                                    let gxrow = &mut gxplane[iy * w_in + ix0..iy * w_in + ix0 + len];
                                    let mut acc = 0.0f32;
                                    for i in 0..len {
                                        let g = grow[i];
                                        acc += g * xrow[i];
                                        gxrow[i] += w * g;
                                    }
                                    wg += acc;
                                }
                            } else {
                                for oy in 0..oh {
                                    let iy = (oy * st) as isize + ky as isize - p;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let grow = &gplane[oy * ow..][..ow];
                                    let xrow_base = iy as usize * w_in;
                                    for (ox, &g) in grow.iter().enumerate() {
                                        let ix = (ox * st) as isize + kx as isize - p;
                                        if ix < 0 || ix >= w_in as isize {
                                            continue;
                                        }
                                        let xi = xrow_base + ix as usize;
                                        wg += g * xplane[xi];
                                        gxplane[xi] += w * g;
                                    }
                                }
                            }
                            gw[wbase + ky * k + kx] += wg;
                        }
                    }
                }
            }
        }
        Ok((gx, gw, gb))
    }
}

/// 2D transposed convolution. Weights are laid out `[in_ch][out_ch][k][k]`.
/// The full output is `(H-1)*stride + k`; `crop` trims it to the target
/// resolution (top-left kept) so odd encoder resolutions round-trip.
#[derive(Debug, Clone)]
pub struct TConv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Vec<f32>,
}

impl TConv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: f32,
        rng: &mut RngStream,
    ) -> Self {
        // Fan-in of the equivalent forward conv: in_ch * k^2 / stride^2.
        let fan_in = (in_ch * kernel * kernel) / (stride * stride);
        let bound = gain * (3.0 / fan_in.max(1) as f32).sqrt();
        let weight = (0..in_ch * out_ch * kernel * kernel)
            .map(|_| rng.next_range(-bound, bound))
            .collect();
        TConv2d { in_ch, out_ch, kernel, stride, weight }
    }

    #[inline]
    fn w_index(&self, ci: usize, co: usize, ky: usize, kx: usize) -> usize {
        ((ci * self.out_ch + co) * self.kernel + ky) * self.kernel + kx
    }

    pub fn full_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) * self.stride + self.kernel, (w - 1) * self.stride + self.kernel)
    }

    pub fn forward(&self, x: &DenseTensor, crop: Option<(usize, usize)>) -> Result<DenseTensor> {
        let s = x.shape();
        if s.channels != self.in_ch {
            return Err(Error::Shape(format!(
                "tconv: input channels {} != expected {}",
                s.channels, self.in_ch
            )));
        }
        let (fh, fw) = self.full_hw(s.height, s.width);
        let (oh, ow) = crop.unwrap_or((fh, fw));
        if oh > fh || ow > fw {
            return Err(Error::Shape(format!(
                "tconv: crop {}x{} exceeds full output {}x{}",
                oh, ow, fh, fw
            )));
        }
        let mut out = DenseTensor::zeros(Shape::new(s.batch, self.out_ch, oh, ow));
        let k = self.kernel;
        let st = self.stride;
        for b in 0..s.batch {
            for co in 0..self.out_ch {
                let oplane = out.plane_mut(b, co);
                for ci in 0..self.in_ch {
                    let xplane = x.plane(b, ci);
                    let wbase = self.w_index(ci, co, 0, 0);
                    for ky in 0..k {
                        for kx in 0..k {
                            let w = self.weight[wbase + ky * k + kx];
                            for iy in 0..s.height {
                                let oy = iy * st + ky;
                                if oy >= oh {
                                    continue;
                                }
                                let xrow = &xplane[iy * s.width..][..s.width];
                                let orow = &mut oplane[oy * ow..][..ow];
                                for (ix, &v) in xrow.iter().enumerate() {
                                    let ox = ix * st + kx;
                                    if ox < ow {
                                        orow[ox] += w * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(
        &self,
        x: &DenseTensor,
        grad_out: &DenseTensor,
    ) -> Result<(DenseTensor, Vec<f32>)> {
        let s = x.shape();
        let so = grad_out.shape();
        if so.channels != self.out_ch || so.batch != s.batch {
            return Err(Error::Shape(format!(
                "tconv backward: grad {} incompatible with input {}",
                so, s
            )));
        }
        let (oh, ow) = (so.height, so.width);
        let mut gx = DenseTensor::zeros(s);
        let mut gw = vec![0.0f32; self.weight.len()];
        let k = self.kernel;
        let st = self.stride;
        for b in 0..s.batch {
            for ci in 0..self.in_ch {
                let xplane = x.plane(b, ci);
                let gxplane = gx.plane_mut(b, ci);
                for co in 0..self.out_ch {
                    let gplane = grad_out.plane(b, co);
                    let wbase = self.w_index(ci, co, 0, 0);
                    for ky in 0..k {
                        for kx in 0..k {
                            let w = self.weight[wbase + ky * k + kx];
                            let mut wg = 0.0f32;
                            for iy in 0..s.height {
                                let oy = iy * st + ky;
                                if oy >= oh {
                                    continue;
                                }
                                let grow = &gplane[oy * ow..][..ow];
                                let xrow = &xplane[iy * s.width..][..s.width];
                                let gxrow = &mut gxplane[iy * s.width..][..s.width];
                                for ix in 0..s.width {
                                    let ox = ix * st + kx;
                                    if ox >= ow {
                                        continue;
                                    }
                                    let g = grow[ox];
                                    wg += xrow[ix] * g;
                                    gxrow[ix] += w * g;
                                }
                            }
                            gw[wbase + ky * k + kx] += wg;
                        }
                    }
                }
            }
        }
        Ok((gx, gw))
    }
}

/// Group normalization with affine parameters, normalizing each
/// `(sample, group)` slice to zero mean and unit variance before scaling.
/// Statistics are computed per timestep, independent of batch size.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub eps: f32,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

/// Per-(batch, group) statistics retained for the backward pass.
#[derive(Debug, Clone)]
pub struct GnStats {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: groups {groups} must divide channels {channels}"
            )));
        }
        Ok(GroupNorm {
            channels,
            groups,
            eps: 1e-5,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        })
    }

    pub fn forward(&self, x: &DenseTensor) -> Result<(DenseTensor, GnStats)> {
        let s = x.shape();
        if s.channels != self.channels {
            return Err(Error::Shape(format!(
                "group_norm: channels {} != expected {}",
                s.channels, self.channels
            )));
        }
        let cg = self.channels / self.groups;
        let hw = s.height * s.width;
        let n = (cg * hw) as f64;
        let mut out = DenseTensor::zeros(s);
        let mut stats = GnStats {
            mean: vec![0.0; s.batch * self.groups],
            inv_std: vec![0.0; s.batch * self.groups],
        };
        for b in 0..s.batch {
            for g in 0..self.groups {
                let mut sum = 0.0f64;
                let mut sumsq = 0.0f64;
                for c in g * cg..(g + 1) * cg {
                    for &v in x.plane(b, c) {
                        sum += v as f64;
                        sumsq += (v as f64) * (v as f64);
                    }
                }
                let mean = sum / n;
                let var = (sumsq / n - mean * mean).max(0.0);
                let inv_std = 1.0 / (var + self.eps as f64).sqrt();
                stats.mean[b * self.groups + g] = mean;
                stats.inv_std[b * self.groups + g] = inv_std;
                for c in g * cg..(g + 1) * cg {
                    let gamma = self.gamma[c];
                    let beta = self.beta[c];
                    let xp = x.plane(b, c);
                    let op = out.plane_mut(b, c);
                    for i in 0..hw {
                        let xhat = ((xp[i] as f64 - mean) * inv_std) as f32;
                        op[i] = gamma * xhat + beta;
                    }
                }
            }
        }
        Ok((out, stats))
    }

    /// Returns (grad wrt input, grad wrt gamma, grad wrt beta).
    pub fn backward(
        &self,
        x: &DenseTensor,
        stats: &GnStats,
        grad_out: &DenseTensor,
    ) -> Result<(DenseTensor, Vec<f32>, Vec<f32>)> {
        let s = x.shape();
        if grad_out.shape() != s {
            return Err(Error::Shape(format!(
                "group_norm backward: grad {} vs input {}",
                grad_out.shape(),
                s
            )));
        }
        let cg = self.channels / self.groups;
        let hw = s.height * s.width;
        let n = (cg * hw) as f64;
        let mut gx = DenseTensor::zeros(s);
        let mut ggamma = vec![0.0f32; self.channels];
        let mut gbeta = vec![0.0f32; self.channels];
        for b in 0..s.batch {
            for g in 0..self.groups {
                let mean = stats.mean[b * self.groups + g];
                let inv_std = stats.inv_std[b * self.groups + g];
                // d = gout * gamma; accumulate sums for the projection terms.
                let mut sum_d = 0.0f64;
                let mut sum_dx = 0.0f64;
                for c in g * cg..(g + 1) * cg {
                    let xp = x.plane(b, c);
                    let gp = grad_out.plane(b, c);
                    let gamma = self.gamma[c] as f64;
                    let mut gg = 0.0f64;
                    let mut gb = 0.0f64;
                    for i in 0..hw {
                        let xhat = (xp[i] as f64 - mean) * inv_std;
                        let go = gp[i] as f64;
                        gg += go * xhat;
                        gb += go;
                        let d = go * gamma;
                        sum_d += d;
                        sum_dx += d * xhat;
                    }
                    ggamma[c] += gg as f32;
                    gbeta[c] += gb as f32;
                }
                for c in g * cg..(g + 1) * cg {
                    let xp = x.plane(b, c);
                    let gp = grad_out.plane(b, c);
                    let gamma = self.gamma[c] as f64;
                    let gxp = gx.plane_mut(b, c);
                    for i in 0..hw {
                        let xhat = (xp[i] as f64 - mean) * inv_std;
                        let d = gp[i] as f64 * gamma;
                        gxp[i] = (inv_std * (d - (sum_d + xhat * sum_dx) / n)) as f32;
                    }
                }
            }
        }
        Ok((gx, ggamma, gbeta))
    }
}
