//! Asymmetric affine fake quantization with learnable per-channel scale and
//! zero-point.
//!
//! The forward pass is always the hard quantize/dequantize round trip
//!
//! ```text
//! x̃ = s · (round(clip(x/s + z, 0, 2^b − 1)) − z)
//! ```
//!
//! and the backward pass treats `round` either as the identity (STE) or as
//! the derivative of a tanh soft-round (distance-aware gradient modulation,
//! DGM), whose slope peaks at rounding boundaries and dips at integers.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{c, Real, Tensor};

/// Scales are floored here so calibration never produces a zero step.
pub const MIN_SCALE: f64 = 1e-8;

/// Widest supported bit-width; `2^16 − 1` levels are still exact in `f32`.
pub const MAX_BITS: u32 = 16;

/// Default DGM shape factor.
pub const DEFAULT_BETA: f64 = 5.0;

/// Backward rule for the rounding step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GradientMode {
    Ste,
    Dgm { beta: f64 },
}

impl GradientMode {
    pub fn dgm(beta: f64) -> Result<Self> {
        let mode = GradientMode::Dgm { beta };
        mode.validate()?;
        Ok(mode)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            GradientMode::Dgm { beta } if !(beta > 0.0 && beta.is_finite()) => Err(Error::Param(
                format!("DGM shape factor must be positive, got {beta}"),
            )),
            _ => Ok(()),
        }
    }

    /// Slope assigned to `round` at pre-rounding value `u`.
    #[inline]
    pub fn round_slope(&self, u: f64) -> f64 {
        match *self {
            GradientMode::Ste => 1.0,
            GradientMode::Dgm { beta } => dgm_grad(u - u.floor(), beta),
        }
    }
}

/// Soft-round profile on one unit cell:
/// `g(t) = ½·tanh(β(t − ½))/tanh(β/2) + ½`, with `g(0) = 0`, `g(½) = ½`,
/// `g(1) = 1`.
pub fn dgm_proxy(t: f64, beta: f64) -> f64 {
    0.5 * (beta * (t - 0.5)).tanh() / (beta / 2.0).tanh() + 0.5
}

/// `g'(t) = (β/2)·sech²(β(t − ½))/tanh(β/2)`; strictly positive, largest
/// at `t = ½`, smallest at the cell edges, equal at `t = 0` and `t = 1`.
pub fn dgm_grad(t: f64, beta: f64) -> f64 {
    let sech = 1.0 / (beta * (t - 0.5)).cosh();
    0.5 * beta * sech * sech / (beta / 2.0).tanh()
}

/// `⌊u⌋ + g(u − ⌊u⌋)`: continuous and continuously differentiable across
/// integers.
pub fn dgm_soft_round(u: f64, beta: f64) -> f64 {
    let f = u.floor();
    f + dgm_proxy(u - f, beta)
}

pub(crate) fn inverse_softplus(s: f64) -> f64 {
    if s > 20.0 {
        s
    } else {
        s.exp_m1().ln()
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Quantizer state for one tensor at one bit-width.
///
/// The scale is stored unconstrained and mapped through softplus, so every
/// effective scale is positive whatever the optimizer does to it.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineQuantParams<T> {
    pub scale_raw: Vec<T>,
    pub zero_point: Vec<T>,
    pub bits: u32,
    /// Channel axis of the quantized tensor.
    pub axis: usize,
}

pub fn check_bits(bits: u32) -> Result<()> {
    if !(2..=MAX_BITS).contains(&bits) {
        return Err(Error::Param(format!(
            "bit-width {bits} outside supported range [2, {MAX_BITS}]"
        )));
    }
    Ok(())
}

/// Largest code of an unsigned `bits`-bit quantizer.
pub fn n_max(bits: u32) -> f64 {
    ((1u64 << bits) - 1) as f64
}

impl<T: Real> AffineQuantParams<T> {
    /// Builds parameters from effective (positive) scales.
    pub fn from_scale(scale: &[f64], zero_point: &[f64], bits: u32, axis: usize) -> Result<Self> {
        check_bits(bits)?;
        if scale.len() != zero_point.len() || scale.is_empty() {
            return Err(Error::shape(
                "quant params",
                format!("{} scales vs {} zero-points", scale.len(), zero_point.len()),
            ));
        }
        if let Some(s) = scale.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Param(format!("scale must be positive, got {s}")));
        }
        Ok(Self {
            scale_raw: scale.iter().map(|&s| c(inverse_softplus(s))).collect(),
            zero_point: zero_point.iter().map(|&z| c(z)).collect(),
            bits,
            axis,
        })
    }

    pub fn channels(&self) -> usize {
        self.zero_point.len()
    }

    /// Effective per-channel scales.
    pub fn scale(&self) -> Vec<f64> {
        self.scale_raw.iter().map(|r| softplus(r.as_f64())).collect()
    }

    pub fn n_max(&self) -> f64 {
        n_max(self.bits)
    }

    fn check_input(&self, shape: &[usize]) -> Result<ChannelLayout> {
        ChannelLayout::new(shape, self.axis, self.channels())
    }
}

#[derive(Clone, Copy, Debug)]
struct ChannelLayout {
    extent: usize,
    inner: usize,
}

impl ChannelLayout {
    fn new(shape: &[usize], axis: usize, channels: usize) -> Result<Self> {
        // a single (s, z) pair is per-tensor and fits any shape
        if channels == 1 {
            return Ok(Self { extent: 1, inner: 1 });
        }
        if axis >= shape.len() || shape[axis] != channels {
            return Err(Error::shape(
                "quantize",
                format!("axis {axis} of {shape:?} does not have {channels} channels"),
            ));
        }
        Ok(Self {
            extent: channels,
            inner: shape[axis + 1..].iter().product(),
        })
    }

    #[inline]
    fn channel(&self, i: usize) -> usize {
        (i / self.inner) % self.extent
    }
}

/// Integer codes `round(clip(x/s + z, 0, 2^b − 1))`.
pub fn quantize<T: Real>(x: &Tensor<T>, p: &AffineQuantParams<T>) -> Result<Tensor<u32>> {
    let layout = p.check_input(x.shape())?;
    let scale = p.scale();
    let hi = p.n_max();
    let mut codes = Vec::with_capacity(x.len());
    for (i, &v) in x.data().iter().enumerate() {
        let v = v.as_f64();
        if v.is_nan() {
            return Err(Error::Numeric(format!("NaN at element {i} of quantizer input")));
        }
        let ch = layout.channel(i);
        let u = v / scale[ch] + p.zero_point[ch].as_f64();
        codes.push(u.clamp(0.0, hi).round() as u32);
    }
    Tensor::new(x.shape(), codes)
}

/// `s · (x_q − z)`.
pub fn dequantize<T: Real>(q: &Tensor<u32>, p: &AffineQuantParams<T>) -> Result<Tensor<T>> {
    let layout = p.check_input(q.shape())?;
    let scale = p.scale();
    let hi = p.n_max() as u32;
    let mut out = Vec::with_capacity(q.len());
    for (i, &code) in q.data().iter().enumerate() {
        if code > hi {
            return Err(Error::Contract(format!(
                "code {code} exceeds the {}-bit range",
                p.bits
            )));
        }
        let ch = layout.channel(i);
        out.push(c(scale[ch] * (code as f64 - p.zero_point[ch].as_f64())));
    }
    Tensor::new(q.shape(), out)
}

/// Per-channel min/max initialisation: `s = (max − min)/(2^b − 1)`,
/// `z = −min/s`. Constant channels get `s = 1e-8` and a warning.
pub fn calibrate_init<T: Real>(x: &Tensor<T>, bits: u32, axis: usize) -> Result<AffineQuantParams<T>> {
    check_bits(bits)?;
    if axis >= x.ndim() {
        return Err(Error::shape(
            "calibrate",
            format!("axis {axis} out of range for {:?}", x.shape()),
        ));
    }
    let channels = x.shape()[axis];
    let mut lo = vec![f64::INFINITY; channels];
    let mut hi = vec![f64::NEG_INFINITY; channels];
    let layout = ChannelLayout::new(x.shape(), axis, channels)?;
    for (i, &v) in x.data().iter().enumerate() {
        let ch = layout.channel(i);
        let v = v.as_f64();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite calibration value at {i}")));
        }
        lo[ch] = lo[ch].min(v);
        hi[ch] = hi[ch].max(v);
    }
    calibrate_from_range(&lo, &hi, bits, axis)
}

/// Same rule as [`calibrate_init`] from precomputed per-channel ranges.
pub fn calibrate_from_range<T: Real>(
    lo: &[f64],
    hi: &[f64],
    bits: u32,
    axis: usize,
) -> Result<AffineQuantParams<T>> {
    let levels = n_max(bits);
    let mut scale = Vec::with_capacity(lo.len());
    let mut zero = Vec::with_capacity(lo.len());
    for (ch, (&a, &b)) in lo.iter().zip(hi).enumerate() {
        let s = if b > a {
            ((b - a) / levels).max(MIN_SCALE)
        } else {
            log::warn!("calibration: channel {ch} is constant ({a}); using minimum scale");
            MIN_SCALE
        };
        scale.push(s);
        zero.push(-a / s);
    }
    AffineQuantParams::from_scale(&scale, &zero, bits, axis)
}

/// Tape-free fake quantization, `dequantize(quantize(x))`.
pub fn fake_quantize_tensor<T: Real>(x: &Tensor<T>, p: &AffineQuantParams<T>) -> Result<Tensor<T>> {
    dequantize(&quantize(x, p)?, p)
}

/// Quantizer inputs living on a tape: effective scale (already positive) and
/// zero-point, one entry per channel.
#[derive(Clone, Copy, Debug)]
pub struct QuantVars {
    pub scale: Var,
    pub zero_point: Var,
    pub bits: u32,
    pub axis: usize,
}

impl QuantVars {
    /// Places `p` on the tape. The raw scale goes through a softplus node.
    pub fn from_params<T: Real>(
        g: &mut Graph<T>,
        p: &AffineQuantParams<T>,
        learn_scale: bool,
        learn_zero_point: bool,
    ) -> Result<Self> {
        let n = p.channels();
        let raw = g.leaf(Tensor::new(&[n], p.scale_raw.clone())?, learn_scale);
        let scale = g.softplus(raw);
        let zero_point = g.leaf(Tensor::new(&[n], p.zero_point.clone())?, learn_zero_point);
        Ok(Self {
            scale,
            zero_point,
            bits: p.bits,
            axis: p.axis,
        })
    }
}

struct FakeQuant {
    bits: u32,
    axis: usize,
    mode: GradientMode,
}

impl<T: Real> Backward<T> for FakeQuant {
    fn name(&self) -> &'static str {
        "fake_quantize"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, s, z) = (inputs[0], inputs[1], inputs[2]);
        let layout = ChannelLayout::new(x.shape(), self.axis, s.len())?;
        let hi = n_max(self.bits);
        let mut gx = vec![T::zero(); x.len()];
        let mut gs = vec![0.0f64; s.len()];
        let mut gz = vec![0.0f64; z.len()];
        for (i, (&xv, &gv)) in x.data().iter().zip(grad.data()).enumerate() {
            let ch = layout.channel(i);
            let (xv, gv) = (xv.as_f64(), gv.as_f64());
            let (sv, zv) = (s.data()[ch].as_f64(), z.data()[ch].as_f64());
            let u = xv / sv + zv;
            let inside = (0.0..=hi).contains(&u);
            let q = u.clamp(0.0, hi).round();
            if inside {
                let slope = self.mode.round_slope(u);
                gx[i] = c(gv * slope);
                gs[ch] += gv * ((q - zv) - slope * xv / sv);
                gz[ch] += gv * sv * (slope - 1.0);
            } else {
                gs[ch] += gv * (q - zv);
                gz[ch] -= gv * sv;
            }
        }
        Ok(vec![
            Some(Tensor::new(x.shape(), gx)?),
            Some(Tensor::new(s.shape(), gs.into_iter().map(c).collect())?),
            Some(Tensor::new(z.shape(), gz.into_iter().map(c).collect())?),
        ])
    }
}

/// Fake quantization on the tape.
///
/// Forward: `s·(round(clip(x/s + z, 0, 2^b − 1)) − z)`. With `u = x/s + z`,
/// `r` the round slope of `mode` and `in` the indicator of `u ∈ [0, 2^b − 1]`:
///
/// * `∂x̃/∂x = r·in`
/// * `∂x̃/∂s = (q − z) − r·in·x/s`
/// * `∂x̃/∂z = s·(r·in − 1)`
pub fn fake_quantize<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    q: &QuantVars,
    mode: GradientMode,
) -> Result<Var> {
    mode.validate()?;
    check_bits(q.bits)?;
    let channels = g.shape(q.scale).iter().product::<usize>();
    if g.shape(q.zero_point).iter().product::<usize>() != channels {
        return Err(Error::shape(
            "fake_quantize",
            format!(
                "scale {:?} vs zero-point {:?}",
                g.shape(q.scale),
                g.shape(q.zero_point)
            ),
        ));
    }
    let layout = ChannelLayout::new(g.shape(x), q.axis, channels)?;
    let hi = n_max(q.bits);
    let (xs, s, z) = (g.value(x), g.value(q.scale), g.value(q.zero_point));
    let mut out = Vec::with_capacity(xs.len());
    for (i, &v) in xs.data().iter().enumerate() {
        let v = v.as_f64();
        if v.is_nan() {
            return Err(Error::Numeric(format!("NaN at element {i} of quantizer input")));
        }
        let ch = layout.channel(i);
        let (sv, zv) = (s.data()[ch].as_f64(), z.data()[ch].as_f64());
        let code = (v / sv + zv).clamp(0.0, hi).round();
        out.push(c(sv * (code - zv)));
    }
    let value = Tensor::new(xs.shape(), out)?;
    let op = FakeQuant {
        bits: q.bits,
        axis: q.axis,
        mode,
    };
    Ok(g.push(value, &[x, q.scale, q.zero_point], Box::new(op)))
}
