//! Learnable uniform quantizer with step size and continuous bitwidth.
//!
//! Forward rule for a value `x` with step `s` and rounded bitwidth `[b]`:
//!
//! ```text
//! code = sign(x) * floor(|x| / s + 0.5)   if |x| <  s * q
//! code = sign(x) * q                      if |x| >= s * q
//! ```
//!
//! where `q = 2^([b]-1) - 1` for signed data and `q = 2^[b] - 1` for
//! non-negative (post-ReLU) data, which gains the sign bit as an extra
//! magnitude bit. `[b]` rounds half away from zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STEP_MIN: f64 = 1e-8;
pub const BITS_MAX: f64 = 8.0;
/// Weights are quantized at a fixed width and never learn their bitwidth.
pub const WEIGHT_BITS: f64 = 4.0;
/// Converts bit counts to kilobytes in the memory penalty.
pub const MEMORY_ETA: f64 = 8.0 * 1024.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Signedness {
    Signed,
    Unsigned,
}

impl Signedness {
    /// Lowest bitwidth with a non-zero representable magnitude.
    pub fn min_bits(self) -> f64 {
        match self {
            Signedness::Signed => 2.0,
            Signedness::Unsigned => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParam {
    pub step: f64,
    pub bits: f64,
    pub signedness: Signedness,
}

impl QuantParam {
    /// Builds a parameter with step and bits clamped into range.
    pub fn new(step: f64, bits: f64, signedness: Signedness) -> Self {
        let mut p = QuantParam {
            step,
            bits,
            signedness,
        };
        p.clamp();
        p
    }

    pub fn signed(step: f64, bits: f64) -> Self {
        Self::new(step, bits, Signedness::Signed)
    }

    pub fn unsigned(step: f64, bits: f64) -> Self {
        Self::new(step, bits, Signedness::Unsigned)
    }

    pub fn clamp(&mut self) {
        if !(self.step >= STEP_MIN) {
            self.step = STEP_MIN;
        }
        let lo = self.signedness.min_bits();
        self.bits = if self.bits.is_nan() {
            lo
        } else {
            self.bits.clamp(lo, BITS_MAX)
        };
    }

    /// `[b]`, round half away from zero.
    pub fn rounded_bits(&self) -> u32 {
        self.bits.round() as u32
    }

    pub fn max_code(&self) -> i64 {
        let rb = self.rounded_bits();
        match self.signedness {
            Signedness::Signed => (1i64 << (rb - 1)) - 1,
            Signedness::Unsigned => (1i64 << rb) - 1,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.step * self.max_code() as f64
    }

    /// Largest representable magnitude using the signed level count,
    /// regardless of signedness. This is the nearest-neighbour matching key.
    pub fn q_max(&self) -> f64 {
        let rb = self.rounded_bits();
        self.step * ((1i64 << (rb - 1)) - 1) as f64
    }

    /// `2^([b]-1)` signed or `2^[b]` unsigned: the derivative factor of the
    /// level count with respect to the bitwidth, divided by ln 2.
    fn level_slope(&self) -> f64 {
        let rb = self.rounded_bits() as i32;
        match self.signedness {
            Signedness::Signed => 2f64.powi(rb - 1),
            Signedness::Unsigned => 2f64.powi(rb),
        }
    }

    /// Level count as a smooth function of `bits` that agrees with
    /// `max_code` at `self.bits` and has the straight-through slope there.
    /// Gradient checks evaluate the saturated branch through this.
    pub fn smooth_max_code(&self, bits: f64) -> f64 {
        let rb = self.rounded_bits() as f64;
        let shift = match self.signedness {
            Signedness::Signed => -1.0,
            Signedness::Unsigned => 0.0,
        };
        2f64.powf(rb + shift + (bits - self.bits)) - 1.0
    }
}

/// `(max_code, threshold)` for the active signedness.
pub fn effective_levels(p: &QuantParam) -> (i64, f64) {
    (p.max_code(), p.threshold())
}

/// Quantizes one value; returns the code and whether it saturated.
/// Unsigned parameters expect `x >= 0`.
#[inline]
pub fn quantize_scalar(x: f64, p: &QuantParam) -> (i64, bool) {
    debug_assert!(p.signedness == Signedness::Signed || x >= 0.0);
    let max_code = p.max_code();
    let mag = x.abs();
    if mag >= p.step * max_code as f64 {
        (max_code * sign_i(x), true)
    } else {
        ((mag / p.step + 0.5).floor() as i64 * sign_i(x), false)
    }
}

#[inline]
fn sign_i(x: f64) -> i64 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

#[inline]
pub(crate) fn sign_f(x: f64) -> f64 {
    sign_i(x) as f64
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuantResult {
    pub codes: Vec<i64>,
    pub values: Vec<f64>,
    pub sat_mask: Vec<bool>,
}

pub fn quantize(x: &[f64], p: &QuantParam) -> Result<QuantResult> {
    if let Some(&bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidParam(format!("non-finite input {bad}")));
    }
    if p.signedness == Signedness::Unsigned {
        if let Some(&neg) = x.iter().find(|&&v| v < 0.0) {
            return Err(Error::NegativeUnsigned(neg));
        }
    }
    let mut out = QuantResult {
        codes: Vec::with_capacity(x.len()),
        values: Vec::with_capacity(x.len()),
        sat_mask: Vec::with_capacity(x.len()),
    };
    for &v in x {
        let (c, sat) = quantize_scalar(v, p);
        out.codes.push(c);
        out.values.push(p.step * c as f64);
        out.sat_mask.push(sat);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QuantGrad {
    pub d_step: f64,
    pub d_bits: f64,
}

impl QuantGrad {
    pub fn scaled(self, k: f64) -> Self {
        QuantGrad {
            d_step: self.d_step * k,
            d_bits: self.d_bits * k,
        }
    }
}

impl std::ops::AddAssign for QuantGrad {
    fn add_assign(&mut self, o: Self) {
        self.d_step += o.d_step;
        self.d_bits += o.d_bits;
    }
}

/// Partial derivatives of the dequantized value `x_q` with respect to the
/// step and the bitwidth, floor and round passed straight through.
#[inline]
pub fn quant_grad(x: f64, p: &QuantParam, code: i64, saturated: bool) -> QuantGrad {
    if saturated {
        let sx = sign_f(x);
        QuantGrad {
            d_step: sx * p.max_code() as f64,
            d_bits: sx * p.level_slope() * std::f64::consts::LN_2 * p.step,
        }
    } else {
        let xq = p.step * code as f64;
        QuantGrad {
            d_step: (xq - x) / p.step,
            d_bits: 0.0,
        }
    }
}

/// Straight-through gradient for the input: passes where `|x| <= threshold`.
pub fn ste_input_grad(upstream: &[f64], x: &[f64], p: &QuantParam) -> Result<Vec<f64>> {
    if upstream.len() != x.len() {
        return Err(Error::Shape(format!("{} upstream vs {} inputs", upstream.len(), x.len())));
    }
    let thr = p.threshold();
    Ok(upstream
        .iter()
        .zip(x)
        .map(|(&g, &v)| if v.abs() <= thr { g } else { 0.0 })
        .collect())
}

/// Mean absolute quantization error `(1/d) |x_q - x|_1`.
pub fn quant_error(x: &[f64], qr: &QuantResult) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Empty("quantization error over zero elements"));
    }
    if qr.values.len() != x.len() {
        return Err(Error::Shape("quantized length differs from input".into()));
    }
    let sum: f64 = x.iter().zip(&qr.values).map(|(a, b)| (b - a).abs()).sum();
    Ok(sum / x.len() as f64)
}

/// Gradient of the quantization error with respect to `(s, b)`:
/// `(1/d) Σ sign(x_q - x) ∂x_q/∂(s, b)`, with `sign(0) = 0`.
pub fn local_grad(x: &[f64], p: &QuantParam) -> Result<QuantGrad> {
    if x.is_empty() {
        return Err(Error::Empty("local gradient over zero elements"));
    }
    let mut acc = QuantGrad::default();
    for &v in x {
        acc += local_grad_term(v, p);
    }
    Ok(acc.scaled(1.0 / x.len() as f64))
}

/// One summand of [`local_grad`] before the `1/d` factor.
#[inline]
pub fn local_grad_term(x: f64, p: &QuantParam) -> QuantGrad {
    let (code, sat) = quantize_scalar(x, p);
    let xq = p.step * code as f64;
    let sg = sign_f(xq - x);
    if sg == 0.0 {
        return QuantGrad::default();
    }
    quant_grad(x, p, code, sat).scaled(sg)
}

/// Memory penalty `((1/η) Σ_l Σ_i dim_l b_il - m_target)^2` and its gradient
/// with respect to every bitwidth.
pub fn memory_loss(bits: &[Vec<f64>], dims: &[usize], m_target: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if !(m_target > 0.0) {
        return Err(Error::InvalidParam(format!("memory target must be positive, got {m_target}")));
    }
    if bits.len() != dims.len() {
        return Err(Error::Shape(format!("{} bit rows vs {} dims", bits.len(), dims.len())));
    }
    let current = memory_kb(bits, dims);
    let diff = current - m_target;
    let grads = bits
        .iter()
        .zip(dims)
        .map(|(row, &d)| vec![2.0 * diff * d as f64 / MEMORY_ETA; row.len()])
        .collect();
    Ok((diff * diff, grads))
}

/// Feature memory in KB for continuous bitwidths.
pub fn memory_kb(bits: &[Vec<f64>], dims: &[usize]) -> f64 {
    bits.iter()
        .zip(dims)
        .map(|(row, &d)| d as f64 * row.iter().sum::<f64>())
        .sum::<f64>()
        / MEMORY_ETA
}
