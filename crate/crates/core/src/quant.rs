//! Symmetric scale-only quantization of weights and the straight-through
//! gradients with respect to values, step size and bit width.
//!
//! Rounding is half-away-from-zero (`f64::round`), and the one-bit signed
//! quantizer maps zero to `+1`.

use std::f64::consts::LN_2;

use crate::error::{Error, Result};

/// Integer clip range of a quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantRange {
    pub q_min: i32,
    pub q_max: i32,
}

impl QuantRange {
    /// Range for `bits` in the signed (bidirectional) or unsigned domain.
    ///
    /// A one-bit signed quantizer is the sign function, so its range is `[-1, 1]`.
    pub fn new(bits: u32, signed: bool) -> Result<Self> {
        if bits == 0 || bits > 30 {
            return Err(Error::invalid(format!("bit width must be in [1, 30], got {bits}")));
        }
        let r = match (signed, bits) {
            (true, 1) => QuantRange { q_min: -1, q_max: 1 },
            (true, b) => {
                let m = (1i32 << (b - 1)) - 1;
                QuantRange { q_min: -m, q_max: m }
            }
            (false, b) => QuantRange {
                q_min: 0,
                q_max: (1i32 << b) - 1,
            },
        };
        Ok(r)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.q_min as f64 && x <= self.q_max as f64
    }

    pub fn clip(&self, x: f64) -> f64 {
        x.clamp(self.q_min as f64, self.q_max as f64)
    }

    /// Number of quantization intervals, `q_max - q_min`.
    pub fn span(&self) -> f64 {
        (self.q_max - self.q_min) as f64
    }
}

/// `sign` with `sign(0) = +1`.
#[inline]
pub fn sign_pos(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Quantizer code for a value already divided by its step.
///
/// `sign_mode` selects the one-bit sign quantizer; otherwise the value is
/// rounded and clipped to `range`.
#[inline]
pub fn code_of(x: f64, range: QuantRange, sign_mode: bool) -> i32 {
    if sign_mode {
        sign_pos(x) as i32
    } else {
        range.clip(x.round()) as i32
    }
}

/// LSQ gradient scale `1 / sqrt(n * q_max)`.
pub fn grad_scale(n: usize, q_max: i32) -> f64 {
    1.0 / ((n as f64) * (q_max as f64)).sqrt()
}

/// Integer codes plus the step that maps them back to real values.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Vec<i32>,
    pub step: f64,
    pub bits: u32,
    pub signed: bool,
}

impl QuantizedTensor {
    pub fn range(&self) -> QuantRange {
        QuantRange::new(self.bits, self.signed).expect("bits validated at construction")
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| c as f64 * self.step).collect()
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

fn check_step(step: f64) -> Result<()> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("step size must be positive and finite, got {step}")));
    }
    Ok(())
}

fn check_finite(w: &[f64]) -> Result<()> {
    if let Some(i) = w.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite input at index {i}: {}", w[i])));
    }
    Ok(())
}

fn check_same_len(w: &[f64], upstream: &[f64]) -> Result<()> {
    if w.len() != upstream.len() {
        return Err(Error::invalid(format!(
            "shape mismatch: {} values vs {} upstream gradients",
            w.len(),
            upstream.len()
        )));
    }
    Ok(())
}

/// Quantize weights with a symmetric signed quantizer of `bits` bits.
pub fn quantize_weights(w: &[f64], step: f64, bits: u32) -> Result<QuantizedTensor> {
    check_step(step)?;
    check_finite(w)?;
    let range = QuantRange::new(bits, true)?;
    let sign_mode = bits == 1;
    let codes = w.iter().map(|&x| code_of(x / step, range, sign_mode)).collect();
    Ok(QuantizedTensor {
        codes,
        step,
        bits,
        signed: true,
    })
}

/// Straight-through gradient with respect to the full-precision weights.
pub fn weight_grad_values(w: &[f64], step: f64, bits: u32, upstream: &[f64]) -> Result<Vec<f64>> {
    check_step(step)?;
    check_same_len(w, upstream)?;
    let range = QuantRange::new(bits, true)?;
    Ok(w.iter()
        .zip(upstream)
        .map(|(&x, &g)| if range.contains(x / step) { g } else { 0.0 })
        .collect())
}

/// Per-element `g_q` of the step-size gradient (before the LSQ scale).
#[inline]
pub fn step_gq(x: f64, range: QuantRange, sign_mode: bool) -> f64 {
    if x < range.q_min as f64 {
        range.q_min as f64
    } else if x > range.q_max as f64 {
        range.q_max as f64
    } else if sign_mode {
        sign_pos(x) - x
    } else {
        x.round() - x
    }
}

/// Per-element `g_q` of the bit-width gradient (before the LSQ scale).
///
/// `amplitude` is the factor the saturated code is multiplied by on its way
/// downstream: the step for weights, `1` for integer spikes.
#[inline]
pub fn bits_gq(x: f64, range: QuantRange, amplitude: f64) -> f64 {
    if range.contains(x) {
        0.0
    } else {
        sign_pos(x) * amplitude * (range.q_max as f64 + 1.0) * LN_2
    }
}

/// Gradient of the loss with respect to the weight step size.
///
/// `upstream` is the gradient with respect to the dequantized weights.
pub fn weight_grad_step(w: &[f64], step: f64, bits: u32, upstream: &[f64]) -> Result<f64> {
    check_step(step)?;
    check_same_len(w, upstream)?;
    let range = QuantRange::new(bits, true)?;
    let scale = grad_scale(w.len(), range.q_max);
    let sum: f64 = w
        .iter()
        .zip(upstream)
        .map(|(&x, &g)| g * step_gq(x / step, range, bits == 1))
        .sum();
    Ok(sum * scale)
}

/// Gradient of the loss with respect to the (materialized) weight bit width.
pub fn weight_grad_bits(w: &[f64], step: f64, bits: u32, upstream: &[f64]) -> Result<f64> {
    check_step(step)?;
    check_same_len(w, upstream)?;
    let range = QuantRange::new(bits, true)?;
    let scale = grad_scale(w.len(), range.q_max);
    let sum: f64 = w
        .iter()
        .zip(upstream)
        .map(|(&x, &g)| g * bits_gq(x / step, range, step))
        .sum();
    Ok(sum * scale)
}
