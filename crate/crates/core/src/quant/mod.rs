//! Quantizers and their straight-through backward rules.
//!
//! Weights follow a DoReFa-style mapping to `b1`-bit integer codes; every lower
//! precision is obtained by dropping the codes' least-significant bits and
//! shifting the result so its mean matches the `b1` tensor. Activations use a
//! PACT-style clip with a learnable upper bound `α`.

mod activation;
mod weights;

pub use activation::{
    quantize_activation, quantize_activation_ste, ClipParam, PactRule, ALPHA_FLOOR,
};
pub use weights::{
    dequantize_codes, mean_align, quantize_weights_at, quantize_weights_dorefa,
    quantize_weights_ste, truncate_codes, weights_ste, QuantizedWeightView, StraightThrough,
};

use crate::error::{Error, Result};

/// Largest supported bit-width.
pub const MAX_BITS: u8 = 16;

/// Tolerance below 0 / above 1 that [`quantize_levels`] silently clamps.
const UNIT_SLACK: f64 = 1e-9;

/// Number of non-zero levels, `2^b − 1`.
pub fn level_count(b: u8) -> f64 {
    ((1u32 << b) - 1) as f64
}

pub(crate) fn check_bits(b: u8, min: u8) -> Result<()> {
    if b < min || b > MAX_BITS {
        return Err(Error::Config(format!(
            "bit-width {b} outside supported range {min}..={MAX_BITS}"
        )));
    }
    Ok(())
}

/// Rounds `x ∈ [0,1]` to the nearest of the `2^b` levels `k/(2^b − 1)`.
///
/// Ties round half away from zero.
pub fn quantize_levels(x: f64, b: u8) -> Result<f64> {
    check_bits(b, 1)?;
    if !(-UNIT_SLACK..=1.0 + UNIT_SLACK).contains(&x) {
        return Err(Error::Contract(format!(
            "quantize_levels input {x} outside [0, 1]"
        )));
    }
    let n = level_count(b);
    Ok((n * x.clamp(0.0, 1.0)).round() / n)
}
