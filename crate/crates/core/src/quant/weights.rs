use crate::autograd::{CustomGrad, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{mean_of, Tensor};

use super::{check_bits, level_count};

/// Integer codes of a weight tensor at the highest precision `b1`, plus the
/// mean of their dequantized values. Every lower precision derives from this.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeightView {
    pub shape: Vec<usize>,
    pub codes: Vec<u16>,
    pub b1: u8,
    pub mean_b1: f64,
}

impl QuantizedWeightView {
    /// Aligned real-valued weights at bit-width `b ≤ b1`.
    pub fn dequantize_at(&self, b: u8) -> Result<Vec<f64>> {
        let codes = truncate_codes(self, b)?;
        let w = dequantize_codes(&codes, b);
        Ok(mean_align(&w, self.mean_b1))
    }
}

/// Maps codes `k ∈ [0, 2^b − 1]` to `2k/(2^b − 1) − 1 ∈ [−1, 1]`.
pub fn dequantize_codes(codes: &[u16], b: u8) -> Vec<f64> {
    let n = level_count(b);
    codes
        .iter()
        .map(|&k| 2.0 * f64::from(k) / n - 1.0)
        .collect()
}

/// DoReFa weight quantization to `b1`-bit codes.
///
/// `u = tanh(W) / (2·max|tanh(W)|) + 1/2`, `code = round((2^b1 − 1)·u)`. An
/// all-zero tensor has no scale; every code is then set to the middle level.
pub fn quantize_weights_dorefa(w: &Tensor, b1: u8) -> Result<QuantizedWeightView> {
    check_bits(b1, 2)?;
    if !w.is_finite() {
        return Err(Error::NonFinite {
            op: "quantize_weights_dorefa input".into(),
        });
    }
    let n = level_count(b1);
    let t: Vec<f64> = w.data().iter().map(|v| v.tanh()).collect();
    let scale = t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let codes: Vec<u16> = if scale == 0.0 {
        log::warn!(
            "all-zero weight tensor {:?}; emitting mid-level codes",
            w.shape()
        );
        vec![(n / 2.0).round() as u16; t.len()]
    } else {
        t.iter()
            .map(|v| {
                let u = (v / (2.0 * scale) + 0.5).clamp(0.0, 1.0);
                (n * u).round() as u16
            })
            .collect()
    };
    let mean_b1 = mean_of(&dequantize_codes(&codes, b1));
    Ok(QuantizedWeightView {
        shape: w.shape().to_vec(),
        codes,
        b1,
        mean_b1,
    })
}

/// Keeps the `b` most-significant bits of each `b1`-bit code.
pub fn truncate_codes(view: &QuantizedWeightView, b: u8) -> Result<Vec<u16>> {
    check_bits(b, 2)?;
    if b > view.b1 {
        return Err(Error::Config(format!(
            "cannot derive {b}-bit codes from {}-bit codes",
            view.b1
        )));
    }
    let shift = view.b1 - b;
    Ok(view.codes.iter().map(|c| c >> shift).collect())
}

/// Shifts `w` additively so that its mean equals `mean_ref`.
pub fn mean_align(w: &[f64], mean_ref: f64) -> Vec<f64> {
    let delta = mean_ref - mean_of(w);
    w.iter().map(|v| v + delta).collect()
}

/// Quantizes `w` at `b1`, truncates to `b` and re-aligns the mean.
pub fn quantize_weights_at(w: &Tensor, b: u8, b1: u8) -> Result<Tensor> {
    let view = quantize_weights_dorefa(w, b1)?;
    Tensor::new(w.shape().to_vec(), view.dequantize_at(b)?)
}

/// Identity backward rule: the upstream gradient passes to the input unchanged.
pub struct StraightThrough;

impl CustomGrad for StraightThrough {
    fn name(&self) -> &'static str {
        "weight_quant_ste"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad_out.to_vec())]
    }
}

/// Records `quantized` as a function of `w` whose backward is the identity.
pub fn weights_ste(tape: &mut Tape, w: Var, quantized: Tensor) -> Result<Var> {
    if quantized.shape() != tape.value(w).shape() {
        return Err(Error::Dimension(format!(
            "quantized weights {:?} for latent {:?}",
            quantized.shape(),
            tape.value(w).shape()
        )));
    }
    tape.custom(&[w], quantized, Box::new(StraightThrough))
}

/// [`quantize_weights_at`] on the tape, with a straight-through backward.
pub fn quantize_weights_ste(tape: &mut Tape, w: Var, b: u8, b1: u8) -> Result<Var> {
    let q = quantize_weights_at(tape.value(w), b, b1)?;
    weights_ste(tape, w, q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view_of(codes: Vec<u16>, b1: u8) -> QuantizedWeightView {
        let mean_b1 = mean_of(&dequantize_codes(&codes, b1));
        QuantizedWeightView {
            shape: vec![codes.len()],
            codes,
            b1,
            mean_b1,
        }
    }

    #[test]
    fn symmetric_extremes_map_to_unit() {
        for b1 in [2, 4, 8, 16] {
            let w = Tensor::new(vec![2], vec![-0.7, 0.7]).unwrap();
            let v = quantize_weights_dorefa(&w, b1).unwrap();
            assert_eq!(dequantize_codes(&v.codes, b1), vec![-1.0, 1.0]);
        }
    }

    #[test]
    fn constant_positive_maps_to_one() {
        let w = Tensor::full(&[3], 0.3);
        let v = quantize_weights_dorefa(&w, 8).unwrap();
        assert_eq!(dequantize_codes(&v.codes, 8), vec![1.0; 3]);
        assert_eq!(v.mean_b1, 1.0);
    }

    #[test]
    fn all_zero_uses_mid_level() {
        let v = quantize_weights_dorefa(&Tensor::zeros(&[4]), 8).unwrap();
        assert_eq!(v.codes, vec![128; 4]);
    }

    #[test]
    fn truncation_examples() {
        let v = view_of(vec![255, 200, 0], 8);
        assert_eq!(truncate_codes(&v, 4).unwrap(), vec![15, 12, 0]);
        assert!((dequantize_codes(&[12], 4)[0] - 0.6).abs() < 1e-15);
        assert_eq!(truncate_codes(&v, 8).unwrap(), v.codes);
        for b in 2..=8 {
            assert_eq!(truncate_codes(&view_of(vec![0], 8), b).unwrap(), vec![0]);
        }
        assert!(matches!(truncate_codes(&v, 9), Err(Error::Config(_))));
    }

    #[test]
    fn alignment_shift() {
        assert_eq!(mean_align(&[0.0, 0.0], 0.25), vec![0.25, 0.25]);
        let w = [0.1, -0.3, 0.5];
        let m = mean_of(&w);
        assert_eq!(mean_align(&w, m), w.to_vec());
        let once = mean_align(&w, 0.7);
        let twice = mean_align(&once, 0.7);
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn full_precision_path_is_plain_dorefa() {
        let w = Tensor::new(vec![5], vec![0.3, -1.2, 0.05, 0.9, -0.4]).unwrap();
        let v = quantize_weights_dorefa(&w, 8).unwrap();
        let plain = dequantize_codes(&v.codes, 8);
        let q = quantize_weights_at(&w, 8, 8).unwrap();
        for (a, b) in q.data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ste_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape
            .leaf(
                Tensor::new(vec![2, 2], vec![0.3, -0.2, 0.9, 0.0])
                    .unwrap()
                    .with_grad(),
            )
            .unwrap();
        let q = quantize_weights_ste(&mut tape, w, 2, 8).unwrap();
        let s = tape.sum(q).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0; 4]);
    }
}
