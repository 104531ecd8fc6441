use crate::autograd::{CustomGrad, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{check_bits, level_count};

/// Smallest clip value ever used; α is re-projected onto `[ALPHA_FLOOR, ∞)`.
pub const ALPHA_FLOOR: f64 = 1e-3;

/// Learnable upper clip value of one quantized layer at one bit-width.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipParam {
    pub value: Tensor,
}

impl ClipParam {
    pub fn new(alpha: f64) -> Self {
        let mut p = Self {
            value: Tensor::scalar(alpha),
        };
        p.project();
        p
    }

    pub fn alpha(&self) -> f64 {
        self.value.data()[0]
    }

    /// Enforces `α ≥ ALPHA_FLOOR`.
    pub fn project(&mut self) {
        let a = self.value.data()[0];
        if !(a >= ALPHA_FLOOR) {
            self.value.data_mut()[0] = ALPHA_FLOOR;
        }
    }
}

fn effective_alpha(alpha: f64) -> f64 {
    if alpha >= ALPHA_FLOOR {
        alpha
    } else {
        log::warn!("clip value {alpha} below floor; using {ALPHA_FLOOR}");
        ALPHA_FLOOR
    }
}

/// `α · quantize_b(clip(A, 0, α) / α)`.
pub fn quantize_activation(a: &Tensor, alpha: f64, b: u8) -> Result<Tensor> {
    check_bits(b, 1)?;
    let alpha = effective_alpha(alpha);
    let n = level_count(b);
    let out = a
        .data()
        .iter()
        .map(|x| {
            let u = x.clamp(0.0, alpha) / alpha;
            alpha * ((n * u).round() / n)
        })
        .collect();
    Tensor::new(a.shape().to_vec(), out)
}

/// Backward of [`quantize_activation`]: identity to `A` inside `[0, α]`, zero
/// outside; `dL/dα` collects the upstream gradient of every entry above `α`.
pub struct PactRule {
    pub alpha: f64,
}

impl CustomGrad for PactRule {
    fn name(&self) -> &'static str {
        "pact_quant"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let a = inputs[0].data();
        let mut ga = vec![0.0; a.len()];
        let mut galpha = 0.0;
        for (i, (x, g)) in a.iter().zip(grad_out).enumerate() {
            if *x > self.alpha {
                galpha += g;
            } else if *x >= 0.0 {
                ga[i] = *g;
            }
        }
        vec![Some(ga), Some(vec![galpha])]
    }
}

/// [`quantize_activation`] on the tape; `alpha` is a one-element variable.
pub fn quantize_activation_ste(tape: &mut Tape, a: Var, alpha: Var, b: u8) -> Result<Var> {
    if tape.value(alpha).numel() != 1 {
        return Err(Error::Dimension(
            "clip value must be a single element".into(),
        ));
    }
    let alpha_v = effective_alpha(tape.value(alpha).data()[0]);
    let out = quantize_activation(tape.value(a), alpha_v, b)?;
    tape.custom(&[a, alpha], out, Box::new(PactRule { alpha: alpha_v }))
}
