use std::collections::BTreeMap;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

/// One bit-width's loss node and its parts as plain numbers.
#[derive(Debug, Clone, Copy)]
pub struct BitLoss {
    pub total: Var,
    pub ce: f64,
    pub kl: f64,
}

/// Cross-entropy against the labels plus, when a teacher is given,
/// `KL(teacher ‖ student)` with the teacher's probabilities detached.
pub fn loss_for_bit(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    teacher: Option<Var>,
) -> Result<BitLoss> {
    let ce = tape.cross_entropy(probs, labels)?;
    let ce_value = tape.value(ce).data()[0];
    let Some(t) = teacher else {
        return Ok(BitLoss {
            total: ce,
            ce: ce_value,
            kl: 0.0,
        });
    };
    let t = tape.detach(t)?;
    let kl = tape.kl_div(t, probs)?;
    let kl_value = tape.value(kl).data()[0];
    Ok(BitLoss {
        total: tape.add(ce, kl)?,
        ce: ce_value,
        kl: kl_value,
    })
}

/// `(1/|B|)·Σ_b M_b / M_ref,b · 100` over the bit-widths in `metrics`.
pub fn delta_b(metrics: &BTreeMap<u8, f64>, reference: &BTreeMap<u8, f64>) -> Result<f64> {
    if metrics.is_empty() {
        return Err(Error::Contract("no accuracies to compare".into()));
    }
    let mut sum = 0.0;
    for (b, m) in metrics {
        let r = reference
            .get(b)
            .ok_or_else(|| Error::Contract(format!("reference has no {b}-bit accuracy")))?;
        if !(*r > 0.0) {
            return Err(Error::Contract(format!(
                "reference {b}-bit accuracy is {r}"
            )));
        }
        sum += m / r;
    }
    Ok(sum / metrics.len() as f64 * 100.0)
}
