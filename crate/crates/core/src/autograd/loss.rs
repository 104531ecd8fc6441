//! Softmax and the probability-space losses used for supervision and distillation.

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to probabilities inside logarithms and denominators.
pub const PROB_EPS: f64 = 1e-12;

const ROW_SUM_TOL: f64 = 1e-6;

fn rows_cols(t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 || t.shape()[0] == 0 {
        return Err(Error::Dimension(format!(
            "expected a non-empty [batch × classes] tensor, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn check_probabilities(t: &Tensor, what: &str) -> Result<()> {
    let (n, _) = rows_cols(t)?;
    for i in 0..n {
        let row = t.row(i);
        let s: f64 = row.iter().sum();
        if row.iter().any(|p| *p < 0.0) || (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Contract(format!(
                "{what}: row {i} is not a probability vector (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Row-wise softmax of a `[batch × classes]` tensor, max-shifted for stability.
pub fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let (n, m) = rows_cols(t)?;
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let row = t.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z = exps.iter().fold(0.0, |a, b| a + b);
        out.extend(exps.iter().map(|e| e / z));
    }
    Tensor::new(vec![n, m], out)
}

impl Tape {
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let t = softmax_rows(self.value(logits))?;
        self.push(t, Op::Softmax(logits))
    }

    /// Mean over the batch of `-ln p[label]`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let p = self.value(probs);
        check_probabilities(p, "cross_entropy")?;
        let (n, m) = rows_cols(p)?;
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy: {n} rows, {} labels",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= m) {
            return Err(Error::Contract(format!(
                "cross_entropy: label {bad} outside {m} classes"
            )));
        }
        let mut clamps = 0;
        let mut acc = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let py = p.row(i)[y];
            if py < PROB_EPS {
                clamps += 1;
            }
            acc += -py.max(PROB_EPS).ln();
        }
        self.flag_eps(clamps);
        self.push(
            Tensor::scalar(acc / n as f64),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    /// Mean over the batch of `KL(p‖q) = Σ_i p_i ln(p_i / q_i)`, with `0·ln 0 = 0`.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pv, qv) = (self.value(p), self.value(q));
        check_probabilities(pv, "kl_div target")?;
        check_probabilities(qv, "kl_div input")?;
        if pv.shape() != qv.shape() {
            return Err(Error::Dimension(format!(
                "kl_div: {:?} vs {:?}",
                pv.shape(),
                qv.shape()
            )));
        }
        let (n, _) = rows_cols(pv)?;
        let mut clamps = 0;
        let mut acc = 0.0;
        for (pi, qi) in pv.data().iter().zip(qv.data()) {
            if *pi > 0.0 {
                if *qi < PROB_EPS {
                    clamps += 1;
                }
                acc += pi * (pi / qi.max(PROB_EPS)).ln();
            }
        }
        self.flag_eps(clamps);
        self.push(Tensor::scalar(acc / n as f64), Op::KlDiv { p, q })
    }
}

pub(super) fn softmax_backward(y: &Tensor, g: &[f64]) -> Vec<f64> {
    let (n, m) = (y.shape()[0], y.shape()[1]);
    let mut gx = vec![0.0; n * m];
    for i in 0..n {
        let yr = y.row(i);
        let gr = &g[i * m..(i + 1) * m];
        let dot = yr.iter().zip(gr).fold(0.0, |a, (y, g)| a + y * g);
        for j in 0..m {
            gx[i * m + j] = yr[j] * (gr[j] - dot);
        }
    }
    gx
}

pub(super) fn cross_entropy_backward(p: &Tensor, labels: &[usize], g: f64) -> Vec<f64> {
    let (n, m) = (p.shape()[0], p.shape()[1]);
    let mut gp = vec![0.0; n * m];
    for (i, &y) in labels.iter().enumerate() {
        let py = p.row(i)[y];
        if py >= PROB_EPS {
            gp[i * m + y] = -g / (n as f64 * py);
        }
    }
    gp
}

pub(super) fn kl_backward(p: &Tensor, q: &Tensor, g: f64) -> (Vec<f64>, Vec<f64>) {
    let n = p.shape()[0] as f64;
    let mut gp = vec![0.0; p.numel()];
    let mut gq = vec![0.0; q.numel()];
    for (i, (pi, qi)) in p.data().iter().zip(q.data()).enumerate() {
        let qc = qi.max(PROB_EPS);
        gp[i] = g * ((pi.max(PROB_EPS) / qc).ln() + 1.0) / n;
        if *pi > 0.0 && *qi >= PROB_EPS {
            gq[i] = -g * pi / (qc * n);
        }
    }
    (gp, gq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let mut tape = Tape::new();
        let p = tape
            .constant(probs(&[vec![0.2, 0.3, 0.5], vec![1.0, 0.0, 0.0]]))
            .unwrap();
        let k = tape.kl_div(p, p).unwrap();
        assert!(tape.value(k).data()[0].abs() < 1e-15);
    }

    #[test]
    fn kl_one_hot_vs_uniform() {
        let mut onehot = vec![0.0; 10];
        onehot[3] = 1.0;
        let mut tape = Tape::new();
        let p = tape.constant(probs(&[onehot])).unwrap();
        let q = tape.constant(probs(&[vec![0.1; 10]])).unwrap();
        let k = tape.kl_div(p, q).unwrap();
        assert!((tape.value(k).data()[0] - 10f64.ln()).abs() < 1e-12);
        assert!((10f64.ln() - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn ce_of_uniform_is_ln_m() {
        for m in [2usize, 3, 7, 10] {
            let mut tape = Tape::new();
            let p = tape
                .constant(probs(&vec![vec![1.0 / m as f64; m]; 3]))
                .unwrap();
            let ce = tape.cross_entropy(p, &[0, m - 1, 1]).unwrap();
            assert!((tape.value(ce).data()[0] - (m as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_clamps_and_flags_zero_q() {
        let mut tape = Tape::new();
        let p = tape.constant(probs(&[vec![0.5, 0.5]])).unwrap();
        let q = tape.constant(probs(&[vec![1.0, 0.0]])).unwrap();
        let k = tape.kl_div(p, q).unwrap();
        assert!(tape.value(k).data()[0].is_finite());
        assert_eq!(tape.eps_clamps(), 1);
    }

    #[test]
    fn rejects_non_probabilities() {
        let mut tape = Tape::new();
        let p = tape.constant(probs(&[vec![0.5, 0.7]])).unwrap();
        assert!(matches!(
            tape.cross_entropy(p, &[0]),
            Err(Error::Contract(_))
        ));
        let q = tape.constant(probs(&[vec![0.5, 0.5]])).unwrap();
        assert!(tape.kl_div(p, q).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = probs(&[vec![1000.0, 999.0, -5.0], vec![0.0, 0.0, 0.0]]);
        let s = softmax_rows(&t).unwrap();
        for i in 0..2 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
