use rand::Rng;

use crate::autograd::PROB_EPS;
use crate::error::{Error, Result};
use crate::network::SwapMask;
use crate::tensor::Tensor;

/// Mean over the batch of the per-sample entropy `−Σ p ln p`.
pub fn entropy(probs: &Tensor) -> Result<f64> {
    if probs.rank() != 2 || probs.shape()[0] == 0 {
        return Err(Error::Dimension(format!(
            "entropy expects a non-empty [N, m] batch, got {:?}",
            probs.shape()
        )));
    }
    let m = probs.shape()[1];
    let mut total = 0.0;
    for row in probs.data().chunks(m) {
        let mut h = 0.0;
        for &p in row {
            if p > 0.0 {
                h -= p * p.max(PROB_EPS).ln();
            }
        }
        total += h;
    }
    Ok(total / probs.shape()[0] as f64)
}

/// A higher bit-width considered as teacher, with its two score terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub bits: u8,
    pub entropy: f64,
    pub distance: f64,
}

/// The teacher picked for one student bit-width on one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherChoice {
    pub student_b: u8,
    pub teacher_b: u8,
    pub entropy_term: f64,
    pub distance_term: f64,
    pub lambda: f64,
    pub score: f64,
}

/// Picks the candidate minimizing `entropy + λ·distance`; exact ties go to
/// the higher bit-width.
pub fn select_teacher(
    student_b: u8,
    candidates: &[Candidate],
    lambda: f64,
) -> Result<TeacherChoice> {
    if candidates.is_empty() {
        return Err(Error::Contract(format!(
            "{student_b}-bit has no higher precision to learn from"
        )));
    }
    let mut best: Option<TeacherChoice> = None;
    for c in candidates {
        if c.bits <= student_b {
            return Err(Error::Contract(format!(
                "teacher candidate {} is not above student {student_b}",
                c.bits
            )));
        }
        let score = c.entropy + lambda * c.distance;
        let better = match best {
            None => true,
            Some(b) => score < b.score || (score == b.score && c.bits > b.teacher_b),
        };
        if better {
            best = Some(TeacherChoice {
                student_b,
                teacher_b: c.bits,
                entropy_term: c.entropy,
                distance_term: c.distance,
                lambda,
                score,
            });
        }
    }
    Ok(best.expect("non-empty"))
}

/// Linear curriculum on the first block's execution probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwapSchedule {
    pub p1_initial: f64,
    pub epochs_total: usize,
}

impl SwapSchedule {
    /// `p1` rises linearly from `p1_initial` at epoch 0 to 1 at the final epoch.
    pub fn p1(&self, epoch: usize) -> f64 {
        if self.epochs_total <= 1 || epoch + 1 >= self.epochs_total {
            return 1.0;
        }
        self.p1_initial + (1.0 - self.p1_initial) * epoch as f64 / (self.epochs_total - 1) as f64
    }
}

/// Probability that block `l` (1-based) of `blocks` runs as student.
pub fn block_probability(l: usize, blocks: usize, p1: f64) -> f64 {
    ((1.0 + l as f64 / blocks as f64) * p1).min(1.0)
}

/// Draws `β_l ~ Bernoulli(p_l)` independently for every block.
pub fn sample_swap_mask<R: Rng>(blocks: usize, p1: f64, rng: &mut R) -> Result<SwapMask> {
    if !(p1 > 0.0 && p1 <= 1.0) {
        return Err(Error::Contract(format!("p1 must be in (0, 1], got {p1}")));
    }
    let beta = (1..=blocks)
        .map(|l| rng.random::<f64>() < block_probability(l, blocks, p1))
        .collect();
    Ok(SwapMask { beta })
}
