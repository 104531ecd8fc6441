use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::BnBatchStats;
use crate::error::{Error, Result};
use crate::quant::ClipParam;
use crate::tensor::Tensor;

use super::arch::BitWidthSet;

/// Weight of the newest batch in running-statistics updates.
pub const BN_MOMENTUM: f64 = 0.1;

/// Parameters and running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential moving average toward one batch's statistics.
    pub fn update_running(&mut self, stats: &BnBatchStats) {
        let var = stats.unbiased_var();
        for c in 0..self.channels() {
            self.running_mean[c] =
                (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * stats.mean[c];
            self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * var[c];
        }
    }
}

/// Which bank entries are shared across bit-widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankSharing {
    /// One batch-norm set and one clip set for every bit-width.
    Shared,
    /// Per-bit-width batch norm, one shared clip set.
    SharedClip,
    /// Per-bit-width batch norm and clip values.
    PerPrecision,
}

/// Batch-norm and clip banks keyed by bit-width.
///
/// Shared entries are stored once under `b1`; lookups for other bit-widths in
/// `B` resolve to it. An explicit entry (for instance one created by
/// calibration) always takes precedence over sharing.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionBank {
    pub sharing: BankSharing,
    bits: BitWidthSet,
    pub(crate) bn: BTreeMap<u8, Vec<BnState>>,
    pub(crate) alpha: BTreeMap<u8, Vec<ClipParam>>,
}

impl PrecisionBank {
    pub fn new(
        bits: BitWidthSet,
        sharing: BankSharing,
        bn_channels: &[usize],
        quantized: usize,
        alpha_init: f64,
    ) -> Self {
        let bn_entry = || {
            bn_channels
                .iter()
                .map(|&c| BnState::new(c))
                .collect::<Vec<_>>()
        };
        let alpha_entry = || vec![ClipParam::new(alpha_init); quantized];
        let b1 = bits.b1();
        let (bn_keys, alpha_keys): (Vec<u8>, Vec<u8>) = match sharing {
            BankSharing::Shared => (vec![b1], vec![b1]),
            BankSharing::SharedClip => (bits.as_slice().to_vec(), vec![b1]),
            BankSharing::PerPrecision => (bits.as_slice().to_vec(), bits.as_slice().to_vec()),
        };
        Self {
            sharing,
            bn: bn_keys.into_iter().map(|b| (b, bn_entry())).collect(),
            alpha: alpha_keys.into_iter().map(|b| (b, alpha_entry())).collect(),
            bits,
        }
    }

    pub(crate) fn from_parts(
        sharing: BankSharing,
        bits: BitWidthSet,
        bn: BTreeMap<u8, Vec<BnState>>,
        alpha: BTreeMap<u8, Vec<ClipParam>>,
    ) -> Self {
        Self {
            sharing,
            bits,
            bn,
            alpha,
        }
    }

    /// Key of the batch-norm entry used at bit-width `b`.
    pub fn bn_key(&self, b: u8) -> Result<u8> {
        if self.bn.contains_key(&b) {
            return Ok(b);
        }
        if self.bits.contains(b) && self.sharing == BankSharing::Shared {
            return Ok(self.bits.b1());
        }
        Err(Error::MissingBank(b))
    }

    /// Key of the clip entry used at bit-width `b`.
    pub fn alpha_key(&self, b: u8) -> Result<u8> {
        if self.alpha.contains_key(&b) {
            return Ok(b);
        }
        if self.bits.contains(b) && self.sharing != BankSharing::PerPrecision {
            return Ok(self.bits.b1());
        }
        Err(Error::MissingBank(b))
    }

    pub fn has(&self, b: u8) -> bool {
        self.bn_key(b).is_ok() && self.alpha_key(b).is_ok()
    }

    pub fn bn_entry(&self, key: u8) -> Option<&[BnState]> {
        self.bn.get(&key).map(Vec::as_slice)
    }

    pub fn bn_entry_mut(&mut self, key: u8) -> Option<&mut Vec<BnState>> {
        self.bn.get_mut(&key)
    }

    pub fn alpha_entry(&self, key: u8) -> Option<&[ClipParam]> {
        self.alpha.get(&key).map(Vec::as_slice)
    }

    pub fn alpha_entry_mut(&mut self, key: u8) -> Option<&mut Vec<ClipParam>> {
        self.alpha.get_mut(&key)
    }

    /// Bit-widths with an explicit batch-norm entry.
    pub fn bn_keys(&self) -> Vec<u8> {
        self.bn.keys().rev().copied().collect()
    }

    pub fn alpha_keys(&self) -> Vec<u8> {
        self.alpha.keys().rev().copied().collect()
    }

    pub fn insert_bn(&mut self, b: u8, entry: Vec<BnState>) {
        self.bn.insert(b, entry);
    }

    pub fn insert_alpha(&mut self, b: u8, entry: Vec<ClipParam>) {
        self.alpha.insert(b, entry);
    }

    pub fn bits(&self) -> &BitWidthSet {
        &self.bits
    }
}
