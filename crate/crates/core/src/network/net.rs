use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{BnBatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::quant::{
    quantize_activation_ste, quantize_weights_dorefa, weights_ste, QuantizedWeightView,
};
use crate::tensor::Tensor;

use super::arch::{ArchSpec, BitWidthSet, LayerSpec, SwapMask};
use super::bank::{BankSharing, PrecisionBank};

/// Storage behind a learnable layer's weights.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightStore {
    /// Full-precision master weights, updated by training.
    Latent(Tensor),
    /// Frozen `b1` codes loaded from a deployment bundle.
    Codes(QuantizedWeightView),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: WeightStore,
    pub bias: Option<Tensor>,
}

/// Identifies one trainable tensor of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Weight(usize),
    Bias(usize),
    Gamma { bits: u8, bn: usize },
    Beta { bits: u8, bn: usize },
    Alpha { bits: u8, block: usize },
}

/// How batch-norm layers treat the current batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics; student blocks update running stats.
    Train,
    /// Normalize with running statistics.
    Eval,
    /// Normalize with batch statistics and only record them.
    Collect,
}

/// What to execute: the student bit-width, an optional swap mask with its
/// teacher, and an optional bank to borrow instead of the bit-width's own.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecPlan {
    pub bits: u8,
    pub mask: Option<SwapMask>,
    pub teacher: Option<u8>,
    pub bank_override: Option<u8>,
}

impl ExecPlan {
    pub fn student(bits: u8) -> Self {
        Self {
            bits,
            mask: None,
            teacher: None,
            bank_override: None,
        }
    }

    pub fn swapped(bits: u8, mask: SwapMask, teacher: u8) -> Self {
        Self {
            bits,
            mask: Some(mask),
            teacher: Some(teacher),
            bank_override: None,
        }
    }

    /// Executes at `bits` with every batch-norm and clip value taken from `bank`.
    pub fn borrowing(bits: u8, bank: u8) -> Self {
        Self {
            bits,
            mask: None,
            teacher: None,
            bank_override: Some(bank),
        }
    }
}

/// Batch statistics seen by one batch-norm layer during a forward pass.
#[derive(Debug, Clone)]
pub struct BnObservation {
    pub bn: usize,
    pub bank: u8,
    pub update_running: bool,
    pub stats: BnBatchStats,
}

/// A tape plus the parameter leaves already placed on it, so several forward
/// passes (one per bit-width) share leaves and accumulate into one backward.
pub struct ForwardCtx {
    pub tape: Tape,
    leaves: BTreeMap<ParamId, Var>,
    qweights: BTreeMap<(usize, u8), Var>,
    views: BTreeMap<usize, QuantizedWeightView>,
    dequant: BTreeMap<(usize, u8), Vec<f64>>,
    pub observations: Vec<BnObservation>,
    grad: bool,
}

impl ForwardCtx {
    /// `grad` controls whether parameter leaves request gradients.
    pub fn new(grad: bool) -> Self {
        Self {
            tape: Tape::new(),
            leaves: BTreeMap::new(),
            qweights: BTreeMap::new(),
            views: BTreeMap::new(),
            dequant: BTreeMap::new(),
            observations: Vec::new(),
            grad,
        }
    }

    pub fn leaf_var(&self, id: ParamId) -> Option<Var> {
        self.leaves.get(&id).copied()
    }
}

/// A single network executable at every bit-width in `B` from one shared
/// set of latent weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveNet {
    arch: ArchSpec,
    bits: BitWidthSet,
    layers: Vec<LayerParams>,
    banks: PrecisionBank,
}

impl AdaptiveNet {
    /// He-normal weights, zero biases, unit batch norms and `alpha_init` clips.
    pub fn new<R: Rng>(
        arch: ArchSpec,
        bits: BitWidthSet,
        sharing: BankSharing,
        alpha_init: f64,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        let mut layers = Vec::new();
        for spec in arch.layers.iter().filter(|l| l.is_learnable()) {
            let shape = spec.weight_shape().expect("learnable layer");
            let std = (2.0 / spec.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            let data = (0..shape.iter().product::<usize>())
                .map(|_| normal.sample(rng))
                .collect();
            let bias = match spec {
                LayerSpec::Dense { outputs, .. } => Some(Tensor::zeros(&[*outputs])),
                _ => None,
            };
            layers.push(LayerParams {
                weight: WeightStore::Latent(Tensor::new(shape, data)?),
                bias,
            });
        }
        let banks = PrecisionBank::new(
            bits.clone(),
            sharing,
            &arch.bn_channels(),
            arch.quantized_count(),
            alpha_init,
        );
        Ok(Self {
            arch,
            bits,
            layers,
            banks,
        })
    }

    pub(crate) fn from_parts(
        arch: ArchSpec,
        bits: BitWidthSet,
        layers: Vec<LayerParams>,
        banks: PrecisionBank,
    ) -> Result<Self> {
        arch.validate()?;
        if layers.len() != arch.learnable_count() {
            return Err(Error::Structural(format!(
                "{} layer records for {} learnable layers",
                layers.len(),
                arch.learnable_count()
            )));
        }
        Ok(Self {
            arch,
            bits,
            layers,
            banks,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn bits(&self) -> &BitWidthSet {
        &self.bits
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn banks(&self) -> &PrecisionBank {
        &self.banks
    }

    pub fn banks_mut(&mut self) -> &mut PrecisionBank {
        &mut self.banks
    }

    /// Number `L` of quantized blocks.
    pub fn blocks(&self) -> usize {
        self.arch.quantized_count()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        match id {
            ParamId::Weight(i) => match &self.layers.get(i)?.weight {
                WeightStore::Latent(t) => Some(t),
                WeightStore::Codes(_) => None,
            },
            ParamId::Bias(i) => self.layers.get(i)?.bias.as_ref(),
            ParamId::Gamma { bits, bn } => Some(&self.banks.bn.get(&bits)?.get(bn)?.gamma),
            ParamId::Beta { bits, bn } => Some(&self.banks.bn.get(&bits)?.get(bn)?.beta),
            ParamId::Alpha { bits, block } => Some(&self.banks.alpha.get(&bits)?.get(block)?.value),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        match id {
            ParamId::Weight(i) => match &mut self.layers.get_mut(i)?.weight {
                WeightStore::Latent(t) => Some(t),
                WeightStore::Codes(_) => None,
            },
            ParamId::Bias(i) => self.layers.get_mut(i)?.bias.as_mut(),
            ParamId::Gamma { bits, bn } => {
                Some(&mut self.banks.bn.get_mut(&bits)?.get_mut(bn)?.gamma)
            }
            ParamId::Beta { bits, bn } => {
                Some(&mut self.banks.bn.get_mut(&bits)?.get_mut(bn)?.beta)
            }
            ParamId::Alpha { bits, block } => {
                Some(&mut self.banks.alpha.get_mut(&bits)?.get_mut(block)?.value)
            }
        }
    }

    /// Every trainable tensor, in a fixed order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if matches!(l.weight, WeightStore::Latent(_)) {
                ids.push(ParamId::Weight(i));
            }
            if l.bias.is_some() {
                ids.push(ParamId::Bias(i));
            }
        }
        for (&bits, entry) in &self.banks.bn {
            for bn in 0..entry.len() {
                ids.push(ParamId::Gamma { bits, bn });
                ids.push(ParamId::Beta { bits, bn });
            }
        }
        for (&bits, entry) in &self.banks.alpha {
            for block in 0..entry.len() {
                ids.push(ParamId::Alpha { bits, block });
            }
        }
        ids
    }

    pub fn zero_grads(&mut self) {
        for id in self.param_ids() {
            if let Some(t) = self.param_mut(id) {
                t.zero_grad();
            }
        }
    }

    /// Adds the gradients computed on `ctx` into the parameters' gradient slots.
    pub fn absorb_grads(&mut self, ctx: &ForwardCtx) -> Result<()> {
        for (&id, &v) in &ctx.leaves {
            if let Some(g) = ctx.tape.grad(v) {
                let g = g.to_vec();
                self.param_mut(id)
                    .ok_or_else(|| Error::Structural(format!("unknown parameter {id:?}")))?
                    .accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    /// `b1` codes of quantized layer `idx` (learnable-layer index).
    pub fn view(&self, idx: usize) -> Result<Cow<'_, QuantizedWeightView>> {
        match &self.layers[idx].weight {
            WeightStore::Latent(w) => Ok(Cow::Owned(quantize_weights_dorefa(w, self.bits.b1())?)),
            WeightStore::Codes(v) => Ok(Cow::Borrowed(v)),
        }
    }

    /// Learnable-layer indices of the quantized blocks, in block order.
    pub fn quantized_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|i| self.arch.is_quantized(*i))
            .collect()
    }

    /// Σ over quantized layers of the mean absolute difference between the
    /// layer's weights at `bi` and at `bj`.
    pub fn model_distance(&self, bi: u8, bj: u8) -> Result<f64> {
        self.model_distance_in(&mut ForwardCtx::new(false), bi, bj)
    }

    /// [`AdaptiveNet::model_distance`] reusing the quantized weights cached on `ctx`.
    pub fn model_distance_in(&self, ctx: &mut ForwardCtx, bi: u8, bj: u8) -> Result<f64> {
        let b1 = self.bits.b1();
        if bi > b1 || bj > b1 {
            return Err(Error::Contract(format!(
                "distance between {bi} and {bj} bits exceeds b1 = {b1}"
            )));
        }
        let mut total = 0.0;
        for idx in self.quantized_layers() {
            self.dequantized(ctx, idx, bi)?;
            self.dequantized(ctx, idx, bj)?;
            let (a, b) = (&ctx.dequant[&(idx, bi)], &ctx.dequant[&(idx, bj)]);
            let sum = a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + (x - y).abs());
            total += sum / a.len() as f64;
        }
        Ok(total)
    }

    fn dequantized<'c>(&self, ctx: &'c mut ForwardCtx, idx: usize, bits: u8) -> Result<&'c [f64]> {
        if !ctx.dequant.contains_key(&(idx, bits)) {
            let values = match &self.layers[idx].weight {
                WeightStore::Latent(w) => {
                    if !ctx.views.contains_key(&idx) {
                        ctx.views
                            .insert(idx, quantize_weights_dorefa(w, self.bits.b1())?);
                    }
                    ctx.views[&idx].dequantize_at(bits)?
                }
                WeightStore::Codes(view) => view.dequantize_at(bits)?,
            };
            ctx.dequant.insert((idx, bits), values);
        }
        Ok(&ctx.dequant[&(idx, bits)])
    }

    fn check_plan(&self, plan: &ExecPlan) -> Result<()> {
        let b1 = self.bits.b1();
        if plan.bits < 2 || plan.bits > b1 {
            return Err(Error::Contract(format!(
                "cannot execute at {} bits with b1 = {b1}",
                plan.bits
            )));
        }
        if let Some(mask) = &plan.mask {
            if mask.beta.len() != self.blocks() {
                return Err(Error::Contract(format!(
                    "swap mask has {} entries for {} blocks",
                    mask.beta.len(),
                    self.blocks()
                )));
            }
            if !mask.is_all_student() {
                let t = plan.teacher.ok_or_else(|| {
                    Error::Contract("swap mask selects teacher blocks but no teacher is set".into())
                })?;
                if !self.bits.contains(t) || t <= plan.bits {
                    return Err(Error::Contract(format!(
                        "teacher {t} must be a higher bit-width in {:?} than {}",
                        self.bits.as_slice(),
                        plan.bits
                    )));
                }
            }
        }
        Ok(())
    }

    fn leaf(&self, ctx: &mut ForwardCtx, id: ParamId) -> Result<Var> {
        if let Some(v) = ctx.leaves.get(&id) {
            return Ok(*v);
        }
        let t = self
            .param(id)
            .ok_or_else(|| Error::Structural(format!("missing parameter {id:?}")))?;
        let mut copy = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        copy.requires_grad = ctx.grad;
        let v = ctx.tape.leaf(copy)?;
        ctx.leaves.insert(id, v);
        Ok(v)
    }

    fn quantized_weight(&self, ctx: &mut ForwardCtx, idx: usize, bits: u8) -> Result<Var> {
        if let Some(v) = ctx.qweights.get(&(idx, bits)) {
            return Ok(*v);
        }
        let shape = self
            .arch
            .layers
            .iter()
            .filter(|l| l.is_learnable())
            .nth(idx)
            .and_then(|l| l.weight_shape())
            .expect("learnable layer");
        let q = Tensor::new(shape, self.dequantized(ctx, idx, bits)?.to_vec())?;
        let v = match &self.layers[idx].weight {
            WeightStore::Latent(_) => {
                let wv = self.leaf(ctx, ParamId::Weight(idx))?;
                weights_ste(&mut ctx.tape, wv, q)?
            }
            WeightStore::Codes(_) => ctx.tape.constant(q)?,
        };
        ctx.qweights.insert((idx, bits), v);
        Ok(v)
    }

    /// Runs the network on a batch `x: [N, input_shape…]` and returns logits.
    ///
    /// Quantized block `l` executes at the student bit-width when the mask
    /// selects it (or there is no mask) and at the teacher bit-width otherwise,
    /// using that bit-width's batch-norm and clip entries. The first and last
    /// learnable layers use latent weights directly. Batch statistics are
    /// recorded in `ctx.observations`; see [`AdaptiveNet::forward_train`].
    pub fn forward(
        &self,
        ctx: &mut ForwardCtx,
        x: Var,
        plan: &ExecPlan,
        mode: BnMode,
    ) -> Result<Var> {
        self.check_plan(plan)?;
        let shape = ctx.tape.value(x).shape();
        if shape.len() != self.arch.input_shape.len() + 1 || shape[1..] != self.arch.input_shape[..]
        {
            return Err(Error::Dimension(format!(
                "input {shape:?} does not match per-sample shape {:?}",
                self.arch.input_shape
            )));
        }
        if mode != BnMode::Eval
            && self
                .layers
                .iter()
                .any(|l| matches!(l.weight, WeightStore::Codes(_)))
            && ctx.grad
        {
            return Err(Error::Contract(
                "a network loaded from codes cannot be trained".into(),
            ));
        }
        let mut h = x;
        let (mut learn, mut block, mut bn_idx) = (0, 0, 0);
        let mut cur = plan.bits;
        let mut student = true;
        for layer in &self.arch.layers {
            match layer {
                LayerSpec::Dense { .. } | LayerSpec::Conv { .. } => {
                    let idx = learn;
                    learn += 1;
                    let w = if self.arch.is_quantized(idx) {
                        let l = block;
                        block += 1;
                        student = plan.mask.as_ref().is_none_or(|m| m.beta[l]);
                        cur = if student {
                            plan.bits
                        } else {
                            plan.teacher.expect("checked by check_plan")
                        };
                        let akey = self.banks.alpha_key(plan.bank_override.unwrap_or(cur))?;
                        let alpha = self.leaf(
                            ctx,
                            ParamId::Alpha {
                                bits: akey,
                                block: l,
                            },
                        )?;
                        h = quantize_activation_ste(&mut ctx.tape, h, alpha, cur)?;
                        self.quantized_weight(ctx, idx, cur)?
                    } else {
                        cur = plan.bits;
                        student = true;
                        self.leaf(ctx, ParamId::Weight(idx))?
                    };
                    h = match *layer {
                        LayerSpec::Conv {
                            stride, padding, ..
                        } => ctx.tape.conv2d(h, w, stride, padding)?,
                        _ => ctx.tape.matmul(h, w)?,
                    };
                    if self.layers[idx].bias.is_some() {
                        let b = self.leaf(ctx, ParamId::Bias(idx))?;
                        h = ctx.tape.add_bias(h, b)?;
                    }
                }
                LayerSpec::BatchNorm { .. } => {
                    let key = self.banks.bn_key(plan.bank_override.unwrap_or(cur))?;
                    let g = self.leaf(
                        ctx,
                        ParamId::Gamma {
                            bits: key,
                            bn: bn_idx,
                        },
                    )?;
                    let b = self.leaf(
                        ctx,
                        ParamId::Beta {
                            bits: key,
                            bn: bn_idx,
                        },
                    )?;
                    h = match mode {
                        BnMode::Eval => {
                            let st = &self.banks.bn[&key][bn_idx];
                            ctx.tape
                                .batchnorm_eval(h, g, b, &st.running_mean, &st.running_var)?
                        }
                        BnMode::Train | BnMode::Collect => {
                            let (y, stats) = ctx.tape.batchnorm_train(h, g, b)?;
                            ctx.observations.push(BnObservation {
                                bn: bn_idx,
                                bank: key,
                                update_running: mode == BnMode::Train && student,
                                stats,
                            });
                            y
                        }
                    };
                    bn_idx += 1;
                }
                LayerSpec::Relu => h = ctx.tape.relu(h)?,
                LayerSpec::AvgPool { kernel } => h = ctx.tape.avg_pool2d(h, *kernel)?,
                LayerSpec::MaxPool { kernel } => h = ctx.tape.max_pool2d(h, *kernel)?,
                LayerSpec::Flatten => h = ctx.tape.flatten(h)?,
            }
        }
        Ok(h)
    }

    /// Applies and clears the running-statistics updates recorded on `ctx`.
    ///
    /// Only batch norms executed by student blocks in train mode update; a
    /// swapped-in teacher block normalizes with batch statistics but leaves the
    /// teacher's running estimates alone.
    pub fn commit_running_stats(&mut self, ctx: &mut ForwardCtx) {
        for obs in ctx.observations.drain(..) {
            if obs.update_running {
                if let Some(entry) = self.banks.bn.get_mut(&obs.bank) {
                    entry[obs.bn].update_running(&obs.stats);
                }
            }
        }
    }

    /// Train-mode forward followed by [`AdaptiveNet::commit_running_stats`].
    pub fn forward_train(&mut self, ctx: &mut ForwardCtx, x: Var, plan: &ExecPlan) -> Result<Var> {
        let y = self.forward(ctx, x, plan, BnMode::Train)?;
        self.commit_running_stats(ctx);
        Ok(y)
    }

    /// Eval-mode logits for a batch.
    pub fn predict(&self, x: &Tensor, plan: &ExecPlan) -> Result<Tensor> {
        let mut ctx = ForwardCtx::new(false);
        let xv = ctx.tape.constant(x.clone())?;
        let y = self.forward(&mut ctx, xv, plan, BnMode::Eval)?;
        Ok(ctx.tape.value(y).clone())
    }
}
