use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::eval::{calibrate_bn, evaluate_bits};
use super::loss::loss_for_bit;
use super::metrics::{
    histogram_csv, metrics_csv, read_metrics_csv, teacher_histogram, BitResult, MetricsRow,
    ResultKind, RunSummary,
};
use super::selection::{
    entropy, sample_swap_mask, select_teacher, Candidate, SwapSchedule, TeacherChoice,
};
use crate::autograd::Var;
use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::network::{AdaptiveNet, ExecPlan, ForwardCtx, ParamId};
use crate::optim::Sgd;
use crate::quant::ALPHA_FLOOR;
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const HISTOGRAM_FILE: &str = "teacher_histogram.csv";
pub const SUMMARY_FILE: &str = "summary.json";

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const SWAP_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Drives one run: epochs, checkpoints, metrics and the final summary.
pub struct Trainer {
    config: RunConfig,
    net: AdaptiveNet,
    train: Dataset,
    test: Dataset,
    epochs_done: usize,
    velocities: BTreeMap<ParamId, Vec<f64>>,
    shuffle_rng: ChaCha8Rng,
    swap_rng: ChaCha8Rng,
    eps_clamps: u64,
    rows: Vec<MetricsRow>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let train = config.data.train.load()?;
        let test = config.data.test.load()?;
        Self::with_data(config, train, test)
    }

    /// Uses already-loaded datasets instead of the ones named in the config.
    pub fn with_data(config: RunConfig, train: Dataset, test: Dataset) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if train.sample_shape() != test.sample_shape() || train.classes() != test.classes() {
            return Err(Error::Config(
                "train and test sets disagree on sample shape or classes".into(),
            ));
        }
        let arch = config.model.arch(train.sample_shape(), train.classes())?;
        let net = AdaptiveNet::new(
            arch,
            config.bits.clone(),
            config.mode.sharing(),
            config.alpha.init,
            &mut stream(config.seed, INIT_STREAM),
        )?;
        Ok(Self {
            shuffle_rng: stream(config.seed, SHUFFLE_STREAM),
            swap_rng: stream(config.seed, SWAP_STREAM),
            config,
            net,
            train,
            test,
            epochs_done: 0,
            velocities: BTreeMap::new(),
            eps_clamps: 0,
            rows: Vec::new(),
        })
    }

    /// Continues from a checkpoint. `config` must equal the snapshot it holds.
    /// Metrics rows already on disk for completed epochs are kept.
    pub fn resume(config: RunConfig, ckpt: Checkpoint) -> Result<Self> {
        if config != ckpt.config {
            return Err(Error::Config(
                "config differs from the checkpoint's snapshot".into(),
            ));
        }
        let mut t = Self::new(config)?;
        if ckpt.net.arch() != t.net.arch() {
            return Err(Error::Config(
                "checkpoint architecture does not match the data".into(),
            ));
        }
        t.net = ckpt.net;
        t.epochs_done = ckpt.epochs_done;
        t.velocities = ckpt.velocities;
        t.shuffle_rng.set_word_pos(ckpt.shuffle_pos);
        t.swap_rng.set_word_pos(ckpt.swap_pos);
        t.eps_clamps = ckpt.eps_clamps;
        if let Some(path) = t.path(METRICS_FILE) {
            if path.exists() {
                let done = t.epochs_done;
                t.rows = read_metrics_csv(&path)?
                    .1
                    .into_iter()
                    .filter(|r| r.epoch < done)
                    .collect();
            }
        }
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn net(&self) -> &AdaptiveNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut AdaptiveNet {
        &mut self.net
    }

    pub fn train_data(&self) -> &Dataset {
        &self.train
    }

    pub fn test_data(&self) -> &Dataset {
        &self.test
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn total_epochs(&self) -> usize {
        self.config.epochs * self.config.mode.phases(&self.config.bits)
    }

    pub fn is_done(&self) -> bool {
        self.epochs_done >= self.total_epochs()
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.config.output_dir.as_ref().map(|d| d.join(name))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            net: self.net.clone(),
            epochs_done: self.epochs_done,
            velocities: self.velocities.clone(),
            shuffle_pos: self.shuffle_rng.get_word_pos(),
            swap_pos: self.swap_rng.get_word_pos(),
            eps_clamps: self.eps_clamps,
        }
    }

    /// Trains one epoch, then writes checkpoint and metrics when an output
    /// directory is configured.
    pub fn train_epoch(&mut self) -> Result<()> {
        if self.is_done() {
            return Err(Error::Contract("all epochs already trained".into()));
        }
        let epochs = self.config.epochs;
        let (phase, epoch) = (self.epochs_done / epochs, self.epochs_done % epochs);
        if epoch == 0 {
            self.velocities.clear();
        }
        let bits = self.config.mode.phase_bits(&self.config.bits, phase);
        let order = self.train.shuffled_order(&mut self.shuffle_rng);
        let batches: Vec<(Tensor, Vec<usize>)> =
            self.train.batches(&order, self.config.batch_size).collect();
        for (i, (x, y)) in batches.into_iter().enumerate() {
            let rows = self
                .train_step(&x, &y, &bits, epoch, i)
                .map_err(|e| match e {
                    Error::NonFinite { op } => Error::NonFinite {
                        op: format!("{op} (epoch {}, batch {i}); aborting", self.epochs_done),
                    },
                    other => other,
                })?;
            self.rows.extend(rows);
        }
        self.epochs_done += 1;
        self.persist()
    }

    fn persist(&self) -> Result<()> {
        let Some(dir) = &self.config.output_dir else {
            return Ok(());
        };
        self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        self.write_metrics(dir)
    }

    fn write_metrics(&self, dir: &Path) -> Result<()> {
        let text = metrics_csv(&self.config.to_json(), &self.rows)?;
        atomic_write(&dir.join(METRICS_FILE), text.as_bytes())?;
        let hist = histogram_csv(&teacher_histogram(&self.rows))?;
        atomic_write(&dir.join(HISTOGRAM_FILE), hist.as_bytes())
    }

    /// One optimization step on one batch over the bit-widths in `bits`
    /// (highest first). Returns one metrics row per bit-width.
    pub fn train_step(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        bits: &[u8],
        epoch: usize,
        batch: usize,
    ) -> Result<Vec<MetricsRow>> {
        let distill = self.config.mode.distills() && bits.len() > 1;
        let p1 = SwapSchedule {
            p1_initial: self.config.p1_initial,
            epochs_total: self.config.epochs,
        }
        .p1(epoch);
        let mut ctx = ForwardCtx::new(true);
        let xv = ctx.tape.constant(x.clone())?;
        let mut probs: Vec<(u8, Var)> = Vec::new();
        let mut total: Option<Var> = None;
        let mut rows = Vec::with_capacity(bits.len());
        for (k, &b) in bits.iter().enumerate() {
            let mut choice: Option<TeacherChoice> = None;
            let mut fraction = 1.0;
            let plan = if distill && k > 0 {
                let mut candidates = Vec::with_capacity(k);
                for &(bi, pv) in &probs {
                    candidates.push(Candidate {
                        bits: bi,
                        entropy: entropy(ctx.tape.value(pv))?,
                        distance: self.net.model_distance_in(&mut ctx, bi, b)?,
                    });
                }
                let c = select_teacher(b, &candidates, self.config.lambda)?;
                let mask = sample_swap_mask(self.net.blocks(), p1, &mut self.swap_rng)?;
                fraction = mask.student_fraction();
                choice = Some(c);
                ExecPlan::swapped(b, mask, c.teacher_b)
            } else {
                ExecPlan::student(b)
            };
            let logits = self.net.forward_train(&mut ctx, xv, &plan)?;
            let p = ctx.tape.softmax(logits)?;
            let teacher = choice.map(|c| {
                probs
                    .iter()
                    .find(|(bi, _)| *bi == c.teacher_b)
                    .expect("teacher ran")
                    .1
            });
            let l = loss_for_bit(&mut ctx.tape, p, labels, teacher)?;
            total = Some(match total {
                Some(t) => ctx.tape.add(t, l.total)?,
                None => l.total,
            });
            rows.push(MetricsRow {
                epoch: self.epochs_done,
                batch,
                mode: self.config.mode.to_string(),
                b,
                loss: l.ce + l.kl,
                ce: l.ce,
                kl: l.kl,
                teacher_b: choice.map(|c| c.teacher_b),
                entropy_term: choice.map(|c| c.entropy_term),
                distance_term: choice.map(|c| c.distance_term),
                swap_student_fraction: fraction,
            });
            probs.push((b, p));
        }
        let total = total.ok_or_else(|| Error::Contract("no bit-width to train".into()))?;
        ctx.tape.backward(total)?;
        self.eps_clamps += ctx.tape.eps_clamps() as u64;
        self.apply_gradients(&ctx, epoch)?;
        Ok(rows)
    }

    fn apply_gradients(&mut self, ctx: &ForwardCtx, epoch: usize) -> Result<()> {
        let schedule = &self.config.optimizer.schedule;
        let groups: [(Sgd, fn(&ParamId) -> bool); 3] = [
            (self.config.weight_sgd(), |id| {
                matches!(id, ParamId::Weight(_))
            }),
            (self.config.affine_sgd(), |id| {
                matches!(
                    id,
                    ParamId::Bias(_) | ParamId::Gamma { .. } | ParamId::Beta { .. }
                )
            }),
            (self.config.alpha_sgd(), |id| {
                matches!(id, ParamId::Alpha { .. })
            }),
        ];
        for id in self.net.param_ids() {
            let Some(v) = ctx.leaf_var(id) else { continue };
            let Some(g) = ctx.tape.grad(v) else { continue };
            let (sgd, _) = groups
                .iter()
                .find(|(_, f)| f(&id))
                .expect("every parameter has a group");
            let lr = schedule.lr_at(sgd.lr, epoch, self.config.epochs);
            let vel = self.velocities.entry(id).or_default();
            let t = self.net.param_mut(id).expect("listed parameter");
            sgd.step(lr, t.data_mut(), g, vel)?;
            if matches!(id, ParamId::Alpha { .. }) {
                let a = &mut t.data_mut()[0];
                *a = a.max(ALPHA_FLOOR);
            }
        }
        Ok(())
    }

    /// Calibrates and evaluates the configured zero-shot bit-widths and
    /// evaluates every trained one, writing the summary (and the checkpoint
    /// with the new banks) when an output directory is configured.
    pub fn finish(&mut self) -> Result<RunSummary> {
        for &b in &self.config.zero_shot_bits {
            calibrate_bn(&mut self.net, b, &self.train, self.config.batch_size)?;
        }
        let mut bits = BTreeMap::new();
        let parallel = !self.config.deterministic;
        let trained = evaluate_bits(
            &self.net,
            self.config.bits.as_slice(),
            &self.test,
            self.config.batch_size,
            parallel,
        )?;
        for (b, a) in trained {
            bits.insert(
                b,
                BitResult {
                    accuracy: a,
                    kind: ResultKind::Trained,
                },
            );
        }
        let zs = evaluate_bits(
            &self.net,
            &self.config.zero_shot_bits,
            &self.test,
            self.config.batch_size,
            parallel,
        )?;
        for (b, a) in zs {
            bits.insert(
                b,
                BitResult {
                    accuracy: a,
                    kind: ResultKind::ZeroShot,
                },
            );
        }
        let summary = RunSummary {
            mode: self.config.mode.to_string(),
            seed: self.config.seed,
            epochs: self.epochs_done,
            bits,
            eps_clamps: self.eps_clamps,
        };
        if let Some(dir) = &self.config.output_dir {
            self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            let json = serde_json::to_string_pretty(&summary)?;
            atomic_write(&dir.join(SUMMARY_FILE), json.as_bytes())?;
        }
        Ok(summary)
    }

    /// Trains all remaining epochs and finishes.
    pub fn run(&mut self) -> Result<RunSummary> {
        while !self.is_done() {
            self.train_epoch()?;
            log::info!(
                "{} epoch {}/{}",
                self.config.mode,
                self.epochs_done,
                self.total_epochs()
            );
        }
        self.finish()
    }
}

/// Convenience wrapper: a fresh trainer run to completion.
pub fn train(config: RunConfig) -> Result<(AdaptiveNet, RunSummary)> {
    let mut t = Trainer::new(config)?;
    let s = t.run()?;
    Ok((t.net, s))
}
