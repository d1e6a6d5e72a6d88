//! Optimization loop: mined batches, total KL loss, Adam with step-decayed
//! learning rate and decoupled weight decay.
//!
//! Counters:
//! - an *epoch* is one pass over the candidate stream of one sampled identity
//!   subset;
//! - a *step* (iteration) is one optimizer update on a non-discarded batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossBreakdown};
use crate::mining::{eligible_identities, fill_batch, fill_hardest, sample_epoch, stack_pairs, EpochConfig, FillOutcome, MiningStats, PairBatch};
use crate::model::{Mode, ModelParams};
use crate::target::TargetSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: u64,
    pub weight_decay: f64,
    /// Optimizer steps (500000 in the full-scale setting).
    pub max_iterations: u64,
    /// Pairs per batch, half of each class (220 in the full-scale setting).
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Candidates scanned per fill attempt before the attempt is discarded.
    pub candidate_pool: usize,
    /// Consecutive discards that abort the current epoch.
    pub max_consecutive_discards: usize,
    /// Consecutive epochs without a single step that end the run.
    pub max_idle_epochs: usize,
    /// Until the difficulty rule first fills a batch, discarded pools are
    /// replaced by their hardest candidates instead of being skipped.
    pub warmup: bool,
    /// Steps between numbered checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub epoch: EpochConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            decay_factor: 0.98,
            decay_every: 5,
            weight_decay: 2e-4,
            max_iterations: 2000,
            batch_size: 20,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            candidate_pool: 4096,
            max_consecutive_discards: 50,
            max_idle_epochs: 3,
            warmup: true,
            checkpoint_every: 500,
            epoch: EpochConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("decay_factor", self.decay_factor),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be >= 1".into()));
        }
        if self.batch_size < 4 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch_size must be even and >= 4, got {}",
                self.batch_size
            )));
        }
        if self.candidate_pool < self.batch_size {
            return Err(Error::Config(format!(
                "candidate_pool ({}) is smaller than batch_size ({})",
                self.candidate_pool, self.batch_size
            )));
        }
        if self.max_consecutive_discards == 0 || self.max_idle_epochs == 0 {
            return Err(Error::Config("discard and idle limits must be >= 1".into()));
        }
        Ok(())
    }
}

/// `lr0 * decay_factor^floor(epoch / decay_every)`.
pub fn lr_at(config: &TrainConfig, epoch: u64) -> f64 {
    let decays = (epoch / config.decay_every.max(1)).min(i32::MAX as u64) as i32;
    config.lr0 * config.decay_factor.powi(decays)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params.tensors().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay on weight
/// matrices.
///
/// Returns `false` and leaves everything untouched when a gradient entry is
/// not finite.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Matrix],
    state: &mut OptimizerState,
    config: &TrainConfig,
    lr: f64,
) -> Result<bool> {
    let count = params.tensors().count();
    if grads.len() != count || state.first.len() != count {
        return Err(Error::shape(
            "adam_step",
            format!("{count} parameters, {} gradients, {} moments", grads.len(), state.first.len()),
        ));
    }
    for (g, p) in grads.iter().zip(params.tensors()) {
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
            ));
        }
    }
    if let Some((i, g)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        log::warn!(
            "non-finite gradient in parameter tensor {i} (entry {}); step skipped",
            g.first_non_finite().unwrap_or(0)
        );
        return Ok(false);
    }

    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, theta) in params.tensors_mut().enumerate() {
        let decay = if ModelParams::is_weight(i) { lr * config.weight_decay } else { 0.0 };
        let g = grads[i].data();
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (k, w) in theta.data_mut().iter_mut().enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + config.epsilon) + decay * *w;
        }
    }
    Ok(true)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss_m: f64,
    pub loss_n: f64,
    pub total: f64,
    pub difficult_fraction_m: f64,
    pub difficult_fraction_n: f64,
    /// Pools discarded since the previous step.
    pub discards: usize,
    /// The batch came from the warm-up fallback rather than the difficulty rule.
    pub relaxed: bool,
}

pub const LOG_HEADER: &str =
    "step,epoch,lr,loss_m,loss_n,total,difficult_fraction_m,difficult_fraction_n,discards,relaxed";

impl LogRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.loss_m,
            self.loss_n,
            self.total,
            self.difficult_fraction_m,
            self.difficult_fraction_n,
            self.discards,
            self.relaxed as u8
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    /// `max_idle_epochs` epochs in a row produced no step.
    MiningStalled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: u64,
    pub skipped_steps: u64,
    pub aborted_epochs: u64,
    pub stop: StopReason,
}

/// Mutable training state. `step` and `epoch` survive checkpoints.
pub struct Trainer {
    pub params: ModelParams,
    pub target: TargetSpec,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub step: u64,
    pub epoch: u64,
    warmup_active: bool,
}

impl Trainer {
    pub fn new(params: ModelParams, target: TargetSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        target.validate()?;
        params.validate_shapes()?;
        if params.config.p != target.p {
            return Err(Error::Config(format!(
                "model outputs p = {} but the target has p = {}",
                params.config.p, target.p
            )));
        }
        let optimizer = OptimizerState::new(&params);
        let warmup_active = config.warmup;
        Ok(Self {
            params,
            target,
            config,
            optimizer,
            step: 0,
            epoch: 0,
            warmup_active,
        })
    }

    /// Continues from a saved state. Adam moments start from zero.
    pub fn resume(
        params: ModelParams,
        target: TargetSpec,
        config: TrainConfig,
        step: u64,
        epoch: u64,
        warmup_active: bool,
    ) -> Result<Self> {
        let mut trainer = Self::new(params, target, config)?;
        trainer.step = step;
        trainer.epoch = epoch;
        trainer.warmup_active = trainer.config.warmup && warmup_active;
        Ok(trainer)
    }

    pub fn warmup_active(&self) -> bool {
        self.warmup_active
    }

    fn epoch_rng(&self, epoch: u64, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(2 * epoch + purpose);
        rng
    }

    /// Forward, loss and backward on one batch (matching rows first), then an
    /// Adam update. `Ok(None)` means the update was skipped.
    pub fn train_batch(&mut self, batch: &PairBatch, dropout: &mut ChaCha8Rng, lr: f64) -> Result<Option<LossBreakdown>> {
        let (x1, x2) = stack_pairs(batch.iter())?;
        let half = batch.matching.len();
        let mut tape = Tape::new();
        let nodes = self.params.register(&mut tape)?;
        let forward = (|| {
            let z = self.params.pair_forward(&mut tape, &nodes, &x1, &x2, &mut Mode::Train(dropout))?;
            let z_m = tape.slice_rows(z, 0, half)?;
            let z_n = tape.slice_rows(z, half, x1.rows())?;
            total_loss(&mut tape, z_m, z_n, &self.target)
        })();
        let loss = match forward {
            Ok(l) => l,
            Err(Error::NonFinite { op, index }) => {
                log::error!("non-finite value in {op} (coordinate {index}) at step {}", self.step);
                return Err(Error::NonFiniteLoss { step: self.step });
            }
            Err(e) => return Err(e),
        };
        let breakdown = loss.breakdown(&tape);
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        let grads = tape.backward(loss.total)?;
        let grads: Vec<Matrix> = nodes
            .ids()
            .zip(self.params.tensors())
            .map(|(id, p)| grads.get_or_zeros(id, p.shape()))
            .collect();
        if adam_step(&mut self.params, &grads, &mut self.optimizer, &self.config, lr)? {
            Ok(Some(breakdown))
        } else {
            Ok(None)
        }
    }

    /// Runs until `max_iterations` steps or a mining stall. `on_step` sees
    /// every logged step together with the updated parameters.
    pub fn run<F>(&mut self, dataset: &Dataset, mut on_step: F) -> Result<TrainSummary>
    where
        F: FnMut(&LogRow, &Trainer) -> Result<()>,
    {
        let eligible = eligible_identities(dataset, self.config.epoch.min_images);
        if eligible.len() < 2 {
            return Err(Error::DatasetInsufficient(format!(
                "{} identities with >= {} images; need at least 2",
                eligible.len(),
                self.config.epoch.min_images
            )));
        }
        if dataset.input_dim != self.params.config.input_dim {
            return Err(Error::Config(format!(
                "dataset inputs have {} features, model expects {}",
                dataset.input_dim, self.params.config.input_dim
            )));
        }
        let b = self.config.batch_size;
        let mut summary = TrainSummary {
            steps: 0,
            epochs: 0,
            skipped_steps: 0,
            aborted_epochs: 0,
            stop: StopReason::MaxIterations,
        };
        let mut idle_epochs = 0;

        while self.step < self.config.max_iterations {
            let stream = sample_epoch(dataset, &self.config.epoch, &mut self.epoch_rng(self.epoch, 0))?;
            let m = stream.iter().filter(|p| p.is_matching()).count();
            if m < b / 2 || stream.len() - m < b / 2 {
                return Err(Error::DatasetInsufficient(format!(
                    "epoch stream has {m} matching and {} non-matching candidates; a batch needs {} of each",
                    stream.len() - m,
                    b / 2
                )));
            }
            let mut dropout = self.epoch_rng(self.epoch, 1);
            let lr = lr_at(&self.config, self.epoch);
            let mut cursor = 0;
            let mut consecutive = 0;
            let mut discards = 0;
            let mut epoch_steps = 0;

            while cursor < stream.len() && self.step < self.config.max_iterations {
                let pool = &stream[cursor..(cursor + self.config.candidate_pool).min(stream.len())];
                let (batch, stats, relaxed) = match fill_batch(pool, &self.params, &self.target, b)? {
                    FillOutcome::Batch { batch, stats, consumed } => {
                        cursor += consumed;
                        if self.warmup_active {
                            log::info!("difficulty rule filled its first batch at step {}; warm-up over", self.step);
                            self.warmup_active = false;
                        }
                        (batch, stats, false)
                    }
                    FillOutcome::Discard(stats) => {
                        cursor += pool.len();
                        match self.warmup_active {
                            true => match fill_hardest(pool, &self.params, &self.target, b)? {
                                Some((batch, stats)) => (batch, stats, true),
                                None => continue,
                            },
                            false => {
                                consecutive += 1;
                                discards += 1;
                                log::debug!("pool discarded: {stats:?}");
                                if consecutive >= self.config.max_consecutive_discards {
                                    log::warn!(
                                        "epoch {} aborted after {consecutive} consecutive discards (last pool: {:.3} / {:.3} difficult)",
                                        self.epoch,
                                        stats.difficult_fraction_m(),
                                        stats.difficult_fraction_n()
                                    );
                                    summary.aborted_epochs += 1;
                                    break;
                                }
                                continue;
                            }
                        }
                    }
                };
                consecutive = 0;
                match self.train_batch(&batch, &mut dropout, lr)? {
                    Some(loss) => {
                        self.step += 1;
                        epoch_steps += 1;
                        let row = log_row(self, lr, &loss, &stats, discards, relaxed);
                        discards = 0;
                        on_step(&row, self)?;
                    }
                    None => summary.skipped_steps += 1,
                }
            }

            self.epoch += 1;
            summary.epochs += 1;
            if epoch_steps == 0 && self.step < self.config.max_iterations {
                idle_epochs += 1;
                if idle_epochs >= self.config.max_idle_epochs {
                    if self.step == 0 {
                        return Err(Error::MiningStalled(format!(
                            "no batch filled in {idle_epochs} epochs; no step was taken"
                        )));
                    }
                    log::warn!(
                        "no batch filled in {idle_epochs} consecutive epochs; stopping at step {}",
                        self.step
                    );
                    summary.stop = StopReason::MiningStalled;
                    break;
                }
            } else {
                idle_epochs = 0;
            }
        }
        summary.steps = self.step;
        Ok(summary)
    }
}

fn log_row(t: &Trainer, lr: f64, loss: &LossBreakdown, stats: &MiningStats, discards: usize, relaxed: bool) -> LogRow {
    LogRow {
        step: t.step,
        epoch: t.epoch,
        lr,
        loss_m: loss.loss_m,
        loss_n: loss.loss_n,
        total: loss.total,
        difficult_fraction_m: stats.difficult_fraction_m(),
        difficult_fraction_n: stats.difficult_fraction_n(),
        discards,
        relaxed,
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LogRow>,
    pub summary: TrainSummary,
}

/// In-memory training from a fresh initialization.
pub fn train(dataset: &Dataset, params: ModelParams, target: &TargetSpec, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(params, *target, config.clone())?;
    let mut log = Vec::new();
    let summary = trainer.run(dataset, |row, _| {
        log.push(row.clone());
        Ok(())
    })?;
    Ok(TrainOutcome {
        params: trainer.params,
        log,
        summary,
    })
}
