//! Poisson training with AdamW, plateau decay and early stopping, in two
//! phases: joint backbone and readout training, then adaptation with the
//! backbone frozen.

mod checkpoint;
mod loss;
mod optim;
mod schedule;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_KIND};
pub use loss::{poisson_loss, poisson_loss_grad, poisson_loss_slice, poisson_loss_var};
pub use optim::{adamw_step, AdamW, Moments, OptimizerState};
pub use schedule::{lr_schedule_step, PlateauSchedule, ScheduleAction};

use std::fmt::Write as _;
use std::time::Instant;

use avm_autodiff::Tape;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModulationConfig, Variant};
use crate::metrics::{TrialKind, TrialTensor};
use crate::model::Model;
use crate::params::{FreezePlan, ParamGroup};
use crate::readout::Sampling;
use crate::rng::stream;
use crate::synth::DatasetBundle;
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub max_decays_before_stop: usize,
    pub loss_eps: f64,
    pub improvement_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 0.0016,
            max_epochs: 400,
            plateau_patience: 10,
            lr_decay_factor: 0.3,
            weight_decay: 1e-4,
            max_decays_before_stop: 3,
            loss_eps: 1e-8,
            improvement_threshold: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.lr > 0.0
            && self.plateau_patience > 0
            && self.lr_decay_factor > 0.0
            && self.lr_decay_factor < 1.0
            && self.weight_decay >= 0.0
            && self.loss_eps > 0.0
            && self.improvement_threshold >= 0.0;
        if !ok {
            return Err(CoreError::Config(
                "training needs positive batch size, rate, patience and eps, decay factor in (0, 1), and non-negative weight decay"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> PlateauSchedule {
        PlateauSchedule {
            patience: self.plateau_patience,
            max_decays: self.max_decays_before_stop,
            max_epochs: self.max_epochs,
            threshold: self.improvement_threshold,
        }
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

/// A set of trials drawn from one bundle.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    pub bundle: &'a DatasetBundle,
    pub images: &'a [usize],
}

impl<'a> Samples<'a> {
    pub fn new(bundle: &'a DatasetBundle, images: &'a [usize]) -> Self {
        Self { bundle, images }
    }

    pub fn trials(&self) -> Vec<usize> {
        self.bundle.trials_for(self.images)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: Split,
    /// Mean over trials of the per-trial Poisson loss summed over neurons.
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// `epoch,split,loss,lr,seconds`.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("epoch,split,loss,lr,seconds\n");
    for r in rows {
        let split = match r.split {
            Split::Train => "train",
            Split::Val => "val",
        };
        let _ = writeln!(out, "{},{split},{},{},{:.3}", r.epoch, r.loss, r.lr, r.seconds);
    }
    out
}

/// Eval-mode predictions for every trial of `images`, as a trial tensor.
pub fn predict_trials(model: &Model, bundle: &DatasetBundle, images: &[usize]) -> Result<TrialTensor> {
    let mut values = Vec::new();
    for &i in images {
        let image = bundle.image(i);
        for t in bundle.trials_for(&[i]) {
            values.extend(model.predict_eval(&image, &bundle.behavior_row(t))?);
        }
    }
    TrialTensor::new(
        bundle.repeats_for(images),
        model.spec.readout.num_neurons,
        values,
        TrialKind::Prediction,
    )
}

/// Mean per-trial Poisson loss in eval mode.
pub fn evaluate_loss(model: &Model, samples: Samples, eps: f64) -> Result<f64> {
    let trials = samples.trials();
    if trials.is_empty() {
        return Err(CoreError::Contract("cannot evaluate an empty split".into()));
    }
    let mut total = 0.0;
    for &t in &trials {
        let image = samples.bundle.image(samples.bundle.trial_image[t]);
        let o = model.predict_eval(&image, &samples.bundle.behavior_row(t))?;
        total += poisson_loss_slice(samples.bundle.response_row(t), &o, eps)?;
    }
    Ok(total / trials.len() as f64)
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State at the epoch with the lowest validation loss (epoch 0 included).
    pub best: Checkpoint,
    /// State when training stopped.
    pub last: Checkpoint,
    pub log: Vec<LogRow>,
}

pub struct Trainer<'a> {
    model: Model,
    plan: FreezePlan,
    config: TrainConfig,
    optimizer: OptimizerState,
    rng: ChaCha8Rng,
    lr: f64,
    epoch: usize,
    best_val_loss: f64,
    history: Vec<f64>,
    order: Vec<usize>,
    cursor: usize,
    train: Samples<'a>,
    val: Samples<'a>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, plan: FreezePlan, config: TrainConfig, train: Samples<'a>, val: Samples<'a>) -> Result<Self> {
        config.validate()?;
        check_compatible(&model, train.bundle)?;
        check_compatible(&model, val.bundle)?;
        if train.images.is_empty() || val.images.is_empty() {
            return Err(CoreError::Contract("training needs non-empty train and validation splits".into()));
        }
        let optimizer = OptimizerState::new(&model.store, &plan);
        Ok(Self {
            rng: stream(config.seed, "train", 0),
            lr: config.lr,
            model,
            plan,
            config,
            optimizer,
            epoch: 0,
            best_val_loss: f64::INFINITY,
            history: Vec::new(),
            order: Vec::new(),
            cursor: 0,
            train,
            val,
        })
    }

    pub fn resume(ckpt: &Checkpoint, train: Samples<'a>, val: Samples<'a>) -> Result<Self> {
        let mut t = Self::new(ckpt.model()?, ckpt.plan.clone(), ckpt.config.clone(), train, val)?;
        t.optimizer = ckpt.optimizer.clone();
        t.rng = ckpt.rng.restore()?;
        t.lr = ckpt.lr;
        t.epoch = ckpt.epoch;
        t.best_val_loss = ckpt.best_val_loss;
        t.history = ckpt.history.clone();
        t.order = ckpt.order.clone();
        t.cursor = ckpt.cursor;
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn plan(&self) -> &FreezePlan {
        &self.plan
    }

    pub fn steps(&self) -> u64 {
        self.optimizer.t
    }

    /// Snapshot of the full training state. Gradients are transient and are
    /// not part of it.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut store = self.model.store.clone();
        store.zero_grads();
        Checkpoint {
            spec: self.model.spec.clone(),
            store,
            plan: self.plan.clone(),
            config: self.config.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            best_val_loss: self.best_val_loss,
            lr: self.lr,
            history: self.history.clone(),
            rng: RngState::capture(&self.rng),
            order: self.order.clone(),
            cursor: self.cursor,
        }
    }

    /// One optimizer step on the next batch; returns the batch loss summed
    /// over trials and neurons.
    pub fn step(&mut self) -> Result<f64> {
        if self.cursor >= self.order.len() {
            self.order = self.train.trials();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.config.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;

        let bundle = self.train.bundle;
        let mut tape = Tape::new();
        let bound = self.model.store.bind(&mut tape, &self.plan);
        let mut total = None;
        for &t in &batch {
            let eps = self.model.readout.draw_jitter(&mut self.rng);
            let image = bundle.image(bundle.trial_image[t]);
            let o = self
                .model
                .predict(&mut tape, &bound, &image, &bundle.behavior_row(t), Sampling::Train(&eps))?;
            let l = poisson_loss_var(&mut tape, o, bundle.response_row(t), self.config.loss_eps)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let total = total.expect("batch is non-empty");
        let loss = tape.value(total)?.data()[0];
        if !loss.is_finite() {
            return Err(CoreError::Divergence {
                epoch: self.epoch + 1,
                detail: format!("training loss {loss} at step {}", self.optimizer.t + 1),
            });
        }
        tape.backward(total)?;
        self.model.store.zero_grads();
        self.model.store.accumulate_grads(&tape, &bound, &self.plan)?;
        adamw_step(&mut self.model.store, &mut self.optimizer, &self.config.adamw(), self.lr)?;
        if self.plan.is_trainable(ParamGroup::Readout) {
            self.model.readout.clamp_positions(&mut self.model.store);
        }
        Ok(loss)
    }

    /// Steps until the current pass over the training trials is complete;
    /// returns the mean per-trial loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0;
        loop {
            let start = if self.cursor >= self.order.len() { 0 } else { self.cursor };
            sum += self.step()?;
            count += self.cursor - start;
            if self.cursor >= self.order.len() {
                break;
            }
        }
        self.epoch += 1;
        Ok(sum / count as f64)
    }

    pub fn validation_loss(&self) -> Result<f64> {
        evaluate_loss(&self.model, self.val, self.config.loss_eps)
    }

    /// Trains until the schedule stops; the returned best checkpoint has the
    /// lowest validation loss seen, including before the first step.
    pub fn fit(mut self) -> Result<TrainOutcome> {
        let mut log = Vec::new();
        let start = Instant::now();
        let initial = self.validation_loss()?;
        if !initial.is_finite() {
            return Err(CoreError::Divergence {
                epoch: 0,
                detail: format!("initial validation loss {initial}"),
            });
        }
        let mut best = None;
        if self.epoch == 0 {
            self.best_val_loss = initial;
            best = Some(self.checkpoint());
            log.push(LogRow {
                epoch: 0,
                split: Split::Val,
                loss: initial,
                lr: self.lr,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
        let schedule = self.config.schedule();
        while self.history.len() < self.config.max_epochs {
            let lr = self.lr;
            let train_loss = self.run_epoch()?;
            let val = self.validation_loss()?;
            if !val.is_finite() {
                return Err(CoreError::Divergence {
                    epoch: self.epoch,
                    detail: format!("validation loss {val}"),
                });
            }
            self.history.push(val);
            let seconds = start.elapsed().as_secs_f64();
            log.push(LogRow {
                epoch: self.epoch,
                split: Split::Train,
                loss: train_loss,
                lr,
                seconds,
            });
            log.push(LogRow {
                epoch: self.epoch,
                split: Split::Val,
                loss: val,
                lr,
                seconds,
            });
            let action = lr_schedule_step(&self.history, &schedule);
            if action == ScheduleAction::Decay {
                self.lr *= self.config.lr_decay_factor;
            }
            if val < self.best_val_loss {
                self.best_val_loss = val;
                best = Some(self.checkpoint());
            }
            if action == ScheduleAction::Stop {
                break;
            }
        }
        let last = self.checkpoint();
        let best = best.unwrap_or_else(|| last.clone());
        Ok(TrainOutcome { best, last, log })
    }
}

fn check_compatible(model: &Model, bundle: &DatasetBundle) -> Result<()> {
    let b = &model.spec.backbone;
    if bundle.image_shape() != (b.image_h, b.image_w)
        || bundle.behavior_dim() != b.behavior_dim
        || bundle.num_neurons() != model.spec.readout.num_neurons
    {
        return Err(CoreError::Config(format!(
            "dataset ({}x{} images, {} behavior dims, {} neurons) does not match the model ({}x{}, {}, {})",
            bundle.image_shape().0,
            bundle.image_shape().1,
            bundle.behavior_dim(),
            bundle.num_neurons(),
            b.image_h,
            b.image_w,
            b.behavior_dim,
            model.spec.readout.num_neurons
        )));
    }
    Ok(())
}

/// Joint backbone and readout training from a plain model.
pub fn train_phase1(model: Model, train: Samples, val: Samples, config: &TrainConfig) -> Result<TrainOutcome> {
    if model.modulation.is_some() {
        return Err(CoreError::Contract("phase 1 expects a model without modulation".into()));
    }
    Trainer::new(model, FreezePlan::phase1(), config.clone(), train, val)?.fit()
}

/// Adaptation strategy for a new condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "avm")]
    Avm,
    #[serde(rename = "avm-s")]
    AvmS,
    #[serde(rename = "avm-b")]
    AvmB,
    #[serde(rename = "full-ft")]
    FullFinetune,
    #[serde(rename = "frozen")]
    Frozen,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Avm,
        Strategy::AvmS,
        Strategy::AvmB,
        Strategy::FullFinetune,
        Strategy::Frozen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Avm => "avm",
            Strategy::AvmS => "avm-s",
            Strategy::AvmB => "avm-b",
            Strategy::FullFinetune => "full-ft",
            Strategy::Frozen => "frozen",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Strategy::Avm => Some(Variant::Avm),
            Strategy::AvmS => Some(Variant::AvmS),
            Strategy::AvmB => Some(Variant::AvmB),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptOptions {
    /// Bottleneck, weight and wiring for adapter strategies; the variant is
    /// taken from the strategy.
    pub modulation: ModulationConfig,
    pub train_readout: bool,
    pub modulation_seed: u64,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        Self {
            modulation: ModulationConfig::default(),
            train_readout: true,
            modulation_seed: 0,
        }
    }
}

/// Builds the starting model and freeze plan of an adaptation run.
pub fn prepare_phase2(base: &Checkpoint, strategy: Strategy, opts: &AdaptOptions) -> Result<(Model, FreezePlan)> {
    let mut model = base.model()?;
    model.detach_modulation()?;
    let plan = match strategy.variant() {
        Some(variant) => {
            let cfg = ModulationConfig {
                variant,
                ..opts.modulation.clone()
            };
            model.attach_modulation(cfg, opts.modulation_seed)?;
            FreezePlan::phase2(opts.train_readout)
        }
        None if strategy == Strategy::FullFinetune => FreezePlan::full_finetune(),
        None => FreezePlan::frozen(),
    };
    Ok((model, plan))
}

/// Adapts a Phase-1 checkpoint to a new condition.
///
/// Adapter strategies start from zero-initialized modulation, so the first
/// logged validation loss is that of the unchanged base model. `Frozen`
/// takes no steps. For every strategy except `FullFinetune` the backbone
/// bytes are compared before and after; any difference is an invariant
/// breach.
pub fn train_phase2(
    base: &Checkpoint,
    strategy: Strategy,
    opts: &AdaptOptions,
    train: Samples,
    val: Samples,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let (model, plan) = prepare_phase2(base, strategy, opts)?;
    let before = model.backbone_hash();
    let mut config = config.clone();
    if strategy == Strategy::Frozen {
        config.max_epochs = 0;
    }
    let outcome = Trainer::new(model, plan, config, train, val)?.fit()?;
    if strategy != Strategy::FullFinetune {
        verify_backbone(&outcome.best, &before)?;
        verify_backbone(&outcome.last, &before)?;
    }
    Ok(outcome)
}

/// Fails with an invariant breach unless the checkpoint's backbone hashes to
/// `expected`.
pub fn verify_backbone(ckpt: &Checkpoint, expected: &str) -> Result<()> {
    let actual = ckpt.store.group_hash(ParamGroup::Backbone);
    if actual != expected {
        return Err(CoreError::InvariantBreach(format!(
            "backbone drifted during adaptation: hash {expected} became {actual}"
        )));
    }
    Ok(())
}
