//! The SLB training loop.
//!
//! Each iteration takes the temperature from the schedule, runs the
//! continuous-state forward (updating continuous SBN statistics), runs the
//! discrete-state forward on the same minibatch without gradients (updating
//! discrete statistics), backpropagates the cross-entropy of the continuous
//! pass and applies one optimizer step.

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Network, WeightState};
use crate::optim::{milestone_factor, OptimConfig, Optimizer};
use crate::param::Binder;
use crate::schedule::{ScheduleKind, Temperature, TemperatureSchedule};
use crate::search::DEFAULT_FREEZE_THRESHOLD;

/// What one schedule step counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleUnit {
    Iteration,
    Epoch,
}

impl fmt::Display for ScheduleUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleUnit::Iteration => "iteration",
            ScheduleUnit::Epoch => "epoch",
        })
    }
}

impl FromStr for ScheduleUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iteration" => Ok(ScheduleUnit::Iteration),
            "epoch" => Ok(ScheduleUnit::Epoch),
            other => Err(Error::InvalidArgument(format!("unknown schedule unit `{other}` (iteration|epoch)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub schedule: ScheduleKind,
    pub t_start: f64,
    pub t_end: f64,
    pub schedule_unit: ScheduleUnit,
    pub seed: u64,
    /// Evaluate every this many epochs (0: only after the last one).
    pub eval_every: usize,
    pub eval_batch: usize,
    /// Refresh discrete SBN statistics every this many iterations.
    pub discrete_stats_every: u64,
    pub freeze_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            optim: OptimConfig::default(),
            milestones: Vec::new(),
            lr_decay: 0.1,
            schedule: ScheduleKind::Exp,
            t_start: 0.01,
            t_end: 10.0,
            schedule_unit: ScheduleUnit::Iteration,
            seed: 0,
            eval_every: 1,
            eval_batch: 500,
            discrete_stats_every: 1,
            freeze_threshold: DEFAULT_FREEZE_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 || self.eval_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.discrete_stats_every == 0 {
            return bad("discrete_stats_every must be at least 1".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be strictly increasing, got {:?}", self.milestones));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return bad(format!("milestones {:?} must be below the {} total epochs", self.milestones, self.epochs));
        }
        if !(self.freeze_threshold > 0.5 && self.freeze_threshold < 1.0) {
            return bad(format!("freeze threshold must lie in (0.5, 1), got {}", self.freeze_threshold));
        }
        Optimizer::new(self.optim.clone())?;
        if self.epochs > 0 {
            TemperatureSchedule::new(self.schedule, self.t_start, self.t_end, 1)?;
        }
        Ok(())
    }

    pub fn total_steps(&self, batches_per_epoch: usize) -> u64 {
        match self.schedule_unit {
            ScheduleUnit::Iteration => (self.epochs * batches_per_epoch) as u64,
            ScheduleUnit::Epoch => self.epochs as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub epoch: usize,
    pub iteration: u64,
    pub tau: f64,
    pub train_loss: f64,
    pub continuous_acc: f64,
    pub discrete_acc: f64,
    pub fraction_frozen: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
}

impl TrainReport {
    pub const HEADER: &'static str = "epoch,iteration,tau,train_loss,continuous_acc,discrete_acc,fraction_frozen";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch, r.iteration, r.tau, r.train_loss, r.continuous_acc, r.discrete_acc, r.fraction_frozen
            )
            .expect("string write");
        }
        s
    }

    pub fn last(&self) -> Option<&ReportRow> {
        self.rows.last()
    }
}

/// Top-1 accuracy in `[0, 1]` of eval-mode predictions.
pub fn evaluate(net: &mut Network, ds: &Dataset, state: WeightState, tau: f64, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for (x, labels) in ds.batches(batch_size, 0, 0, false) {
        let logits = net.predict(&x, state, tau)?;
        correct += count_correct(logits.data(), &labels);
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Number of rows of `[B, K]` logits whose first maximum sits at the label.
pub fn count_correct(logits: &[f64], labels: &[usize]) -> usize {
    if labels.is_empty() {
        return 0;
    }
    let k = logits.len() / labels.len();
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| {
            let row = &logits[r * k..(r + 1) * k];
            let best = (0..k).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            best == l
        })
        .count()
}

/// Training state that persists across epochs (and checkpoints).
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub net: Network,
    pub optimizer: Optimizer,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub iteration: u64,
    pub report: TrainReport,
    pub last_loss: Option<f64>,
    batches_per_epoch: usize,
}

impl Trainer {
    pub fn new(net: Network, config: TrainConfig, train_len: usize) -> Result<Trainer> {
        config.validate()?;
        if train_len == 0 {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let optimizer = Optimizer::new(config.optim.clone())?;
        let batches_per_epoch = train_len.div_ceil(config.batch_size);
        Ok(Trainer { config, net, optimizer, epoch: 0, iteration: 0, report: TrainReport::default(), last_loss: None, batches_per_epoch })
    }

    /// Rebuilds a trainer from checkpointed parts.
    pub fn restore(
        net: Network,
        config: TrainConfig,
        optimizer: Optimizer,
        epoch: usize,
        iteration: u64,
        report: TrainReport,
        last_loss: Option<f64>,
        train_len: usize,
    ) -> Result<Trainer> {
        let mut t = Trainer::new(net, config, train_len)?;
        t.optimizer = optimizer;
        t.epoch = epoch;
        t.iteration = iteration;
        t.report = report;
        t.last_loss = last_loss;
        Ok(t)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    pub fn schedule(&self) -> Result<TemperatureSchedule> {
        let c = &self.config;
        TemperatureSchedule::new(c.schedule, c.t_start, c.t_end, c.total_steps(self.batches_per_epoch))
    }

    /// Temperature in force after the steps completed so far (the start
    /// temperature before the first step).
    pub fn current_temperature(&self) -> Result<Temperature> {
        if self.config.epochs == 0 {
            let t = self.config.t_start;
            return Ok(Temperature { t, tau: 1.0 / t });
        }
        let pos = match self.config.schedule_unit {
            ScheduleUnit::Iteration => self.iteration,
            ScheduleUnit::Epoch => self.epoch as u64,
        };
        self.schedule()?.temperature_at(pos)
    }

    fn step_temperature(&self, epoch: usize) -> Result<f64> {
        let pos = match self.config.schedule_unit {
            ScheduleUnit::Iteration => self.iteration + 1,
            ScheduleUnit::Epoch => epoch as u64 + 1,
        };
        Ok(self.schedule()?.temperature_at(pos)?.tau)
    }

    /// One optimizer step on a minibatch; returns the loss.
    pub fn step(&mut self, x: &crate::tensor::Tensor, labels: &[usize], epoch: usize) -> Result<f64> {
        let tau = self.step_temperature(epoch)?;
        let mut g = Graph::new();
        let mut binder = Binder::trainable();
        let xv = g.constant(x.clone());
        let logits = self.net.forward(&mut g, &mut binder, xv, WeightState::Continuous, true, tau)?;
        let loss_v = g.cross_entropy(logits, labels)?;
        let loss = g.value(loss_v).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                iteration: self.iteration + 1,
                tau,
                last_finite_loss: self.last_loss,
                snapshot: self.snapshot(),
            });
        }
        g.backward(loss_v)?;
        let grads: HashMap<usize, _> =
            binder.bound().filter_map(|(id, v)| g.grad(v).map(|t| (id, t.clone()))).collect();
        drop(g);

        if self.net.has_search() {
            if (self.iteration + 1).is_multiple_of(self.config.discrete_stats_every) {
                let mut gd = Graph::new();
                let xd = gd.constant(x.clone());
                self.net.forward(&mut gd, &mut Binder::frozen(), xd, WeightState::Discrete, true, tau)?;
            }
        } else {
            self.net.copy_continuous_stats();
        }

        let factor = milestone_factor(&self.config.milestones, self.config.lr_decay, epoch);
        self.optimizer.step(self.net.params_mut(), &grads, factor)?;
        self.net.clamp_latents();
        self.iteration += 1;
        self.last_loss = Some(loss);
        Ok(loss)
    }

    fn snapshot(&self) -> String {
        let mut mags: Vec<(String, f64)> =
            self.net.params().iter().map(|p| (p.name.to_string(), p.value.max_abs())).collect();
        mags.sort_by(|a, b| b.1.total_cmp(&a.1));
        mags.iter().take(3).map(|(n, m)| format!("{n}={m:e}")).collect::<Vec<_>>().join(", ")
    }

    /// Runs the next epoch; returns its mean training loss.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<f64> {
        let epoch = self.epoch;
        let mut total = 0.0;
        let mut count = 0usize;
        for (x, labels) in train.batches(self.config.batch_size, self.config.seed, epoch as u64, true) {
            total += self.step(&x, &labels, epoch)? * labels.len() as f64;
            count += labels.len();
        }
        self.epoch += 1;
        Ok(total / count as f64)
    }

    fn is_eval_epoch(&self, epoch: usize) -> bool {
        epoch == self.config.epochs || (self.config.eval_every > 0 && epoch.is_multiple_of(self.config.eval_every))
    }

    /// Trains the remaining epochs. `on_epoch` runs after every epoch (and
    /// its evaluation, if any).
    pub fn run(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        mut on_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < self.config.epochs {
            let loss = self.train_epoch(train)?;
            if self.is_eval_epoch(self.epoch) {
                let row = self.evaluate_row(test, loss)?;
                self.report.rows.push(row);
            }
            on_epoch(self)?;
        }
        if self.config.epochs > 0 {
            self.net.require_finalized()?;
        }
        Ok(())
    }

    fn evaluate_row(&mut self, test: &Dataset, train_loss: f64) -> Result<ReportRow> {
        let tau = self.current_temperature()?.tau;
        let eb = self.config.eval_batch;
        let continuous_acc = evaluate(&mut self.net, test, WeightState::Continuous, tau, eb)?;
        let discrete_acc = if !self.net.has_search() {
            continuous_acc
        } else if self.net.is_finalized() {
            evaluate(&mut self.net, test, WeightState::Discrete, tau, eb)?
        } else {
            f64::NAN
        };
        let fraction_frozen = self.net.freeze_report(tau, self.config.freeze_threshold)?.fraction_frozen;
        Ok(ReportRow {
            epoch: self.epoch,
            iteration: self.iteration,
            tau,
            train_loss,
            continuous_acc,
            discrete_acc,
            fraction_frozen,
        })
    }
}

/// Trains `net` from scratch.
pub fn train(net: Network, config: TrainConfig, train: &Dataset, test: &Dataset) -> Result<(Network, TrainReport)> {
    let mut t = Trainer::new(net, config, train.len())?;
    t.run(train, test, |_| Ok(()))?;
    Ok((t.net, t.report))
}
