//! Momentum SGD, learning-rate schedules, and the ensemble training loops.

mod classical;
mod schedule;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchStream, Dataset};
use crate::dist::{Collectives, LocalCollectives};
use crate::error::{Error, Result};
use crate::graph::{CheckpointRecord, CompiledGraph};
use crate::losses::{AssignmentMatrix, LossConfig, LossMode};
use crate::tensor::Tensor;

pub use classical::{kmeans, train_mcl_classical, ClassicalMclConfig, ClassicalMclResult};
pub use schedule::{lr_at, LrSchedule, LrScheduler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Parameter updates to perform.
    pub iterations: usize,
    pub schedule: LrSchedule,
    /// Batches whose gradients are averaged into one update.
    pub accumulation_steps: usize,
    /// Multiply the learning rate by the ensemble size under averaged losses.
    pub lr_ensemble_scale: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 32,
            iterations: 1000,
            schedule: LrSchedule::Fixed,
            accumulation_steps: 1,
            lr_ensemble_scale: true,
        }
    }
}

impl SgdConfig {
    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            out.push(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 {
            out.push(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            out.push("batch size must be positive".into());
        }
        if self.accumulation_steps == 0 {
            out.push("accumulation steps must be at least 1".into());
        }
        out.extend(self.schedule.problems());
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().as_slice() {
            [] => Ok(()),
            p => Err(Error::InvalidArgument(p.join("; "))),
        }
    }
}

/// `v <- momentum * v - lr * (g + decay * theta); theta <- theta + v`.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, velocity: &mut Tensor, lr: f64, cfg: &SgdConfig) -> Result<()> {
    for ((p, g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = cfg.momentum * *v - lr * (g + cfg.weight_decay * *p);
        *p += *v;
    }
    Ok(())
}

/// Windowed early stop for MCL-SGD: stop once the mean set-loss of a
/// window improves on the previous window by less than `min_improvement`
/// (relative) `patience` times in a row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub window: usize,
    pub min_improvement: f64,
    pub patience: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        Self { window: 500, min_improvement: 0.001, patience: 2 }
    }
}

#[derive(Debug, Clone, Default)]
struct StopState {
    sum: f64,
    count: usize,
    prev: Option<f64>,
    strikes: usize,
}

impl StopState {
    fn observe(&mut self, rule: &StopRule, loss: f64) -> bool {
        self.sum += loss;
        self.count += 1;
        if self.count < rule.window {
            return false;
        }
        let mean = self.sum / self.count as f64;
        self.sum = 0.0;
        self.count = 0;
        if let Some(prev) = self.prev {
            if (prev - mean) < rule.min_improvement * prev.abs() {
                self.strikes += 1;
            } else {
                self.strikes = 0;
            }
        }
        self.prev = Some(mean);
        self.strikes >= rule.patience
    }
}

/// Which examples each graph trains on.
#[derive(Debug, Clone, PartialEq)]
pub enum Feed {
    /// All graphs see the same batches; the loss couples their members.
    Shared(Vec<usize>),
    /// Graph `i` draws its own batches from list `i`. Each graph's members
    /// are trained with independent cross-entropy.
    PerGraph(Vec<Vec<usize>>),
}

impl Feed {
    pub fn all(n: usize) -> Self {
        Self::Shared((0..n).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub sgd: SgdConfig,
    /// Overrides the loss declared by the graphs' specs.
    pub loss: Option<LossConfig>,
    pub data_seed: u64,
    pub tiebreak_seed: u64,
    /// Log a history record every this many updates (and after the last).
    pub log_every: usize,
    pub stop_rule: Option<StopRule>,
    /// Ensemble size used for learning-rate scaling; defaults to the number
    /// of members the local graphs hold.
    pub ensemble_size: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            loss: None,
            data_seed: 0,
            tiebreak_seed: 0,
            log_every: 100,
            stop_rule: None,
            ensemble_size: None,
            checkpoint_dir: None,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub mode: LossMode,
    pub k: Option<usize>,
    pub member_losses: Vec<f64>,
    /// Payload bytes this rank has sent so far.
    pub comm_bytes: u64,
    /// Examples won per member in the last batch (MCL modes).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wins: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<HistoryRecord>,
    /// Training loss of every update (root only in distributed runs).
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub stopped_early: bool,
    /// Examples clamped by the probability-averaged loss.
    pub clamped: usize,
    /// Updates in which some member won no example.
    pub empty_assignment_updates: usize,
    #[serde(skip)]
    pub last_assignment: Option<AssignmentMatrix>,
}

/// Optimizer state over a set of graphs.
pub struct Trainer {
    pub graphs: Vec<CompiledGraph>,
    velocity: Vec<Vec<Tensor>>,
    streams: Vec<BatchStream>,
    shared: bool,
    opts: TrainOptions,
    loss: LossConfig,
    scheduler: LrScheduler,
    stop: StopState,
    batch_counter: u64,
    pub t: usize,
}

impl Trainer {
    pub fn new(graphs: Vec<CompiledGraph>, feed: Feed, opts: TrainOptions) -> Result<Self> {
        opts.sgd.validate()?;
        if graphs.is_empty() {
            return Err(Error::InvalidArgument("no graphs to train".into()));
        }
        let loss = match opts.loss {
            Some(l) => l,
            None => {
                let first = graphs[0].loss_config();
                if graphs.iter().any(|g| g.num_members() > 0 && g.loss_config() != first) {
                    return Err(Error::InvalidArgument("graphs declare different losses".into()));
                }
                first
            }
        };
        let (streams, shared) = match feed {
            Feed::Shared(idx) => (vec![BatchStream::new(idx, opts.sgd.batch_size, opts.data_seed)?], true),
            Feed::PerGraph(lists) => {
                if lists.len() != graphs.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} index lists for {} graphs",
                        lists.len(),
                        graphs.len()
                    )));
                }
                if loss.mode != LossMode::IndependentCe {
                    return Err(Error::InvalidArgument(format!(
                        "per-graph data requires independent cross-entropy, not {}",
                        loss.mode
                    )));
                }
                let streams = lists
                    .into_iter()
                    .enumerate()
                    .map(|(i, l)| BatchStream::new(l, opts.sgd.batch_size, crate::graph::member_seed(opts.data_seed, i)))
                    .collect::<Result<_>>()?;
                (streams, false)
            }
        };
        let members: usize = graphs.iter().map(CompiledGraph::num_members).sum();
        if loss.mode.uses_assignment() && members > 0 && !(1..=members).contains(&loss.k) {
            return Err(Error::InvalidArgument(format!("k = {} outside [1, {members}]", loss.k)));
        }
        let velocity = graphs.iter().map(|g| g.params().iter().map(|p| Tensor::zeros(p.shape())).collect()).collect();
        let scheduler = LrScheduler::new(opts.sgd.lr, opts.sgd.schedule.clone());
        Ok(Self {
            graphs,
            velocity,
            streams,
            shared,
            opts,
            loss,
            scheduler,
            stop: StopState::default(),
            batch_counter: 0,
            t: 0,
        })
    }

    pub fn loss_config(&self) -> LossConfig {
        self.loss
    }

    pub fn options(&self) -> &TrainOptions {
        &self.opts
    }

    fn ensemble_size(&self) -> usize {
        self.opts.ensemble_size.unwrap_or_else(|| self.graphs.iter().map(CompiledGraph::num_members).sum())
    }

    /// Learning rate of the next update, including ensemble scaling.
    pub fn current_lr(&self) -> f64 {
        let scale = if self.opts.sgd.lr_ensemble_scale && self.loss.mode.is_averaged() {
            self.ensemble_size() as f64
        } else {
            1.0
        };
        self.scheduler.rate() * scale
    }

    /// Velocity buffers, graph by graph, in parameter order.
    pub fn velocity(&self) -> &[Vec<Tensor>] {
        &self.velocity
    }

    /// One update without communication.
    pub fn step(&mut self, data: &Dataset, report: &mut TrainReport) -> Result<bool> {
        self.step_with(data, &mut LocalCollectives, report)
    }

    /// One parameter update (`accumulation_steps` batches). Returns `true`
    /// when the stop rule fires.
    pub fn step_with(&mut self, data: &Dataset, comm: &mut dyn Collectives, report: &mut TrainReport) -> Result<bool> {
        let accum = self.opts.sgd.accumulation_steps;
        self.graphs.iter_mut().for_each(CompiledGraph::zero_grads);
        let mut loss_sum = 0.0;
        let mut member_sum: Vec<f64> = Vec::new();
        let mut wins = None;
        let mut has_loss = false;
        for _ in 0..accum {
            let t = self.t;
            let out = self.batch_pass(data, comm).map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged(format!("{what} at update {t}")),
                e => e,
            })?;
            if let Some(out) = out {
                has_loss = true;
                loss_sum += out.loss;
                if member_sum.is_empty() {
                    member_sum = vec![0.0; out.member_losses.len()];
                }
                member_sum.iter_mut().zip(&out.member_losses).for_each(|(a, b)| *a += b);
                report.clamped += out.clamped;
                if let Some(a) = out.assignment {
                    let w: Vec<usize> = (0..a.members()).map(|m| a.wins(m)).collect();
                    if w.contains(&0) {
                        report.empty_assignment_updates += 1;
                    }
                    wins = Some(w);
                    report.last_assignment = Some(a);
                }
            }
        }
        let lr = self.current_lr();
        let inv = 1.0 / accum as f64;
        for (g, vel) in self.graphs.iter_mut().zip(&mut self.velocity) {
            for ((name, p, grad), v) in g.params_and_grads_mut().zip(vel.iter_mut()) {
                if accum > 1 {
                    grad.scale(inv);
                }
                sgd_step(p, grad, v, lr, &self.opts.sgd)?;
                if p.data().iter().any(|x| !x.is_finite()) {
                    return Err(Error::Diverged(format!("non-finite parameters in `{name}` at update {}", self.t)));
                }
            }
        }
        let loss = loss_sum * inv;
        member_sum.iter_mut().for_each(|v| *v *= inv);
        if has_loss && !loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at update {}", self.t)));
        }
        self.t += 1;
        let mut stop = false;
        self.scheduler.observe(if has_loss { loss } else { 0.0 });
        if has_loss {
            report.losses.push(loss);
            if let Some(rule) = self.opts.stop_rule {
                stop = self.stop.observe(&rule, loss);
            }
        }
        let last = self.t == self.opts.sgd.iterations || stop;
        if has_loss && (last || (self.opts.log_every > 0 && self.t % self.opts.log_every == 0)) {
            let record = HistoryRecord {
                iter: self.t,
                loss,
                lr,
                mode: self.loss.mode,
                k: self.loss.mode.uses_assignment().then_some(self.loss.k),
                member_losses: member_sum,
                comm_bytes: comm.bytes_sent(),
                wins,
            };
            log::debug!("iter {} loss {:.6} lr {:.3e}", record.iter, record.loss, record.lr);
            report.history.push(record);
        }
        if let Some(dir) = &self.opts.checkpoint_dir {
            if self.opts.checkpoint_every > 0 && (self.t % self.opts.checkpoint_every == 0 || last) {
                std::fs::create_dir_all(dir)?;
                for (i, g) in self.graphs.iter().enumerate() {
                    g.save_checkpoint(&dir.join(format!("graph{i}-iter{}.ckpt", self.t)))?;
                }
            }
        }
        report.iterations = self.t;
        Ok(stop)
    }

    fn tiebreak_rng(&mut self) -> ChaCha8Rng {
        let c = self.batch_counter;
        self.batch_counter += 1;
        ChaCha8Rng::seed_from_u64(self.opts.tiebreak_seed ^ c.wrapping_mul(0xA076_1D64_78BD_642F))
    }

    fn batch_pass(&mut self, data: &Dataset, comm: &mut dyn Collectives) -> Result<Option<PassOutput>> {
        if self.shared {
            let idx = self.streams[0].next_batch();
            let (x, y) = data.gather(&idx)?;
            let feeds = [x];
            let mut scores = Vec::new();
            for g in &mut self.graphs {
                let f = if g.num_inputs() == 0 { &[][..] } else { &feeds[..] };
                scores.extend(g.forward_with(f, comm)?.scores);
            }
            let mut rng = self.tiebreak_rng();
            let out = if scores.is_empty() { None } else { Some(self.loss.evaluate(&scores, &y, &mut rng)?) };
            let mut offset = 0;
            for g in &mut self.graphs {
                let n = g.num_members();
                let grads = out.as_ref().map_or(&[][..], |o| &o.grads[offset..offset + n]);
                g.backward_with(grads, comm)?;
                offset += n;
            }
            Ok(out.map(|o| PassOutput {
                loss: o.loss,
                member_losses: o.member_losses,
                clamped: o.diagnostics.clamped,
                assignment: o.assignment,
            }))
        } else {
            let mut total = PassOutput::default();
            for (g, stream) in self.graphs.iter_mut().zip(&mut self.streams) {
                let (x, y) = data.gather(&stream.next_batch())?;
                let o = g.forward_with(&[x], comm)?;
                let out = crate::losses::independent_ce_loss(&o.scores, &y)?;
                g.backward_with(&out.grads, comm)?;
                total.loss += out.loss;
                total.member_losses.extend(out.member_losses);
            }
            self.batch_counter += 1;
            Ok(Some(total))
        }
    }

    /// Runs updates until the iteration budget or the stop rule.
    pub fn run(&mut self, data: &Dataset) -> Result<TrainReport> {
        self.run_with(data, &mut LocalCollectives)
    }

    pub fn run_with(&mut self, data: &Dataset, comm: &mut dyn Collectives) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        while self.t < self.opts.sgd.iterations {
            if self.step_with(data, comm, &mut report)? {
                report.stopped_early = true;
                break;
            }
        }
        Ok(report)
    }
}

#[derive(Debug, Default)]
struct PassOutput {
    loss: f64,
    member_losses: Vec<f64>,
    clamped: usize,
    assignment: Option<AssignmentMatrix>,
}

/// Trains graphs under the loss their specs declare (independent, score- or
/// probability-averaged); TreeNet shared layers accumulate every branch's
/// gradient inside the graph.
pub fn train_independent(graphs: Vec<CompiledGraph>, data: &Dataset, feed: Feed, opts: TrainOptions) -> Result<(Trainer, TrainReport)> {
    let mut t = Trainer::new(graphs, feed, opts)?;
    let report = t.run(data)?;
    Ok((t, report))
}

/// MCL-SGD: each batch is assigned to its `k` lowest-loss members, which
/// alone receive its gradient.
pub fn train_mcl_sgd(
    graphs: Vec<CompiledGraph>,
    data: &Dataset,
    indices: Vec<usize>,
    k: usize,
    mut opts: TrainOptions,
) -> Result<(Trainer, TrainReport)> {
    let base = opts.loss.unwrap_or_else(|| graphs[0].loss_config());
    let mode = if base.mode == LossMode::MclPlusCe { LossMode::MclPlusCe } else { LossMode::Mcl };
    opts.loss = Some(LossConfig { mode, k, ..base });
    let mut t = Trainer::new(graphs, Feed::Shared(indices), opts)?;
    let report = t.run(data)?;
    Ok((t, report))
}

/// Maps the records of a single network onto every replica `<layer>@<m>`.
pub fn replicate_records(records: &[CheckpointRecord], members: usize) -> Vec<CheckpointRecord> {
    (0..members)
        .flat_map(|m| {
            records.iter().map(move |r| CheckpointRecord { layer: format!("{}@{m}", r.layer), ..r.clone() })
        })
        .collect()
}

/// Loads `records` into `graphs` (one list per graph) and trains them from
/// zero velocity under `loss`.
pub fn finetune(
    mut graphs: Vec<CompiledGraph>,
    records: &[Vec<CheckpointRecord>],
    loss: LossConfig,
    data: &Dataset,
    feed: Feed,
    mut opts: TrainOptions,
) -> Result<(Trainer, TrainReport)> {
    if records.len() != graphs.len() {
        return Err(Error::InvalidArgument(format!("{} checkpoints for {} graphs", records.len(), graphs.len())));
    }
    for (g, r) in graphs.iter_mut().zip(records) {
        g.load_records(r)?;
    }
    opts.loss = Some(loss);
    let mut t = Trainer::new(graphs, feed, opts)?;
    let report = t.run(data)?;
    Ok((t, report))
}

#[cfg(test)]
mod tests;
