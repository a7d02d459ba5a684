//! Class-incremental training with replay and subspace distillation.
//!
//! Each step minimizes
//! `CE(stream) + α·CE(memory) + β·SD(memory)` where the SD term compares
//! class-wise feature subspaces of the live model with those of the model
//! frozen at the end of the previous task. Memory terms start at the second
//! task.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, TaskStream};
use crate::distill::{self, LossError, SDConfig, TensorRole};
use crate::linalg::Matrix;
use crate::nn::{self, Network, NnError, Snapshot, Tensor};
use crate::replay::{ReplayBuffer, ReplayItem};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("task {0} has no training data")]
    EmptyTask(usize),
    #[error("non-finite loss at task {task}, step {step}")]
    NonFinite {
        task: usize,
        step: usize,
        partial: Box<MetricsRecord>,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sgd,
    Er,
    Der,
    Sd,
    DerPlusSd,
}

impl Method {
    fn uses_memory(self) -> bool {
        self != Method::Sgd
    }

    fn uses_sd(self) -> bool {
        matches!(self, Method::Sd | Method::DerPlusSd)
    }

    fn uses_der(self) -> bool {
        matches!(self, Method::Der | Method::DerPlusSd)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::Er => "er",
            Method::Der => "der",
            Method::Sd => "sd",
            Method::DerPlusSd => "der_plus_sd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    ClassIl,
    TaskIl,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::ClassIl => "class_il",
            EvalMode::TaskIl => "task_il",
        }
    }
}

fn default_sd() -> SDConfig {
    SDConfig::default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CLConfig {
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "CLConfig::default_batch")]
    pub stream_batch: usize,
    #[serde(default = "CLConfig::default_batch")]
    pub memory_batch: usize,
    #[serde(default = "CLConfig::default_epochs")]
    pub epochs_per_task: usize,
    pub buffer_capacity: usize,
    #[serde(default = "default_sd")]
    pub sd: SDConfig,
    #[serde(default)]
    pub seed: u64,
    pub method: Method,
    /// Weight of the stored-logit matching term for `der` and
    /// `der_plus_sd`.
    #[serde(default = "CLConfig::default_der_weight")]
    pub der_weight: f64,
    #[serde(default = "CLConfig::default_hidden")]
    pub hidden: Vec<usize>,
}

impl CLConfig {
    fn default_batch() -> usize {
        32
    }

    fn default_epochs() -> usize {
        1
    }

    fn default_der_weight() -> f64 {
        0.5
    }

    fn default_hidden() -> Vec<usize> {
        vec![100, 100]
    }

    /// MNIST settings for a buffer of 500: lr 0.1, α 1, β 0.1.
    pub fn mnist_buffer_500(method: Method, seed: u64) -> Self {
        Self {
            lr: 0.1,
            alpha: 1.0,
            beta: 0.1,
            stream_batch: 10,
            memory_batch: 32,
            epochs_per_task: 1,
            buffer_capacity: 500,
            sd: SDConfig::default(),
            seed,
            method,
            der_weight: Self::default_der_weight(),
            hidden: Self::default_hidden(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("der_weight", self.der_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if self.stream_batch == 0 || self.memory_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.epochs_per_task == 0 {
            return bad("epochs_per_task must be at least 1".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layers must be nonempty and positive".into());
        }
        self.sd.validate().map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// Accuracy matrices `acc[t][i]` (after task `t`, on task `i ≤ t`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub class_il: Vec<Vec<f64>>,
    pub task_il: Vec<Vec<f64>>,
    /// Seconds spent training each task.
    pub wall_time: Vec<f64>,
}

impl MetricsRecord {
    pub fn acc(&self, mode: EvalMode) -> &[Vec<f64>] {
        match mode {
            EvalMode::ClassIl => &self.class_il,
            EvalMode::TaskIl => &self.task_il,
        }
    }

    /// Mean of each row.
    pub fn avg_acc(&self, mode: EvalMode) -> Vec<f64> {
        self.acc(mode)
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect()
    }

    pub fn final_avg_acc(&self, mode: EvalMode) -> f64 {
        self.avg_acc(mode).last().copied().unwrap_or(0.0)
    }

    pub fn forgetting(&self, mode: EvalMode) -> f64 {
        forgetting(self.acc(mode))
    }
}

/// Mean over `i < T` of `max_j acc[j][i] − acc[T][i]`; zero with fewer
/// than two tasks.
pub fn forgetting(acc: &[Vec<f64>]) -> f64 {
    let Some(last) = acc.last() else {
        return 0.0;
    };
    let t = acc.len() - 1;
    if t == 0 {
        return 0.0;
    }
    let total: f64 = (0..t)
        .map(|i| {
            let best = acc[i..].iter().map(|row| row[i]).fold(f64::NEG_INFINITY, f64::max);
            best - last[i]
        })
        .sum();
    total / t as f64
}

/// Loss components of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub task: usize,
    pub step: usize,
    pub ce: f64,
    pub ce_memory: f64,
    pub sd: f64,
    pub der: f64,
    pub total: f64,
}

pub fn to_tensor(d: &Dataset, rows: &[usize]) -> Result<Tensor> {
    let s = d.shape;
    let f = d.inputs.cols();
    let mut data = Vec::with_capacity(rows.len() * f);
    for &r in rows {
        data.extend_from_slice(d.inputs.row(r));
    }
    items_tensor(s, data, rows.len())
}

fn items_tensor(s: nn::Shape, data: Vec<f64>, n: usize) -> Result<Tensor> {
    let m = Matrix::from_vec(n * s.pixels(), s.c, data).map_err(NnError::from)?;
    if s.pixels() == 1 {
        Ok(Tensor::flat(m))
    } else {
        Ok(Tensor::maps(m, s.h, s.w)?)
    }
}

/// Accuracy on each of `tasks`. In class-IL the argmax runs over the
/// classes of all `tasks`; in task-IL over the evaluated task's classes.
pub fn evaluate(net: &Network, tasks: &[crate::data::Task], mode: EvalMode) -> Result<Vec<f64>> {
    let seen: Vec<usize> = tasks.iter().flat_map(|t| t.classes.iter().copied()).collect();
    let seen_cols = net.columns_of(&seen)?;
    let mut out = Vec::with_capacity(tasks.len());
    for task in tasks {
        let cols = match mode {
            EvalMode::ClassIl => seen_cols.clone(),
            EvalMode::TaskIl => net.columns_of(&task.classes)?,
        };
        let n = task.test.len();
        let mut right = 0usize;
        for start in (0..n).step_by(1000) {
            let idx: Vec<usize> = (start..(start + 1000).min(n)).collect();
            let logits = net.infer(&to_tensor(&task.test, &idx)?)?.logits.into_matrix();
            let pred = nn::argmax_rows(&nn::mask_logits(&logits, &cols));
            for (k, &i) in idx.iter().enumerate() {
                right += usize::from(pred[k] == net.column_of(task.test.labels[i])?);
            }
        }
        out.push(if n == 0 { 0.0 } else { right as f64 / n as f64 });
    }
    Ok(out)
}

/// Mutable state carried across tasks.
pub struct Learner {
    pub cfg: CLConfig,
    pub net: Network,
    pub old: Option<Snapshot>,
    pub buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    pub logs: Vec<StepLog>,
}

impl Learner {
    pub fn new(cfg: CLConfig, input: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = Network::mlp(input, &cfg.hidden, &mut rng);
        Ok(Self::with_network(cfg, net, rng))
    }

    pub fn with_network(cfg: CLConfig, net: Network, rng: ChaCha8Rng) -> Self {
        let buffer = ReplayBuffer::new(cfg.buffer_capacity, cfg.seed ^ 0x5eed_b0ff);
        Self {
            cfg,
            net,
            old: None,
            buffer,
            rng,
            logs: Vec::new(),
        }
    }

    /// Trains on task `t` (0-based): expands the head, runs the epochs, and
    /// freezes a snapshot for the next task.
    pub fn train_task(&mut self, t: usize, task: &crate::data::Task) -> Result<()> {
        if task.train.is_empty() {
            return Err(TrainError::EmptyTask(t));
        }
        self.net.expand_head(&task.classes)?;
        let cfg = self.cfg.clone();
        let tap = *self.net.taps().last().ok_or(NnError::UnknownTap(0))?;
        let use_memory = cfg.method.uses_memory() && t > 0;
        let mut step = 0;
        for _epoch in 0..cfg.epochs_per_task {
            let mut order: Vec<usize> = (0..task.train.len()).collect();
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(cfg.stream_batch) {
                let log = self.step(t, step, task, chunk, tap, use_memory)?;
                if !log.total.is_finite() {
                    return Err(TrainError::NonFinite {
                        task: t,
                        step,
                        partial: Box::default(),
                    });
                }
                self.logs.push(log);
                step += 1;
            }
        }
        self.old = Some(self.net.snapshot());
        Ok(())
    }

    fn step(
        &mut self,
        t: usize,
        step: usize,
        task: &crate::data::Task,
        chunk: &[usize],
        tap: usize,
        use_memory: bool,
    ) -> Result<StepLog> {
        let cfg = &self.cfg;
        let bs = chunk.len();
        let stream_x = to_tensor(&task.train, chunk)?;
        let stream_cols: Vec<usize> = chunk
            .iter()
            .map(|&i| self.net.column_of(task.train.labels[i]))
            .collect::<std::result::Result<_, _>>()?;

        let mem_idx = if use_memory && !self.buffer.is_empty() {
            self.buffer.sample_indices(cfg.memory_batch, &mut self.rng).unwrap_or_default()
        } else {
            Vec::new()
        };
        let bm = mem_idx.len();
        let shape = self.net.input_shape();
        let x = if bm > 0 {
            let mut data = Vec::with_capacity(bm * shape.numel());
            for &i in &mem_idx {
                data.extend_from_slice(&self.buffer.items()[i].input);
            }
            stream_x.concat(&items_tensor(shape, data, bm)?)?
        } else {
            stream_x
        };

        let out = self.net.forward(&x)?;
        let logits = out.logits.matrix();
        let k = logits.cols();
        let mut grad = Matrix::zeros(bs + bm, k);

        let ce = distill::cross_entropy(&logits.row_range(0, bs), &stream_cols)?;
        copy_rows(&mut grad, 0, ce.grad(TensorRole::Logits).expect("logit grad"), 1.0);

        let mut log = StepLog {
            task: t,
            step,
            ce: ce.value,
            ce_memory: 0.0,
            sd: 0.0,
            der: 0.0,
            total: 0.0,
        };
        let mut tap_grads = Vec::new();
        if bm > 0 {
            let mem_logits = logits.row_range(bs, bs + bm);
            let mem_cols: Vec<usize> = mem_idx
                .iter()
                .map(|&i| self.net.column_of(self.buffer.items()[i].label))
                .collect::<std::result::Result<_, _>>()?;
            let ce_m = distill::cross_entropy(&mem_logits, &mem_cols)?;
            log.ce_memory = ce_m.value;
            copy_rows(&mut grad, bs, ce_m.grad(TensorRole::Logits).expect("logit grad"), cfg.alpha);

            if cfg.method.uses_sd() && cfg.beta > 0.0 {
                if let Some(old) = &self.old {
                    let mem_x = x.select(&(bs..bs + bm).collect::<Vec<_>>());
                    let old_out = old.infer(&mem_x)?;
                    let old_feat = old_out.tap(old.network().taps(), tap).expect("old tap").columns();
                    let new_feat = out.tap(self.net.taps(), tap).expect("tap").columns();
                    let new_mem = new_feat.column_range(bs, bs + bm);
                    let labels: Vec<usize> = mem_idx.iter().map(|&i| self.buffer.items()[i].label).collect();
                    let sd = distill::sd_loss_cl(&new_mem, &old_feat, &labels, &cfg.sd)?;
                    log.sd = sd.value;
                    if let Some(g) = sd.grad(TensorRole::Features) {
                        let mut tg = Matrix::zeros(bs + bm, g.rows());
                        let gt = g.transpose();
                        copy_rows(&mut tg, bs, &gt, cfg.beta);
                        tap_grads.push((tap, tg));
                    }
                }
            }

            if cfg.method.uses_der() && cfg.der_weight > 0.0 {
                log.der = self.der_term(&mem_idx, &mem_logits, bs, &mut grad)?;
            }
        }
        log.total = log.ce + cfg.alpha * log.ce_memory + cfg.beta * log.sd + cfg.der_weight * log.der;

        self.net.backward(&grad, &tap_grads)?;
        self.net.sgd_step(cfg.lr);

        let store_logits = cfg.method.uses_der();
        for (r, &i) in chunk.iter().enumerate() {
            self.buffer.reservoir_insert(ReplayItem {
                input: task.train.inputs.row(i).to_vec(),
                label: task.train.labels[i],
                logits: store_logits.then(|| logits.row(r).to_vec()),
            });
        }
        debug!(
            "task {t} step {step}: ce {:.4} ce_mem {:.4} sd {:.4} der {:.4}",
            log.ce, log.ce_memory, log.sd, log.der
        );
        Ok(log)
    }

    /// Mean squared error against stored logits over all memory entries;
    /// each row only covers the head width it was stored with.
    fn der_term(&self, mem_idx: &[usize], mem_logits: &Matrix, bs: usize, grad: &mut Matrix) -> Result<f64> {
        let w = self.cfg.der_weight;
        let mut by_width: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (r, &i) in mem_idx.iter().enumerate() {
            let width = self.buffer.items()[i].logits.as_ref().map_or(0, Vec::len);
            if width > 0 {
                by_width.entry(width).or_default().push(r);
            }
        }
        let total_rows: usize = by_width.values().map(Vec::len).sum();
        let mut value = 0.0;
        for (width, rows) in by_width {
            let cur = Matrix::from_fn(rows.len(), width, |a, b| mem_logits[(rows[a], b)]);
            let stored = Matrix::from_fn(rows.len(), width, |a, b| {
                self.buffer.items()[mem_idx[rows[a]]].logits.as_ref().expect("stored")[b]
            });
            let part = distill::der_logit_loss(&cur, &stored)?;
            let share = rows.len() as f64 / total_rows as f64;
            value += share * part.value;
            let g = part.grad(TensorRole::Logits).expect("logit grad");
            for (a, &r) in rows.iter().enumerate() {
                for b in 0..width {
                    grad[(bs + r, b)] += w * share * g[(a, b)];
                }
            }
        }
        Ok(value)
    }
}

fn copy_rows(dst: &mut Matrix, start: usize, src: &Matrix, scale: f64) {
    for r in 0..src.rows() {
        for (d, s) in dst.row_mut(start + r).iter_mut().zip(src.row(r)) {
            *d += scale * s;
        }
    }
}

/// Result of a full run over a task stream.
pub struct ClRun {
    pub metrics: MetricsRecord,
    pub logs: Vec<StepLog>,
    pub net: Network,
}

/// Trains on every task in order, evaluating both modes after each one.
pub fn run_cl(stream: &TaskStream, cfg: &CLConfig) -> Result<ClRun> {
    let input = stream
        .tasks
        .first()
        .map(|t| t.train.shape.numel())
        .ok_or_else(|| TrainError::Config("empty task stream".into()))?;
    let mut learner = Learner::new(cfg.clone(), input)?;
    let mut metrics = MetricsRecord::default();
    for (t, task) in stream.tasks.iter().enumerate() {
        let start = Instant::now();
        match learner.train_task(t, task) {
            Ok(()) => {}
            Err(TrainError::NonFinite { task, step, .. }) => {
                return Err(TrainError::NonFinite {
                    task,
                    step,
                    partial: Box::new(metrics),
                })
            }
            Err(e) => return Err(e),
        }
        metrics.wall_time.push(start.elapsed().as_secs_f64());
        let seen = &stream.tasks[..=t];
        metrics.class_il.push(evaluate(&learner.net, seen, EvalMode::ClassIl)?);
        metrics.task_il.push(evaluate(&learner.net, seen, EvalMode::TaskIl)?);
        info!(
            "{} task {}: class-IL {:.4} task-IL {:.4}",
            cfg.method.name(),
            t + 1,
            metrics.class_il[t].iter().sum::<f64>() / (t + 1) as f64,
            metrics.task_il[t].iter().sum::<f64>() / (t + 1) as f64
        );
    }
    Ok(ClRun {
        metrics,
        logs: learner.logs,
        net: learner.net,
    })
}
