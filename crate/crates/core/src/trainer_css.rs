//! Continual semantic segmentation on synthetic scenes.
//!
//! Per batch the loss is `ce_css + α·kd_css + β·SD`, where SD averages the
//! group-wise subspace distance over every tapped conv layer and every
//! sample in the batch.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{SegSample, SegTask, BG};
use crate::distill::{self, BgMode, LossError, SDConfig, TensorRole};
use crate::linalg::Matrix;
use crate::nn::{self, Network, NnError, Snapshot, Tensor};

#[derive(Debug, Error)]
pub enum CssError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("tap {layer} shape differs between models: {new:?} vs {old:?}")]
    TapDrift {
        layer: usize,
        new: nn::Shape,
        old: nn::Shape,
    },
    /// `partial` holds the metrics of the tasks completed before the failure.
    #[error("non-finite loss at task {task}, step {step}")]
    NonFinite {
        task: usize,
        step: usize,
        partial: Vec<CssMetrics>,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub type Result<T> = std::result::Result<T, CssError>;

fn default_sd() -> SDConfig {
    SDConfig::default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CssConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "CssConfig::default_batch")]
    pub batch_size: usize,
    #[serde(default = "CssConfig::default_epochs")]
    pub epochs_per_task: usize,
    #[serde(default = "default_sd")]
    pub sd: SDConfig,
    #[serde(default)]
    pub bg_mode: BgMode,
    #[serde(default = "CssConfig::default_channels")]
    pub channels: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl CssConfig {
    fn default_batch() -> usize {
        8
    }

    fn default_epochs() -> usize {
        1
    }

    fn default_channels() -> Vec<usize> {
        vec![8, 16, 16]
    }

    /// α = 10, β = 0.01 with the optimizer settings the from-scratch toy
    /// network on 16×16 scenes needs.
    pub fn toy_preset(seed: u64) -> Self {
        Self {
            lr: 0.02,
            momentum: 0.9,
            alpha: 10.0,
            beta: 0.01,
            batch_size: 8,
            epochs_per_task: 40,
            sd: SDConfig::default(),
            bg_mode: BgMode::BgInclusive,
            channels: Self::default_channels(),
            seed,
        }
    }

    /// Same schedule with both distillation weights at zero.
    pub fn fine_tune(seed: u64) -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            ..Self::toy_preset(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CssError::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} not in [0, 1)", self.momentum));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if self.batch_size == 0 || self.epochs_per_task == 0 {
            return bad("batch_size and epochs_per_task must be at least 1".into());
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be nonempty and positive".into());
        }
        self.sd.validate().map_err(|e| CssError::Config(e.to_string()))
    }
}

/// Pixel counts `counts[true][pred]` over class ids `0..n` (0 is bg).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn from_counts(n: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), n * n);
        Self { n, counts }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.n + pred] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn fp(&self, c: usize) -> u64 {
        (0..self.n).filter(|&t| t != c).map(|t| self.get(t, c)).sum()
    }

    pub fn fn_(&self, c: usize) -> u64 {
        (0..self.n).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `None` for classes never present nor predicted.
    pub per_class: Vec<(usize, Option<f64>)>,
    pub mean: f64,
}

/// `TP/(TP + FP + FN)` per class of `classes`, averaged over classes with
/// a nonzero denominator.
pub fn iou(conf: &ConfusionMatrix, classes: &[usize]) -> IouReport {
    let per_class: Vec<(usize, Option<f64>)> = classes
        .iter()
        .map(|&c| {
            let tp = conf.tp(c);
            let den = tp + conf.fp(c) + conf.fn_(c);
            (c, (den > 0).then(|| tp as f64 / den as f64))
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().filter_map(|(_, v)| *v).collect();
    let mean = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    IouReport { per_class, mean }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CssStepLog {
    pub task: usize,
    pub step: usize,
    pub ce: f64,
    pub kd: f64,
    pub sd: f64,
    pub total: f64,
}

/// mIoU after each task on that task's test scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CssMetrics {
    pub task: usize,
    /// Background plus the first task's classes.
    pub base: f64,
    /// Classes introduced after the first task; `None` after task 1.
    pub novel: Option<f64>,
    pub all: f64,
    pub wall_time: f64,
}

fn scene_tensor(samples: &[&SegSample], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * size * size * 3);
    for s in samples {
        data.extend_from_slice(s.image.as_slice());
    }
    let m = Matrix::from_vec(samples.len() * size * size, 3, data).map_err(NnError::from)?;
    Ok(Tensor::maps(m, size, size)?)
}

pub struct CssLearner {
    pub cfg: CssConfig,
    pub net: Network,
    pub old: Option<Snapshot>,
    pub size: usize,
    rng: ChaCha8Rng,
    pub logs: Vec<CssStepLog>,
}

impl CssLearner {
    pub fn new(cfg: CssConfig, size: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut net = Network::seg_convnet(size, size, 3, &cfg.channels, &mut rng);
        net.set_momentum(cfg.momentum);
        Ok(Self {
            cfg,
            net,
            old: None,
            size,
            rng,
            logs: Vec::new(),
        })
    }

    pub fn train_task(&mut self, t: usize, task: &SegTask) -> Result<()> {
        self.net.expand_head(&task.classes)?;
        let n_old = self.net.classes().len() - task.classes.len();
        let mut step = 0;
        for _ in 0..self.cfg.epochs_per_task {
            let mut order: Vec<usize> = (0..task.train.len()).collect();
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<&SegSample> = chunk.iter().map(|&i| &task.train[i]).collect();
                let log = self.step(t, step, &batch, n_old)?;
                if !log.total.is_finite() {
                    return Err(CssError::NonFinite {
                        task: t,
                        step,
                        partial: Vec::new(),
                    });
                }
                self.logs.push(log);
                step += 1;
            }
        }
        self.old = Some(self.net.snapshot());
        Ok(())
    }

    fn step(&mut self, t: usize, step: usize, batch: &[&SegSample], n_old: usize) -> Result<CssStepLog> {
        let cfg = &self.cfg;
        let x = scene_tensor(batch, self.size)?;
        let mut labels = Vec::with_capacity(x.matrix().rows());
        for s in batch {
            for &l in &s.mask {
                labels.push(if l == BG { 0 } else { self.net.column_of(l)? });
            }
        }
        let out = self.net.forward(&x)?;
        let logits = out.logits.matrix();
        let ce = distill::ce_css(logits, &labels, n_old, cfg.bg_mode)?;
        let mut grad = ce.grad(TensorRole::Logits).expect("logit grad").clone();
        let mut log = CssStepLog {
            task: t,
            step,
            ce: ce.value,
            kd: 0.0,
            sd: 0.0,
            total: 0.0,
        };
        let mut tap_grads = Vec::new();
        if let Some(old) = &self.old {
            if cfg.alpha > 0.0 || cfg.beta > 0.0 {
                let old_out = old.infer(&x)?;
                if cfg.alpha > 0.0 {
                    let probs = distill::softmax_rows(old_out.logits.matrix());
                    let kd = distill::kd_css(logits, &probs, n_old, cfg.bg_mode)?;
                    log.kd = kd.value;
                    grad.axpy(cfg.alpha, kd.grad(TensorRole::Logits).expect("logit grad"))
                        .map_err(NnError::from)?;
                }
                if cfg.beta > 0.0 {
                    let (value, grads) = self.sd_term(&out.taps, &old_out.taps, batch.len())?;
                    log.sd = value;
                    tap_grads = grads;
                }
            }
        }
        log.total = log.ce + cfg.alpha * log.kd + cfg.beta * log.sd;
        self.net.backward(&grad, &tap_grads)?;
        self.net.sgd_step(cfg.lr);
        debug!("css task {t} step {step}: ce {:.4} kd {:.4} sd {:.4}", log.ce, log.kd, log.sd);
        Ok(log)
    }

    /// Mean of `sd_loss_css` over layers and samples, and the β-scaled
    /// gradient for every tap.
    fn sd_term(&self, new: &[Tensor], old: &[Tensor], b: usize) -> Result<(f64, Vec<(usize, Matrix)>)> {
        let taps = self.net.taps();
        let weight = 1.0 / (taps.len() * b) as f64;
        let mut value = 0.0;
        let mut grads = Vec::with_capacity(taps.len());
        for ((&layer, fn_), fo) in taps.iter().zip(new).zip(old) {
            if fn_.shape() != fo.shape() {
                return Err(CssError::TapDrift {
                    layer,
                    new: fn_.shape(),
                    old: fo.shape(),
                });
            }
            let shape = fn_.shape();
            let mut samples = Vec::with_capacity(b);
            for i in 0..b {
                let r = distill::sd_loss_css(&fn_.sample(i), &fo.sample(i), shape.h, shape.w, &self.cfg.sd)?;
                value += weight * r.value;
                let g = r
                    .grad(TensorRole::Features)
                    .map(|g| g.scale(weight * self.cfg.beta))
                    .unwrap_or_else(|| Matrix::zeros(shape.pixels(), shape.c));
                samples.push(g);
            }
            let stacked = Tensor::from_samples(&samples, shape.h, shape.w)?;
            grads.push((layer, stacked.into_matrix()));
        }
        Ok((value, grads))
    }

    /// Confusion matrix over class ids `0..=max_class` on `samples`.
    pub fn confusion(&self, samples: &[SegSample], max_class: usize) -> Result<ConfusionMatrix> {
        let mut conf = ConfusionMatrix::new(max_class + 1);
        let mut col_class = vec![BG; self.net.head_width()];
        for &c in self.net.classes() {
            col_class[self.net.column_of(c)?] = c;
        }
        for chunk in samples.chunks(16) {
            let refs: Vec<&SegSample> = chunk.iter().collect();
            let logits = self.net.infer(&scene_tensor(&refs, self.size)?)?.logits.into_matrix();
            let pred = nn::argmax_rows(&logits);
            let truth = chunk.iter().flat_map(|s| s.mask.iter().copied());
            for (p, y) in pred.into_iter().zip(truth) {
                conf.add(y, col_class[p]);
            }
        }
        Ok(conf)
    }
}

/// Trains over all tasks and reports mIoU groups after each.
pub fn run_css(tasks: &[SegTask], cfg: &CssConfig, size: usize) -> Result<(Vec<CssMetrics>, CssLearner)> {
    let mut learner = CssLearner::new(cfg.clone(), size)?;
    let max_class = tasks.iter().flat_map(|t| t.classes.iter().copied()).max().unwrap_or(0);
    let base: Vec<usize> = std::iter::once(BG)
        .chain(tasks.first().map(|t| t.classes.clone()).unwrap_or_default())
        .collect();
    let mut metrics = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        let start = Instant::now();
        match learner.train_task(t, task) {
            Err(CssError::NonFinite { task, step, .. }) => {
                return Err(CssError::NonFinite {
                    task,
                    step,
                    partial: metrics,
                })
            }
            r => r?,
        }
        let wall_time = start.elapsed().as_secs_f64();
        let conf = learner.confusion(&task.test, max_class)?;
        let novel: Vec<usize> = tasks[1..=t].iter().flat_map(|x| x.classes.iter().copied()).collect();
        let all: Vec<usize> = base.iter().chain(&novel).copied().collect();
        let m = CssMetrics {
            task: t,
            base: iou(&conf, &base).mean,
            novel: (!novel.is_empty()).then(|| iou(&conf, &novel).mean),
            all: iou(&conf, &all).mean,
            wall_time,
        };
        info!("css task {}: base {:.4} novel {:?} all {:.4}", t + 1, m.base, m.novel, m.all);
        metrics.push(m);
    }
    Ok((metrics, learner))
}
