//! Distillation and classification losses with closed-form gradients.
//!
//! Logit matrices are `rows×classes` (a row is a sample or a pixel). The
//! segmentation losses assume the head layout `[bg, old…, current…]`, which
//! is how [`crate::nn::Network`] orders its columns, and take labels as
//! column indices.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::grassmann::{self, GrassmannError};
use crate::linalg::{self, LinalgError, Matrix};
use crate::svd_backprop::{self, BackpropError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("{what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("teacher row {row} sums to {sum}, not 1")]
    NotNormalized { row: usize, sum: f64 },
    #[error("pixel {pixel} has label column {label}, outside {{bg}} and the current classes")]
    IllegalLabel { pixel: usize, label: usize },
    #[error("{h}x{w} maps give d = {d} < m = {m}")]
    Dimension { h: usize, w: usize, d: usize, m: usize },
    #[error(transparent)]
    Grassmann(#[from] GrassmannError),
    #[error(transparent)]
    Backprop(#[from] BackpropError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TensorRole {
    Logits,
    Features,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// `(class or group, squared distance, subspace dim used)`.
    pub distances: Vec<(usize, f64, usize)>,
    /// Near-equal singular value pairs clamped in K plus degenerate
    /// truncations.
    pub degenerate: usize,
    /// Classes or groups left out (too few samples or rank zero).
    pub skipped: usize,
    /// Set when nothing qualified and the loss is identically zero.
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grads: BTreeMap<TensorRole, Matrix>,
    pub diagnostics: Diagnostics,
}

impl LossResult {
    fn single(value: f64, role: TensorRole, grad: Matrix) -> Self {
        Self {
            value,
            grads: BTreeMap::from([(role, grad)]),
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn grad(&self, role: TensorRole) -> Option<&Matrix> {
        self.grads.get(&role)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SDConfig {
    /// Subspace dimension.
    pub m: usize,
    /// Channels per group for feature maps.
    pub group_size: usize,
    /// Threshold on `|σᵢ² − σⱼ²|`; `None` uses `1e-8·max(1, σ₀²)` per SVD.
    pub eps: Option<f64>,
    pub min_samples_per_class: usize,
    /// Singular values below `rank_tol·σ₀` count as zero; `m` is clipped to
    /// the numerical rank of both feature matrices.
    pub rank_tol: f64,
}

impl Default for SDConfig {
    fn default() -> Self {
        Self {
            m: 5,
            group_size: 32,
            eps: None,
            min_samples_per_class: 2,
            rank_tol: 1e-6,
        }
    }
}

impl SDConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(LossError::Config("m must be at least 1".into()));
        }
        if self.group_size < self.m {
            return Err(LossError::Config(format!(
                "group_size {} is smaller than m {}",
                self.group_size, self.m
            )));
        }
        if !(self.rank_tol >= 0.0 && self.rank_tol < 1.0) {
            return Err(LossError::Config(format!("rank_tol {} not in [0, 1)", self.rank_tol)));
        }
        if let Some(eps) = self.eps {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(LossError::Config(format!("eps {eps} must be positive")));
            }
        }
        Ok(())
    }
}

struct PairTerm {
    value: f64,
    grad: Matrix,
    m: usize,
    degenerate: usize,
}

/// Distance between the top subspaces of `f_new` and `f_old` (both d×n)
/// and its gradient in `f_new`. `None` when the usable rank is zero.
fn subspace_pair(f_new: &Matrix, f_old: &Matrix, m_max: usize, cfg: &SDConfig) -> Result<Option<PairTerm>> {
    let svd_new = linalg::thin_svd(f_new)?;
    let svd_old = linalg::thin_svd(f_old)?;
    let eps = cfg.eps.unwrap_or_else(|| svd_backprop::default_eps(&svd_new.s));
    let usable = |s: &[f64]| {
        let floor = (cfg.rank_tol * s.first().copied().unwrap_or(0.0)).max(eps);
        s.iter().take_while(|&&v| v > floor).count()
    };
    let m = m_max.min(usable(&svd_new.s)).min(usable(&svd_old.s));
    if m == 0 {
        return Ok(None);
    }
    let new = grassmann::truncate(svd_new, m)?;
    let old = grassmann::truncate(svd_old, m)?;
    let value = grassmann::projection_distance_sq(&new.subspace, &old.subspace)?;
    let g_basis = grassmann::grad_wrt_basis(&new.subspace, &old.subspace)?;
    let vjp = svd_backprop::svd_vjp(f_new, &new.svd, &g_basis, m, eps)?;
    Ok(Some(PairTerm {
        value,
        grad: vjp.grad,
        m,
        degenerate: vjp.degenerate_pairs + usize::from(new.degenerate),
    }))
}

fn same_shape(what: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LossError::Shape {
            what,
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    Ok(())
}

/// Class-wise subspace distillation on d×b feature columns.
///
/// Classes with fewer than `max(2, min_samples_per_class)` columns are
/// skipped; the value is the mean distance over the remaining classes and
/// only `feats_new` receives gradient.
pub fn sd_loss_cl(feats_new: &Matrix, feats_old: &Matrix, labels: &[usize], cfg: &SDConfig) -> Result<LossResult> {
    cfg.validate()?;
    same_shape("old features", feats_new, feats_old)?;
    let (d, b) = feats_new.shape();
    if labels.len() != b {
        return Err(LossError::Shape {
            what: "labels",
            expected: b.to_string(),
            got: labels.len().to_string(),
        });
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let min_count = cfg.min_samples_per_class.max(2);
    let mut diag = Diagnostics::default();
    let mut terms = Vec::new();
    for (&class, cols) in &by_class {
        if cols.len() < min_count {
            diag.skipped += 1;
            continue;
        }
        let f_new = feats_new.select_columns(cols);
        let f_old = feats_old.select_columns(cols);
        match subspace_pair(&f_new, &f_old, cfg.m.min(cols.len()).min(d), cfg)? {
            Some(t) => terms.push((class, cols, t)),
            None => diag.skipped += 1,
        }
    }
    let mut grad = Matrix::zeros(d, b);
    if terms.is_empty() {
        diag.empty = true;
        return Ok(LossResult {
            value: 0.0,
            grads: BTreeMap::new(),
            diagnostics: diag,
        });
    }
    let n = terms.len() as f64;
    let mut value = 0.0;
    for (class, cols, t) in terms {
        value += t.value;
        diag.distances.push((class, t.value, t.m));
        diag.degenerate += t.degenerate;
        for (k, &c) in cols.iter().enumerate() {
            for r in 0..d {
                grad[(r, c)] += t.grad[(r, k)] / n;
            }
        }
    }
    Ok(LossResult {
        value: value / n,
        grads: BTreeMap::from([(TensorRole::Features, grad)]),
        diagnostics: diag,
    })
}

/// Group-wise subspace distillation on one sample's maps stored as `hw×C`.
///
/// Channels are split into consecutive groups of `group_size` (the last
/// one possibly narrower, with `m` clipped to its width). The value is the
/// mean distance over groups with nonzero rank.
pub fn sd_loss_css(fmap_new: &Matrix, fmap_old: &Matrix, h: usize, w: usize, cfg: &SDConfig) -> Result<LossResult> {
    cfg.validate()?;
    same_shape("old feature map", fmap_new, fmap_old)?;
    let (d, c) = fmap_new.shape();
    if d != h * w {
        return Err(LossError::Shape {
            what: "feature map rows",
            expected: (h * w).to_string(),
            got: d.to_string(),
        });
    }
    if d < cfg.m {
        return Err(LossError::Dimension { h, w, d, m: cfg.m });
    }
    let mut diag = Diagnostics::default();
    let mut terms = Vec::new();
    for (g, start) in (0..c).step_by(cfg.group_size).enumerate() {
        let end = (start + cfg.group_size).min(c);
        let f_new = fmap_new.column_range(start, end);
        let f_old = fmap_old.column_range(start, end);
        match subspace_pair(&f_new, &f_old, cfg.m.min(end - start), cfg)? {
            Some(t) => terms.push((g, start, t)),
            None => diag.skipped += 1,
        }
    }
    let mut grad = Matrix::zeros(d, c);
    if terms.is_empty() {
        diag.empty = true;
        return Ok(LossResult {
            value: 0.0,
            grads: BTreeMap::new(),
            diagnostics: diag,
        });
    }
    let n = terms.len() as f64;
    let mut value = 0.0;
    for (g, start, t) in terms {
        value += t.value;
        diag.distances.push((g, t.value, t.m));
        diag.degenerate += t.degenerate;
        for r in 0..d {
            for k in 0..t.grad.cols() {
                grad[(r, start + k)] += t.grad[(r, k)] / n;
            }
        }
    }
    Ok(LossResult {
        value: value / n,
        grads: BTreeMap::from([(TensorRole::Features, grad)]),
        diagnostics: diag,
    })
}

/// `max + ln Σ exp(x − max)`; exact for a single entry.
fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy of `logits` against target columns.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<LossResult> {
    let (n, k) = logits.shape();
    if targets.len() != n {
        return Err(LossError::Shape {
            what: "targets",
            expected: n.to_string(),
            got: targets.len().to_string(),
        });
    }
    let mut total = 0.0;
    let mut grad = Matrix::zeros(n, k);
    for (i, &y) in targets.iter().enumerate() {
        if y >= k {
            return Err(LossError::IllegalLabel { pixel: i, label: y });
        }
        let z = logits.row(i);
        let lse = logsumexp(z.iter().copied());
        total += lse - z[y];
        let g = grad.row_mut(i);
        for j in 0..k {
            let p = (z[j] - lse).exp();
            g[j] = if j == y { p - 1.0 } else { p };
        }
    }
    let nf = n.max(1) as f64;
    grad.scale_in_place(1.0 / nf);
    Ok(LossResult::single(total / nf, TensorRole::Logits, grad))
}

fn check_teacher(probs: &Matrix) -> Result<()> {
    for r in 0..probs.rows() {
        let sum: f64 = probs.row(r).iter().sum();
        if (sum - 1.0).abs() > 1e-6 || probs.row(r).iter().any(|p| *p < 0.0) {
            return Err(LossError::NotNormalized { row: r, sum });
        }
    }
    Ok(())
}

/// Output distillation `−Σ_c p_c log q_c` averaged over rows, where `q` is
/// the softmax of `logits_new` restricted to `columns` and `p` (one column
/// per entry of `columns`) is the teacher. With `temperature ≠ 1` both
/// distributions are smoothed (`z/T` and `p^{1/T}` renormalized) and the
/// gradient carries the usual `1/T`.
pub fn output_kd(logits_new: &Matrix, probs_old: &Matrix, columns: &[usize], temperature: f64) -> Result<LossResult> {
    let (n, k) = logits_new.shape();
    if probs_old.shape() != (n, columns.len()) {
        return Err(LossError::Shape {
            what: "teacher probabilities",
            expected: format!("{n}x{}", columns.len()),
            got: format!("{:?}", probs_old.shape()),
        });
    }
    if columns.iter().any(|&c| c >= k) {
        return Err(LossError::Config(format!("column out of range for width {k}")));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(LossError::Config(format!("temperature {temperature} must be positive")));
    }
    check_teacher(probs_old)?;
    let t = temperature;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(n, k);
    for i in 0..n {
        let z: Vec<f64> = columns.iter().map(|&c| logits_new[(i, c)] / t).collect();
        let p: Vec<f64> = if t == 1.0 {
            probs_old.row(i).to_vec()
        } else {
            let s: Vec<f64> = probs_old.row(i).iter().map(|v| v.powf(1.0 / t)).collect();
            let norm: f64 = s.iter().sum();
            s.iter().map(|v| v / norm).collect()
        };
        let lse = logsumexp(z.iter().copied());
        let mut mass = 0.0;
        for (pc, zc) in p.iter().zip(&z) {
            if *pc > 0.0 {
                total += pc * (lse - zc);
            }
            mass += pc;
        }
        let g = grad.row_mut(i);
        for (j, &c) in columns.iter().enumerate() {
            let q = (z[j] - lse).exp();
            g[c] = (mass * q - p[j] * 1.0) / t;
        }
    }
    let nf = n.max(1) as f64;
    grad.scale_in_place(1.0 / nf);
    Ok(LossResult::single(total / nf, TensorRole::Logits, grad))
}

/// Mean over rows of `‖f_old − f_new‖₁` (rows are samples); subgradient
/// `sign(f_new − f_old)/b`.
pub fn l1_feature_distill(f_new: &Matrix, f_old: &Matrix) -> Result<LossResult> {
    same_shape("old features", f_new, f_old)?;
    let b = f_new.rows().max(1) as f64;
    let diff = f_new.sub(f_old)?;
    let value = diff.as_slice().iter().map(|v| v.abs()).sum::<f64>() / b;
    let grad = diff.map(|v| if v > 0.0 { 1.0 / b } else if v < 0.0 { -1.0 / b } else { 0.0 });
    Ok(LossResult::single(value, TensorRole::Features, grad))
}

/// Mean squared error over every entry of the logit matrix.
pub fn der_logit_loss(logits_new: &Matrix, stored: &Matrix) -> Result<LossResult> {
    same_shape("stored logits", logits_new, stored)?;
    let count = (logits_new.rows() * logits_new.cols()).max(1) as f64;
    let diff = logits_new.sub(stored)?;
    let value = linalg::frobenius_norm_sq(&diff) / count;
    Ok(LossResult::single(value, TensorRole::Logits, diff.scale(2.0 / count)))
}

/// Which columns make up the remapped background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BgMode {
    /// Background plus the remapped classes.
    #[default]
    BgInclusive,
    /// Only the remapped classes; falls back to the background column alone
    /// when that set is empty.
    Strict,
}

/// `−log Σ_{j∈S} softmax(z)_j` per row and its gradient.
fn set_nll(z: &[f64], lse_all: f64, set: &[usize], g: &mut [f64], weight: f64) -> f64 {
    let lse_s = logsumexp(set.iter().map(|&j| z[j]));
    for &j in set {
        g[j] -= weight * (z[j] - lse_s).exp();
    }
    lse_all - lse_s
}

fn css_layout(k: usize, n_old: usize) -> Result<()> {
    if k < 1 + n_old {
        return Err(LossError::Shape {
            what: "segmentation logits",
            expected: format!("at least {} columns", 1 + n_old),
            got: k.to_string(),
        });
    }
    Ok(())
}

/// Per-pixel cross-entropy under background shift. Columns are
/// `[bg, old (n_old)…, current…]`; a background pixel is credited with the
/// merged probability of the background set chosen by `mode`.
pub fn ce_css(logits: &Matrix, labels: &[usize], n_old: usize, mode: BgMode) -> Result<LossResult> {
    let (n, k) = logits.shape();
    css_layout(k, n_old)?;
    if labels.len() != n {
        return Err(LossError::Shape {
            what: "pixel labels",
            expected: n.to_string(),
            got: labels.len().to_string(),
        });
    }
    let bg_set: Vec<usize> = match mode {
        BgMode::BgInclusive => (0..=n_old).collect(),
        BgMode::Strict if n_old > 0 => (1..=n_old).collect(),
        BgMode::Strict => vec![0],
    };
    let mut total = 0.0;
    let mut grad = Matrix::zeros(n, k);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k || (y != 0 && y <= n_old) {
            return Err(LossError::IllegalLabel { pixel: i, label: y });
        }
        let z = logits.row(i);
        let lse = logsumexp(z.iter().copied());
        let g = grad.row_mut(i);
        for j in 0..k {
            g[j] = (z[j] - lse).exp();
        }
        total += if y == 0 {
            set_nll(z, lse, &bg_set, g, 1.0)
        } else {
            set_nll(z, lse, &[y], g, 1.0)
        };
    }
    let nf = n.max(1) as f64;
    grad.scale_in_place(1.0 / nf);
    Ok(LossResult::single(total / nf, TensorRole::Logits, grad))
}

/// Per-pixel distillation under background shift. `probs_old` has columns
/// `[bg, old…]` (`1 + n_old`); the new model's probability for the old
/// background is the merged mass of the background set chosen by `mode`
/// over `{bg} ∪ current`, and old classes map one-to-one.
pub fn kd_css(logits_new: &Matrix, probs_old: &Matrix, n_old: usize, mode: BgMode) -> Result<LossResult> {
    let (n, k) = logits_new.shape();
    css_layout(k, n_old)?;
    if probs_old.shape() != (n, 1 + n_old) {
        return Err(LossError::Shape {
            what: "teacher probabilities",
            expected: format!("{n}x{}", 1 + n_old),
            got: format!("{:?}", probs_old.shape()),
        });
    }
    check_teacher(probs_old)?;
    let current: Vec<usize> = (1 + n_old..k).collect();
    let bg_set: Vec<usize> = match mode {
        BgMode::BgInclusive => std::iter::once(0).chain(current.iter().copied()).collect(),
        BgMode::Strict if !current.is_empty() => current.clone(),
        BgMode::Strict => vec![0],
    };
    let mut total = 0.0;
    let mut grad = Matrix::zeros(n, k);
    for i in 0..n {
        let z = logits_new.row(i);
        let y = probs_old.row(i);
        let lse = logsumexp(z.iter().copied());
        let mass: f64 = y.iter().sum();
        let g = grad.row_mut(i);
        for j in 0..k {
            g[j] = mass * (z[j] - lse).exp();
        }
        for (c, &yc) in y.iter().enumerate() {
            if yc == 0.0 {
                continue;
            }
            let nll = if c == 0 {
                set_nll(z, lse, &bg_set, g, yc)
            } else {
                set_nll(z, lse, &[c], g, yc)
            };
            total += yc * nll;
        }
    }
    let nf = n.max(1) as f64;
    grad.scale_in_place(1.0 / nf);
    Ok(LossResult::single(total / nf, TensorRole::Logits, grad))
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let lse = logsumexp(row.iter().copied());
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    out
}
