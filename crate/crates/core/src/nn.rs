//! A small feed-forward network with hand-written backprop.
//!
//! Activations are [`Tensor`]s: a `(batch·h·w)×channels` matrix whose rows
//! are pixels in sample-major, row-major order. Fully connected activations
//! are the `h = w = 1` case, so a linear layer applied to feature maps acts
//! per pixel (a 1×1 convolution) and flattening is a pure reshape.

use std::collections::HashSet;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::{self, Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

use crate::binio;
use crate::linalg::{LinalgError, Matrix};

const CHECKPOINT_MAGIC: &[u8; 8] = b"SDCKPT01";

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("backward called without a fresh forward pass")]
    StaleCache,
    #[error("layer {0} is not a registered tap")]
    UnknownTap(usize),
    #[error("class {0} already has a head row")]
    DuplicateClass(usize),
    #[error("class {0} is not in the head")]
    UnknownClass(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] io::Error),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Per-sample activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn flat(c: usize) -> Self {
        Self { h: 1, w: 1, c }
    }

    pub fn maps(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn numel(&self) -> usize {
        self.h * self.w * self.c
    }
}

/// A batch of activations; see the module docs for the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    data: Matrix,
    h: usize,
    w: usize,
}

impl Tensor {
    /// A batch of feature vectors, one row per sample.
    pub fn flat(data: Matrix) -> Self {
        Self { data, h: 1, w: 1 }
    }

    /// A batch of `h×w` maps stored as `(batch·h·w)×C`.
    pub fn maps(data: Matrix, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || !data.rows().is_multiple_of(h * w) {
            return Err(NnError::Shape {
                what: "feature map rows",
                expected: format!("a multiple of {h}x{w}"),
                got: data.rows().to_string(),
            });
        }
        Ok(Self { data, h, w })
    }

    /// Stacks per-sample `hw×C` maps.
    pub fn from_samples(samples: &[Matrix], h: usize, w: usize) -> Result<Self> {
        let c = samples.first().map_or(0, Matrix::cols);
        let mut data = Vec::with_capacity(samples.len() * h * w * c);
        for s in samples {
            if s.shape() != (h * w, c) {
                return Err(NnError::Shape {
                    what: "sample map",
                    expected: format!("{}x{c}", h * w),
                    got: format!("{:?}", s.shape()),
                });
            }
            data.extend_from_slice(s.as_slice());
        }
        Ok(Self {
            data: Matrix::from_raw(samples.len() * h * w, c, data),
            h,
            w,
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }

    pub fn batch(&self) -> usize {
        self.data.rows() / (self.h * self.w)
    }

    pub fn shape(&self) -> Shape {
        Shape::maps(self.h, self.w, self.data.cols())
    }

    /// Sample `i` as an `hw×C` matrix.
    pub fn sample(&self, i: usize) -> Matrix {
        let hw = self.h * self.w;
        self.data.row_range(i * hw, (i + 1) * hw)
    }

    /// Feature columns `d×batch` for flat activations.
    pub fn columns(&self) -> Matrix {
        debug_assert_eq!(self.h * self.w, 1);
        self.data.transpose()
    }

    /// Samples at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Tensor {
        let hw = self.h * self.w;
        let c = self.data.cols();
        let mut data = Vec::with_capacity(idx.len() * hw * c);
        for &i in idx {
            data.extend_from_slice(&self.data.as_slice()[i * hw * c..(i + 1) * hw * c]);
        }
        Tensor {
            data: Matrix::from_raw(idx.len() * hw, c, data),
            h: self.h,
            w: self.w,
        }
    }

    /// Concatenates two batches of the same per-sample shape.
    pub fn concat(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(NnError::Shape {
                what: "concat",
                expected: format!("{:?}", self.shape()),
                got: format!("{:?}", other.shape()),
            });
        }
        let mut data = self.data.as_slice().to_vec();
        data.extend_from_slice(other.data.as_slice());
        Ok(Tensor {
            data: Matrix::from_raw(self.data.rows() + other.data.rows(), self.data.cols(), data),
            h: self.h,
            w: self.w,
        })
    }
}

/// A trainable array with its gradient and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    velocity: Matrix,
}

impl Param {
    fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: Matrix::zeros(r, c),
            velocity: Matrix::zeros(r, c),
        }
    }

    fn append_zero_rows(&mut self, n: usize) {
        let grow = |m: &Matrix| {
            let mut data = m.as_slice().to_vec();
            data.resize(data.len() + n * m.cols(), 0.0);
            Matrix::from_raw(m.rows() + n, m.cols(), data)
        };
        self.value = grow(&self.value);
        self.grad = grow(&self.grad);
        self.velocity = grow(&self.velocity);
    }
}

/// Weight `out×in` plus a `1×out` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    fn init(out: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let weight = Matrix::from_fn(out, fan_in, |_, _| dist.sample(rng));
        let bias = Matrix::from_fn(1, out, |_, _| dist.sample(rng));
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
        }
    }

    fn from_values(weight: Matrix, bias: Matrix) -> Self {
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
        }
    }

    /// `x·Wᵀ + b`.
    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul_t(&self.weight.value)?;
        let b = self.bias.value.as_slice();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients, returns `∂/∂x` when asked.
    fn backprop(&mut self, x: &Matrix, g: &Matrix, want_input: bool) -> Result<Option<Matrix>> {
        self.weight.grad.add_t_matmul(g, x)?;
        let gb = self.bias.grad.as_mut_slice();
        for r in 0..g.rows() {
            for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                *acc += v;
            }
        }
        Ok(if want_input {
            Some(g.matmul(&self.weight.value)?)
        } else {
            None
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear { input: usize, output: usize },
    Relu,
    Conv2d { in_ch: usize, out_ch: usize },
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Per-pixel affine map.
    Linear(Dense),
    Relu,
    /// 3×3 convolution, stride 1, zero padding 1. Weight is `out×(9·in)`
    /// with columns ordered `(ky, kx, c_in)`.
    Conv2d(Dense),
    Flatten,
}

impl Layer {
    /// PyTorch-style init: weights and bias uniform in `±1/√fan_in`.
    pub fn linear(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Layer::Linear(Dense::init(output, input, rng))
    }

    pub fn linear_from(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.shape() != (1, weight.rows()) {
            return Err(NnError::Shape {
                what: "linear bias",
                expected: format!("1x{}", weight.rows()),
                got: format!("{:?}", bias.shape()),
            });
        }
        Ok(Layer::Linear(Dense::from_values(weight, bias)))
    }

    pub fn conv2d(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        Layer::Conv2d(Dense::init(out_ch, 9 * in_ch, rng))
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Linear(d) => LayerKind::Linear {
                input: d.weight.value.cols(),
                output: d.weight.value.rows(),
            },
            Layer::Relu => LayerKind::Relu,
            Layer::Conv2d(d) => LayerKind::Conv2d {
                in_ch: d.weight.value.cols() / 9,
                out_ch: d.weight.value.rows(),
            },
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self.kind() {
            LayerKind::Linear { input: i, output } => {
                expect_channels("linear input", i, input.c)?;
                Ok(Shape { c: output, ..input })
            }
            LayerKind::Conv2d { in_ch, out_ch } => {
                expect_channels("conv input", in_ch, input.c)?;
                Ok(Shape { c: out_ch, ..input })
            }
            LayerKind::Relu => Ok(input),
            LayerKind::Flatten => Ok(Shape::flat(input.numel())),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Linear(d) | Layer::Conv2d(d) => vec![&mut d.weight, &mut d.bias],
            _ => Vec::new(),
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Linear(d) | Layer::Conv2d(d) => vec![&d.weight, &d.bias],
            _ => Vec::new(),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        match self {
            Layer::Linear(d) => {
                let out = d.apply(&x.data)?;
                Ok((
                    Tensor {
                        data: out,
                        h: x.h,
                        w: x.w,
                    },
                    Cache::Input(x.data.clone()),
                ))
            }
            Layer::Relu => {
                let out = x.data.map(|v| v.max(0.0));
                Ok((
                    Tensor {
                        data: out.clone(),
                        h: x.h,
                        w: x.w,
                    },
                    Cache::Output(out),
                ))
            }
            Layer::Conv2d(d) => {
                let cols = im2col(&x.data, x.h, x.w);
                let out = d.apply(&cols)?;
                Ok((
                    Tensor {
                        data: out,
                        h: x.h,
                        w: x.w,
                    },
                    Cache::Columns {
                        cols,
                        h: x.h,
                        w: x.w,
                    },
                ))
            }
            Layer::Flatten => {
                let b = x.batch();
                let numel = x.data.cols() * x.h * x.w;
                let out = Matrix::from_raw(b, numel, x.data.as_slice().to_vec());
                Ok((
                    Tensor::flat(out),
                    Cache::Reshape {
                        h: x.h,
                        w: x.w,
                        c: x.data.cols(),
                    },
                ))
            }
        }
    }

    fn backward(&mut self, cache: Cache, g: Matrix, want_input: bool) -> Result<Option<Matrix>> {
        match (self, cache) {
            (Layer::Linear(d), Cache::Input(x)) => d.backprop(&x, &g, want_input),
            (Layer::Relu, Cache::Output(y)) => {
                // Subgradient 0 at the kink.
                let mut g = g;
                for (gv, yv) in g.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    if *yv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                Ok(Some(g))
            }
            (Layer::Conv2d(d), Cache::Columns { cols, h, w }) => {
                let gcols = d.backprop(&cols, &g, want_input)?;
                Ok(gcols.map(|gc| col2im(&gc, h, w)))
            }
            (Layer::Flatten, Cache::Reshape { h, w, c }) => {
                let rows = g.rows() * h * w;
                Ok(Some(Matrix::from_raw(rows, c, g.into_vec())))
            }
            _ => Err(NnError::StaleCache),
        }
    }
}

fn expect_channels(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(NnError::Shape {
            what,
            expected: expected.to_string(),
            got: got.to_string(),
        });
    }
    Ok(())
}

fn im2col(x: &Matrix, h: usize, w: usize) -> Matrix {
    let c = x.cols();
    let hw = h * w;
    let rows = x.rows();
    let mut cols = Matrix::zeros(rows, 9 * c);
    for s in 0..rows / hw {
        for y in 0..h {
            for xx in 0..w {
                let dst = cols.row_mut(s * hw + y * w + xx);
                for ky in 0..3 {
                    let Some(sy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..3 {
                        let Some(sx) = (xx + kx).checked_sub(1).filter(|&v| v < w) else {
                            continue;
                        };
                        let off = (ky * 3 + kx) * c;
                        dst[off..off + c].copy_from_slice(x.row(s * hw + sy * w + sx));
                    }
                }
            }
        }
    }
    cols
}

fn col2im(g: &Matrix, h: usize, w: usize) -> Matrix {
    let c = g.cols() / 9;
    let hw = h * w;
    let rows = g.rows();
    let mut out = Matrix::zeros(rows, c);
    for s in 0..rows / hw {
        for y in 0..h {
            for xx in 0..w {
                let src = g.row(s * hw + y * w + xx);
                for ky in 0..3 {
                    let Some(sy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..3 {
                        let Some(sx) = (xx + kx).checked_sub(1).filter(|&v| v < w) else {
                            continue;
                        };
                        let off = (ky * 3 + kx) * c;
                        let dst = out.row_mut(s * hw + sy * w + sx);
                        for (d, v) in dst.iter_mut().zip(&src[off..off + c]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
enum Cache {
    Input(Matrix),
    Output(Matrix),
    Columns { cols: Matrix, h: usize, w: usize },
    Reshape { h: usize, w: usize, c: usize },
}

/// Logits and tapped activations from one pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(batch·h·w)×head_width`; column order is [`Network::columns_of`].
    pub logits: Tensor,
    /// Outputs of the tapped layers, in [`Network::taps`] order.
    pub taps: Vec<Tensor>,
}

impl ForwardOutput {
    pub fn tap(&self, net_taps: &[usize], layer: usize) -> Option<&Tensor> {
        net_taps.iter().position(|&t| t == layer).map(|i| &self.taps[i])
    }
}

/// Body layers followed by a single growing linear head.
#[derive(Debug, Clone)]
pub struct Network {
    input: Shape,
    body: Vec<Layer>,
    head: Dense,
    classes: Vec<usize>,
    background: bool,
    taps: Vec<usize>,
    momentum: f64,
    cache: Option<Vec<Cache>>,
}

impl Network {
    /// Builds a network with an empty head (plus a zero background row when
    /// `background` is set).
    pub fn new(input: Shape, body: Vec<Layer>, taps: Vec<usize>, background: bool) -> Result<Self> {
        let feat = body_output(input, &body)?;
        let mut seen = HashSet::new();
        for &t in &taps {
            if t >= body.len() || !seen.insert(t) {
                return Err(NnError::UnknownTap(t));
            }
        }
        let rows = usize::from(background);
        Ok(Self {
            input,
            body,
            head: Dense::from_values(Matrix::zeros(rows, feat.c), Matrix::zeros(1, rows)),
            classes: Vec::new(),
            background,
            taps,
            momentum: 0.0,
            cache: None,
        })
    }

    /// Replaces the head with explicit values for `classes`.
    pub fn with_head(mut self, head: Layer, classes: Vec<usize>) -> Result<Self> {
        let Layer::Linear(d) = head else {
            return Err(NnError::Shape {
                what: "head",
                expected: "linear layer".into(),
                got: format!("{:?}", head.kind()),
            });
        };
        let feat = body_output(self.input, &self.body)?;
        expect_channels("head input", feat.c, d.weight.value.cols())?;
        expect_channels(
            "head width",
            classes.len() + usize::from(self.background),
            d.weight.value.rows(),
        )?;
        check_new_classes(&[], &classes)?;
        self.head = d;
        self.classes = classes;
        self.cache = None;
        Ok(self)
    }

    /// `input → 100 → 100 → head` with ReLU, tapped after the last hidden
    /// ReLU.
    pub fn mlp(input: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut body = Vec::new();
        let mut prev = input;
        for &h in hidden {
            body.push(Layer::linear(prev, h, rng));
            body.push(Layer::Relu);
            prev = h;
        }
        let taps = if body.is_empty() { Vec::new() } else { vec![body.len() - 1] };
        Network::new(Shape::flat(input), body, taps, false).expect("valid by construction")
    }

    /// Three 3×3 conv blocks followed by a per-pixel head with a background
    /// column, tapped after each conv block.
    pub fn seg_convnet(h: usize, w: usize, in_ch: usize, channels: &[usize], rng: &mut impl Rng) -> Self {
        let mut body = Vec::new();
        let mut taps = Vec::new();
        let mut prev = in_ch;
        for &c in channels {
            body.push(Layer::conv2d(prev, c, rng));
            body.push(Layer::Relu);
            taps.push(body.len() - 1);
            prev = c;
        }
        Network::new(Shape::maps(h, w, in_ch), body, taps, true).expect("valid by construction")
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn body(&self) -> &[Layer] {
        &self.body
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn has_background(&self) -> bool {
        self.background
    }

    pub fn head_width(&self) -> usize {
        self.head.weight.value.rows()
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    /// Output shape of body layer `layer`.
    pub fn layer_shape(&self, layer: usize) -> Result<Shape> {
        body_output(self.input, &self.body[..=layer])
    }

    /// Logit column of `class`; the background column (if any) is 0.
    pub fn column_of(&self, class: usize) -> Result<usize> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .map(|p| p + usize::from(self.background))
            .ok_or(NnError::UnknownClass(class))
    }

    pub fn columns_of(&self, classes: &[usize]) -> Result<Vec<usize>> {
        classes.iter().map(|&c| self.column_of(c)).collect()
    }

    pub fn set_momentum(&mut self, momentum: f64) {
        self.momentum = momentum;
    }

    /// Forward pass that keeps caches for [`Network::backward`].
    pub fn forward(&mut self, x: &Tensor) -> Result<ForwardOutput> {
        let (out, caches) = self.run(x, true)?;
        self.cache = Some(caches);
        Ok(out)
    }

    /// Forward pass without caches.
    pub fn infer(&self, x: &Tensor) -> Result<ForwardOutput> {
        Ok(self.run(x, false)?.0)
    }

    fn run(&self, x: &Tensor, keep: bool) -> Result<(ForwardOutput, Vec<Cache>)> {
        if x.batch() == 0 {
            return Err(NnError::EmptyBatch);
        }
        if x.shape() != self.input {
            return Err(NnError::Shape {
                what: "network input",
                expected: format!("{:?}", self.input),
                got: format!("{:?}", x.shape()),
            });
        }
        let mut caches = Vec::with_capacity(if keep { self.body.len() + 1 } else { 0 });
        let mut taps = Vec::with_capacity(self.taps.len());
        let mut cur: Option<Tensor> = None;
        for (i, layer) in self.body.iter().enumerate() {
            let (out, cache) = layer.forward(cur.as_ref().unwrap_or(x))?;
            if keep {
                caches.push(cache);
            }
            if self.taps.contains(&i) {
                taps.push((i, out.clone()));
            }
            cur = Some(out);
        }
        let feat = cur.as_ref().unwrap_or(x);
        let logits = Tensor {
            data: self.head.apply(&feat.data)?,
            h: feat.h,
            w: feat.w,
        };
        if keep {
            caches.push(Cache::Input(feat.data.clone()));
        }
        taps.sort_by_key(|&(i, _)| self.taps.iter().position(|&t| t == i));
        let taps = taps.into_iter().map(|(_, t)| t).collect();
        Ok((ForwardOutput { logits, taps }, caches))
    }

    /// Backpropagates `grad_logits` plus any gradients on tapped
    /// activations, accumulating into parameter gradients. Consumes the
    /// caches of the preceding [`Network::forward`].
    pub fn backward(&mut self, grad_logits: &Matrix, tap_grads: &[(usize, Matrix)]) -> Result<()> {
        let mut caches = self.cache.take().ok_or(NnError::StaleCache)?;
        for (layer, _) in tap_grads {
            if !self.taps.contains(layer) {
                return Err(NnError::UnknownTap(*layer));
            }
        }
        let head_cache = caches.pop().ok_or(NnError::StaleCache)?;
        let Cache::Input(feat) = head_cache else {
            return Err(NnError::StaleCache);
        };
        if grad_logits.shape() != (feat.rows(), self.head_width()) {
            return Err(NnError::Shape {
                what: "logit gradient",
                expected: format!("{}x{}", feat.rows(), self.head_width()),
                got: format!("{:?}", grad_logits.shape()),
            });
        }
        let mut g = self
            .head
            .backprop(&feat, grad_logits, !self.body.is_empty())?
            .unwrap_or_else(|| Matrix::zeros(0, 0));
        for i in (0..self.body.len()).rev() {
            for (_, tg) in tap_grads.iter().filter(|(l, _)| *l == i) {
                g.axpy(1.0, tg).map_err(|_| NnError::Shape {
                    what: "tap gradient",
                    expected: format!("{:?}", g.shape()),
                    got: format!("{:?}", tg.shape()),
                })?;
            }
            let cache = caches.pop().ok_or(NnError::StaleCache)?;
            match self.body[i].backward(cache, g, i > 0)? {
                Some(next) => g = next,
                None => break,
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.body.iter().flat_map(Layer::params).collect();
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.body.iter_mut().flat_map(Layer::params_mut).collect();
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.scale_in_place(0.0);
        }
    }

    /// `θ ← θ − lr·g` (or the heavy-ball update when momentum is set), then
    /// clears gradients.
    pub fn sgd_step(&mut self, lr: f64) {
        let mu = self.momentum;
        for p in self.params_mut() {
            if mu > 0.0 {
                p.velocity.scale_in_place(mu);
                p.velocity.axpy(1.0, &p.grad).expect("same shape");
                p.value.axpy(-lr, &p.velocity).expect("same shape");
            } else {
                p.value.axpy(-lr, &p.grad).expect("same shape");
            }
            p.grad.scale_in_place(0.0);
        }
    }

    /// Appends zero-initialized head rows for `new_classes`.
    pub fn expand_head(&mut self, new_classes: &[usize]) -> Result<()> {
        check_new_classes(&self.classes, new_classes)?;
        let n = new_classes.len();
        self.head.weight.append_zero_rows(n);
        // Bias is 1×out, so new entries go at the end of the row.
        let grow = |m: &Matrix| {
            let mut data = m.as_slice().to_vec();
            data.resize(data.len() + n, 0.0);
            Matrix::from_raw(1, m.cols() + n, data)
        };
        let bias = &mut self.head.bias;
        bias.value = grow(&bias.value);
        bias.grad = grow(&bias.grad);
        bias.velocity = grow(&bias.velocity);
        self.classes.extend_from_slice(new_classes);
        self.cache = None;
        Ok(())
    }

    /// Frozen deep copy.
    pub fn snapshot(&self) -> Snapshot {
        let mut net = self.clone();
        net.cache = None;
        Snapshot { net }
    }

    /// Hash of every parameter bit pattern, for determinism checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in self.params() {
            p.value.shape().hash(&mut h);
            for v in p.value.as_slice() {
                v.to_bits().hash(&mut h);
            }
        }
        self.classes.hash(&mut h);
        h.finish()
    }

    /// Writes the checkpoint: magic, layer count, then per layer a kind tag,
    /// weight shape and raw little-endian values, then a trailer with the
    /// input shape, background flag, taps and class ids.
    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        binio::write_magic(w, CHECKPOINT_MAGIC)?;
        binio::write_u32(w, self.body.len() + 1)?;
        let head = Layer::Linear(self.head.clone());
        for layer in self.body.iter().chain(std::iter::once(&head)) {
            match layer {
                Layer::Linear(d) | Layer::Conv2d(d) => {
                    binio::write_u8(w, if matches!(layer, Layer::Linear(_)) { 1 } else { 3 })?;
                    binio::write_u32(w, d.weight.value.rows())?;
                    binio::write_u32(w, d.weight.value.cols())?;
                    binio::write_f64s(w, d.weight.value.as_slice())?;
                    binio::write_f64s(w, d.bias.value.as_slice())?;
                }
                Layer::Relu => binio::write_u8(w, 2)?,
                Layer::Flatten => binio::write_u8(w, 4)?,
            }
        }
        binio::write_usizes(w, &[self.input.h, self.input.w, self.input.c])?;
        binio::write_u8(w, u8::from(self.background))?;
        binio::write_usizes(w, &self.taps)?;
        binio::write_usizes(w, &self.classes)?;
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        binio::read_magic(r, CHECKPOINT_MAGIC)?;
        let count = binio::read_u32(r)?;
        if count == 0 {
            return Err(binio::invalid("no layers").into());
        }
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let tag = binio::read_u8(r)?;
            let layer = match tag {
                1 | 3 => {
                    let rows = binio::read_u32(r)?;
                    let cols = binio::read_u32(r)?;
                    let w = binio::read_f64s(r, rows * cols)?;
                    let b = binio::read_f64s(r, rows)?;
                    let d = Dense::from_values(
                        Matrix::from_raw(rows, cols, w),
                        Matrix::from_raw(1, rows, b),
                    );
                    if tag == 1 {
                        Layer::Linear(d)
                    } else {
                        Layer::Conv2d(d)
                    }
                }
                2 => Layer::Relu,
                4 => Layer::Flatten,
                other => return Err(binio::invalid(format!("unknown layer tag {other}")).into()),
            };
            layers.push(layer);
        }
        let shape = binio::read_usizes(r)?;
        let [h, w, c] = shape[..] else {
            return Err(binio::invalid("input shape must have 3 entries").into());
        };
        let background = binio::read_u8(r)? != 0;
        let taps = binio::read_usizes(r)?;
        let classes = binio::read_usizes(r)?;
        let head = layers.pop().expect("count > 0");
        Network::new(Shape::maps(h, w, c), layers, taps, background)?.with_head(head, classes)
    }
}

fn body_output(input: Shape, body: &[Layer]) -> Result<Shape> {
    body.iter().try_fold(input, |s, l| l.output_shape(s))
}

fn check_new_classes(existing: &[usize], new: &[usize]) -> Result<()> {
    let mut seen: HashSet<usize> = existing.iter().copied().collect();
    for &c in new {
        if !seen.insert(c) {
            return Err(NnError::DuplicateClass(c));
        }
    }
    Ok(())
}

/// An immutable copy of a network, used as the teacher.
#[derive(Debug, Clone)]
pub struct Snapshot {
    net: Network,
}

impl Snapshot {
    pub fn infer(&self, x: &Tensor) -> Result<ForwardOutput> {
        self.net.infer(x)
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn fingerprint(&self) -> u64 {
        self.net.fingerprint()
    }
}

/// Sets every logit outside `columns` to `−∞`.
pub fn mask_logits(logits: &Matrix, columns: &[usize]) -> Matrix {
    let mut keep = vec![false; logits.cols()];
    for &c in columns {
        keep[c] = true;
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        for (v, &k) in out.row_mut(r).iter_mut().zip(&keep) {
            if !k {
                *v = f64::NEG_INFINITY;
            }
        }
    }
    out
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
