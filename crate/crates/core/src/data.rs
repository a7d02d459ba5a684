//! Datasets and task streams: MNIST IDX files, Gaussian class blobs, and
//! synthetic segmentation scenes with a shifting background label.

use std::collections::BTreeSet;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::nn::Shape;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{what}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        what: String,
        found: u32,
        expected: u32,
    },
    #[error("{what}: truncated, need {expected} bytes, found {got}")]
    Truncated {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Labeled samples, one row of `inputs` per sample laid out as an `h×w×c`
/// map in row-major, channel-last order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub shape: Shape,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let f = self.inputs.cols();
        let mut data = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
        }
        Dataset {
            inputs: Matrix::from_fn(idx.len(), f, |r, c| data[r * f + c]),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub classes: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub class_order: Vec<usize>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated {
            what: what.to_string(),
            expected: at + 4,
            got: bytes.len(),
        })
}

/// Parses an IDX image file: magic `0x803`, dims `(n, rows, cols)`, then
/// `n·rows·cols` bytes, scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], what: &str) -> Result<(Matrix, usize, usize)> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            what: what.to_string(),
            found: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let n = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(DataError::Truncated {
            what: what.to_string(),
            expected: need,
            got: bytes.len(),
        });
    }
    let px = &bytes[16..need];
    let f = rows * cols;
    Ok((Matrix::from_fn(n, f, |i, j| f64::from(px[i * f + j]) / 255.0), rows, cols))
}

/// Parses an IDX label file: magic `0x801`, count, then one byte each.
pub fn parse_idx_labels(bytes: &[u8], what: &str) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic {
            what: what.to_string(),
            found: magic,
            expected: LABELS_MAGIC,
        });
    }
    let n = be_u32(bytes, 4, what)? as usize;
    if bytes.len() < 8 + n {
        return Err(DataError::Truncated {
            what: what.to_string(),
            expected: 8 + n,
            got: bytes.len(),
        });
    }
    Ok(bytes[8..8 + n].iter().map(|&b| usize::from(b)).collect())
}

/// Loads an image/label IDX pair; `.gz` paths are decompressed.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (inputs, rows, cols) = parse_idx_images(&read_file(images_path)?, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&read_file(labels_path)?, &labels_path.display().to_string())?;
    if inputs.rows() != labels.len() {
        return Err(DataError::CountMismatch {
            images: inputs.rows(),
            labels: labels.len(),
        });
    }
    Ok(Dataset {
        inputs,
        labels,
        shape: Shape::flat(rows * cols),
    })
}

/// Standard file names inside an MNIST directory; gzipped names unless
/// only the uncompressed file exists.
pub fn mnist_paths(dir: &Path, train: bool) -> (PathBuf, PathBuf) {
    let stem = if train { "train" } else { "t10k" };
    let pick = |name: String| {
        let gz = dir.join(format!("{name}.gz"));
        let raw = dir.join(&name);
        if !gz.exists() && raw.exists() {
            raw
        } else {
            gz
        }
    };
    (
        pick(format!("{stem}-images-idx3-ubyte")),
        pick(format!("{stem}-labels-idx1-ubyte")),
    )
}

/// Splits by label into tasks of `classes_per_task` classes. The class
/// order is natural (sorted) unless `order_seed` is given, in which case it
/// is a seeded permutation.
pub fn split_class_incremental(
    train: &Dataset,
    test: &Dataset,
    classes_per_task: usize,
    order_seed: Option<u64>,
) -> Result<TaskStream> {
    let classes: BTreeSet<usize> = train.labels.iter().chain(&test.labels).copied().collect();
    let mut order: Vec<usize> = classes.into_iter().collect();
    if classes_per_task == 0 || !order.len().is_multiple_of(classes_per_task) {
        return Err(DataError::Config(format!(
            "{} classes cannot be split into tasks of {classes_per_task}",
            order.len()
        )));
    }
    if let Some(seed) = order_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let tasks = order
        .chunks(classes_per_task)
        .map(|cls| {
            let pick = |d: &Dataset| {
                let idx: Vec<usize> = (0..d.len()).filter(|&i| cls.contains(&d.labels[i])).collect();
                d.subset(&idx)
            };
            Task {
                classes: cls.to_vec(),
                train: pick(train),
                test: pick(test),
            }
        })
        .collect();
    Ok(TaskStream {
        tasks,
        class_order: order,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianConfig {
    pub n_classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub n_test_per_class: usize,
    /// Pairwise distance between class means.
    pub sep: f64,
    pub classes_per_task: usize,
    pub seed: u64,
}

/// Isotropic unit-variance blobs with means `sep/√2 · e_k`, so every pair
/// of means is `sep` apart.
pub fn synth_gaussian_tasks(cfg: &GaussianConfig) -> Result<TaskStream> {
    if cfg.dim < cfg.n_classes {
        return Err(DataError::Config(format!(
            "dim {} must be at least n_classes {}",
            cfg.dim, cfg.n_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = cfg.sep / std::f64::consts::SQRT_2;
    let mut draw = |n: usize| {
        let mut labels = Vec::with_capacity(n * cfg.n_classes);
        let mut data = Vec::with_capacity(n * cfg.n_classes * cfg.dim);
        for k in 0..cfg.n_classes {
            for _ in 0..n {
                labels.push(k);
                for j in 0..cfg.dim {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    data.push(noise + if j == k { scale } else { 0.0 });
                }
            }
        }
        let rows = labels.len();
        Dataset {
            inputs: Matrix::from_fn(rows, cfg.dim, |r, c| data[r * cfg.dim + c]),
            labels,
            shape: Shape::flat(cfg.dim),
        }
    };
    let train = draw(cfg.n_per_class);
    let test = draw(cfg.n_test_per_class);
    split_class_incremental(&train, &test, cfg.classes_per_task, None)
}

/// Background label in segmentation masks.
pub const BG: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
}

const KINDS: [ShapeKind; 6] = [
    ShapeKind::Disk,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Ring,
    ShapeKind::Cross,
    ShapeKind::Diamond,
];

const COLORS: [[f64; 3]; 6] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.2],
    [0.2, 0.3, 0.9],
    [0.9, 0.8, 0.1],
    [0.8, 0.2, 0.8],
    [0.1, 0.8, 0.8],
];

impl ShapeKind {
    /// Whether the offset `(dy, dx)` from the center lies inside a shape of
    /// radius `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
            ShapeKind::Triangle => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.6,
            ShapeKind::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
            }
            ShapeKind::Cross => {
                (dy.abs() <= r * 0.35 && dx.abs() <= r) || (dx.abs() <= r * 0.35 && dy.abs() <= r)
            }
            ShapeKind::Diamond => dy.abs() + dx.abs() <= r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    /// Foreground classes `1..=n_classes`, at most 6.
    pub n_classes: usize,
    pub image_size: usize,
    pub classes_per_task: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub max_shapes: usize,
    /// Largest allowed fraction of a shape's pixels covered by others.
    pub max_overlap: f64,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            image_size: 16,
            classes_per_task: 2,
            train_per_task: 120,
            test_per_task: 60,
            max_shapes: 3,
            max_overlap: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// `(size·size)×3` RGB pixels.
    pub image: Matrix,
    /// Labels the learner sees for this split.
    pub mask: Vec<usize>,
    /// Every shape's true class.
    pub full_mask: Vec<usize>,
    /// Foreground pixels turned into background in `mask`.
    pub relabeled: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegTask {
    pub classes: Vec<usize>,
    /// Masks keep only this task's classes.
    pub train: Vec<SegSample>,
    /// Masks keep every class seen so far.
    pub test: Vec<SegSample>,
}

fn render_scene(cfg: &SegConfig, required: usize, rng: &mut ChaCha8Rng) -> (Matrix, Vec<usize>) {
    let s = cfg.image_size;
    let mut image = Matrix::zeros(s * s, 3);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let freq: f64 = rng.random_range(0.3..0.9);
    for y in 0..s {
        for x in 0..s {
            let stripe = 0.06 * ((x as f64 + 0.5 * y as f64) * freq + phase).sin();
            for c in 0..3 {
                image[(y * s + x, c)] = 0.4 + stripe + rng.random_range(-0.08..0.08);
            }
        }
    }
    let mut mask = vec![BG; s * s];
    let n_shapes = rng.random_range(1..=cfg.max_shapes.max(1));
    let mut classes = vec![required];
    for _ in 1..n_shapes {
        classes.push(rng.random_range(1..=cfg.n_classes));
    }
    'shapes: for class in classes {
        let kind = KINDS[class - 1];
        for _attempt in 0..50 {
            let r = rng.random_range(0.18..0.28) * s as f64;
            let cy = rng.random_range(r..s as f64 - r);
            let cx = rng.random_range(r..s as f64 - r);
            let pixels: Vec<usize> = (0..s * s)
                .filter(|&p| kind.contains((p / s) as f64 + 0.5 - cy, (p % s) as f64 + 0.5 - cx, r))
                .collect();
            if pixels.is_empty() {
                continue;
            }
            let covered = pixels.iter().filter(|&&p| mask[p] != BG).count();
            if covered as f64 > cfg.max_overlap * pixels.len() as f64 {
                continue;
            }
            let color = COLORS[class - 1];
            for &p in &pixels {
                mask[p] = class;
                for c in 0..3 {
                    image[(p, c)] = color[c] + rng.random_range(-0.1..0.1);
                }
            }
            continue 'shapes;
        }
    }
    (image, mask)
}

fn visible(full: &[usize], keep: &[usize]) -> (Vec<usize>, usize) {
    let mut relabeled = 0;
    let mask = full
        .iter()
        .map(|&l| {
            if l == BG || keep.contains(&l) {
                l
            } else {
                relabeled += 1;
                BG
            }
        })
        .collect();
    (mask, relabeled)
}

/// Scenes of colored shapes on a striped, noisy background. Every class
/// `k` is drawn as one fixed shape kind and color. Each training scene of
/// task `t` contains at least one shape of a class in `C^t`, and any other
/// shapes it contains (old or future classes) are labeled background. Test
/// scenes use only classes of `C^{1:t}` and keep all their labels.
pub fn synth_seg_tasks(cfg: &SegConfig) -> Result<Vec<SegTask>> {
    if cfg.n_classes == 0 || cfg.n_classes > KINDS.len() {
        return Err(DataError::Config(format!("n_classes must be in 1..={}", KINDS.len())));
    }
    if cfg.classes_per_task == 0 || !cfg.n_classes.is_multiple_of(cfg.classes_per_task) {
        return Err(DataError::Config(format!(
            "{} classes cannot be split into tasks of {}",
            cfg.n_classes, cfg.classes_per_task
        )));
    }
    if cfg.image_size < 8 {
        return Err(DataError::Config("image_size must be at least 8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let all: Vec<usize> = (1..=cfg.n_classes).collect();
    let mut tasks = Vec::new();
    for (t, classes) in all.chunks(cfg.classes_per_task).enumerate() {
        let seen = &all[..(t + 1) * cfg.classes_per_task];
        let train = (0..cfg.train_per_task)
            .map(|_| {
                let required = classes[rng.random_range(0..classes.len())];
                let (image, full_mask) = render_scene(cfg, required, &mut rng);
                let (mask, relabeled) = visible(&full_mask, classes);
                SegSample {
                    image,
                    mask,
                    full_mask,
                    relabeled,
                }
            })
            .collect();
        let test_cfg = SegConfig {
            n_classes: seen.len(),
            ..cfg.clone()
        };
        let test = (0..cfg.test_per_task)
            .map(|i| {
                let required = seen[i % seen.len()];
                let (image, full_mask) = render_scene(&test_cfg, required, &mut rng);
                let (mask, relabeled) = visible(&full_mask, seen);
                SegSample {
                    image,
                    mask,
                    full_mask,
                    relabeled,
                }
            })
            .collect();
        tasks.push(SegTask {
            classes: classes.to_vec(),
            train,
            test,
        });
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(n: u32, rows: u32, cols: u32, px: &[u8]) -> Vec<u8> {
        let mut b = IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(px);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn two_image_fixture_round_trips() {
        let px = [0u8, 255, 51, 102, 1, 2, 3, 4];
        let (m, rows, cols) = parse_idx_images(&idx_images(2, 2, 2, &px), "fixture").unwrap();
        assert_eq!((rows, cols), (2, 2));
        assert_eq!(m.shape(), (2, 4));
        for (i, &p) in px.iter().enumerate() {
            assert_eq!(m.as_slice()[i], f64::from(p) / 255.0);
        }
        assert_eq!(parse_idx_labels(&idx_labels(&[3, 9]), "fixture").unwrap(), vec![3, 9]);
    }

    #[test]
    fn gzip_and_plain_files_load() {
        let dir = tempfile::tempdir().unwrap();
        let img = idx_images(2, 1, 3, &[10, 20, 30, 40, 50, 60]);
        let lab = idx_labels(&[1, 0]);
        let ip = dir.path().join("img.gz");
        let mut enc = flate2::write::GzEncoder::new(fs::File::create(&ip).unwrap(), flate2::Compression::default());
        enc.write_all(&img).unwrap();
        enc.finish().unwrap();
        let lp = dir.path().join("lab");
        fs::write(&lp, &lab).unwrap();
        let d = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(d.labels, vec![1, 0]);
        assert_eq!(d.inputs[(1, 2)], 60.0 / 255.0);
        assert_eq!(d.shape, Shape::flat(3));
    }

    #[test]
    fn parse_errors_are_descriptive() {
        let err = parse_idx_images(&idx_labels(&[1]), "x").unwrap_err();
        assert!(matches!(err, DataError::BadMagic { found: 0x801, .. }));
        let err = parse_idx_images(&idx_images(2, 2, 2, &[0; 7]), "x").unwrap_err();
        assert!(matches!(err, DataError::Truncated { expected: 24, got: 23, .. }));
        assert!(matches!(parse_idx_labels(&[0, 0], "x"), Err(DataError::Truncated { .. })));

        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        fs::write(&ip, idx_images(2, 1, 1, &[0, 0])).unwrap();
        fs::write(&lp, idx_labels(&[0, 1, 2])).unwrap();
        assert!(matches!(
            load_mnist_idx(&ip, &lp),
            Err(DataError::CountMismatch { images: 2, labels: 3 })
        ));
        let err = load_mnist_idx(&dir.path().join("missing"), &lp).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }

    fn toy(labels: &[usize]) -> Dataset {
        Dataset {
            inputs: Matrix::from_fn(labels.len(), 2, |i, j| (i * 2 + j) as f64),
            labels: labels.to_vec(),
            shape: Shape::flat(2),
        }
    }

    #[test]
    fn natural_split() {
        let labels: Vec<usize> = (0..30).map(|i| i % 10).collect();
        let s = split_class_incremental(&toy(&labels), &toy(&labels), 2, None).unwrap();
        assert_eq!(s.tasks.len(), 5);
        assert_eq!(s.tasks[0].classes, vec![0, 1]);
        assert_eq!(s.tasks[0].train.len(), 6);
        assert!(s.tasks[0].train.labels.iter().all(|l| *l < 2));
        let joint = split_class_incremental(&toy(&labels), &toy(&labels), 10, None).unwrap();
        assert_eq!(joint.tasks.len(), 1);
        assert_eq!(joint.tasks[0].train.len(), 30);
        assert!(split_class_incremental(&toy(&labels), &toy(&labels), 3, None).is_err());
    }

    #[test]
    fn permuted_split_is_a_partition() {
        let labels: Vec<usize> = (0..40).map(|i| i % 10).collect();
        let s = split_class_incremental(&toy(&labels), &toy(&labels), 2, Some(7)).unwrap();
        let mut seen = BTreeSet::new();
        for t in &s.tasks {
            for c in &t.classes {
                assert!(seen.insert(*c));
            }
            assert!(t.train.labels.iter().all(|l| t.classes.contains(l)));
        }
        assert_eq!(seen, (0..10).collect());
        assert_ne!(s.class_order, (0..10).collect::<Vec<_>>());
        let total: usize = s.tasks.iter().map(|t| t.train.len()).sum();
        assert_eq!(total, 40);
    }

    fn gaussian(sep: f64, seed: u64) -> GaussianConfig {
        GaussianConfig {
            n_classes: 4,
            dim: 8,
            n_per_class: 200,
            n_test_per_class: 200,
            sep,
            classes_per_task: 2,
            seed,
        }
    }

    /// Nearest-mean accuracy using the true means.
    fn bayes_probe(stream: &TaskStream, sep: f64) -> f64 {
        let scale = sep / std::f64::consts::SQRT_2;
        let (mut right, mut total) = (0, 0);
        for t in &stream.tasks {
            for (i, &y) in t.test.labels.iter().enumerate() {
                let row = t.test.inputs.row(i);
                let dist = |k: usize| -> f64 {
                    row.iter()
                        .enumerate()
                        .map(|(j, v)| (v - if j == k { scale } else { 0.0 }).powi(2))
                        .sum()
                };
                let pred = (0..4).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
                right += usize::from(pred == y);
                total += 1;
            }
        }
        right as f64 / total as f64
    }

    #[test]
    fn gaussian_separation() {
        let far = synth_gaussian_tasks(&gaussian(10.0, 1)).unwrap();
        assert!(bayes_probe(&far, 10.0) >= 0.99);
        let none = synth_gaussian_tasks(&gaussian(0.0, 1)).unwrap();
        let acc = bayes_probe(&none, 0.0);
        assert!((acc - 0.25).abs() < 0.05, "accuracy {acc}");
        assert_eq!(far.tasks.len(), 2);
        assert_eq!(far.tasks[1].classes, vec![2, 3]);
    }

    #[test]
    fn gaussian_is_reproducible() {
        assert_eq!(
            synth_gaussian_tasks(&gaussian(3.0, 5)).unwrap(),
            synth_gaussian_tasks(&gaussian(3.0, 5)).unwrap()
        );
        assert_ne!(
            synth_gaussian_tasks(&gaussian(3.0, 5)).unwrap(),
            synth_gaussian_tasks(&gaussian(3.0, 6)).unwrap()
        );
    }

    fn seg_cfg(seed: u64) -> SegConfig {
        SegConfig {
            train_per_task: 40,
            test_per_task: 20,
            seed,
            ..SegConfig::default()
        }
    }

    #[test]
    fn seg_train_masks_only_show_current_classes() {
        let tasks = synth_seg_tasks(&seg_cfg(1)).unwrap();
        assert_eq!(tasks.len(), 2);
        for t in &tasks {
            for s in &t.train {
                assert!(s.mask.iter().all(|&l| l == BG || t.classes.contains(&l)));
                assert!(s.mask.iter().any(|&l| l != BG));
            }
        }
        let seen = [1, 2, 3, 4];
        for s in &tasks[1].test {
            assert!(s.mask.iter().all(|&l| l == BG || seen.contains(&l)));
            assert_eq!(s.relabeled, 0);
        }
    }

    #[test]
    fn seg_old_shapes_become_background() {
        let tasks = synth_seg_tasks(&seg_cfg(2)).unwrap();
        let with_old = tasks[1]
            .train
            .iter()
            .find(|s| s.full_mask.iter().any(|&l| l == 1 || l == 2))
            .expect("some task-2 scene contains a task-1 shape");
        for (m, f) in with_old.mask.iter().zip(&with_old.full_mask) {
            if *f == 1 || *f == 2 {
                assert_eq!(*m, BG);
            }
        }
    }

    #[test]
    fn seg_relabel_accounting() {
        for t in synth_seg_tasks(&seg_cfg(3)).unwrap() {
            for s in &t.train {
                let out_of_task = s
                    .full_mask
                    .iter()
                    .filter(|&&l| l != BG && !t.classes.contains(&l))
                    .count();
                assert_eq!(s.relabeled, out_of_task);
                let changed = s.mask.iter().zip(&s.full_mask).filter(|(a, b)| a != b).count();
                assert_eq!(changed, out_of_task);
            }
        }
    }

    #[test]
    fn seg_no_train_test_leakage() {
        let tasks = synth_seg_tasks(&seg_cfg(4)).unwrap();
        for a in tasks.iter().flat_map(|t| &t.train) {
            for b in tasks.iter().flat_map(|t| &t.test) {
                assert!(!(a.image == b.image && a.mask == b.mask));
            }
        }
    }

    #[test]
    fn seg_config_errors() {
        let bad = SegConfig {
            n_classes: 5,
            ..SegConfig::default()
        };
        assert!(synth_seg_tasks(&bad).is_err());
        let bad = SegConfig {
            n_classes: 7,
            classes_per_task: 7,
            ..SegConfig::default()
        };
        assert!(synth_seg_tasks(&bad).is_err());
    }
}
