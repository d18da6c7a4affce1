//! Task environments.
//!
//! Shuffled-pixels and permuted-labels environments are built over a base
//! image dataset (IDX files, or synthetic glyphs when none are configured).
//! The Gaussian-blobs environment generates its own data per task.

mod glyphs;
mod idx;

pub use glyphs::{synthetic_glyphs, MIN_SIDE as MIN_GLYPH_SIDE};
pub use idx::{
    load_idx_images, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IMAGES_MAGIC,
    LABELS_MAGIC,
};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::ndcore::Tensor;
use crate::rng::{stream, tag, Rng};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("{path}: bad magic 0x{observed:08x} (expected 0x{expected:08x})")]
    BadMagic {
        path: String,
        expected: u32,
        observed: u32,
    },
    #[error("{path}: truncated, need {expected} bytes but file has {actual}")]
    Truncated {
        path: String,
        expected: usize,
        actual: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("task needs {requested} samples but the base dataset has {available}")]
    NotEnoughData { requested: usize, available: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A labelled dataset that tasks are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseData {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub n_classes: usize,
}

impl BaseData {
    pub fn new(x: Tensor, y: Vec<usize>) -> Result<Self, EnvError> {
        if x.shape().len() != 2 || x.rows() != y.len() {
            return Err(EnvError::CountMismatch {
                images: x.shape().first().copied().unwrap_or(0),
                labels: y.len(),
            });
        }
        let n_classes = y.iter().max().map_or(0, |m| m + 1).max(2);
        Ok(Self { x, y, n_classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    ShuffledPixels,
    PermutedLabels,
    GaussianBlobs,
}

impl FromStr for EnvKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shuffled_pixels" => Ok(Self::ShuffledPixels),
            "permuted_labels" => Ok(Self::PermutedLabels),
            "gaussian_blobs" => Ok(Self::GaussianBlobs),
            other => Err(format!(
                "unknown environment {other:?} (expected shuffled_pixels|permuted_labels|gaussian_blobs)"
            )),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ShuffledPixels => "shuffled_pixels",
            Self::PermutedLabels => "permuted_labels",
            Self::GaussianBlobs => "gaussian_blobs",
        })
    }
}

/// Everything needed to rebuild an environment deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentSpec {
    pub kind: EnvKind,
    pub n_train_tasks: usize,
    pub n_test_tasks: usize,
    /// Training samples per task (`m_i` before the prior split).
    pub samples_per_task: usize,
    /// Held-out samples per task.
    pub test_samples_per_task: usize,
    pub seed: u64,
    pub prior_fraction: f64,
    /// IDX files for the base dataset; synthetic glyphs are used when unset.
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    /// Synthetic base dataset size and image side.
    pub glyph_count: usize,
    pub glyph_side: usize,
    pub blob_dim: usize,
    pub blob_classes: usize,
    /// Pairwise distance between cluster centers, in units of the cluster std.
    pub blob_separation: f64,
    /// Maximum Givens angle (radians) of the per-task rotation.
    pub blob_rotation: f64,
}

impl Default for EnvironmentSpec {
    fn default() -> Self {
        Self {
            kind: EnvKind::ShuffledPixels,
            n_train_tasks: 5,
            n_test_tasks: 20,
            samples_per_task: 1000,
            test_samples_per_task: 500,
            seed: 0,
            prior_fraction: 0.0,
            idx_images: None,
            idx_labels: None,
            glyph_count: 6000,
            glyph_side: 10,
            blob_dim: 8,
            blob_classes: 4,
            blob_separation: 3.0,
            blob_rotation: 0.6,
        }
    }
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::Invalid(msg));
        if self.n_train_tasks < 1 || self.n_test_tasks < 1 {
            return bad("task counts must be >= 1".into());
        }
        if self.samples_per_task < 2 || self.test_samples_per_task < 1 {
            return bad("need >= 2 training and >= 1 test samples per task".into());
        }
        if !(0.0..1.0).contains(&self.prior_fraction) {
            return bad(format!("prior_fraction must be in [0, 1), got {}", self.prior_fraction));
        }
        if self.idx_images.is_some() != self.idx_labels.is_some() {
            return bad("idx_images and idx_labels must be set together".into());
        }
        if self.glyph_side < MIN_GLYPH_SIDE {
            return bad(format!("glyph_side must be >= {MIN_GLYPH_SIDE}"));
        }
        if self.kind == EnvKind::GaussianBlobs {
            if self.blob_classes < 2 || self.blob_dim < self.blob_classes {
                return bad("blobs need 2 <= classes <= dim".into());
            }
            if !(self.blob_separation > 0.0) || !(self.blob_rotation >= 0.0) {
                return bad("blob separation must be > 0 and rotation >= 0".into());
            }
        }
        Ok(())
    }

    pub fn samples_needed(&self) -> usize {
        self.samples_per_task + self.test_samples_per_task
    }

    /// Loads or synthesizes the base dataset; `None` for blobs.
    pub fn base_data(&self) -> Result<Option<BaseData>, EnvError> {
        if self.kind == EnvKind::GaussianBlobs {
            return Ok(None);
        }
        match (&self.idx_images, &self.idx_labels) {
            (Some(images), Some(labels)) => load_idx_images(images, labels).map(Some),
            _ => Ok(Some(synthetic_glyphs(self.glyph_count, self.glyph_side, self.seed))),
        }
    }

    pub fn input_dim(&self, base: Option<&BaseData>) -> usize {
        match base {
            Some(b) => b.dim(),
            None => self.blob_dim,
        }
    }

    pub fn n_classes(&self, base: Option<&BaseData>) -> usize {
        match base {
            Some(b) => b.n_classes,
            None => self.blob_classes,
        }
    }
}

/// One task's data. Index lists address rows of `x` / `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub n_classes: usize,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    /// `R_i`: samples reserved for learning a data-dependent prior.
    pub prior_idx: Vec<usize>,
    /// `S_i \ R_i`: samples the bound is evaluated on.
    pub bound_idx: Vec<usize>,
    /// Feature permutation: task feature `k` is base feature `pixel_perm[k]`.
    pub pixel_perm: Option<Vec<usize>>,
    /// Label map: task label is `label_perm[base label]`.
    pub label_perm: Option<Vec<usize>>,
    pub task_index: usize,
}

impl TaskDataset {
    pub fn rows(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let x = self.x.gather_rows(idx).expect("indices in range");
        let y = idx.iter().map(|&i| self.y[i]).collect();
        (x, y)
    }

    /// Applies the inverse pixel permutation to a task row.
    pub fn unpermute(&self, row: &[f64]) -> Vec<f64> {
        match &self.pixel_perm {
            None => row.to_vec(),
            Some(perm) => {
                let mut out = vec![0.0; row.len()];
                for (k, &src) in perm.iter().enumerate() {
                    out[src] = row[k];
                }
                out
            }
        }
    }
}

fn random_permutation(n: usize, rng: &mut Rng, avoid_identity: bool) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if !avoid_identity || n < 2 || perm.iter().enumerate().any(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Builds task `task_index`. Training tasks use indices `0..n_train_tasks`,
/// test tasks the indices after them.
pub fn make_task(spec: &EnvironmentSpec, base: Option<&BaseData>, task_index: usize) -> Result<TaskDataset, EnvError> {
    spec.validate()?;
    let mut rng = stream(spec.seed, tag::TASK, task_index as u64);
    let total = spec.samples_needed();
    let (x, y, n_classes, pixel_perm, label_perm) = match spec.kind {
        EnvKind::GaussianBlobs => {
            let (x, y) = blob_samples(spec, task_index, total, &mut rng);
            (x, y, spec.blob_classes, None, None)
        }
        kind => {
            let base = base.ok_or_else(|| EnvError::Invalid(format!("{kind} needs a base dataset")))?;
            if total > base.len() {
                return Err(EnvError::NotEnoughData {
                    requested: total,
                    available: base.len(),
                });
            }
            let picked = rand::seq::index::sample(&mut rng, base.len(), total).into_vec();
            let mut x = base.x.gather_rows(&picked).expect("indices in range");
            let mut y: Vec<usize> = picked.iter().map(|&i| base.y[i]).collect();
            if kind == EnvKind::ShuffledPixels {
                let d = base.dim();
                let perm = if task_index == 0 {
                    (0..d).collect()
                } else {
                    random_permutation(d, &mut rng, true)
                };
                let mut out = Tensor::zeros(x.shape());
                for (src, dst) in x.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
                    for (k, &p) in perm.iter().enumerate() {
                        dst[k] = src[p];
                    }
                }
                x = out;
                (x, y, base.n_classes, Some(perm), None)
            } else {
                let perm = if task_index == 0 {
                    (0..base.n_classes).collect()
                } else {
                    random_permutation(base.n_classes, &mut rng, true)
                };
                y.iter_mut().for_each(|l| *l = perm[*l]);
                (x, y, base.n_classes, None, Some(perm))
            }
        }
    };
    let m = spec.samples_per_task;
    let task = TaskDataset {
        x,
        y,
        n_classes,
        train_idx: (0..m).collect(),
        test_idx: (m..total).collect(),
        prior_idx: Vec::new(),
        bound_idx: (0..m).collect(),
        pixel_perm,
        label_perm,
        task_index,
    };
    let mut split_rng = stream(spec.seed, tag::SPLIT, task_index as u64);
    split_prior(task, spec.prior_fraction, &mut split_rng)
}

/// Centers at distance `separation` apart along the first `classes` axes,
/// rotated per task by a product of random Givens rotations.
fn blob_samples(spec: &EnvironmentSpec, task_index: usize, total: usize, rng: &mut Rng) -> (Tensor, Vec<usize>) {
    let d = spec.blob_dim;
    let k = spec.blob_classes;
    let scale = spec.blob_separation / std::f64::consts::SQRT_2;
    let mut centers = vec![vec![0.0; d]; k];
    for (c, center) in centers.iter_mut().enumerate() {
        center[c] = scale;
    }
    if task_index > 0 && spec.blob_rotation > 0.0 {
        for _ in 0..2 * d {
            let i = rng.random_range(0..d);
            let mut j = rng.random_range(0..d - 1);
            if j >= i {
                j += 1;
            }
            let angle = rng.random_range(-spec.blob_rotation..=spec.blob_rotation);
            let (s, co) = angle.sin_cos();
            for center in centers.iter_mut() {
                let (a, b) = (center[i], center[j]);
                center[i] = co * a - s * b;
                center[j] = s * a + co * b;
            }
        }
    }
    let mut x = Tensor::zeros(&[total, d]);
    let mut y = Vec::with_capacity(total);
    for row in x.data_mut().chunks_mut(d) {
        let label = rng.random_range(0..k);
        for (v, c) in row.iter_mut().zip(&centers[label]) {
            let z: f64 = StandardNormal.sample(rng);
            *v = c + z;
        }
        y.push(label);
    }
    (x, y)
}

/// Moves `⌊fraction · |train|⌋` seeded training indices into `prior_idx`.
pub fn split_prior(mut task: TaskDataset, fraction: f64, rng: &mut Rng) -> Result<TaskDataset, EnvError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(EnvError::Invalid(format!("prior fraction must be in [0, 1), got {fraction}")));
    }
    let n = task.train_idx.len();
    let k = (fraction * n as f64).floor() as usize;
    if n - k < 2 {
        return Err(EnvError::Invalid(format!(
            "prior split leaves {} bound samples, need >= 2",
            n - k
        )));
    }
    let mut shuffled = task.train_idx.clone();
    if k > 0 {
        shuffled.shuffle(rng);
    }
    let mut prior: Vec<usize> = shuffled[..k].to_vec();
    let mut bound: Vec<usize> = shuffled[k..].to_vec();
    prior.sort_unstable();
    bound.sort_unstable();
    task.prior_idx = prior;
    task.bound_idx = bound;
    Ok(task)
}

/// Training and test tasks of one environment.
#[derive(Debug, Clone)]
pub struct Environment {
    pub spec: EnvironmentSpec,
    pub input_dim: usize,
    pub n_classes: usize,
    pub train_tasks: Vec<TaskDataset>,
    pub test_tasks: Vec<TaskDataset>,
}

impl Environment {
    pub fn build(spec: &EnvironmentSpec) -> Result<Self, EnvError> {
        spec.validate()?;
        let base = spec.base_data()?;
        let base = base.as_ref();
        let train_tasks = (0..spec.n_train_tasks)
            .map(|i| make_task(spec, base, i))
            .collect::<Result<Vec<_>, _>>()?;
        let test_tasks = (0..spec.n_test_tasks)
            .map(|i| make_task(spec, base, spec.n_train_tasks + i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            spec: spec.clone(),
            input_dim: spec.input_dim(base),
            n_classes: spec.n_classes(base),
            train_tasks,
            test_tasks,
        })
    }
}
