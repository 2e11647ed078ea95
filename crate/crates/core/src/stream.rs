//! Class-incremental task streams.
//!
//! A stream is `T` tasks of `Y` classes each. Task `i` owns the global labels
//! `i*Y .. (i+1)*Y`; label sets never overlap. Each task carries a shuffled
//! training split and a held-out test split.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::partitions::head;
use crate::rng::{derive_seed, seeded, Rng};

/// Fraction of each task's examples held out for testing.
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
    pub task_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: usize,
    pub labels: Range<usize>,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    num_tasks: usize,
    classes_per_task: usize,
    feature_dim: usize,
    tasks: Vec<Task>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn classes_per_task(&self) -> usize {
        self.classes_per_task
    }

    pub fn num_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, i: usize) -> Result<&Task> {
        self.tasks.get(i).ok_or(Error::TaskOutOfRange {
            index: i,
            count: self.num_tasks,
        })
    }

    /// Training examples of every task, task by task.
    pub fn all_train(&self) -> Vec<&Example> {
        self.tasks.iter().flat_map(|t| t.train.iter()).collect()
    }

    /// Byte-level fingerprint used by determinism checks and run manifests.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over every stored bit
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for t in &self.tasks {
            for e in t.train.iter().chain(&t.test) {
                eat(e.label as u64);
                e.features.iter().for_each(|f| eat(f.to_bits()));
            }
        }
        h
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.tasks.iter().enumerate() {
            let owned = head(i, self.classes_per_task);
            for e in t.train.iter().chain(&t.test) {
                if !owned.contains(&e.label) || e.task_id != i {
                    return Err(Error::LabelOutOfRange {
                        label: e.label,
                        start: owned.start,
                        end: owned.end,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Feature rows and labels of a slice of examples.
pub fn to_batch<'a, I>(examples: I, dim: usize) -> (Matrix, Vec<usize>)
where
    I: IntoIterator<Item = &'a Example>,
{
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for e in examples {
        data.extend_from_slice(&e.features);
        labels.push(e.label);
    }
    let rows = labels.len();
    (
        Matrix::from_vec(rows, dim, data).expect("examples share the stream dimension"),
        labels,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobStreamSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    /// Training examples per class; the test split is generated on top.
    pub per_class: usize,
    pub dim: usize,
    /// Minimum pairwise distance between class means.
    pub separation: f64,
    pub seed: u64,
    pub noise_std: f64,
    pub test_fraction: f64,
}

impl BlobStreamSpec {
    pub fn new(
        num_tasks: usize,
        classes_per_task: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
        seed: u64,
    ) -> Self {
        Self {
            num_tasks,
            classes_per_task,
            per_class,
            dim,
            separation,
            seed,
            noise_std: 1.0,
            test_fraction: DEFAULT_TEST_FRACTION,
        }
    }

    fn test_per_class(&self) -> usize {
        if self.test_fraction <= 0.0 {
            return 0;
        }
        let n = (self.per_class as f64 * self.test_fraction / (1.0 - self.test_fraction)).round();
        (n as usize).max(1)
    }
}

const PLACEMENT_ATTEMPTS: usize = 20_000;

/// Class means drawn uniformly from a cube of volume `K * separation^d`,
/// rejecting any candidate closer than `separation` to an accepted mean. In low
/// dimension the required packing density exceeds what random placement can
/// reach and the attempt budget runs out.
fn place_means(spec: &BlobStreamSpec, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let k = spec.num_tasks * spec.classes_per_task;
    let side = spec.separation * (k as f64).powf(1.0 / spec.dim as f64);
    let min_sq = spec.separation * spec.separation;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    while means.len() < k {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cand: Vec<f64> = (0..spec.dim).map(|_| rng.random::<f64>() * side).collect();
            let ok = means.iter().all(|m| sq_dist(m, &cand) >= min_sq);
            if ok {
                means.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasibleGeometry {
                classes: k,
                dim: spec.dim,
                separation: spec.separation,
            });
        }
    }
    Ok(means)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Isotropic Gaussian blobs, one per class.
pub fn generate_blob_stream(spec: &BlobStreamSpec) -> Result<TaskStream> {
    if spec.num_tasks == 0 || spec.classes_per_task == 0 || spec.per_class == 0 {
        return Err(Error::InvalidArgument(
            "tasks, classes per task and examples per class must be positive".into(),
        ));
    }
    if spec.dim < 2 {
        return Err(Error::InvalidArgument("feature dimension must be at least 2".into()));
    }
    if !(spec.separation >= 0.0) || !(spec.noise_std >= 0.0) {
        return Err(Error::InvalidArgument("separation and noise must be non-negative".into()));
    }
    if !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::InvalidArgument("test fraction must lie in [0, 1)".into()));
    }

    let mut rng = seeded(derive_seed(spec.seed, 0x5354_5245));
    let means = place_means(spec, &mut rng)?;
    let n_test = spec.test_per_class();
    let y = spec.classes_per_task;

    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for t in 0..spec.num_tasks {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for label in head(t, y) {
            let mean = &means[label];
            for i in 0..spec.per_class + n_test {
                let features = mean
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + spec.noise_std * z
                    })
                    .collect();
                let ex = Example {
                    features,
                    label,
                    task_id: t,
                };
                if i < spec.per_class {
                    train.push(ex);
                } else {
                    test.push(ex);
                }
            }
        }
        train.shuffle(&mut rng);
        test.shuffle(&mut rng);
        tasks.push(Task {
            id: t,
            labels: head(t, y),
            train,
            test,
        });
    }
    let stream = TaskStream {
        num_tasks: spec.num_tasks,
        classes_per_task: y,
        feature_dim: spec.dim,
        tasks,
    };
    stream.validate()?;
    Ok(stream)
}

/// Raw labeled records from a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    pub records: Vec<(usize, Vec<f64>)>,
}

fn malformed(line: usize, reason: impl Into<String>) -> Error {
    Error::MalformedDataset {
        line,
        reason: reason.into(),
    }
}

fn header_field(tok: Option<&str>, key: &str) -> Result<usize> {
    let tok = tok.ok_or_else(|| malformed(1, format!("missing `{key}=` field")))?;
    let value = tok
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| malformed(1, format!("expected `{key}=<int>`, found `{tok}`")))?;
    value
        .parse()
        .map_err(|_| malformed(1, format!("`{key}` is not an integer")))
}

/// Parses `d=<int> n=<int> classes=<int>` followed by `<label> <f_1> .. <f_d>`
/// records.
pub fn parse_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| malformed(1, "empty file"))??;
    let mut toks = header.split_whitespace();
    let dim = header_field(toks.next(), "d")?;
    let n = header_field(toks.next(), "n")?;
    let num_classes = header_field(toks.next(), "classes")?;
    if toks.next().is_some() {
        return Err(malformed(1, "trailing header fields"));
    }
    if dim == 0 {
        return Err(malformed(1, "dimension must be positive"));
    }

    let mut records = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let label: usize = toks
            .next()
            .unwrap()
            .parse()
            .map_err(|_| malformed(lineno, "label is not a non-negative integer"))?;
        if label >= num_classes {
            return Err(malformed(lineno, format!("label {label} >= classes {num_classes}")));
        }
        let features = toks
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| malformed(lineno, "feature is not a number"))?;
        if features.len() != dim {
            return Err(malformed(
                lineno,
                format!("expected {dim} features, found {}", features.len()),
            ));
        }
        records.push((label, features));
    }
    if records.len() != n {
        return Err(malformed(
            records.len() + 1,
            format!("header declares {n} records, found {}", records.len()),
        ));
    }
    Ok(Dataset {
        dim,
        num_classes,
        records,
    })
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    writeln!(w, "d={} n={} classes={}", ds.dim, ds.records.len(), ds.num_classes)?;
    for (label, feats) in &ds.records {
        write!(w, "{label}")?;
        for f in feats {
            write!(w, " {f}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

impl TaskStream {
    /// Flattens the stream back into file records (train then test, task by task).
    pub fn to_dataset(&self) -> Dataset {
        let records = self
            .tasks
            .iter()
            .flat_map(|t| t.train.iter().chain(&t.test))
            .map(|e| (e.label, e.features.clone()))
            .collect();
        Dataset {
            dim: self.feature_dim,
            num_classes: self.num_classes(),
            records,
        }
    }
}

/// Splits a dataset into `num_tasks` tasks of `classes_per_task` classes. The
/// class-to-task assignment is a seeded permutation of the original labels,
/// which are then renumbered canonically.
pub fn split_dataset(
    ds: &Dataset,
    num_tasks: usize,
    classes_per_task: usize,
    split_seed: u64,
) -> Result<TaskStream> {
    if classes_per_task == 0 || ds.num_classes % classes_per_task != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} classes cannot be split into groups of {classes_per_task}",
            ds.num_classes
        )));
    }
    if num_tasks * classes_per_task != ds.num_classes {
        return Err(Error::InvalidArgument(format!(
            "{num_tasks} tasks x {classes_per_task} classes != {} classes in file",
            ds.num_classes
        )));
    }

    let mut rng = seeded(derive_seed(split_seed, 0x5350_4c54));
    let mut order: Vec<usize> = (0..ds.num_classes).collect();
    order.shuffle(&mut rng);
    let mut relabel = vec![0usize; ds.num_classes];
    for (canonical, &original) in order.iter().enumerate() {
        relabel[original] = canonical;
    }

    let mut by_class: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
    for (label, feats) in &ds.records {
        by_class.entry(relabel[*label]).or_default().push(feats);
    }

    let mut tasks = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for label in head(t, classes_per_task) {
            let mut rows = by_class.get(&label).cloned().unwrap_or_default();
            rows.shuffle(&mut rng);
            let n_test = ((rows.len() as f64 * DEFAULT_TEST_FRACTION).round() as usize)
                .min(rows.len().saturating_sub(1));
            for (i, f) in rows.into_iter().enumerate() {
                let ex = Example {
                    features: f.clone(),
                    label,
                    task_id: t,
                };
                if i < n_test {
                    test.push(ex);
                } else {
                    train.push(ex);
                }
            }
        }
        train.shuffle(&mut rng);
        test.shuffle(&mut rng);
        tasks.push(Task {
            id: t,
            labels: head(t, classes_per_task),
            train,
            test,
        });
    }
    let stream = TaskStream {
        num_tasks,
        classes_per_task,
        feature_dim: ds.dim,
        tasks,
    };
    stream.validate()?;
    Ok(stream)
}

pub fn load_dataset(
    path: &Path,
    num_tasks: usize,
    classes_per_task: usize,
    split_seed: u64,
) -> Result<TaskStream> {
    let file = std::fs::File::open(path)?;
    let ds = parse_dataset(std::io::BufReader::new(file))?;
    split_dataset(&ds, num_tasks, classes_per_task, split_seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugMode {
    None,
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub mode: AugMode,
    pub noise_scale: f64,
    pub mask_fraction: f64,
    pub scale_jitter: f64,
}

impl AugmentationPolicy {
    pub const NONE: AugmentationPolicy = AugmentationPolicy {
        mode: AugMode::None,
        noise_scale: 0.0,
        mask_fraction: 0.0,
        scale_jitter: 0.0,
    };

    pub fn weak(noise_scale: f64) -> Self {
        Self {
            mode: AugMode::Weak,
            noise_scale,
            mask_fraction: 0.0,
            scale_jitter: 0.0,
        }
    }

    pub fn strong(noise_scale: f64, mask_fraction: f64, scale_jitter: f64) -> Self {
        Self {
            mode: AugMode::Strong,
            noise_scale,
            mask_fraction,
            scale_jitter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale >= 0.0) || !(self.scale_jitter >= 0.0) {
            return Err(Error::InvalidArgument(
                "noise scale and scale jitter must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_fraction) {
            return Err(Error::InvalidArgument("mask fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// The `aug` / `str_aug` pair used during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentations {
    pub weak: AugmentationPolicy,
    pub strong: AugmentationPolicy,
}

impl Default for Augmentations {
    fn default() -> Self {
        Self {
            weak: AugmentationPolicy::weak(0.1),
            strong: AugmentationPolicy::strong(0.3, 0.25, 0.2),
        }
    }
}

impl Augmentations {
    /// Strong must perturb at least as much as weak, component by component.
    pub fn validate(&self) -> Result<()> {
        self.weak.validate()?;
        self.strong.validate()?;
        let w = &self.weak;
        let s = &self.strong;
        if s.noise_scale < w.noise_scale
            || s.mask_fraction < w.mask_fraction
            || s.scale_jitter < w.scale_jitter
        {
            return Err(Error::InvalidArgument(
                "strong augmentation must dominate weak augmentation".into(),
            ));
        }
        Ok(())
    }
}

/// Applies `policy` to every row of `x`.
///
/// Weak adds Gaussian noise. Strong adds noise, zeroes `round(mask_fraction * d)`
/// coordinates chosen uniformly, then rescales the row by a factor drawn from
/// `[1 - scale_jitter, 1 + scale_jitter]`.
pub fn augment_with(x: &Matrix, policy: &AugmentationPolicy, rng: &mut Rng) -> Matrix {
    let mut out = x.clone();
    let d = x.cols();
    match policy.mode {
        AugMode::None => {}
        AugMode::Weak => {
            if policy.noise_scale > 0.0 {
                for v in out.as_mut_slice() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += policy.noise_scale * z;
                }
            }
        }
        AugMode::Strong => {
            let n_mask = ((policy.mask_fraction * d as f64).round() as usize).min(d);
            let mut idx: Vec<usize> = (0..d).collect();
            for i in 0..out.rows() {
                let row = out.row_mut(i);
                if policy.noise_scale > 0.0 {
                    for v in row.iter_mut() {
                        let z: f64 = StandardNormal.sample(rng);
                        *v += policy.noise_scale * z;
                    }
                }
                if n_mask > 0 {
                    let (chosen, _) = idx.partial_shuffle(rng, n_mask);
                    for &j in chosen.iter() {
                        row[j] = 0.0;
                    }
                }
                if policy.scale_jitter > 0.0 {
                    let s = 1.0 + policy.scale_jitter * (2.0 * rng.random::<f64>() - 1.0);
                    row.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
    }
    out
}

pub fn augment(x: &Matrix, policy: &AugmentationPolicy, seed: u64) -> Matrix {
    augment_with(x, policy, &mut seeded(seed))
}
