//! Post-hoc probes on trained snapshots: loss flatness under weight noise,
//! empirical Fisher trace, retraining from a buffer alone, nearest-neighbour
//! forward transfer and head pre-allocation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::buffer::RehearsalBuffer;
use crate::error::{Error, Result};
use crate::losses::{der_loss, full_ce};
use crate::matrix::Matrix;
use crate::metrics::faa;
use crate::model::{perturb_with, Mlp, OptimizerState};
use crate::partitions::head;
use crate::rng::{derive_seed, seeded};
use crate::stream::{augment_with, to_batch, AugmentationPolicy, Example, Task, TaskStream};
use crate::trainer::{evaluate, run_sequence, Prealloc, TrainConfig};

pub const DEFAULT_ALPHA_GRID: [f64; 5] = [0.0, 0.05, 0.1, 0.2, 0.4];
pub const DEFAULT_NOISE_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSplit {
    Train,
    Test,
}

impl FromStr for DataSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(DataSplit::Train),
            "test" => Ok(DataSplit::Test),
            _ => Err(Error::InvalidArgument(format!("split must be train or test, got {s:?}"))),
        }
    }
}

/// One example slice per task.
pub fn task_sets(stream: &TaskStream, split: DataSplit) -> Vec<&[Example]> {
    stream
        .tasks()
        .iter()
        .map(|t| match split {
            DataSplit::Train => t.train.as_slice(),
            DataSplit::Test => t.test.as_slice(),
        })
        .collect()
}

/// Full-softmax cross-entropy averaged within each task, then across tasks.
pub fn cicl_loss(model: &Mlp, tasks: &[&[Example]]) -> Result<f64> {
    let tasks: Vec<&&[Example]> = tasks.iter().filter(|t| !t.is_empty()).collect();
    if tasks.is_empty() {
        return Err(Error::Empty("no examples".into()));
    }
    let mut sum = 0.0;
    for t in &tasks {
        let (x, y) = to_batch(t.iter(), model.input_dim());
        sum += full_ce(&model.forward(&x)?, &y)?.value;
    }
    Ok(sum / tasks.len() as f64)
}

/// Mean of `objective` over `n_samples` draws of `theta_i + alpha * |theta_i| * z_i`.
/// At `alpha = 0` the objective is evaluated once at `params`, without sampling.
pub fn noisy_objective(
    params: &[f64],
    alpha: f64,
    n_samples: usize,
    seed: u64,
    mut objective: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one noise sample".into()));
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise scale must be non-negative, got {alpha}")));
    }
    if alpha == 0.0 {
        return objective(params);
    }
    let mut rng = seeded(seed);
    let mut sum = 0.0;
    for _ in 0..n_samples {
        sum += objective(&perturb_with(params, alpha, &mut rng))?;
    }
    Ok(sum / n_samples as f64)
}

/// Expected task-averaged loss under relative Gaussian weight noise.
pub fn noisy_loss(model: &Mlp, tasks: &[&[Example]], alpha: f64, n_samples: usize, seed: u64) -> Result<f64> {
    noisy_objective(model.params(), alpha, n_samples, seed, |p| cicl_loss(&model.with_params(p)?, tasks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub alphas: Vec<f64>,
    pub losses: Vec<f64>,
    pub samples: usize,
}

pub fn flatness(model: &Mlp, tasks: &[&[Example]], alphas: &[f64], n_samples: usize, seed: u64) -> Result<FlatnessReport> {
    let losses = alphas
        .iter()
        .enumerate()
        .map(|(i, &a)| noisy_loss(model, tasks, a, n_samples, derive_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FlatnessReport {
        alphas: alphas.to_vec(),
        losses,
        samples: n_samples,
    })
}

/// Squared gradient norm of the full cross-entropy of each example, averaged
/// within each task and then across tasks.
pub fn fisher_trace(model: &Mlp, tasks: &[&[Example]]) -> Result<f64> {
    let tasks: Vec<&&[Example]> = tasks.iter().filter(|t| !t.is_empty()).collect();
    if tasks.is_empty() {
        return Err(Error::Empty("no examples".into()));
    }
    let mut total = 0.0;
    for t in &tasks {
        let mut sum = 0.0;
        for e in t.iter() {
            let x = Matrix::from_vec(1, e.features.len(), e.features.clone())?;
            let (logits, trace) = model.forward_traced(&x)?;
            let g = model.backward(&trace, &full_ce(&logits, &[e.label])?.grad)?;
            sum += g.iter().map(|v| v * v).sum::<f64>();
        }
        total += sum / t.len() as f64;
    }
    Ok(total / tasks.len() as f64)
}

/// What a model retrained on a buffer is allowed to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrainMode {
    Labels,
    Logits,
    Both,
}

impl RetrainMode {
    pub const ALL: [RetrainMode; 3] = [RetrainMode::Labels, RetrainMode::Logits, RetrainMode::Both];
}

impl fmt::Display for RetrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrainMode::Labels => "labels",
            RetrainMode::Logits => "logits",
            RetrainMode::Both => "both",
        })
    }
}

impl FromStr for RetrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RetrainMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("retrain mode must be labels, logits or both, got {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    /// Logit-matching weight.
    pub alpha: f64,
    /// Label weight when combined with logit matching.
    pub beta: f64,
    pub augment: AugmentationPolicy,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            hidden: vec![32, 32],
            alpha: 0.3,
            beta: 0.8,
            augment: AugmentationPolicy::weak(0.1),
            seed: 0,
        }
    }
}

/// Trains a fresh model on the buffer contents only and returns its accuracy
/// over every test example of the stream.
pub fn offline_buffer_retrain(
    buffer: &RehearsalBuffer,
    stream: &TaskStream,
    mode: RetrainMode,
    cfg: &RetrainConfig,
) -> Result<f64> {
    let first = buffer.entries().first().ok_or(Error::EmptyBuffer)?;
    let outputs = first.logits.len();
    if outputs < stream.num_classes() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} stored logits", stream.num_classes()),
            actual: format!("{outputs}"),
        });
    }
    let mut model = Mlp::reference(stream.feature_dim(), &cfg.hidden, outputs, derive_seed(cfg.seed, 1))?;
    let mut opt = OptimizerState::new(cfg.lr, 0.0, 0.0)?;
    let mut rng = seeded(derive_seed(cfg.seed, 2));
    let all = buffer.gather(&(0..buffer.len()).collect::<Vec<_>>())?;
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x = Matrix::from_rows(&chunk.iter().map(|&i| all.features.row(i)).collect::<Vec<_>>(), all.features.cols())?;
            let stored = Matrix::from_rows(&chunk.iter().map(|&i| all.logits.row(i)).collect::<Vec<_>>(), outputs)?;
            let y: Vec<usize> = chunk.iter().map(|&i| all.labels[i]).collect();
            let (logits, trace) = model.forward_traced(&augment_with(&x, &cfg.augment, &mut rng))?;
            let dlogits = match mode {
                RetrainMode::Labels => full_ce(&logits, &y)?.grad,
                RetrainMode::Logits => der_loss(&stored, &logits, cfg.alpha)?.grad,
                RetrainMode::Both => {
                    let mut g = der_loss(&stored, &logits, cfg.alpha)?.grad;
                    g.add_assign(&full_ce(&logits, &y)?.scaled(cfg.beta).grad);
                    g
                }
            };
            let grad = model.backward(&trace, &dlogits)?;
            let mut p = model.snapshot();
            opt.step(&mut p, &grad)?;
            model.restore(&p)?;
        }
    }
    let test: Vec<Example> = stream.tasks().iter().flat_map(|t| t.test.iter().cloned()).collect();
    evaluate(&model, &test)
}

/// 1-nearest-neighbour accuracy in the logit slice of `head_task`, fitted on
/// `fit` and scored on `eval`. Euclidean distance; ties go to the earliest fit point.
pub fn nn_accuracy(model: &Mlp, head_task: usize, classes_per_task: usize, fit: &[Example], eval: &[Example]) -> Result<f64> {
    if fit.is_empty() || eval.is_empty() {
        return Err(Error::Empty("nearest-neighbour probe needs fit and eval examples".into()));
    }
    let h = head(head_task, classes_per_task);
    if h.end > model.output_dim() {
        return Err(Error::InvalidArgument(format!(
            "model exposes {} logits, head {head_task} needs {}",
            model.output_dim(),
            h.end
        )));
    }
    let embed = |ex: &[Example]| -> Result<(Matrix, Vec<usize>)> {
        let (x, y) = to_batch(ex.iter(), model.input_dim());
        let l = model.forward(&x)?;
        let rows: Vec<&[f64]> = l.iter_rows().map(|r| &r[h.clone()]).collect();
        Ok((Matrix::from_rows(&rows, h.len())?, y))
    };
    let (fx, fy) = embed(fit)?;
    let (ex, ey) = embed(eval)?;
    let mut hits = 0;
    for (q, &truth) in ex.iter_rows().zip(&ey) {
        let mut best = (f64::INFINITY, 0);
        for (i, p) in fx.iter_rows().enumerate() {
            let d: f64 = q.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        hits += usize::from(fy[best.1] == truth);
    }
    Ok(hits as f64 / ey.len() as f64)
}

/// Nearest-neighbour accuracy of the frozen `model` on task `target`, fitted
/// on `shots` training examples per target class drawn with `seed`.
pub fn forward_transfer(model: &Mlp, target: &Task, classes_per_task: usize, shots: usize, seed: u64) -> Result<f64> {
    if shots == 0 {
        return Err(Error::InvalidArgument("need at least one shot".into()));
    }
    let mut rng = seeded(seed);
    let mut fit = Vec::new();
    for label in target.labels.clone() {
        let mut pool: Vec<&Example> = target.train.iter().filter(|e| e.label == label).collect();
        if pool.len() < shots {
            return Err(Error::InvalidArgument(format!(
                "class {label} has {} training examples, {shots} shots requested",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        fit.extend(pool[..shots].iter().map(|e| (*e).clone()));
    }
    nn_accuracy(model, target.id, classes_per_task, &fit, &target.test)
}

/// Trapezoidal area under `acc(k)` divided by the span of `k`; a single point
/// is its own value.
pub fn auc(shots: &[usize], acc: &[f64]) -> Result<f64> {
    if shots.is_empty() || shots.len() != acc.len() {
        return Err(Error::InvalidArgument("shot grid and accuracies must be non-empty and aligned".into()));
    }
    if shots.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("shot grid must be strictly increasing".into()));
    }
    if shots.len() == 1 {
        return Ok(acc[0]);
    }
    let mut area = 0.0;
    for i in 1..shots.len() {
        area += 0.5 * (acc[i] + acc[i - 1]) * (shots[i] - shots[i - 1]) as f64;
    }
    Ok(area / (shots[shots.len() - 1] - shots[0]) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTransferCurve {
    pub source: usize,
    pub target: usize,
    pub shots: Vec<usize>,
    pub accuracies: Vec<f64>,
    pub auc: f64,
}

/// Curves for every target after `source`, from the snapshot taken after `source`.
pub fn transfer_curves(
    model: &Mlp,
    stream: &TaskStream,
    source: usize,
    shots: &[usize],
    seed: u64,
) -> Result<Vec<ForwardTransferCurve>> {
    let mut out = Vec::new();
    for target in stream.tasks().iter().skip(source + 1) {
        let accuracies = shots
            .iter()
            .map(|&k| forward_transfer(model, target, stream.classes_per_task(), k, derive_seed(seed, (target.id * 1000 + k) as u64)))
            .collect::<Result<Vec<_>>>()?;
        out.push(ForwardTransferCurve {
            source,
            target: target.id,
            auc: auc(shots, &accuracies)?,
            shots: shots.to_vec(),
            accuracies,
        });
    }
    Ok(out)
}

/// Mean AUC over the curves of one source task.
pub fn auc_t(curves: &[ForwardTransferCurve]) -> Result<f64> {
    if curves.is_empty() {
        return Err(Error::Empty("no future task after the source".into()));
    }
    Ok(curves.iter().map(|c| c.auc).sum::<f64>() / curves.len() as f64)
}

/// FAA of X-DER-style runs for each number of pre-allocated future heads.
pub fn preallocation_sweep(stream: &TaskStream, values: &[usize], config: &TrainConfig) -> Result<Vec<(usize, f64)>> {
    values
        .iter()
        .map(|&t| {
            let mut c = config.clone();
            c.prealloc = if t + 1 >= stream.num_tasks() { Prealloc::All } else { Prealloc::Heads(t) };
            Ok((t, faa(&run_sequence(stream, &c)?.matrix)?))
        })
        .collect()
}
