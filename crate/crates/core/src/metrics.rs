//! Summary metrics and bias diagnostics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::argmax;

/// `a[i][t]`: accuracy on task `i` after training task `t`, defined for `i <= t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    num_tasks: usize,
    entries: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            num_tasks,
            entries: vec![vec![None; num_tasks]; num_tasks],
        }
    }

    /// Builds a full lower-triangular matrix from `rows[i][t]`; entries above
    /// the diagonal are ignored.
    pub fn from_lower(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (i, row) in rows.iter().enumerate() {
            for t in i..rows.len() {
                let v = *row.get(t).ok_or_else(|| {
                    Error::InvalidArgument(format!("row {i} has {} entries, need {}", row.len(), rows.len()))
                })?;
                m.set(i, t, v)?;
            }
        }
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn set(&mut self, task: usize, after: usize, value: f64) -> Result<()> {
        if after >= self.num_tasks {
            return Err(Error::TaskOutOfRange {
                index: after,
                count: self.num_tasks,
            });
        }
        if task > after {
            return Err(Error::InvalidArgument(format!(
                "task {task} cannot be evaluated after training task {after}"
            )));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidArgument(format!("accuracy {value} outside [0, 1]")));
        }
        self.entries[task][after] = Some(value);
        Ok(())
    }

    pub fn get(&self, task: usize, after: usize) -> Option<f64> {
        self.entries.get(task)?.get(after).copied().flatten()
    }

    pub fn is_lower_triangular_complete(&self) -> bool {
        (0..self.num_tasks).all(|t| (0..self.num_tasks).all(|i| self.get(i, t).is_some() == (i <= t)))
    }

    /// Rows are tasks, columns are training stages; missing entries are blank.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task");
        for t in 0..self.num_tasks {
            write!(s, ",after_{t}").unwrap();
        }
        s.push('\n');
        for i in 0..self.num_tasks {
            write!(s, "{i}").unwrap();
            for t in 0..self.num_tasks {
                match self.get(i, t) {
                    Some(v) => write!(s, ",{v}").unwrap(),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty matrix file".into()))?;
        let t = header.split(',').count().saturating_sub(1);
        let mut m = Self::new(t);
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != t + 1 {
                return Err(Error::Format(format!("matrix row {i} has {} cells", cells.len())));
            }
            for (after, cell) in cells[1..].iter().enumerate() {
                if !cell.is_empty() {
                    let v: f64 = cell
                        .parse()
                        .map_err(|_| Error::Format(format!("bad accuracy {cell:?} in row {i}")))?;
                    m.set(i, after, v)?;
                }
            }
        }
        Ok(m)
    }
}

/// Mean final-column accuracy.
pub fn faa(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.num_tasks();
    if t == 0 {
        return Err(Error::IncompleteMatrix("matrix has no tasks".into()));
    }
    let mut sum = 0.0;
    for i in 0..t {
        sum += m
            .get(i, t - 1)
            .ok_or_else(|| Error::IncompleteMatrix(format!("missing final accuracy of task {i}")))?;
    }
    Ok(sum / t as f64)
}

/// Mean drop from each old task's best earlier accuracy to its final one.
pub fn ff(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.num_tasks();
    if t < 2 {
        return Err(Error::IncompleteMatrix("forgetting needs at least two tasks".into()));
    }
    let mut sum = 0.0;
    for j in 0..t - 1 {
        let mut best = f64::NEG_INFINITY;
        for l in j..t - 1 {
            let v = m
                .get(j, l)
                .ok_or_else(|| Error::IncompleteMatrix(format!("missing accuracy of task {j} after {l}")))?;
            best = best.max(v);
        }
        let last = m
            .get(j, t - 1)
            .ok_or_else(|| Error::IncompleteMatrix(format!("missing final accuracy of task {j}")))?;
        sum += best - last;
    }
    Ok(sum / (t - 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationInput {
    pub confidence: Vec<f64>,
    pub correct: Vec<bool>,
    pub bins: usize,
}

impl CalibrationInput {
    /// Max softmax probability and correctness of each row.
    pub fn from_logits(logits: &Matrix, labels: &[usize], bins: usize) -> Self {
        let mut confidence = Vec::with_capacity(logits.rows());
        let mut correct = Vec::with_capacity(logits.rows());
        for (row, &y) in logits.iter_rows().zip(labels) {
            let p = softmax(row);
            let k = argmax(row);
            confidence.push(p[k]);
            correct.push(k == y);
        }
        Self {
            confidence,
            correct,
            bins,
        }
    }
}

pub const DEFAULT_ECE_BINS: usize = 10;

/// Expected calibration error with equal-width bins; bin `b` holds
/// confidences in `(b/B, (b+1)/B]`, and 0 joins the first bin.
pub fn ece(input: &CalibrationInput) -> Result<f64> {
    if input.bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    if input.confidence.len() != input.correct.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} correctness flags", input.confidence.len()),
            actual: format!("{}", input.correct.len()),
        });
    }
    if let Some(c) = input.confidence.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::InvalidArgument(format!("confidence {c} outside [0, 1]")));
    }
    let n = input.confidence.len();
    if n == 0 {
        return Ok(0.0);
    }
    let b = input.bins;
    let mut count = vec![0usize; b];
    let mut conf = vec![0.0; b];
    let mut hits = vec![0usize; b];
    for (&c, &ok) in input.confidence.iter().zip(&input.correct) {
        let k = bin_of(c, b);
        count[k] += 1;
        conf[k] += c;
        hits[k] += usize::from(ok);
    }
    let mut e = 0.0;
    for k in 0..b {
        if count[k] > 0 {
            let nk = count[k] as f64;
            e += (nk / n as f64) * (hits[k] as f64 / nk - conf[k] / nk).abs();
        }
    }
    Ok(e)
}

fn bin_of(c: f64, bins: usize) -> usize {
    (0..bins).find(|&b| c <= (b + 1) as f64 / bins as f64).unwrap_or(bins - 1)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Fine label to coarse label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperclassMap {
    coarse: Vec<usize>,
    num_coarse: usize,
}

impl SuperclassMap {
    pub fn new(coarse: Vec<usize>) -> Result<Self> {
        let num_coarse = coarse.iter().max().map_or(0, |m| m + 1);
        for k in 0..num_coarse {
            if !coarse.contains(&k) {
                return Err(Error::InvalidArgument(format!("superclass {k} has no members")));
            }
        }
        Ok(Self { coarse, num_coarse })
    }

    /// Classes `2k` and `2k + 1` form superclass `k`.
    pub fn consecutive_pairs(num_classes: usize) -> Self {
        Self {
            coarse: (0..num_classes).map(|k| k / 2).collect(),
            num_coarse: num_classes.div_ceil(2),
        }
    }

    pub fn coarse_of(&self, fine: usize) -> Option<usize> {
        self.coarse.get(fine).copied()
    }

    pub fn num_fine(&self) -> usize {
        self.coarse.len()
    }

    pub fn num_coarse(&self) -> usize {
        self.num_coarse
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondaryMetrics {
    pub ss_err: f64,
    pub ss_nll: f64,
}

/// Superclass error and likelihood of the secondary prediction: the largest
/// fine logit is dropped, the rest go through a softmax, and member
/// probabilities are summed per superclass.
pub fn ss_metrics(logits: &Matrix, labels: &[usize], map: &SuperclassMap) -> Result<SecondaryMetrics> {
    if logits.cols() < 2 {
        return Err(Error::InvalidArgument("secondary metrics need at least two logits".into()));
    }
    if logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", logits.rows()),
            actual: format!("{}", labels.len()),
        });
    }
    if map.num_fine() < logits.cols() {
        return Err(Error::InvalidArgument(format!(
            "superclass map covers {} classes, logits have {}",
            map.num_fine(),
            logits.cols()
        )));
    }
    let n = logits.rows();
    if n == 0 {
        return Err(Error::Empty("no examples".into()));
    }
    let mut wrong = 0usize;
    let mut nll = 0.0;
    for (row, &y) in logits.iter_rows().zip(labels) {
        let truth = map
            .coarse_of(y)
            .ok_or_else(|| Error::LabelOutOfRange { label: y, start: 0, end: map.num_fine() })?;
        let top = argmax(row);
        let m = row
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != top)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut mass = vec![0.0; map.num_coarse()];
        let mut z = 0.0;
        for (k, v) in row.iter().enumerate() {
            if k != top {
                let e = (v - m).exp();
                mass[map.coarse[k]] += e;
                z += e;
            }
        }
        let pred = argmax(&mass);
        wrong += usize::from(pred != truth);
        nll -= (mass[truth] / z).ln();
    }
    Ok(SecondaryMetrics {
        ss_err: wrong as f64 / n as f64,
        ss_nll: nll / n as f64,
    })
}

/// Share of misclassified old-task predictions won by each head `0..=current`.
/// `None` when no old-task example is misclassified.
pub fn error_head_histogram(
    predictions: &[usize],
    labels: &[usize],
    current: usize,
    classes_per_task: usize,
) -> Result<Option<Vec<f64>>> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", predictions.len()),
            actual: format!("{}", labels.len()),
        });
    }
    if classes_per_task == 0 {
        return Err(Error::InvalidArgument("classes per task must be positive".into()));
    }
    let mut hist = vec![0usize; current + 1];
    let mut total = 0usize;
    for (&p, &y) in predictions.iter().zip(labels) {
        if y / classes_per_task >= current || p == y {
            continue;
        }
        let h = p / classes_per_task;
        if h > current {
            return Err(Error::InvalidArgument(format!(
                "prediction {p} falls in head {h}, beyond task {current}"
            )));
        }
        hist[h] += 1;
        total += 1;
    }
    if total == 0 {
        return Ok(None);
    }
    Ok(Some(hist.into_iter().map(|c| c as f64 / total as f64).collect()))
}

/// Mean logit vector of the rows whose label passes `filter`.
pub fn avg_logit_profile(logits: &Matrix, labels: &[usize], filter: impl Fn(usize) -> bool) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; logits.cols()];
    let mut n = 0usize;
    for (row, &y) in logits.iter_rows().zip(labels) {
        if filter(y) {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("no example passes the class filter".into()));
    }
    Ok(sum.into_iter().map(|s| s / n as f64).collect())
}

/// One metric report line: `{run_id, metric, value, scope}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub metric: String,
    pub value: Option<f64>,
    pub scope: String,
}
