//! Rehearsal memory.
//!
//! Entries hold the example, its label, a logit vector and the task during
//! which they were inserted. Insertion happens once per task and keeps the
//! per-task composition balanced; the logits of heads discovered after an
//! entry's insertion are refreshed from the live model through
//! [`RehearsalBuffer::implant_future_past`].

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{read_f64, read_u64, Mlp};
use crate::partitions::head;
use crate::rng::Rng;
use crate::stream::{augment_with, AugmentationPolicy, Example};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub features: Vec<f64>,
    pub label: usize,
    pub logits: Vec<f64>,
    /// Task during which the entry was stored.
    pub task: usize,
}

/// Rows gathered from a set of buffer entries.
#[derive(Debug, Clone)]
pub struct Draw {
    pub indices: Vec<usize>,
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub logits: Matrix,
    pub tasks: Vec<usize>,
}

/// Outcome of one implantation call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ImplantStats {
    pub updated: usize,
    /// Entries from the current task; they have no future past yet.
    pub current_task: usize,
    /// Entries whose stored ground-truth logit or fresh maximum was not positive.
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RehearsalBuffer {
    capacity: usize,
    entries: Vec<MemoryEntry>,
    /// `(task, missing slots)` whenever a task supplied fewer examples than its quota.
    shortfalls: Vec<(usize, usize)>,
}

impl RehearsalBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("buffer capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            entries: Vec::new(),
            shortfalls: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn shortfalls(&self) -> &[(usize, usize)] {
        &self.shortfalls
    }

    /// Entry indices drawn uniformly: without replacement when `n` fits in the
    /// buffer, with replacement otherwise.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let len = self.entries.len();
        if n <= len {
            Ok(index::sample(rng, len, n).into_vec())
        } else {
            Ok((0..n).map(|_| rng.random_range(0..len)).collect())
        }
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Draw> {
        let first = self.entries.first().ok_or(Error::EmptyBuffer)?;
        let (d, l) = (first.features.len(), first.logits.len());
        let mut features = Vec::with_capacity(indices.len() * d);
        let mut logits = Vec::with_capacity(indices.len() * l);
        let mut labels = Vec::with_capacity(indices.len());
        let mut tasks = Vec::with_capacity(indices.len());
        for &i in indices {
            let e = self.entries.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("entry {i} out of range ({} entries)", self.entries.len()))
            })?;
            features.extend_from_slice(&e.features);
            logits.extend_from_slice(&e.logits);
            labels.push(e.label);
            tasks.push(e.task);
        }
        Ok(Draw {
            indices: indices.to_vec(),
            features: Matrix::from_vec(indices.len(), d, features)?,
            labels,
            logits: Matrix::from_vec(indices.len(), l, logits)?,
            tasks,
        })
    }

    pub fn sample_draw(&self, n: usize, rng: &mut Rng) -> Result<Draw> {
        let idx = self.sample(n, rng)?;
        self.gather(&idx)
    }

    pub fn per_class_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.label).or_insert(0) += 1;
        }
        m
    }

    pub fn per_task_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.task).or_insert(0) += 1;
        }
        m
    }

    /// Extends every stored logit vector with zeros up to `len` (head growth).
    pub fn pad_logits(&mut self, len: usize) {
        for e in &mut self.entries {
            if e.logits.len() < len {
                e.logits.resize(len, 0.0);
            }
        }
    }

    /// Writes the current head's responses into the future-past slot of each
    /// addressed entry.
    ///
    /// For an entry stored before task `current`, the head `fp = [c*Y, (c+1)*Y)`
    /// becomes `fresh_k * min(gamma * gt / fp_max, 1)`, where `gt` is the
    /// stored ground-truth logit and `fp_max` the largest fresh logit over `fp`.
    /// Every other stored logit is left untouched. Entries of the current task
    /// and entries with `gt <= 0` or `fp_max <= 0` are skipped.
    pub fn implant_future_past(
        &mut self,
        indices: &[usize],
        fresh: &Matrix,
        current: usize,
        classes_per_task: usize,
        gamma: f64,
    ) -> Result<ImplantStats> {
        if fresh.rows() != indices.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} logit rows", indices.len()),
                actual: format!("{}", fresh.rows()),
            });
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        let fp = head(current, classes_per_task);
        if fp.end > fresh.cols() {
            return Err(Error::ShapeMismatch {
                expected: format!("at least {} logits", fp.end),
                actual: format!("{}", fresh.cols()),
            });
        }
        let mut stats = ImplantStats::default();
        for (r, &i) in indices.iter().enumerate() {
            let entry = self.entries.get_mut(i).ok_or_else(|| {
                Error::InvalidArgument(format!("entry {i} out of range"))
            })?;
            if entry.task >= current {
                stats.current_task += 1;
                continue;
            }
            let row = &fresh.row(r)[fp.clone()];
            let (arg, fp_max) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (k, &v)| if v > bv { (k, v) } else { (bi, bv) });
            let gt = entry.logits[entry.label];
            if !(gt > 0.0) || !(fp_max > 0.0) {
                stats.degenerate += 1;
                continue;
            }
            if entry.logits.len() < fp.end {
                entry.logits.resize(fp.end, 0.0);
            }
            let cap = gamma * gt;
            let factor = (cap / fp_max).min(1.0);
            let slot = &mut entry.logits[fp.clone()];
            if factor < 1.0 {
                // the rescaled maximum lands on gamma * gt; clamp rounding above it
                for (s, v) in slot.iter_mut().zip(row) {
                    *s = (v * factor).min(cap);
                }
                slot[arg] = cap;
            } else {
                slot.copy_from_slice(row);
            }
            stats.updated += 1;
        }
        Ok(stats)
    }

    /// End-of-task maintenance: frees slots across the stored tasks and fills
    /// them with a class-balanced sample of task `current`, each paired with the
    /// model's logits on a weakly augmented view.
    pub fn end_task_insert(
        &mut self,
        train: &[Example],
        current: usize,
        model: &Mlp,
        aug: &AugmentationPolicy,
        rng: &mut Rng,
    ) -> Result<()> {
        if let Some(e) = train.iter().find(|e| e.task_id != current) {
            return Err(Error::InvalidArgument(format!(
                "example of task {} offered while closing task {current}",
                e.task_id
            )));
        }
        let counts = self.per_task_counts();
        let targets = allocate(self.capacity, &counts, current, train.len());
        let want = balanced_quota(self.capacity, current);
        if targets[&current] < want {
            self.shortfalls.push((current, want - targets[&current]));
        }

        // remove uniformly within each stored task
        let mut doomed = vec![false; self.entries.len()];
        for (&task, &have) in &counts {
            let keep = targets.get(&task).copied().unwrap_or(0);
            if keep >= have {
                continue;
            }
            let mut owned: Vec<usize> = (0..self.entries.len()).filter(|&i| self.entries[i].task == task).collect();
            owned.shuffle(rng);
            for &i in &owned[..have - keep] {
                doomed[i] = true;
            }
        }
        let mut k = 0;
        self.entries.retain(|_| {
            let d = doomed[k];
            k += 1;
            !d
        });

        let chosen = class_balanced(train, targets[&current], rng);
        if chosen.is_empty() {
            return Ok(());
        }
        let dim = chosen[0].features.len();
        let (x, _) = crate::stream::to_batch(chosen.iter().copied(), dim);
        let logits = model.forward(&augment_with(&x, aug, rng))?;
        for (e, l) in chosen.iter().zip(logits.iter_rows()) {
            self.entries.push(MemoryEntry {
                features: e.features.clone(),
                label: e.label,
                logits: l.to_vec(),
                task: current,
            });
        }
        debug_assert!(self.entries.len() <= self.capacity);
        Ok(())
    }
}

/// Slots owed to the newest of `current + 1` tasks under a perfect split.
fn balanced_quota(capacity: usize, current: usize) -> usize {
    let n = current + 1;
    capacity / n + usize::from(capacity % n > 0)
}

/// Round-robin allocation of `capacity` slots over the stored tasks plus the
/// incoming one, newest first. No stored task grows; the result is balanced
/// within one slot among tasks that have enough items.
fn allocate(
    capacity: usize,
    stored: &BTreeMap<usize, usize>,
    current: usize,
    available: usize,
) -> BTreeMap<usize, usize> {
    let mut order: Vec<(usize, usize)> = vec![(current, available)];
    order.extend(stored.iter().rev().filter(|(t, _)| **t != current).map(|(t, c)| (*t, *c)));
    let mut alloc: BTreeMap<usize, usize> = order.iter().map(|(t, _)| (*t, 0)).collect();
    let mut total = 0;
    loop {
        let mut progressed = false;
        for &(t, avail) in &order {
            if total == capacity {
                return alloc;
            }
            let a = alloc.get_mut(&t).unwrap();
            if *a < avail {
                *a += 1;
                total += 1;
                progressed = true;
            }
        }
        if !progressed {
            return alloc;
        }
    }
}

/// `n` examples spread as evenly as possible over the classes present,
/// uniformly at random within each class.
fn class_balanced<'a>(train: &'a [Example], n: usize, rng: &mut Rng) -> Vec<&'a Example> {
    let mut by_class: BTreeMap<usize, Vec<&Example>> = BTreeMap::new();
    for e in train {
        by_class.entry(e.label).or_default().push(e);
    }
    let mut pools: Vec<Vec<&Example>> = by_class.into_values().collect();
    for p in &mut pools {
        p.shuffle(rng);
    }
    // which classes receive the remainder is itself random
    pools.shuffle(rng);
    let mut out = Vec::with_capacity(n);
    let mut depth = 0;
    while out.len() < n {
        let mut any = false;
        for p in &pools {
            if out.len() == n {
                break;
            }
            if let Some(e) = p.get(depth) {
                out.push(*e);
                any = true;
            }
        }
        if !any {
            break;
        }
        depth += 1;
    }
    out
}

const BUFFER_MAGIC: &[u8; 8] = b"XDERBUF1";

impl RehearsalBuffer {
    /// Layout (little-endian): magic, then `capacity`, `entry count`, `d` and
    /// `logit length` as `u64`, then per entry `task` and `label` as `u64`
    /// followed by `d` features and `logit length` logits as `f64`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.entries.first().map_or(0, |e| e.features.len());
        let l = self.entries.first().map_or(0, |e| e.logits.len());
        if self.entries.iter().any(|e| e.features.len() != d || e.logits.len() != l) {
            return Err(Error::Format("entries disagree on feature or logit length".into()));
        }
        w.write_all(BUFFER_MAGIC)?;
        for v in [self.capacity, self.entries.len(), d, l] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for e in &self.entries {
            w.write_all(&(e.task as u64).to_le_bytes())?;
            w.write_all(&(e.label as u64).to_le_bytes())?;
            for f in e.features.iter().chain(&e.logits) {
                w.write_all(&f.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BUFFER_MAGIC {
            return Err(Error::Format("not a buffer file".into()));
        }
        let capacity = read_u64(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let d = read_u64(&mut r)? as usize;
        let l = read_u64(&mut r)? as usize;
        if count > capacity {
            return Err(Error::Format(format!("{count} entries exceed capacity {capacity}")));
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let task = read_u64(&mut r)? as usize;
            let label = read_u64(&mut r)? as usize;
            let features = (0..d).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            let logits = (0..l).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            entries.push(MemoryEntry {
                features,
                label,
                logits,
                task,
            });
        }
        let mut buf = Self::new(capacity.max(1))?;
        buf.entries = entries;
        Ok(buf)
    }

    /// Buffer holding exactly `entries`, e.g. for replaying a saved state.
    pub fn from_entries(capacity: usize, entries: Vec<MemoryEntry>) -> Result<Self> {
        let mut b = Self::new(capacity)?;
        if entries.len() > capacity {
            return Err(Error::InvalidArgument(format!(
                "{} entries exceed capacity {capacity}",
                entries.len()
            )));
        }
        b.entries = entries;
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mlp;
    use crate::rng::seeded;
    use crate::stream::{generate_blob_stream, BlobStreamSpec};

    fn entry(task: usize, label: usize, logits: Vec<f64>) -> MemoryEntry {
        MemoryEntry {
            features: vec![0.0, 1.0],
            label,
            logits,
            task,
        }
    }

    fn fill(cap: usize, t: usize, y: usize, per_class: usize) -> Vec<RehearsalBuffer> {
        let stream = generate_blob_stream(&BlobStreamSpec::new(t, y, per_class, 8, 2.0, 5)).unwrap();
        let model = Mlp::reference(8, &[4], t * y, 1).unwrap();
        let mut buf = RehearsalBuffer::new(cap).unwrap();
        let mut rng = seeded(2);
        let mut snaps = Vec::new();
        for c in 0..t {
            buf.end_task_insert(&stream.tasks()[c].train, c, &model, &AugmentationPolicy::weak(0.1), &mut rng)
                .unwrap();
            snaps.push(buf.clone());
        }
        snaps
    }

    #[test]
    fn first_task_fills_buffer_class_balanced() {
        let snaps = fill(20, 5, 10, 6);
        let b = &snaps[0];
        assert_eq!(b.len(), 20);
        let counts = b.per_class_counts();
        assert_eq!(counts.len(), 10);
        assert!(counts.values().all(|&c| c == 2));
        assert_eq!(counts.values().sum::<usize>(), b.len());
    }

    #[test]
    fn quotas_follow_task_count() {
        let snaps = fill(20, 5, 10, 6);
        let t1 = snaps[1].per_task_counts();
        assert_eq!(t1, BTreeMap::from([(0, 10), (1, 10)]));
        let t4 = snaps[4].per_task_counts();
        assert!(t4.values().all(|&c| c == 4));
        for s in &snaps {
            let c = s.per_task_counts();
            let (lo, hi) = (c.values().min().unwrap(), c.values().max().unwrap());
            assert!(hi - lo <= 1);
            assert_eq!(s.len(), 20);
        }
    }

    #[test]
    fn shortfall_recorded() {
        let snaps = fill(50, 2, 2, 5);
        // 10 examples for a quota of 50
        assert_eq!(snaps[0].len(), 10);
        assert_eq!(snaps[0].shortfalls()[0], (0, 40));
        assert_eq!(snaps[1].len(), 20);
    }

    #[test]
    fn empty_buffer_cannot_sample() {
        let b = RehearsalBuffer::new(5).unwrap();
        assert!(matches!(b.sample(1, &mut seeded(0)), Err(Error::EmptyBuffer)));
        assert!(b.per_class_counts().is_empty());
    }

    #[test]
    fn sampling_cases() {
        let b = RehearsalBuffer::from_entries(3, vec![entry(0, 0, vec![1.0])]).unwrap();
        assert_eq!(b.sample(1, &mut seeded(0)).unwrap(), vec![0]);

        let b = RehearsalBuffer::from_entries(
            6,
            (0..6).map(|i| entry(0, i, vec![0.0; 6])).collect(),
        ).unwrap();
        let mut idx = b.sample(6, &mut seeded(3)).unwrap();
        idx.sort();
        assert_eq!(idx, (0..6).collect::<Vec<_>>());
        assert_eq!(b.sample(10, &mut seeded(3)).unwrap().len(), 10);
    }

    #[test]
    fn sampling_is_uniform() {
        let n = 10;
        let b = RehearsalBuffer::from_entries(n, (0..n).map(|i| entry(0, 0, vec![i as f64])).collect()).unwrap();
        let mut rng = seeded(11);
        let mut counts = vec![0usize; n];
        let draws = 100_000;
        for _ in 0..draws / 2 {
            for i in b.sample(2, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        let expect = draws as f64 / n as f64;
        let sigma = (expect * (1.0 - 1.0 / n as f64)).sqrt();
        for c in &counts {
            assert!((*c as f64 - expect).abs() < 3.0 * sigma, "{counts:?}");
        }
        // chi-square with 9 dof; 99.9% quantile is 27.88
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn implant_scalar_examples() {
        // Y = 2, entry from task 0, current task 1: fp = [2, 4)
        let mut b = RehearsalBuffer::from_entries(2, vec![entry(0, 0, vec![4.0, 0.0, 9.0, 9.0])]).unwrap();
        let fresh = Matrix::from_vec(1, 4, vec![7.0, 7.0, 2.0, 1.0]).unwrap();
        b.implant_future_past(&[0], &fresh, 1, 2, 0.75).unwrap();
        assert_eq!(b.entries()[0].logits, vec![4.0, 0.0, 2.0, 1.0]);

        let mut b = RehearsalBuffer::from_entries(2, vec![entry(0, 0, vec![2.0, 0.0, 9.0, 9.0])]).unwrap();
        let fresh = Matrix::from_vec(1, 4, vec![7.0, 7.0, 4.0, 2.0]).unwrap();
        b.implant_future_past(&[0], &fresh, 1, 2, 0.75).unwrap();
        assert_eq!(b.entries()[0].logits, vec![2.0, 0.0, 1.5, 0.75]);

        // boundary: fp max equals gamma * gt
        let mut b = RehearsalBuffer::from_entries(2, vec![entry(0, 0, vec![4.0, 0.0, 9.0, 9.0])]).unwrap();
        let fresh = Matrix::from_vec(1, 4, vec![0.0, 0.0, 3.0, -1.0]).unwrap();
        b.implant_future_past(&[0], &fresh, 1, 2, 0.75).unwrap();
        assert_eq!(b.entries()[0].logits, vec![4.0, 0.0, 3.0, -1.0]);
    }

    #[test]
    fn implant_skips_current_task_and_degenerate_entries() {
        let mut b = RehearsalBuffer::from_entries(
            3,
            vec![
                entry(1, 2, vec![1.0, 1.0, 1.0, 1.0]),
                entry(0, 0, vec![-1.0, 1.0, 1.0, 1.0]),
                entry(0, 1, vec![1.0, 1.0, 5.0, 5.0]),
            ],
        ).unwrap();
        let before = b.clone();
        let fresh = Matrix::from_vec(3, 4, vec![0.0, 0.0, 3.0, 3.0, 0.0, 0.0, 3.0, 3.0, 0.0, 0.0, -3.0, -1.0])
            .unwrap();
        let s = b.implant_future_past(&[0, 1, 2], &fresh, 1, 2, 0.8).unwrap();
        assert_eq!(s, ImplantStats { updated: 0, current_task: 1, degenerate: 2 });
        assert_eq!(b, before);
    }

    #[test]
    fn serialization_round_trip() {
        let snaps = fill(20, 3, 2, 6);
        let b = &snaps[2];
        let mut bytes = Vec::new();
        b.write_to(&mut bytes).unwrap();
        let back = RehearsalBuffer::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.entries(), b.entries());
        assert_eq!(back.capacity(), b.capacity());
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn allocation_balances() {
        let stored = BTreeMap::from([(0, 7), (1, 7), (2, 6)]);
        let a = allocate(20, &stored, 3, 100);
        assert_eq!(a, BTreeMap::from([(0, 5), (1, 5), (2, 5), (3, 5)]));
        let stored = BTreeMap::from([(0, 10), (1, 10)]);
        let a = allocate(20, &stored, 2, 100);
        assert_eq!(a, BTreeMap::from([(0, 6), (1, 7), (2, 7)]));
    }
}
