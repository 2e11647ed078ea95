//! Loss terms as functions of logit batches.
//!
//! Every function returns the batch-mean loss together with its exact
//! gradient with respect to the logits it was given. Parameter gradients come
//! from pushing those logit gradients through [`crate::model::Mlp::backward`].

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::partitions::{head, LogitPartition};

/// Added to the L2 norm before normalising a head slice.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// `d value / d logits`, same shape as the logits.
    pub grad: Matrix,
}

impl LossOutput {
    fn zero(rows: usize, cols: usize) -> Self {
        Self {
            value: 0.0,
            grad: Matrix::zeros(rows, cols),
        }
    }

    pub fn scaled(mut self, w: f64) -> Self {
        self.value *= w;
        self.grad.scale(w);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Logit-matching weight.
    pub alpha: f64,
    /// Weight of the cross-entropy on buffer labels.
    pub beta: f64,
    /// Future-preparation weight.
    pub lambda: f64,
    /// Past/future constraint weight.
    pub eta: f64,
    /// Constraint margin.
    pub margin: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Future-past implantation attenuation.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.8,
            lambda: 0.05,
            eta: 0.001,
            margin: 0.3,
            tau: 5.0,
            gamma: 0.85,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("eta", self.eta),
            ("margin", self.margin),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

fn check_rows(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", logits.rows()),
            actual: format!("{} labels", labels.len()),
        });
    }
    Ok(())
}

/// `alpha * mean_n ||stored_n - fresh_n||^2`; gradient is taken w.r.t. `fresh`.
pub fn der_loss(stored: &Matrix, fresh: &Matrix, alpha: f64) -> Result<LossOutput> {
    stored.ensure_shape(fresh.rows(), fresh.cols())?;
    let n = fresh.rows();
    if n == 0 {
        return Ok(LossOutput::zero(0, fresh.cols()));
    }
    let mut grad = Matrix::zeros(n, fresh.cols());
    let mut total = 0.0;
    for r in 0..n {
        let mut row = 0.0;
        for ((g, s), f) in grad.row_mut(r).iter_mut().zip(stored.row(r)).zip(fresh.row(r)) {
            let d = f - s;
            row += d * d;
            *g = 2.0 * alpha * d / n as f64;
        }
        total += row;
    }
    Ok(LossOutput {
        value: alpha * total / n as f64,
        grad,
    })
}

/// Mean cross-entropy with the softmax restricted to `range`. Logits outside
/// the range receive an exactly-zero gradient.
pub fn restricted_ce(logits: &Matrix, labels: &[usize], range: Range<usize>) -> Result<LossOutput> {
    check_rows(logits, labels)?;
    if range.is_empty() || range.end > logits.cols() {
        return Err(Error::InvalidArgument(format!(
            "softmax range {range:?} invalid for {} logits",
            logits.cols()
        )));
    }
    let n = logits.rows();
    let mut out = LossOutput::zero(n, logits.cols());
    if n == 0 {
        return Ok(out);
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if !range.contains(&y) {
            return Err(Error::LabelOutOfRange {
                label: y,
                start: range.start,
                end: range.end,
            });
        }
        let z = &logits.row(r)[range.clone()];
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - z[y - range.start];
        let g = &mut out.grad.row_mut(r)[range.clone()];
        for (k, (gk, zk)) in g.iter_mut().zip(z).enumerate() {
            let p = (zk - lse).exp();
            let target = if k + range.start == y { 1.0 } else { 0.0 };
            *gk = (p - target) * inv_n;
        }
    }
    out.value = total * inv_n;
    Ok(out)
}

/// Cross-entropy over every logit (the pre-separation formulation).
pub fn full_ce(logits: &Matrix, labels: &[usize]) -> Result<LossOutput> {
    restricted_ce(logits, labels, 0..logits.cols())
}

/// Separated cross-entropy for stream examples: softmax over the present head.
pub fn sce_stream(logits: &Matrix, labels: &[usize], part: &LogitPartition) -> Result<LossOutput> {
    restricted_ce(logits, labels, part.present())
}

/// Separated cross-entropy for buffer examples: softmax over the past heads.
/// Errors on the first task, which has no past.
pub fn sce_buffer(logits: &Matrix, labels: &[usize], part: &LogitPartition) -> Result<LossOutput> {
    if part.current() == 0 {
        return Err(Error::Empty("no past classes on the first task".into()));
    }
    restricted_ce(logits, labels, part.past())
}

/// Supervised-contrastive loss on one head slice.
///
/// Each row's slice of `head_range` is L2-normalised; for every anchor `i` with
/// at least one positive, the loss is
/// `-(1/|P(i)|) sum_{p in P(i)} log( exp(z_i.z_p/tau) / sum_{k != i} exp(z_i.z_k/tau) )`,
/// averaged over those anchors. Anchors without positives are excluded.
pub fn supcon_future_head(
    logits: &Matrix,
    labels: &[usize],
    head_range: Range<usize>,
    tau: f64,
) -> Result<LossOutput> {
    check_rows(logits, labels)?;
    if head_range.end > logits.cols() || head_range.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "head {head_range:?} invalid for {} logits",
            logits.cols()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let n = logits.rows();
    let width = head_range.len();
    let mut out = LossOutput::zero(n, logits.cols());

    let positives: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&p| p != i && labels[p] == labels[i]).count())
        .collect();
    let anchors = positives.iter().filter(|&&c| c > 0).count();
    if anchors == 0 {
        return Ok(out);
    }

    let mut norms = vec![0.0; n];
    let mut z = Matrix::zeros(n, width);
    for i in 0..n {
        let v = &logits.row(i)[head_range.clone()];
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        norms[i] = norm;
        for (zi, vi) in z.row_mut(i).iter_mut().zip(v) {
            *zi = vi / (norm + NORM_EPS);
        }
    }

    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for k in i..n {
            let s: f64 = z.row(i).iter().zip(z.row(k)).map(|(a, b)| a * b).sum::<f64>() / tau;
            sim[i * n + k] = s;
            sim[k * n + i] = s;
        }
    }

    let scale = 1.0 / anchors as f64;
    let mut dz = Matrix::zeros(n, width);
    let mut total = 0.0;
    let mut weights = vec![0.0; n];
    for i in 0..n {
        if positives[i] == 0 {
            continue;
        }
        let row = &sim[i * n..(i + 1) * n];
        let max = row
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != i)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != i)
            .map(|(_, v)| (v - max).exp())
            .sum();
        let lse = max + sum.ln();
        let inv_p = 1.0 / positives[i] as f64;
        let mut li = 0.0;
        for k in 0..n {
            if k == i {
                weights[k] = 0.0;
                continue;
            }
            let pos = labels[k] == labels[i];
            if pos {
                li += lse - row[k];
            }
            // d L_i / d s_ik
            weights[k] = (row[k] - lse).exp() - if pos { inv_p } else { 0.0 };
        }
        total += li * inv_p;
        for k in 0..n {
            let g = weights[k] * scale / tau;
            if g == 0.0 {
                continue;
            }
            for d in 0..width {
                let zi = z.row(i)[d];
                let zk = z.row(k)[d];
                dz.row_mut(i)[d] += g * zk;
                dz.row_mut(k)[d] += g * zi;
            }
        }
    }
    out.value = total * scale;

    for i in 0..n {
        let v = &logits.row(i)[head_range.clone()];
        let norm = norms[i];
        let denom = norm + NORM_EPS;
        let dzi = dz.row(i);
        let dot: f64 = v.iter().zip(dzi).map(|(a, b)| a * b).sum();
        let coef = if norm > 0.0 { dot / (norm * denom * denom) } else { 0.0 };
        let g = &mut out.grad.row_mut(i)[head_range.clone()];
        for ((gd, vd), dzd) in g.iter_mut().zip(v).zip(dzi) {
            *gd = dzd / denom - vd * coef;
        }
    }
    Ok(out)
}

/// Future preparation: the contrastive loss averaged over every future head.
/// Zero when the current task has no future.
pub fn fp_loss(logits: &Matrix, labels: &[usize], part: &LogitPartition, tau: f64) -> Result<LossOutput> {
    check_rows(logits, labels)?;
    if part.total() > logits.cols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} logits", part.total()),
            actual: format!("{} logits", logits.cols()),
        });
    }
    let heads = part.future_heads();
    let mut out = LossOutput::zero(logits.rows(), logits.cols());
    if heads.is_empty() {
        return Ok(out);
    }
    let w = 1.0 / heads.len() as f64;
    for j in heads {
        let h = supcon_future_head(logits, labels, head(j, part.classes_per_task()), tau)?;
        out.value += w * h.value;
        let mut g = h.grad;
        g.scale(w);
        out.grad.add_assign(&g);
    }
    Ok(out)
}

fn max_excluding(row: &[f64], range: Range<usize>, skip: usize) -> Option<(usize, f64)> {
    range
        .filter(|&k| k != skip)
        .map(|k| (k, row[k]))
        .fold(None, |best, (k, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((k, v)),
        })
}

/// Past/future constraint: hinge penalties on the largest past and the largest
/// future logit whenever either comes within `margin` of the ground-truth
/// logit. An empty partition contributes nothing; the ground-truth class is
/// never its own competitor.
pub fn pfc_loss(logits: &Matrix, labels: &[usize], part: &LogitPartition, margin: f64) -> Result<LossOutput> {
    check_rows(logits, labels)?;
    let n = logits.rows();
    let mut out = LossOutput::zero(n, logits.cols());
    if n == 0 {
        return Ok(out);
    }
    let inv_n = 1.0 / n as f64;
    let future = part.future().start.min(logits.cols())..logits.cols();
    for (r, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(Error::LabelOutOfRange {
                label: y,
                start: 0,
                end: logits.cols(),
            });
        }
        let row = logits.row(r);
        let gt = row[y];
        for range in [part.past(), future.clone()] {
            if let Some((k, v)) = max_excluding(row, range, y) {
                let h = v - gt + margin;
                if h > 0.0 {
                    out.value += h * inv_n;
                    let g = out.grad.row_mut(r);
                    g[k] += inv_n;
                    g[y] -= inv_n;
                }
            }
        }
    }
    Ok(out)
}

/// Logit batches feeding one evaluation of the composite objective. Each
/// optional part is absent when its buffer draw is (first task, ablations).
#[derive(Debug, Clone)]
pub struct XderInputs<'a> {
    pub stream_logits: &'a Matrix,
    pub stream_labels: &'a [usize],
    /// Softmax range of the stream cross-entropy; the present head by default.
    pub stream_range: Option<Range<usize>>,
    pub buffer_ce: Option<(&'a Matrix, &'a [usize])>,
    /// `(stored, fresh)` logits of the logit-matching draw.
    pub der: Option<(&'a Matrix, &'a Matrix)>,
    /// Two strongly augmented views of stream and buffer examples.
    pub future: Option<(&'a Matrix, &'a [usize])>,
    pub constraint: Option<(&'a Matrix, &'a [usize])>,
}

/// Weighted contribution of each term; they sum to the total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct XderTerms {
    pub sce_stream: f64,
    pub sce_buffer: f64,
    pub der: f64,
    pub fp: f64,
    pub pfc: f64,
}

impl XderTerms {
    pub fn total(&self) -> f64 {
        self.sce_stream + self.sce_buffer + self.der + self.fp + self.pfc
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("sce_stream", self.sce_stream),
            ("sce_buffer", self.sce_buffer),
            ("der", self.der),
            ("fp", self.fp),
            ("pfc", self.pfc),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct XderLoss {
    pub total: f64,
    pub terms: XderTerms,
    pub stream_grad: Matrix,
    pub buffer_ce_grad: Option<Matrix>,
    pub der_grad: Option<Matrix>,
    pub future_grad: Option<Matrix>,
    pub constraint_grad: Option<Matrix>,
}

/// `S-CE(stream) + beta * S-CE(buffer) + DER + lambda * FP + eta * PFC`.
pub fn xder_total(inputs: &XderInputs<'_>, w: &LossWeights, part: &LogitPartition) -> Result<XderLoss> {
    let stream_range = inputs.stream_range.clone().unwrap_or_else(|| part.present());
    let stream = restricted_ce(inputs.stream_logits, inputs.stream_labels, stream_range)?;
    let mut terms = XderTerms {
        sce_stream: stream.value,
        ..Default::default()
    };

    let buffer_ce_grad = match inputs.buffer_ce {
        Some((l, y)) if part.current() > 0 => {
            let o = sce_buffer(l, y, part)?.scaled(w.beta);
            terms.sce_buffer = o.value;
            Some(o.grad)
        }
        _ => None,
    };
    let der_grad = match inputs.der {
        Some((stored, fresh)) => {
            let o = der_loss(stored, fresh, w.alpha)?;
            terms.der = o.value;
            Some(o.grad)
        }
        None => None,
    };
    let future_grad = match inputs.future {
        Some((l, y)) => {
            let o = fp_loss(l, y, part, w.tau)?.scaled(w.lambda);
            terms.fp = o.value;
            Some(o.grad)
        }
        None => None,
    };
    let constraint_grad = match inputs.constraint {
        Some((l, y)) => {
            let o = pfc_loss(l, y, part, w.margin)?.scaled(w.eta);
            terms.pfc = o.value;
            Some(o.grad)
        }
        None => None,
    };

    Ok(XderLoss {
        total: terms.total(),
        terms,
        stream_grad: stream.grad,
        buffer_ce_grad,
        der_grad,
        future_grad,
        constraint_grad,
    })
}

#[derive(Debug, Clone)]
pub struct DerppLoss {
    pub total: f64,
    pub stream_ce: f64,
    pub der: f64,
    pub buffer_ce: f64,
    pub stream_grad: Matrix,
    /// Gradient w.r.t. the fresh buffer logits (logit matching plus labels).
    pub buffer_grad: Option<Matrix>,
}

/// `CE(stream) + alpha * ||stored - fresh||^2 + beta * CE(buffer)` with the
/// softmax over every logit.
pub fn derpp_loss(
    stream_logits: &Matrix,
    stream_labels: &[usize],
    buffer: Option<(&Matrix, &Matrix, &[usize])>,
    alpha: f64,
    beta: f64,
) -> Result<DerppLoss> {
    let s = full_ce(stream_logits, stream_labels)?;
    let mut out = DerppLoss {
        total: 0.0,
        stream_ce: s.value,
        der: 0.0,
        buffer_ce: 0.0,
        stream_grad: s.grad,
        buffer_grad: None,
    };
    if let Some((stored, fresh, labels)) = buffer {
        let d = der_loss(stored, fresh, alpha)?;
        out.der = d.value;
        let mut g = d.grad;
        if beta != 0.0 {
            let ce = full_ce(fresh, labels)?.scaled(beta);
            out.buffer_ce = ce.value;
            g.add_assign(&ce.grad);
        }
        out.buffer_grad = Some(g);
    }
    out.total = out.stream_ce + out.der + out.buffer_ce;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = crate::rng::seeded(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect())
            .unwrap()
    }

    /// Central differences of `f` w.r.t. every logit.
    fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.as_slice().len() {
            let mut up = x.clone();
            up.as_mut_slice()[i] += h;
            let mut dn = x.clone();
            dn.as_mut_slice()[i] -= h;
            g.as_mut_slice()[i] = (f(&up) - f(&dn)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn der_examples() {
        let a = m(1, 2, &[1.0, 0.0]);
        let b = m(1, 2, &[0.0, 0.0]);
        assert_eq!(der_loss(&a, &a, 0.7).unwrap().value, 0.0);
        assert_eq!(der_loss(&a, &b, 0.5).unwrap().value, 0.5);
        let one = der_loss(&a, &b, 0.5).unwrap();
        let two = der_loss(&a, &b, 1.0).unwrap();
        assert_eq!(two.value, 2.0 * one.value);
        for (x, y) in two.grad.as_slice().iter().zip(one.grad.as_slice()) {
            assert_eq!(*x, 2.0 * y);
        }
        assert!(der_loss(&a, &m(1, 3, &[0.0; 3]), 1.0).is_err());
    }

    #[test]
    fn sce_examples() {
        let part = LogitPartition::new(1, 3, 1).unwrap();
        let l = random(4, 3, 1);
        let o = sce_stream(&l, &[1, 1, 1, 1], &part).unwrap();
        assert_eq!(o.value, 0.0);

        let part = LogitPartition::new(1, 3, 4).unwrap();
        let mut l = random(3, 12, 2);
        for r in 0..3 {
            l.row_mut(r)[4..8].iter_mut().for_each(|v| *v = 0.25);
        }
        let o = sce_stream(&l, &[4, 6, 7], &part).unwrap();
        assert!((o.value - 4f64.ln()).abs() < 1e-12);
        for r in 0..3 {
            let g = o.grad.row(r);
            assert!(g[..4].iter().chain(&g[8..]).all(|v| *v == 0.0));
        }
        assert!(sce_stream(&l, &[0, 4, 4], &part).is_err());
    }

    #[test]
    fn sce_buffer_examples() {
        let part = LogitPartition::new(1, 3, 1).unwrap();
        assert_eq!(sce_buffer(&random(2, 3, 3), &[0, 0], &part).unwrap().value, 0.0);

        let part = LogitPartition::new(2, 4, 3).unwrap();
        let mut l = random(2, 12, 4);
        for r in 0..2 {
            l.row_mut(r)[..6].iter_mut().for_each(|v| *v = -1.0);
        }
        let o = sce_buffer(&l, &[0, 5], &part).unwrap();
        assert!((o.value - 6f64.ln()).abs() < 1e-12);
        assert!(o.grad.row(0)[6..].iter().all(|v| *v == 0.0));

        let first = LogitPartition::new(0, 4, 3).unwrap();
        assert!(sce_buffer(&l, &[0, 1], &first).is_err());
    }

    #[test]
    fn ce_gradients_match_differences() {
        let l = random(5, 8, 7);
        let y = [0, 3, 7, 2, 2];
        let o = full_ce(&l, &y).unwrap();
        assert_close(&o.grad, &numeric_grad(&l, |x| full_ce(x, &y).unwrap().value), 1e-7);
    }

    #[test]
    fn full_ce_pushes_unseen_logits_down() {
        // uniform logits: d CE / d l_k = 1/K for every non-target class
        let l = Matrix::zeros(1, 10);
        let o = full_ce(&l, &[0]).unwrap();
        for k in 1..10 {
            assert!((o.grad.row(0)[k] - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn supcon_identical_pair_is_zero() {
        let l = m(2, 4, &[0.0, 0.0, 1.0, 2.0, 5.0, 5.0, 1.0, 2.0]);
        let o = supcon_future_head(&l, &[3, 3], 2..4, 0.5).unwrap();
        assert!(o.value.abs() < 1e-15);
    }

    #[test]
    fn supcon_without_positives_is_zero() {
        let l = random(4, 6, 9);
        let o = supcon_future_head(&l, &[0, 1, 2, 3], 3..6, 1.0).unwrap();
        assert_eq!(o.value, 0.0);
        assert!(o.grad.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn supcon_gradient_matches_differences() {
        let l = random(8, 9, 12);
        let y = [0, 1, 0, 2, 1, 0, 3, 2];
        let o = supcon_future_head(&l, &y, 3..6, 0.7).unwrap();
        let fd = numeric_grad(&l, |x| supcon_future_head(x, &y, 3..6, 0.7).unwrap().value);
        assert_close(&o.grad, &fd, 1e-6);
        // only the head receives gradient
        for r in 0..8 {
            let g = o.grad.row(r);
            assert!(g[..3].iter().chain(&g[6..]).all(|v| *v == 0.0));
        }
    }

    #[test]
    fn supcon_scale_invariance() {
        let l = random(6, 6, 13);
        let y = [0, 0, 1, 1, 2, 2];
        let base = supcon_future_head(&l, &y, 2..6, 2.0).unwrap().value;
        let mut scaled = l.clone();
        scaled.row_mut(3)[2..6].iter_mut().for_each(|v| *v *= 250.0);
        let s = supcon_future_head(&scaled, &y, 2..6, 2.0).unwrap().value;
        assert!((base - s).abs() < 1e-9);
    }

    #[test]
    fn supcon_matches_hand_evaluation() {
        // three rows in a 2-wide head; labels [0, 0, 1]
        let l = m(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let tau = 1.0;
        let z = [[1.0, 0.0], [0.0, 1.0], [1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()]];
        let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
        let anchor = |i: usize, p: usize, other: usize| {
            let num = dot(z[i], z[p]).exp();
            let den = num + dot(z[i], z[other]).exp();
            -(num / den).ln()
        };
        let expected = (anchor(0, 1, 2) + anchor(1, 0, 2)) / 2.0;
        let o = supcon_future_head(&l, &[0, 0, 1], 0..2, tau).unwrap();
        assert!((o.value - expected).abs() < 1e-9, "{} vs {expected}", o.value);
    }

    #[test]
    fn fp_loss_cases() {
        let part_last = LogitPartition::new(3, 4, 2).unwrap();
        let l = random(6, 8, 1);
        let y = [0, 0, 1, 1, 2, 2];
        assert_eq!(fp_loss(&l, &y, &part_last, 5.0).unwrap().value, 0.0);

        let part = LogitPartition::new(2, 4, 2).unwrap();
        let single = supcon_future_head(&l, &y, 6..8, 5.0).unwrap().value;
        assert!((fp_loss(&l, &y, &part, 5.0).unwrap().value - single).abs() < 1e-15);

        let mut twin = l.clone();
        for r in 0..6 {
            let (a, b) = (twin.row(r)[6], twin.row(r)[7]);
            twin.row_mut(r)[4] = a;
            twin.row_mut(r)[5] = b;
        }
        let part = LogitPartition::new(1, 4, 2).unwrap();
        assert!((fp_loss(&twin, &y, &part, 5.0).unwrap().value - single).abs() < 1e-12);
    }

    #[test]
    fn pfc_examples() {
        // gt = 5, past max = future max = 1
        let part = LogitPartition::new(1, 3, 2).unwrap();
        let l = m(1, 6, &[1.0, 0.0, 5.0, 0.0, 1.0, -1.0]);
        assert_eq!(pfc_loss(&l, &[2], &part, 0.3).unwrap().value, 0.0);

        // gt = 1, past max = 2, no future
        let part = LogitPartition::new(2, 3, 2).unwrap();
        let l = m(1, 6, &[2.0, 0.0, 0.5, 0.0, 1.0, -1.0]);
        let o = pfc_loss(&l, &[4], &part, 0.3).unwrap();
        assert!((o.value - 1.3).abs() < 1e-12);
        assert_eq!(o.grad.row(0), &[1.0, 0.0, 0.0, 0.0, -1.0, 0.0]);

        // first task: past hinge vanishes even with huge margin
        let part = LogitPartition::new(0, 2, 2).unwrap();
        let l = m(1, 4, &[3.0, 0.0, -5.0, -5.0]);
        assert_eq!(pfc_loss(&l, &[0], &part, 1.0).unwrap().value, 0.0);
    }

    #[test]
    fn xder_reduces_to_stream_term() {
        let part = LogitPartition::new(1, 3, 2).unwrap();
        let l = random(4, 6, 5);
        let y = [2, 3, 2, 3];
        let b = random(3, 6, 6);
        let by = [0, 1, 0];
        let stored = random(3, 6, 7);
        let w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            lambda: 0.0,
            eta: 0.0,
            ..Default::default()
        };
        let inputs = XderInputs {
            stream_logits: &l,
            stream_labels: &y,
            stream_range: None,
            buffer_ce: Some((&b, &by)),
            der: Some((&stored, &b)),
            future: Some((&l, &y)),
            constraint: Some((&l, &y)),
        };
        let out = xder_total(&inputs, &w, &part).unwrap();
        assert_eq!(out.total, sce_stream(&l, &y, &part).unwrap().value);

        let out = xder_total(&inputs, &LossWeights::default(), &part).unwrap();
        let sum: f64 = out.terms.named().iter().map(|(_, v)| v).sum();
        assert!((sum - out.total).abs() < 1e-12);
    }

    #[test]
    fn derpp_without_beta_is_der() {
        let l = random(3, 4, 1);
        let y = [0, 1, 2];
        let stored = random(2, 4, 2);
        let fresh = random(2, 4, 3);
        let by = [0, 1];
        let a = derpp_loss(&l, &y, Some((&stored, &fresh, &by)), 0.3, 0.0).unwrap();
        let expect = full_ce(&l, &y).unwrap().value + der_loss(&stored, &fresh, 0.3).unwrap().value;
        assert_eq!(a.total, expect);
        let same = derpp_loss(&l, &y, Some((&fresh, &fresh, &by)), 9.0, 0.0).unwrap();
        assert_eq!(same.der, 0.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { gamma: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossWeights { margin: -0.1, ..Default::default() }.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn losses_are_non_negative_and_permutation_invariant(seed in 0u64..500, shift in 1usize..5) {
            let part = LogitPartition::new(1, 3, 3).unwrap();
            let l = random(5, 9, seed);
            let y = [3, 4, 5, 3, 4];
            let perm: Vec<usize> = (0..5).map(|i| (i + shift) % 5).collect();
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| l.row(i).to_vec()).collect();
            let lp = Matrix::from_rows(&rows, 9).unwrap();
            let yp: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
            let yb = [0, 1, 2, 0, 1];
            let ybp: Vec<usize> = perm.iter().map(|&i| yb[i]).collect();

            let pairs = [
                (sce_stream(&l, &y, &part).unwrap().value, sce_stream(&lp, &yp, &part).unwrap().value),
                (sce_buffer(&l, &yb, &part).unwrap().value, sce_buffer(&lp, &ybp, &part).unwrap().value),
                (fp_loss(&l, &y, &part, 2.0).unwrap().value, fp_loss(&lp, &yp, &part, 2.0).unwrap().value),
                (pfc_loss(&l, &y, &part, 0.3).unwrap().value, pfc_loss(&lp, &yp, &part, 0.3).unwrap().value),
                (der_loss(&l, &l.clone(), 1.0).unwrap().value, 0.0),
            ];
            for (a, b) in pairs {
                proptest::prop_assert!(a >= 0.0);
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
