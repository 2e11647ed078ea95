//! Fully-connected classifier with exact reverse-mode gradients.
//!
//! Parameters live in one flat vector, layer by layer, each layer stored as its
//! weight matrix (`out x in`, row-major) followed by its bias. A forward pass
//! can record a [`Trace`]; [`Mlp::backward`] walks the trace in reverse to turn
//! a gradient over the logits into a gradient over every parameter.

use std::io::{Read, Write};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{seeded, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            _ => Err(Error::Format(format!("unknown activation tag {tag}"))),
        }
    }

    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    activation: Activation,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    sizes: Vec<usize>,
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Matrix>,
}

impl Trace {
    pub fn rows(&self) -> usize {
        self.inputs[0].rows()
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    /// Seeded uniform fan-in initialisation: every weight and bias of a layer
    /// with `n` inputs is drawn from `U(-1/sqrt(n), 1/sqrt(n))`.
    pub fn new(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must list at least input and output, all positive: {sizes:?}"
            )));
        }
        let mut rng = seeded(seed);
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[1] * w[0] + w[1] {
                params.push(bound * (2.0 * rng.random::<f64>() - 1.0));
            }
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
            activation,
        })
    }

    /// `input -> hidden... -> outputs` with tanh hidden units.
    pub fn reference(input: usize, hidden: &[usize], outputs: usize, seed: u64) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(outputs);
        Self::new(&sizes, Activation::Tanh, seed)
    }

    pub fn from_params(sizes: &[usize], activation: Activation, params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {sizes:?}")));
        }
        if params.len() != param_count(sizes) {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", param_count(sizes)),
                actual: format!("{} parameters", params.len()),
            });
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
            activation,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn snapshot(&self) -> Vec<f64> {
        self.params.clone()
    }

    pub fn restore(&mut self, snapshot: &[f64]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.params.len()),
                actual: format!("{} parameters", snapshot.len()),
            });
        }
        self.params.copy_from_slice(snapshot);
        Ok(())
    }

    /// Copy of the model with different parameter values.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut m = self.clone();
        m.restore(params)?;
        Ok(m)
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.sizes.len());
        let mut o = 0;
        for w in self.sizes.windows(2) {
            offs.push(o);
            o += w[1] * w[0] + w[1];
        }
        offs
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input features", self.input_dim()),
                actual: format!("{} input features", x.cols()),
            });
        }
        Ok(())
    }

    fn layer(&self, l: usize, off: usize, input: &Matrix, last: bool) -> Matrix {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = &self.params[off..off + n_out * n_in];
        let b = &self.params[off + n_out * n_in..off + n_out * n_in + n_out];
        let mut out = Matrix::zeros(input.rows(), n_out);
        for r in 0..input.rows() {
            let xr = input.row(r);
            let or = out.row_mut(r);
            for (o, ov) in or.iter_mut().enumerate() {
                let wr = &w[o * n_in..(o + 1) * n_in];
                let mut acc = b[o];
                for (a, c) in wr.iter().zip(xr) {
                    acc += a * c;
                }
                *ov = if last { acc } else { self.activation.apply(acc) };
            }
        }
        out
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let offs = self.layer_offsets();
        let n_layers = offs.len();
        let mut h = x.clone();
        for (l, &off) in offs.iter().enumerate() {
            h = self.layer(l, off, &h, l + 1 == n_layers);
        }
        Ok(h)
    }

    pub fn forward_traced(&self, x: &Matrix) -> Result<(Matrix, Trace)> {
        self.check_input(x)?;
        let offs = self.layer_offsets();
        let n_layers = offs.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut h = x.clone();
        for (l, &off) in offs.iter().enumerate() {
            let next = self.layer(l, off, &h, l + 1 == n_layers);
            inputs.push(h);
            h = next;
        }
        Ok((
            h,
            Trace {
                sizes: self.sizes.clone(),
                inputs,
            },
        ))
    }

    /// Gradient over the parameters given `d loss / d logits` for the batch
    /// recorded in `trace`.
    pub fn backward(&self, trace: &Trace, dlogits: &Matrix) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(trace, dlogits, &mut grad)?;
        Ok(grad)
    }

    /// Accumulates the parameter gradient into `grad`.
    pub fn backward_into(&self, trace: &Trace, dlogits: &Matrix, grad: &mut [f64]) -> Result<()> {
        if trace.sizes != self.sizes {
            return Err(Error::InvalidArgument(
                "trace was recorded by a model with a different architecture".into(),
            ));
        }
        dlogits.ensure_shape(trace.rows(), self.output_dim())?;
        if grad.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} gradient entries", self.params.len()),
                actual: format!("{}", grad.len()),
            });
        }
        let offs = self.layer_offsets();
        let mut delta = dlogits.clone();
        for l in (0..offs.len()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offs[l];
            let input = &trace.inputs[l];
            {
                let (gw, rest) = grad[off..].split_at_mut(n_out * n_in);
                let gb = &mut rest[..n_out];
                for r in 0..input.rows() {
                    let dr = delta.row(r);
                    let xr = input.row(r);
                    for (o, &d) in dr.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        gb[o] += d;
                        let gwr = &mut gw[o * n_in..(o + 1) * n_in];
                        for (g, x) in gwr.iter_mut().zip(xr) {
                            *g += d * x;
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + n_out * n_in];
            let mut prev = Matrix::zeros(input.rows(), n_in);
            for r in 0..input.rows() {
                let dr = delta.row(r);
                let pr = prev.row_mut(r);
                for (o, &d) in dr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (p, wv) in pr.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *p += d * wv;
                    }
                }
                for (p, a) in pr.iter_mut().zip(input.row(r)) {
                    *p *= self.activation.derivative_from_output(*a);
                }
            }
            delta = prev;
        }
        Ok(())
    }

    /// Appends `count` output units. Existing parameters keep their values; the
    /// new rows use the same fan-in initialisation as construction. Growing by
    /// zero is a no-op.
    pub fn grow_head(&mut self, count: usize, rng: &mut Rng) {
        if count == 0 {
            return;
        }
        let l = self.sizes.len() - 2;
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.layer_offsets()[l];
        let bound = 1.0 / (n_in as f64).sqrt();
        let mut draw = || bound * (2.0 * rng.random::<f64>() - 1.0);

        let mut params = Vec::with_capacity(self.params.len() + count * (n_in + 1));
        params.extend_from_slice(&self.params[..off + n_out * n_in]);
        for _ in 0..count * n_in {
            params.push(draw());
        }
        params.extend_from_slice(&self.params[off + n_out * n_in..]);
        for _ in 0..count {
            params.push(draw());
        }
        self.params = params;
        self.sizes[l + 1] += count;
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok(logits.iter_rows().map(argmax).collect())
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Relative Gaussian parameter noise: `theta_i + eps_i` with
/// `eps_i ~ N(0, (alpha * |theta_i|)^2)`. `alpha = 0` returns the input exactly.
pub fn perturb(params: &[f64], alpha: f64, seed: u64) -> Vec<f64> {
    perturb_with(params, alpha, &mut seeded(seed))
}

pub fn perturb_with(params: &[f64], alpha: f64, rng: &mut Rng) -> Vec<f64> {
    if alpha == 0.0 {
        return params.to_vec();
    }
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    params
        .iter()
        .map(|&p| {
            let z: f64 = std.sample(rng);
            p + alpha * p.abs() * z
        })
        .collect()
}

/// Plain SGD with optional classical momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid optimizer lr={lr} momentum={momentum} weight_decay={weight_decay}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(lr, 0.0, 0.0).expect("non-negative learning rate")
    }

    /// `v <- momentum * v + (g + wd * theta)`, `theta <- theta - lr * v`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} gradient entries", params.len()),
                actual: format!("{}", grad.len()),
            });
        }
        if self.velocity.len() != params.len() {
            // head growth appends parameters; their history starts at zero
            self.velocity.resize(params.len(), 0.0);
        }
        for ((p, g), v) in params.iter_mut().zip(grad).zip(self.velocity.iter_mut()) {
            let d = g + self.weight_decay * *p;
            *v = if self.momentum > 0.0 {
                self.momentum * *v + d
            } else {
                d
            };
            *p -= self.lr * *v;
        }
        Ok(())
    }

    /// Drops momentum history; used when the learning problem changes.
    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"XDERCKPT";
const CHECKPOINT_VERSION: u32 = 1;

impl Mlp {
    /// Checkpoint layout (little-endian): magic, version `u32`, activation `u8`,
    /// layer count `u32`, layer sizes `u64` each, then every parameter as `f64`
    /// in declaration order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&[self.activation.tag()])?;
        w.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
        for s in &self.sizes {
            w.write_all(&(*s as u64).to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let activation = Activation::from_tag(tag[0])?;
        let n = read_u32(&mut r)? as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        let sizes = (0..n)
            .map(|_| read_u64(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = param_count(&sizes);
        let params = (0..count).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        Self::from_params(&sizes, activation, params)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent forward pass written from the textbook definition.
    fn naive_forward(m: &Mlp, x: &[f64]) -> Vec<f64> {
        let sizes = m.sizes();
        let p = m.params();
        let mut h = x.to_vec();
        let mut off = 0;
        for l in 0..sizes.len() - 1 {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let mut next = vec![0.0; n_out];
            for o in 0..n_out {
                let mut s = p[off + n_out * n_in + o];
                for i in 0..n_in {
                    s += p[off + o * n_in + i] * h[i];
                }
                next[o] = if l + 2 == sizes.len() { s } else { s.tanh() };
            }
            off += n_out * n_in + n_out;
            h = next;
        }
        h
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = seeded(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
            .unwrap()
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let mut m = Mlp::reference(3, &[4], 5, 0).unwrap();
        m.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let out = m.forward(&random_batch(2, 3, 1)).unwrap();
        assert!(out.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_linear_layer_picks_weight_column() {
        let m = Mlp::new(&[3, 2], Activation::Tanh, 4).unwrap();
        let mut p = m.params().to_vec();
        // zero bias so the output is exactly the first column
        p[6] = 0.0;
        p[7] = 0.0;
        let m = Mlp::from_params(&[3, 2], Activation::Tanh, p.clone()).unwrap();
        let e1 = Matrix::from_vec(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let out = m.forward(&e1).unwrap();
        assert_eq!(out.as_slice(), &[p[0], p[3]]);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let m = Mlp::reference(5, &[7, 6], 4, 3).unwrap();
        let x = random_batch(6, 5, 9);
        let out = m.forward(&x).unwrap();
        for r in 0..6 {
            let expect = naive_forward(&m, x.row(r));
            for (a, b) in out.row(r).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        // pure: bitwise repeatable
        assert_eq!(out, m.forward(&x).unwrap());
    }

    #[test]
    fn dimension_mismatch() {
        let m = Mlp::reference(5, &[3], 2, 0).unwrap();
        assert!(m.forward(&random_batch(1, 4, 0)).is_err());
    }

    #[test]
    fn zero_upstream_gradient_is_zero() {
        let m = Mlp::reference(3, &[4], 2, 0).unwrap();
        let x = random_batch(3, 3, 2);
        let (_, tr) = m.forward_traced(&x).unwrap();
        let g = m.backward(&tr, &Matrix::zeros(3, 2)).unwrap();
        assert_eq!(g.len(), m.num_params());
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn trace_from_other_architecture_rejected() {
        let a = Mlp::reference(3, &[4], 2, 0).unwrap();
        let b = Mlp::reference(3, &[5], 2, 0).unwrap();
        let (_, tr) = a.forward_traced(&random_batch(1, 3, 0)).unwrap();
        assert!(b.backward(&tr, &Matrix::zeros(1, 2)).is_err());
        assert!(a.backward(&tr, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        // loss = sum_k w_k * logit_k summed over rows, random weights
        let m = Mlp::reference(4, &[5, 3], 3, 8).unwrap();
        let x = random_batch(4, 4, 5);
        let weights = random_batch(4, 3, 6);
        let loss = |mm: &Mlp| -> f64 {
            let out = mm.forward(&x).unwrap();
            out.as_slice().iter().zip(weights.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (_, tr) = m.forward_traced(&x).unwrap();
        let g = m.backward(&tr, &weights).unwrap();
        let h = 1e-6;
        for i in 0..m.num_params() {
            let mut p = m.params().to_vec();
            p[i] += h;
            let up = loss(&m.with_params(&p).unwrap());
            p[i] -= 2.0 * h;
            let down = loss(&m.with_params(&p).unwrap());
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-7 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![1.0];
        OptimizerState::sgd(0.0).step(&mut p, &[2.0]).unwrap();
        assert_eq!(p, vec![1.0]);

        let mut p = vec![1.0];
        OptimizerState::sgd(0.5).step(&mut p, &[2.0]).unwrap();
        assert_eq!(p, vec![0.0]);

        let mut opt = OptimizerState::new(0.1, 0.9, 0.0).unwrap();
        let mut p = vec![0.0];
        opt.step(&mut p, &[1.0]).unwrap();
        let first = p[0];
        opt.step(&mut p, &[1.0]).unwrap();
        let second = p[0] - first;
        assert!((second / first - 1.9).abs() < 1e-12);

        assert!(OptimizerState::sgd(0.1).step(&mut [1.0, 2.0], &[1.0]).is_err());
        assert!(OptimizerState::new(0.1, 1.0, 0.0).is_err());
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut opt = OptimizerState::new(0.5, 0.0, 0.2).unwrap();
        let mut p = vec![2.0];
        opt.step(&mut p, &[0.0]).unwrap();
        assert!((p[0] - (2.0 - 0.5 * 0.4)).abs() < 1e-15);
    }

    #[test]
    fn grow_head_preserves_old_logits() {
        let mut m = Mlp::reference(3, &[4, 4], 2, 1).unwrap();
        let x = random_batch(5, 3, 3);
        let before = m.forward(&x).unwrap();
        let mut rng = seeded(7);
        m.grow_head(3, &mut rng);
        assert_eq!(m.output_dim(), 5);
        let after = m.forward(&x).unwrap();
        for r in 0..5 {
            assert_eq!(&after.row(r)[..2], before.row(r));
        }
        let n = m.num_params();
        m.grow_head(0, &mut rng);
        assert_eq!(m.num_params(), n);
    }

    #[test]
    fn perturbation_cases() {
        let theta = vec![1.0, -2.0, 0.0, 3.5];
        assert_eq!(perturb(&theta, 0.0, 3), theta);
        let p = perturb(&theta, 0.5, 3);
        assert_eq!(p[2], 0.0);
        assert_ne!(p[0], theta[0]);
        assert_eq!(p, perturb(&theta, 0.5, 3));
    }

    #[test]
    fn perturbation_variance_is_alpha_squared() {
        let alpha = 0.3;
        let theta = vec![2.0; 10_000];
        let p = perturb(&theta, alpha, 17);
        let rel: Vec<f64> = p.iter().zip(&theta).map(|(a, b)| (a - b) / b.abs()).collect();
        let mean = rel.iter().sum::<f64>() / rel.len() as f64;
        let var = rel.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (rel.len() - 1) as f64;
        assert!((var / (alpha * alpha) - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn snapshot_perturb_restore() {
        let mut m = Mlp::reference(3, &[4], 2, 1).unwrap();
        let snap = m.snapshot();
        let noisy = perturb(m.params(), 0.2, 1);
        m.restore(&noisy).unwrap();
        m.restore(&snap).unwrap();
        assert_eq!(m.params(), snap.as_slice());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Mlp::reference(4, &[6, 5], 3, 2).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        assert_eq!(Mlp::read_checkpoint(buf.as_slice()).unwrap(), m);
        buf[0] = b'Y';
        assert!(Mlp::read_checkpoint(buf.as_slice()).is_err());
    }
}
