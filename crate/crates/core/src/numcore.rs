//! Dense matrices, linear layers with hand-written backward passes, and the
//! annealed momentum SGD used by every trainable module.
//!
//! Parameters are stored as `f32`; every reduction (dot products, gradient
//! accumulation, softmax normalizers) runs in `f64`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `f32` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} elements ({rows}x{cols})", rows * cols),
                data.len(),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "non-finite matrix entry at ({}, {})",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", cols, bad.len()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics, so zero-width matrices yield empty rows.
        let cols = self.cols;
        (0..self.rows).map(move |r| &self.data[r * cols..(r + 1) * cols])
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec_unchecked(indices.len(), self.cols, data)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::shape("Matrix::vstack", cols, m.cols));
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Self::from_vec_unchecked(rows, cols, data))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scales every row to unit Euclidean norm; zero rows are left untouched.
    pub fn normalize_rows(&mut self) {
        let cols = self.cols;
        for r in 0..self.rows {
            let row = &mut self.data[r * cols..(r + 1) * cols];
            let n = norm(row);
            if n > 0.0 {
                for v in row.iter_mut() {
                    *v = (f64::from(*v) / n) as f32;
                }
            }
        }
    }

    /// `self += s·other`.
    pub fn add_scaled(&mut self, other: &Matrix, s: f32) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "add_scaled",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f32) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity of two non-zero vectors.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0) as f32)
}

/// Temperature softmax with max-subtraction, evaluated in `f64`.
pub fn softmax(logits: &[f32], tau: f32) -> Vec<f32> {
    softmax_f64(logits, tau).into_iter().map(|p| p as f32).collect()
}

pub(crate) fn softmax_f64(logits: &[f32], tau: f32) -> Vec<f64> {
    let tau = f64::from(tau);
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let exps: Vec<f64> = logits
        .iter()
        .map(|&v| ((f64::from(v) - max) / tau).exp())
        .collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-f64::from(x)).exp())) as f32
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fully connected layer `y = W x + b` with accumulated gradients and
/// momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    /// `out x in`
    pub weight: Matrix,
    pub bias: Vec<f32>,
    pub grad_weight: Matrix,
    pub grad_bias: Vec<f32>,
    vel_weight: Vec<f32>,
    vel_bias: Vec<f32>,
}

impl LinearLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self::from_parts(Matrix::zeros(out_dim, in_dim), vec![0.0; out_dim])
            .expect("shapes agree by construction")
    }

    pub fn from_parts(weight: Matrix, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape("LinearLayer::from_parts", weight.rows(), bias.len()));
        }
        let (out, inp) = weight.shape();
        Ok(Self {
            grad_weight: Matrix::zeros(out, inp),
            grad_bias: vec![0.0; out],
            vel_weight: vec![0.0; out * inp],
            vel_bias: vec![0.0; out],
            weight,
            bias,
        })
    }

    /// Uniform `U(-1/sqrt(in), 1/sqrt(in))` initialization for weight and bias.
    pub fn init_uniform<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let mut layer = Self::zeros(in_dim, out_dim);
        for w in layer.weight.data_mut() {
            *w = rng.random_range(-bound..bound);
        }
        for b in &mut layer.bias {
            *b = rng.random_range(-bound..bound);
        }
        layer
    }

    /// Square layer initialized to the identity plus Gaussian noise, zero bias.
    pub fn identity_with_noise<R: Rng + ?Sized>(dim: usize, sigma: f32, rng: &mut R) -> Self {
        let mut layer = Self::zeros(dim, dim);
        layer.weight = Matrix::identity(dim);
        if sigma > 0.0 {
            let normal = Normal::new(0.0f32, sigma).expect("sigma > 0");
            for w in layer.weight.data_mut() {
                *w += normal.sample(rng);
            }
        }
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("linear_forward", self.in_dim(), x.cols()));
        }
        let out_dim = self.out_dim();
        let mut out = Vec::with_capacity(x.rows() * out_dim);
        for xr in x.iter_rows() {
            for (o, wr) in self.weight.iter_rows().enumerate() {
                out.push((dot(wr, xr) + f64::from(self.bias[o])) as f32);
            }
        }
        Ok(Matrix::from_vec_unchecked(x.rows(), out_dim, out))
    }

    /// Accumulates `grad_weight += grad_outᵀ·x` and `grad_bias += Σ grad_out`,
    /// returning `grad_out·W`.
    pub fn backward(&mut self, x: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
        self.check_backward(x, grad_out)?;
        let (out_dim, in_dim) = self.weight.shape();
        let mut gw = vec![0.0f64; out_dim * in_dim];
        let mut gb = vec![0.0f64; out_dim];
        for (xr, gr) in x.iter_rows().zip(grad_out.iter_rows()) {
            for (o, &g) in gr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let g = f64::from(g);
                gb[o] += g;
                let dst = &mut gw[o * in_dim..(o + 1) * in_dim];
                for (d, &xv) in dst.iter_mut().zip(xr) {
                    *d += g * f64::from(xv);
                }
            }
        }
        for (w, g) in self.grad_weight.data_mut().iter_mut().zip(&gw) {
            *w = (f64::from(*w) + g) as f32;
        }
        for (b, g) in self.grad_bias.iter_mut().zip(&gb) {
            *b = (f64::from(*b) + g) as f32;
        }
        Ok(self.input_grad(grad_out))
    }

    /// Gradient with respect to the input only; parameters and their
    /// gradients are left untouched (frozen layer).
    pub fn backward_input(&self, grad_out: &Matrix) -> Result<Matrix> {
        if grad_out.cols() != self.out_dim() {
            return Err(Error::shape("linear_backward", self.out_dim(), grad_out.cols()));
        }
        Ok(self.input_grad(grad_out))
    }

    fn check_backward(&self, x: &Matrix, grad_out: &Matrix) -> Result<()> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("linear_backward", self.in_dim(), x.cols()));
        }
        if grad_out.cols() != self.out_dim() || grad_out.rows() != x.rows() {
            return Err(Error::shape(
                "linear_backward",
                format!("{}x{}", x.rows(), self.out_dim()),
                format!("{}x{}", grad_out.rows(), grad_out.cols()),
            ));
        }
        Ok(())
    }

    fn input_grad(&self, grad_out: &Matrix) -> Matrix {
        let in_dim = self.in_dim();
        let mut out = Vec::with_capacity(grad_out.rows() * in_dim);
        let mut acc = vec![0.0f64; in_dim];
        for gr in grad_out.iter_rows() {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (o, &g) in gr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let g = f64::from(g);
                for (a, &w) in acc.iter_mut().zip(self.weight.row(o)) {
                    *a += g * f64::from(w);
                }
            }
            out.extend(acc.iter().map(|&a| a as f32));
        }
        Matrix::from_vec_unchecked(grad_out.rows(), in_dim, out)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// A free parameter matrix (used for the learnable text embeddings).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamMatrix {
    pub value: Matrix,
    pub grad: Matrix,
    velocity: Vec<f32>,
}

impl ParamMatrix {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            grad: Matrix::zeros(r, c),
            velocity: vec![0.0; r * c],
            value,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// One parameter tensor as seen by the optimizer.
pub struct ParamSlot<'a> {
    pub value: &'a mut [f32],
    pub grad: &'a mut [f32],
    pub velocity: &'a mut [f32],
}

pub trait Optimizable {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>));

    /// Hook run after the optimizer touched the parameters.
    fn after_step(&mut self) {}
}

impl Optimizable for LinearLayer {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        f(ParamSlot {
            value: self.weight.data_mut(),
            grad: self.grad_weight.data_mut(),
            velocity: &mut self.vel_weight,
        });
        f(ParamSlot {
            value: &mut self.bias,
            grad: &mut self.grad_bias,
            velocity: &mut self.vel_bias,
        });
    }
}

impl Optimizable for ParamMatrix {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        f(ParamSlot {
            value: self.value.data_mut(),
            grad: self.grad.data_mut(),
            velocity: &mut self.velocity,
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr0: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub anneal_power: f32,
    pub anneal_scale: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr0: 3e-3,
            momentum: 0.9,
            weight_decay: 1e-3,
            anneal_power: 0.75,
            anneal_scale: 10.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    /// `lr0 · (1 + scale·p)^(−power)`.
    pub fn lr(&self, progress: f32) -> f32 {
        let p = f64::from(progress.clamp(0.0, 1.0));
        (f64::from(self.lr0)
            * (1.0 + f64::from(self.anneal_scale) * p).powf(-f64::from(self.anneal_power)))
            as f32
    }
}

/// One momentum-SGD update with coupled weight decay, then zeroes gradients.
pub fn sgd_step(params: &mut [&mut dyn Optimizable], cfg: &SgdConfig, progress: f32) {
    let lr = cfg.lr(progress);
    let (mom, wd) = (cfg.momentum, cfg.weight_decay);
    for p in params.iter_mut() {
        p.visit_params(&mut |slot| {
            for ((v, g), vel) in slot
                .value
                .iter_mut()
                .zip(slot.grad.iter_mut())
                .zip(slot.velocity.iter_mut())
            {
                let d = *g + wd * *v;
                *vel = mom * *vel + d;
                *v -= lr * *vel;
                *g = 0.0;
            }
        });
        p.after_step();
    }
}
