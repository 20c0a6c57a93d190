//! Training objectives with forward values and analytic gradients.
//!
//! Batch losses are means over rows unless stated otherwise, and their
//! gradients are gradients of that mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::cosine_logits;
use crate::numcore::{dot, softmax_f64, Matrix};

const LOG_FLOOR: f64 = 1e-8;

fn ln_floor(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// Running class prior of text predictions, used to debias text logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DebiasState {
    pub p_hat: Vec<f32>,
    pub m: f32,
    pub eta: f32,
}

impl DebiasState {
    pub fn uniform(num_classes: usize, m: f32, eta: f32) -> Self {
        Self {
            p_hat: vec![1.0 / num_classes as f32; num_classes],
            m,
            eta,
        }
    }

    /// Restores a saved prior; entries are floored and renormalized.
    pub fn with_prior(p_hat: Vec<f32>, m: f32, eta: f32) -> Result<Self> {
        if p_hat.is_empty() || p_hat.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config("debias prior must be a non-empty probability vector".into()));
        }
        let mut s = Self { p_hat, m, eta };
        s.renormalize();
        Ok(s)
    }

    /// `ỹ − η·log p̂` without touching the prior.
    pub fn apply(&self, y_tilde: &Matrix) -> Result<Matrix> {
        if y_tilde.cols() != self.p_hat.len() {
            return Err(Error::shape("debias", self.p_hat.len(), y_tilde.cols()));
        }
        let shift: Vec<f64> = self
            .p_hat
            .iter()
            .map(|&p| f64::from(self.eta) * ln_floor(f64::from(p)))
            .collect();
        let mut out = y_tilde.clone();
        for r in 0..out.rows() {
            for (v, s) in out.row_mut(r).iter_mut().zip(&shift) {
                *v = (f64::from(*v) - s) as f32;
            }
        }
        Ok(out)
    }

    /// Debiases with the current prior, then folds the batch-mean text
    /// prediction into the prior.
    pub fn debias(&mut self, y_tilde: &Matrix) -> Result<Matrix> {
        let out = self.apply(y_tilde)?;
        self.update(y_tilde);
        Ok(out)
    }

    /// Folds the batch-mean softmax of raw text logits into the prior.
    pub fn update(&mut self, y_tilde: &Matrix) {
        if y_tilde.rows() == 0 {
            return;
        }
        let k = self.p_hat.len();
        let mut mean = vec![0.0f64; k];
        for row in y_tilde.iter_rows() {
            for (m, p) in mean.iter_mut().zip(softmax_f64(row, 1.0)) {
                *m += p;
            }
        }
        let n = y_tilde.rows() as f64;
        let mom = f64::from(self.m);
        for (p, m) in self.p_hat.iter_mut().zip(&mean) {
            *p = (mom * f64::from(*p) + (1.0 - mom) * m / n) as f32;
        }
        self.renormalize();
    }

    fn renormalize(&mut self) {
        let floor = LOG_FLOOR as f32;
        self.p_hat.iter_mut().for_each(|p| *p = p.max(floor));
        let s: f64 = self.p_hat.iter().map(|&p| f64::from(p)).sum();
        self.p_hat.iter_mut().for_each(|p| *p = (f64::from(*p) / s) as f32);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the source text-branch cross-entropy.
    pub alpha: f32,
    /// Weight of the source vision-branch cross-entropy.
    pub beta: f32,
    /// Weight of the orthogonality and discrimination regularizers.
    pub gamma: f32,
    /// Magnitude of handcrafted pseudo logits.
    pub h: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.01,
            h: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("h", self.h)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `Σ_b ⟨lac[b], vac[b]⟩²` for one domain, with gradients for both inputs.
pub fn ortho_pair(lac: &Matrix, vac: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    if lac.shape() != vac.shape() {
        return Err(Error::shape(
            "loss_ortho",
            format!("{}x{}", lac.rows(), lac.cols()),
            format!("{}x{}", vac.rows(), vac.cols()),
        ));
    }
    let mut value = 0.0;
    let mut g_lac = Matrix::zeros(lac.rows(), lac.cols());
    let mut g_vac = Matrix::zeros(vac.rows(), vac.cols());
    for r in 0..lac.rows() {
        let (a, b) = (lac.row(r), vac.row(r));
        let ip = dot(a, b);
        value += ip * ip;
        let s = 2.0 * ip;
        for (g, &v) in g_lac.row_mut(r).iter_mut().zip(b) {
            *g = (s * f64::from(v)) as f32;
        }
        for (g, &v) in g_vac.row_mut(r).iter_mut().zip(a) {
            *g = (s * f64::from(v)) as f32;
        }
    }
    Ok((value, g_lac, g_vac))
}

/// Gradients of [`loss_ortho`], one per input matrix.
#[derive(Clone, Debug)]
pub struct OrthoGrads {
    pub lac_s: Matrix,
    pub vac_s: Matrix,
    pub lac_t: Matrix,
    pub vac_t: Matrix,
}

/// Orthogonality penalty summed over source and target rows.
pub fn loss_ortho(lac_s: &Matrix, vac_s: &Matrix, lac_t: &Matrix, vac_t: &Matrix) -> Result<(f64, OrthoGrads)> {
    let (vs, lac_s, vac_s) = ortho_pair(lac_s, vac_s)?;
    let (vt, lac_t, vac_t) = ortho_pair(lac_t, vac_t)?;
    Ok((
        vs + vt,
        OrthoGrads {
            lac_s,
            vac_s,
            lac_t,
            vac_t,
        },
    ))
}

/// Subtracts each row's mean.
pub fn center_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        if row.is_empty() {
            continue;
        }
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / row.len() as f64;
        row.iter_mut().for_each(|v| *v = (f64::from(*v) - mean) as f32);
    }
}

/// Mean-centered zero-shot logits of `f_v` against the frozen initial `mu`.
pub fn teacher_zeroshot(f_v: &Matrix, mu: &Matrix, tau: f32) -> Result<Matrix> {
    let mut y = cosine_logits(f_v, mu, tau)?;
    center_rows(&mut y);
    Ok(y)
}

/// `+h` at `label`, `−h` elsewhere.
pub fn pseudo_logits(label: usize, num_classes: usize, h: f32) -> Vec<f32> {
    (0..num_classes).map(|k| if k == label { h } else { -h }).collect()
}

fn log_softmax(z: &[f32]) -> Vec<f64> {
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let max = f64::from(max);
    let lse = max + z.iter().map(|&v| (f64::from(v) - max).exp()).sum::<f64>().ln();
    z.iter().map(|&v| f64::from(v) - lse).collect()
}

/// `KL(softmax(teacher) ‖ softmax(student))` and its gradient wrt the student.
pub fn loss_kl(student: &[f32], teacher: &[f32]) -> (f64, Vec<f32>) {
    let ls = log_softmax(student);
    let lt = log_softmax(teacher);
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(student.len());
    for (s, t) in ls.iter().zip(&lt) {
        let pt = t.exp();
        if pt > 0.0 {
            value += pt * (t - s);
        }
        grad.push((s.exp() - pt) as f32);
    }
    (value, grad)
}

/// `−log softmax(logits)[label]` and its gradient.
pub fn loss_ce(logits: &[f32], label: usize) -> (f64, Vec<f32>) {
    let ls = log_softmax(logits);
    let grad = ls
        .iter()
        .enumerate()
        .map(|(k, l)| (l.exp() - f64::from(u8::from(k == label))) as f32)
        .collect();
    (-ls[label], grad)
}

fn mean_rows(
    op: &'static str,
    logits: &Matrix,
    n: usize,
    mut f: impl FnMut(usize, &[f32]) -> (f64, Vec<f32>),
) -> Result<(f64, Matrix)> {
    if logits.rows() != n {
        return Err(Error::shape(op, n, logits.rows()));
    }
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    for r in 0..n {
        let (v, g) = f(r, logits.row(r));
        total += v;
        for (o, gv) in grad.row_mut(r).iter_mut().zip(g) {
            *o = (f64::from(gv) * scale) as f32;
        }
    }
    Ok((total * scale, grad))
}

/// Row-mean KL divergence; an empty batch contributes zero.
pub fn mean_kl(student: &Matrix, teacher: &Matrix) -> Result<(f64, Matrix)> {
    if student.cols() != teacher.cols() {
        return Err(Error::shape("mean_kl", teacher.cols(), student.cols()));
    }
    mean_rows("mean_kl", student, teacher.rows(), |r, s| loss_kl(s, teacher.row(r)))
}

/// Row-mean cross-entropy; an empty batch contributes zero.
pub fn mean_ce(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::shape("mean_ce", format!("label < {}", logits.cols()), bad));
    }
    mean_rows("mean_ce", logits, labels.len(), |r, s| loss_ce(s, labels[r]))
}

/// Information maximization: mean per-sample entropy plus the negative
/// entropy of the batch-mean prediction.
pub fn loss_im(y_e: &Matrix) -> (f64, Matrix) {
    let (n, k) = y_e.shape();
    let mut grad = Matrix::zeros(n, k);
    if n == 0 {
        return (0.0, grad);
    }
    let probs: Vec<Vec<f64>> = y_e.iter_rows().map(|r| softmax_f64(r, 1.0)).collect();
    let mut q = vec![0.0f64; k];
    for p in &probs {
        q.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let nf = n as f64;
    q.iter_mut().for_each(|v| *v /= nf);
    let log_q: Vec<f64> = q.iter().map(|&v| ln_floor(v)).collect();
    let diversity: f64 = q.iter().zip(&log_q).map(|(a, b)| a * b).sum();
    let mut entropy = 0.0;
    for (b, p) in probs.iter().enumerate() {
        let log_p: Vec<f64> = p.iter().map(|&v| ln_floor(v)).collect();
        let h: f64 = -p.iter().zip(&log_p).map(|(a, b)| a * b).sum::<f64>();
        let p_log_q: f64 = p.iter().zip(&log_q).map(|(a, b)| a * b).sum();
        entropy += h;
        for (j, g) in grad.row_mut(b).iter_mut().enumerate() {
            let d_ent = -p[j] * (log_p[j] + h);
            let d_div = p[j] * (log_q[j] - p_log_q);
            *g = ((d_ent + d_div) / nf) as f32;
        }
    }
    (entropy / nf + diversity, grad)
}

/// Mean binary cross-entropy of probabilities `y_d` against `targets`, with
/// the gradient wrt the pre-sigmoid logits.
pub fn loss_bce(y_d: &[f32], targets: &[f32]) -> Result<(f64, Vec<f32>)> {
    if y_d.len() != targets.len() {
        return Err(Error::shape("loss_bce", y_d.len(), targets.len()));
    }
    if y_d.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = y_d.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(y_d.len());
    for (&p, &y) in y_d.iter().zip(targets) {
        let (p, y) = (f64::from(p), f64::from(y));
        value -= y * ln_floor(p) + (1.0 - y) * ln_floor(1.0 - p);
        grad.push(((p - y) / n) as f32);
    }
    Ok((value / n, grad))
}

/// `y_e[b] = w[b]·y_v[b] + (1 − w[b])·y_l[b]`.
pub fn ensemble_train(y_v: &Matrix, y_l: &Matrix, w: &[f32]) -> Result<Matrix> {
    if y_v.shape() != y_l.shape() || w.len() != y_v.rows() {
        return Err(Error::shape(
            "ensemble_train",
            format!("{}x{} / {}", y_v.rows(), y_v.cols(), y_v.rows()),
            format!("{}x{} / {}", y_l.rows(), y_l.cols(), w.len()),
        ));
    }
    let mut out = y_v.clone();
    for (r, &wb) in w.iter().enumerate() {
        let (wb, l) = (f64::from(wb), y_l.row(r));
        for (o, &lv) in out.row_mut(r).iter_mut().zip(l) {
            *o = (wb * f64::from(*o) + (1.0 - wb) * f64::from(lv)) as f32;
        }
    }
    Ok(out)
}

/// Backward of [`ensemble_train`] with `y_l` detached: returns `∂L/∂y_v` and
/// `∂L/∂w`.
pub fn ensemble_train_backward(y_v: &Matrix, y_l: &Matrix, w: &[f32], grad_y_e: &Matrix) -> Result<(Matrix, Vec<f32>)> {
    if grad_y_e.shape() != y_v.shape() {
        return Err(Error::shape("ensemble_train_backward", y_v.rows(), grad_y_e.rows()));
    }
    ensemble_train(y_v, y_l, w)?;
    let mut g_v = grad_y_e.clone();
    let mut g_w = Vec::with_capacity(w.len());
    for (r, &wb) in w.iter().enumerate() {
        let g = grad_y_e.row(r);
        let dw: f64 = g
            .iter()
            .zip(y_v.row(r).iter().zip(y_l.row(r)))
            .map(|(&gv, (&v, &l))| f64::from(gv) * (f64::from(v) - f64::from(l)))
            .sum();
        g_w.push(dw as f32);
        g_v.row_mut(r).iter_mut().for_each(|x| *x *= wb);
    }
    Ok((g_v, g_w))
}
