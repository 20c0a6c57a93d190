//! Trainable parameter groups and their forward/backward passes.
//!
//! Layout, for an input feature `f_v ∈ R^d`:
//!
//! ```text
//! f_vac = Q_v f_v          f_lac = Q_t f_v
//! f_b   = Φ1 f_vac         y_v   = Φ2 f_b
//! w     = σ(W2 W1 f_vac)   ỹ_l   = cos(μ_i, f_lac) / τ
//! y_d   = σ(D2 relu(D1 f))
//! ```

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{read_f32_matrix, write_f32};
use crate::error::{Error, Result};
use crate::numcore::{dot, norm, sigmoid, LinearLayer, Matrix, Optimizable, ParamMatrix, ParamSlot};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub bottleneck: usize,
    pub hidden: usize,
    pub tau: f32,
    /// Standard deviation of the noise added to the identity separators.
    pub separator_init_sigma: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            bottleneck: 256,
            hidden: 256,
            tau: 0.01,
            separator_init_sigma: 1e-3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.bottleneck == 0 || self.hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Learnable class text embeddings; rows are kept at unit norm.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddings(pub ParamMatrix);

impl TextEmbeddings {
    pub fn new(mut mu: Matrix) -> Self {
        mu.normalize_rows();
        Self(ParamMatrix::new(mu))
    }

    pub fn value(&self) -> &Matrix {
        &self.0.value
    }
}

impl Optimizable for TextEmbeddings {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        self.0.visit_params(f)
    }

    fn after_step(&mut self) {
        self.0.value.normalize_rows();
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub q_v: LinearLayer,
    pub q_t: LinearLayer,
    pub phi1: LinearLayer,
    pub phi2: LinearLayer,
    pub wgen1: LinearLayer,
    pub wgen2: LinearLayer,
    pub disc1: LinearLayer,
    pub disc2: LinearLayer,
    pub mu: TextEmbeddings,
    pub tau: f32,
}

/// Per-sample outputs of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ModalityLogits {
    pub f_vac: Matrix,
    pub f_lac: Matrix,
    pub f_b: Matrix,
    pub y_v: Matrix,
    /// Raw (not yet debiased) text logits.
    pub y_tilde: Matrix,
    w_hidden: Matrix,
    pub w_logit: Vec<f32>,
    /// Learnable train-time ensemble weights in (0, 1).
    pub w_train: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct DiscOutput {
    pre: Matrix,
    hidden: Matrix,
    pub logits: Vec<f32>,
    pub probs: Vec<f32>,
}

impl ModelParams {
    /// Identity-plus-noise separators, uniform heads, `μ` from the given text
    /// features (row-normalized).
    pub fn init<R: Rng + ?Sized>(text_features: &Matrix, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (k, d) = text_features.shape();
        Ok(Self {
            q_v: LinearLayer::identity_with_noise(d, cfg.separator_init_sigma, rng),
            q_t: LinearLayer::identity_with_noise(d, cfg.separator_init_sigma, rng),
            phi1: LinearLayer::init_uniform(d, cfg.bottleneck, rng),
            phi2: LinearLayer::init_uniform(cfg.bottleneck, k, rng),
            wgen1: LinearLayer::init_uniform(d, cfg.hidden, rng),
            wgen2: LinearLayer::init_uniform(cfg.hidden, 1, rng),
            disc1: LinearLayer::init_uniform(d, cfg.hidden, rng),
            disc2: LinearLayer::init_uniform(cfg.hidden, 1, rng),
            mu: TextEmbeddings::new(text_features.clone()),
            tau: cfg.tau,
        })
    }

    pub fn d_v(&self) -> usize {
        self.q_v.in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.phi2.out_dim()
    }

    pub fn separate(&self, f_v: &Matrix) -> Result<(Matrix, Matrix)> {
        Ok((self.q_v.forward(f_v)?, self.q_t.forward(f_v)?))
    }

    /// `ỹ_l[b, i] = cos(μ_i, f_lac[b]) / τ`.
    pub fn text_logits_raw(&self, f_lac: &Matrix) -> Result<Matrix> {
        cosine_logits(f_lac, self.mu.value(), self.tau)
    }

    pub fn vision_logits(&self, f_vac: &Matrix) -> Result<(Matrix, Matrix)> {
        let f_b = self.phi1.forward(f_vac)?;
        let y_v = self.phi2.forward(&f_b)?;
        Ok((f_b, y_v))
    }

    pub fn gen_weight(&self, f_vac: &Matrix) -> Result<Vec<f32>> {
        let h = self.wgen1.forward(f_vac)?;
        Ok(self.wgen2.forward(&h)?.data().iter().map(|&z| sigmoid(z)).collect())
    }

    pub fn discriminate(&self, f: &Matrix) -> Result<Vec<f32>> {
        Ok(self.disc_forward(f)?.probs)
    }

    /// Full forward pass over a batch of vision features.
    pub fn forward(&self, f_v: &Matrix) -> Result<ModalityLogits> {
        let (f_vac, f_lac) = self.separate(f_v)?;
        let y_tilde = self.text_logits_raw(&f_lac)?;
        let (f_b, y_v) = self.vision_logits(&f_vac)?;
        let w_hidden = self.wgen1.forward(&f_vac)?;
        let w_logit = self.wgen2.forward(&w_hidden)?.into_data();
        let w_train = w_logit.iter().map(|&z| sigmoid(z)).collect();
        Ok(ModalityLogits {
            f_vac,
            f_lac,
            f_b,
            y_v,
            y_tilde,
            w_hidden,
            w_logit,
            w_train,
        })
    }

    pub fn disc_forward(&self, f: &Matrix) -> Result<DiscOutput> {
        let pre = self.disc1.forward(f)?;
        let mut hidden = pre.clone();
        hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let logits = self.disc2.forward(&hidden)?.into_data();
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();
        Ok(DiscOutput {
            pre,
            hidden,
            logits,
            probs,
        })
    }

    /// Backpropagates `∂L/∂ỹ_l` into `μ` (accumulated) and returns `∂L/∂f_lac`.
    pub fn backward_text(&mut self, f_lac: &Matrix, grad_y_tilde: &Matrix) -> Result<Matrix> {
        let mu = &mut self.mu.0;
        let (k, d) = mu.value.shape();
        if grad_y_tilde.shape() != (f_lac.rows(), k) || f_lac.cols() != d {
            return Err(Error::shape(
                "backward_text",
                format!("{}x{k}", f_lac.rows()),
                format!("{}x{}", grad_y_tilde.rows(), grad_y_tilde.cols()),
            ));
        }
        let inv_tau = 1.0 / f64::from(self.tau);
        let mu_norms: Vec<f64> = mu.value.iter_rows().map(norm).collect();
        let mut grad_f = Vec::with_capacity(f_lac.rows() * d);
        let mut grad_mu = vec![0.0f64; k * d];
        let mut acc = vec![0.0f64; d];
        for (f, g) in f_lac.iter_rows().zip(grad_y_tilde.iter_rows()) {
            let nf = norm(f);
            if nf == 0.0 {
                return Err(Error::Degenerate("zero-norm language component".into()));
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (i, &gi) in g.iter().enumerate() {
                if gi == 0.0 {
                    continue;
                }
                let m = mu.value.row(i);
                let nm = mu_norms[i];
                let c = dot(f, m) / (nf * nm);
                let s = f64::from(gi) * inv_tau;
                let gm = &mut grad_mu[i * d..(i + 1) * d];
                for j in 0..d {
                    let (fh, mh) = (f64::from(f[j]) / nf, f64::from(m[j]) / nm);
                    acc[j] += s * (mh - c * fh) / nf;
                    gm[j] += s * (fh - c * mh) / nm;
                }
            }
            grad_f.extend(acc.iter().map(|&a| a as f32));
        }
        for (g, a) in mu.grad.data_mut().iter_mut().zip(&grad_mu) {
            *g = (f64::from(*g) + a) as f32;
        }
        Ok(Matrix::from_vec_unchecked(f_lac.rows(), d, grad_f))
    }

    /// Backpropagates `∂L/∂y_v` through `Φ2, Φ1`; returns `∂L/∂f_vac`.
    pub fn backward_vision(&mut self, out: &ModalityLogits, grad_y_v: &Matrix) -> Result<Matrix> {
        let g_b = self.phi2.backward(&out.f_b, grad_y_v)?;
        self.phi1.backward(&out.f_vac, &g_b)
    }

    /// Backpropagates `∂L/∂(pre-sigmoid w)` through the weight generator.
    pub fn backward_weight(&mut self, out: &ModalityLogits, grad_w_logit: &[f32]) -> Result<Matrix> {
        let g = Matrix::new(grad_w_logit.len(), 1, grad_w_logit.to_vec())?;
        let g_h = self.wgen2.backward(&out.w_hidden, &g)?;
        self.wgen1.backward(&out.f_vac, &g_h)
    }

    /// Backpropagates through the discriminator. With `frozen`, discriminator
    /// gradients are not accumulated; only `∂L/∂f` is produced.
    pub fn backward_disc(&mut self, f: &Matrix, out: &DiscOutput, grad_logit: &[f32], frozen: bool) -> Result<Matrix> {
        let g = Matrix::new(grad_logit.len(), 1, grad_logit.to_vec())?;
        let mut g_h = if frozen {
            self.disc2.backward_input(&g)?
        } else {
            self.disc2.backward(&out.hidden, &g)?
        };
        for (gv, &p) in g_h.data_mut().iter_mut().zip(out.pre.data()) {
            if p <= 0.0 {
                *gv = 0.0;
            }
        }
        if frozen {
            self.disc1.backward_input(&g_h)
        } else {
            self.disc1.backward(f, &g_h)
        }
    }

    /// Accumulates separator gradients from component gradients.
    pub fn backward_separators(&mut self, f_v: &Matrix, grad_vac: &Matrix, grad_lac: &Matrix) -> Result<()> {
        self.q_v.backward(f_v, grad_vac)?;
        self.q_t.backward(f_v, grad_lac)?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for l in self.layers_mut() {
            l.zero_grad();
        }
        self.mu.0.zero_grad();
    }

    fn layers_mut(&mut self) -> [&mut LinearLayer; 8] {
        [
            &mut self.q_v,
            &mut self.q_t,
            &mut self.phi1,
            &mut self.phi2,
            &mut self.wgen1,
            &mut self.wgen2,
            &mut self.disc1,
            &mut self.disc2,
        ]
    }

    /// All parameter groups, in a fixed order, for the optimizer.
    pub fn optimizables(&mut self) -> Vec<&mut dyn Optimizable> {
        let ModelParams {
            q_v,
            q_t,
            phi1,
            phi2,
            wgen1,
            wgen2,
            disc1,
            disc2,
            mu,
            ..
        } = self;
        vec![q_v, q_t, phi1, phi2, wgen1, wgen2, disc1, disc2, mu]
    }

    fn named_tensors(&self) -> Vec<(String, &Matrix, &[f32])> {
        let layers: [(&str, &LinearLayer); 8] = [
            ("q_v", &self.q_v),
            ("q_t", &self.q_t),
            ("phi1", &self.phi1),
            ("phi2", &self.phi2),
            ("wgen1", &self.wgen1),
            ("wgen2", &self.wgen2),
            ("disc1", &self.disc1),
            ("disc2", &self.disc2),
        ];
        layers
            .into_iter()
            .map(|(n, l)| (n.to_string(), &l.weight, l.bias.as_slice()))
            .collect()
    }
}

/// Cosine similarity logits between rows of `f` and rows of `mu`, over `tau`.
pub fn cosine_logits(f: &Matrix, mu: &Matrix, tau: f32) -> Result<Matrix> {
    if f.cols() != mu.cols() {
        return Err(Error::shape("cosine_logits", mu.cols(), f.cols()));
    }
    let inv_tau = 1.0 / f64::from(tau);
    let mu_norms: Vec<f64> = mu.iter_rows().map(norm).collect();
    if mu_norms.contains(&0.0) {
        return Err(Error::Degenerate("zero-norm text embedding".into()));
    }
    let mut out = Vec::with_capacity(f.rows() * mu.rows());
    for r in f.iter_rows() {
        let nr = norm(r);
        if nr == 0.0 {
            return Err(Error::Degenerate("zero-norm feature row".into()));
        }
        for (m, nm) in mu.iter_rows().zip(&mu_norms) {
            out.push(((dot(r, m) / (nr * nm)).clamp(-1.0, 1.0) * inv_tau) as f32);
        }
    }
    Ok(Matrix::from_vec_unchecked(f.rows(), mu.rows(), out))
}

/// Zero-shot class predictions: argmax of cosine similarity to each text
/// embedding.
pub fn zero_shot_predict(features: &Matrix, text: &Matrix) -> Result<Vec<usize>> {
    let logits = cosine_logits(features, text, 1.0)?;
    Ok(logits.iter_rows().map(crate::numcore::argmax).collect())
}

const CHECKPOINT_VERSION: &str = "modsep-ckpt/1";
const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    version: String,
    d_v: usize,
    num_classes: usize,
    bottleneck: usize,
    hidden: usize,
    tau: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p_hat: Option<Vec<f32>>,
    tensors: Vec<TensorEntry>,
}

/// Model parameters plus the running text-prediction prior used for debiasing.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub p_hat: Option<Vec<f32>>,
}

impl Checkpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = &self.params;
        let mut tensors = Vec::new();
        let mut write = |name: String, rows: usize, cols: usize, data: &[f32]| -> Result<()> {
            let file = format!("{name}.f32");
            write_f32(&dir.join(&file), data)?;
            tensors.push(TensorEntry { name, rows, cols, file });
            Ok(())
        };
        for (name, w, b) in p.named_tensors() {
            write(format!("{name}.weight"), w.rows(), w.cols(), w.data())?;
            write(format!("{name}.bias"), 1, b.len(), b)?;
        }
        let mu = p.mu.value();
        write("mu".into(), mu.rows(), mu.cols(), mu.data())?;
        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION.into(),
            d_v: p.d_v(),
            num_classes: p.num_classes(),
            bottleneck: p.phi1.out_dim(),
            hidden: p.wgen1.out_dim(),
            tau: p.tau,
            p_hat: self.p_hat.clone(),
            tensors,
        };
        let path = dir.join(CHECKPOINT_FILE);
        let json = serde_json::to_string_pretty(&manifest).expect("checkpoint manifest serializes");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(CHECKPOINT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => Error::io(&path, e),
        })?;
        let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if m.version != CHECKPOINT_VERSION {
            return Err(Error::Manifest {
                path,
                reason: format!("unsupported checkpoint version {:?}", m.version),
            });
        }
        let (d, k, b, h) = (m.d_v, m.num_classes, m.bottleneck, m.hidden);
        let expected: [(&str, usize, usize); 8] = [
            ("q_v", d, d),
            ("q_t", d, d),
            ("phi1", d, b),
            ("phi2", b, k),
            ("wgen1", d, h),
            ("wgen2", h, 1),
            ("disc1", d, h),
            ("disc2", h, 1),
        ];
        let read = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            let entry = m.tensors.iter().find(|t| t.name == name).ok_or_else(|| Error::Manifest {
                path: path.clone(),
                reason: format!("missing tensor {name}"),
            })?;
            if (entry.rows, entry.cols) != (rows, cols) {
                return Err(Error::Manifest {
                    path: path.clone(),
                    reason: format!("tensor {name} is {}x{}, expected {rows}x{cols}", entry.rows, entry.cols),
                });
            }
            read_f32_matrix(&dir.join(&entry.file), rows, cols)
        };
        let mut layers = Vec::with_capacity(8);
        for (name, inp, out) in expected {
            let w = read(&format!("{name}.weight"), out, inp)?;
            let bias = read(&format!("{name}.bias"), 1, out)?.into_data();
            layers.push(LinearLayer::from_parts(w, bias)?);
        }
        let mu = read("mu", k, d)?;
        let mut it = layers.into_iter();
        let mut next = || it.next().expect("eight layers");
        let params = ModelParams {
            q_v: next(),
            q_t: next(),
            phi1: next(),
            phi2: next(),
            wgen1: next(),
            wgen2: next(),
            disc1: next(),
            disc2: next(),
            mu: TextEmbeddings(ParamMatrix::new(mu)),
            tau: m.tau,
        };
        if let Some(p) = &m.p_hat {
            if p.len() != k {
                return Err(Error::Manifest {
                    path,
                    reason: format!("p_hat has {} entries for {k} classes", p.len()),
                });
            }
        }
        Ok(Self { params, p_hat: m.p_hat })
    }
}
