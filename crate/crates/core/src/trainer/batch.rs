//! One mini-batch of the full objective: forward, loss breakdown and
//! gradient accumulation into the model parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    ensemble_train, ensemble_train_backward, loss_bce, loss_im, mean_ce, mean_kl, pseudo_logits,
    DebiasState, LossWeights,
};
use crate::model::{ModalityLogits, ModelParams};
use crate::numcore::Matrix;

/// Loss terms of one batch (or epoch means). `lac` and `vac` include their
/// source terms; `im` is reported apart from `vac`. The optimized total is
/// `lac + vac + im + γ·(ortho + d)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lac: f64,
    pub vac: f64,
    pub ortho: f64,
    pub d: f64,
    pub im: f64,
}

impl LossBreakdown {
    pub fn total(&self, gamma: f32) -> f64 {
        self.lac + self.vac + self.im + f64::from(gamma) * (self.ortho + self.d)
    }

    pub fn is_finite(&self) -> bool {
        [self.lac, self.vac, self.ortho, self.d, self.im].iter().all(|v| v.is_finite())
    }

    pub(crate) fn accumulate(&mut self, o: &LossBreakdown) {
        self.lac += o.lac;
        self.vac += o.vac;
        self.ortho += o.ortho;
        self.d += o.d;
        self.im += o.im;
    }

    pub(crate) fn scaled(&self, s: f64) -> Self {
        Self {
            lac: self.lac * s,
            vac: self.vac * s,
            ortho: self.ortho * s,
            d: self.d * s,
            im: self.im * s,
        }
    }
}

/// Inputs of one mini-batch. Row indices in `labeled` and `unlabeled` refer
/// to rows of `x_t`.
#[derive(Clone, Debug)]
pub struct BatchInput {
    pub x_s: Matrix,
    pub y_s: Vec<usize>,
    pub x_t: Matrix,
    /// `(row, label)` for target rows with a label or label proxy.
    pub labeled: Vec<(usize, usize)>,
    /// Augmented views of the labeled rows, in `labeled` order.
    pub x_aug: Matrix,
    pub unlabeled: Vec<usize>,
    /// Teacher logits of the unlabeled rows, in `unlabeled` order.
    pub teacher: Matrix,
    /// Clustering pseudo-labels of the unlabeled rows.
    pub pseudo: Vec<usize>,
}

/// Every intermediate needed to recompute the batch objective independently.
#[derive(Clone, Debug)]
pub struct BatchTrace {
    pub input: BatchInput,
    pub src: Option<ModalityLogits>,
    pub tgt: ModalityLogits,
    pub aug: ModalityLogits,
    /// Debiased text logits of `tgt` and `aug`.
    pub tgt_y_l: Matrix,
    pub aug_y_l: Matrix,
    /// Discriminator outputs: source `[lac; vac]` rows, then target.
    pub disc_src: Vec<f32>,
    pub disc_tgt: Vec<f32>,
    pub losses: LossBreakdown,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchOptions {
    /// Train the discriminator on source components (phase A).
    pub phase_a: bool,
    pub trace: bool,
}

fn stack_labels(n: usize) -> Vec<f32> {
    let mut y = vec![1.0; n];
    y.extend(std::iter::repeat_n(0.0, n));
    y
}

fn split_rows(g: &Matrix, n: usize) -> (Matrix, Matrix) {
    let first: Vec<usize> = (0..n).collect();
    let second: Vec<usize> = (n..g.rows()).collect();
    (g.select_rows(&first), g.select_rows(&second))
}

/// Scales `∂L/∂w` by `w(1 − w)` to reach the pre-sigmoid output.
fn through_sigmoid(g_w: &[f32], w: &[f32]) -> Vec<f32> {
    g_w.iter().zip(w).map(|(&g, &w)| g * w * (1.0 - w)).collect()
}

/// Vision-branch gradients for one set of outputs: `∂L/∂y_e` goes through the
/// detached ensemble into the classifier and the weight generator.
fn backward_ensemble(params: &mut ModelParams, out: &ModalityLogits, y_l: &Matrix, g_e: &Matrix) -> Result<Matrix> {
    let (g_v, g_w) = ensemble_train_backward(&out.y_v, y_l, &out.w_train, g_e)?;
    let mut g_vac = params.backward_vision(out, &g_v)?;
    let g_wl = through_sigmoid(&g_w, &out.w_train);
    g_vac.add_scaled(&params.backward_weight(out, &g_wl)?, 1.0)?;
    Ok(g_vac)
}

/// Evaluates the objective on one batch and accumulates its gradients into
/// `params`. The debias prior is read before and updated after the batch.
pub fn batch_gradients(
    params: &mut ModelParams,
    debias: &mut DebiasState,
    input: &BatchInput,
    w: &LossWeights,
    opts: BatchOptions,
) -> Result<(LossBreakdown, Option<BatchTrace>)> {
    let k = params.num_classes();
    let d = params.d_v();
    let gamma = w.gamma;
    if input.labeled.len() != input.x_aug.rows()
        || input.unlabeled.len() != input.teacher.rows()
        || input.unlabeled.len() != input.pseudo.len()
        || input.y_s.len() != input.x_s.rows()
    {
        return Err(Error::shape("batch", "consistent batch parts", "mismatched row counts"));
    }
    let mut losses = LossBreakdown::default();

    // Source: text and vision cross-entropy, orthogonality, phase A.
    let has_src = input.x_s.rows() > 0;
    let mut src = None;
    let mut disc_src = Vec::new();
    if has_src {
        let out = params.forward(&input.x_s)?;
        let (ce_l, g_tilde) = mean_ce(&out.y_tilde, &input.y_s)?;
        let (ce_v, g_yv) = mean_ce(&out.y_v, &input.y_s)?;
        losses.lac += f64::from(w.alpha) * ce_l;
        losses.vac += f64::from(w.beta) * ce_v;

        let mut g_lac = Matrix::zeros(out.f_lac.rows(), d);
        let mut g_vac = Matrix::zeros(out.f_vac.rows(), d);
        if w.alpha > 0.0 {
            let mut g = g_tilde;
            g.data_mut().iter_mut().for_each(|v| *v *= w.alpha);
            g_lac.add_scaled(&params.backward_text(&out.f_lac, &g)?, 1.0)?;
        }
        if w.beta > 0.0 {
            let mut g = g_yv;
            g.data_mut().iter_mut().for_each(|v| *v *= w.beta);
            g_vac.add_scaled(&params.backward_vision(&out, &g)?, 1.0)?;
        }
        let (o, g_ol, g_ov) = crate::losses::ortho_pair(&out.f_lac, &out.f_vac)?;
        losses.ortho += o;
        if opts.phase_a {
            let stacked = Matrix::vstack(&[&out.f_lac, &out.f_vac])?;
            let disc = params.disc_forward(&stacked)?;
            let (bce, g_logit) = loss_bce(&disc.probs, &stack_labels(out.f_lac.rows()))?;
            losses.d += bce;
            disc_src = disc.probs.clone();
            if gamma > 0.0 {
                let g_logit: Vec<f32> = g_logit.iter().map(|g| g * gamma).collect();
                let g_in = params.backward_disc(&stacked, &disc, &g_logit, false)?;
                let (gl, gv) = split_rows(&g_in, out.f_lac.rows());
                g_lac.add_scaled(&gl, 1.0)?;
                g_vac.add_scaled(&gv, 1.0)?;
            }
        }
        if gamma > 0.0 {
            g_lac.add_scaled(&g_ol, gamma)?;
            g_vac.add_scaled(&g_ov, gamma)?;
        }
        params.backward_separators(&input.x_s, &g_vac, &g_lac)?;
        src = Some(out);
    }

    // Target forward passes; both views are debiased with the same prior.
    let tgt = params.forward(&input.x_t)?;
    let aug = params.forward(&input.x_aug)?;
    let tgt_y_l = debias.apply(&tgt.y_tilde)?;
    let aug_y_l = debias.apply(&aug.y_tilde)?;

    let lab_labels: Vec<usize> = input.labeled.iter().map(|&(_, l)| l).collect();
    let pseudo_rows: Vec<Vec<f32>> = lab_labels.iter().map(|&l| pseudo_logits(l, k, w.h)).collect();
    let pseudo_teacher = if pseudo_rows.is_empty() {
        Matrix::zeros(0, k)
    } else {
        Matrix::from_rows(&pseudo_rows)?
    };

    // Text branch: labeled rows (augmented) toward pseudo logits, unlabeled
    // rows toward the teacher.
    let (kl_l, g_aug_text) = mean_kl(&aug_y_l, &pseudo_teacher)?;
    let unl_y_l = tgt_y_l.select_rows(&input.unlabeled);
    let (kl_u, g_unl_text) = mean_kl(&unl_y_l, &input.teacher)?;
    losses.lac += kl_l + kl_u;

    // Vision branch through the detached train-time ensemble.
    let aug_y_e = ensemble_train(&aug.y_v, &aug_y_l, &aug.w_train)?;
    let (ce_l, g_aug_e) = mean_ce(&aug_y_e, &lab_labels)?;
    let tgt_y_e = ensemble_train(&tgt.y_v, &tgt_y_l, &tgt.w_train)?;
    let unl_y_e = tgt_y_e.select_rows(&input.unlabeled);
    let (ce_u, g_unl_e) = mean_ce(&unl_y_e, &input.pseudo)?;
    losses.vac += ce_l + ce_u;
    let (im, g_im) = loss_im(&tgt_y_e);
    losses.im += im;

    let mut g_tgt_e = g_im;
    let mut g_tgt_text = Matrix::zeros(tgt.y_tilde.rows(), k);
    for (pos, &row) in input.unlabeled.iter().enumerate() {
        for (dst, &g) in g_tgt_e.row_mut(row).iter_mut().zip(g_unl_e.row(pos)) {
            *dst += g;
        }
        g_tgt_text.row_mut(row).copy_from_slice(g_unl_text.row(pos));
    }

    let mut g_t_lac = params.backward_text(&tgt.f_lac, &g_tgt_text)?;
    let mut g_t_vac = backward_ensemble(params, &tgt, &tgt_y_l, &g_tgt_e)?;

    // Orthogonality and phase B on target components; the discriminator is
    // frozen here.
    let (o, g_ol, g_ov) = crate::losses::ortho_pair(&tgt.f_lac, &tgt.f_vac)?;
    losses.ortho += o;
    let stacked = Matrix::vstack(&[&tgt.f_lac, &tgt.f_vac])?;
    let disc = params.disc_forward(&stacked)?;
    let (bce, g_logit) = loss_bce(&disc.probs, &stack_labels(tgt.f_lac.rows()))?;
    losses.d += bce;
    let disc_tgt = disc.probs.clone();
    if gamma > 0.0 {
        let g_logit: Vec<f32> = g_logit.iter().map(|g| g * gamma).collect();
        let g_in = params.backward_disc(&stacked, &disc, &g_logit, true)?;
        let (gl, gv) = split_rows(&g_in, tgt.f_lac.rows());
        g_t_lac.add_scaled(&gl, 1.0)?;
        g_t_vac.add_scaled(&gv, 1.0)?;
        g_t_lac.add_scaled(&g_ol, gamma)?;
        g_t_vac.add_scaled(&g_ov, gamma)?;
    }
    params.backward_separators(&input.x_t, &g_t_vac, &g_t_lac)?;

    if aug.y_v.rows() > 0 {
        let g_a_lac = params.backward_text(&aug.f_lac, &g_aug_text)?;
        let g_a_vac = backward_ensemble(params, &aug, &aug_y_l, &g_aug_e)?;
        params.backward_separators(&input.x_aug, &g_a_vac, &g_a_lac)?;
    }

    debias.update(&tgt.y_tilde);

    let total = losses.total(gamma);
    let trace = opts.trace.then(|| BatchTrace {
        input: input.clone(),
        src,
        tgt,
        aug,
        tgt_y_l,
        aug_y_l,
        disc_src,
        disc_tgt,
        losses,
        total,
    });
    Ok((losses, trace))
}
