//! Finite-difference checks of every loss term and forward block, and the
//! factored gradient identities of the vision branch.

use std::collections::BTreeMap;

use modsep::losses::{
    ensemble_train, ensemble_train_backward, loss_bce, loss_ce, loss_im, loss_kl, mean_ce, ortho_pair, DebiasState,
    LossWeights,
};
use modsep::model::{ModelConfig, ModelParams};
use modsep::numcore::{sigmoid, LinearLayer, Matrix};
use modsep::trainer::{batch_gradients, BatchInput, BatchOptions, LossBreakdown};
use rand::Rng;

use super::{concat, fd_grad, fd_partial, probe, probe_vec, rand_matrix, rand_vec, rel_err, rng, to_f64, Outcome};

pub const A1_TOL: f64 = 1e-4;
pub const A2_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Qv,
    Qt,
    Phi1,
    Phi2,
    Wgen1,
    Wgen2,
    Disc1,
    Disc2,
}

/// One parameter tensor of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Weight(Layer),
    Bias(Layer),
    Mu,
}

fn layer(p: &ModelParams, l: Layer) -> &LinearLayer {
    match l {
        Layer::Qv => &p.q_v,
        Layer::Qt => &p.q_t,
        Layer::Phi1 => &p.phi1,
        Layer::Phi2 => &p.phi2,
        Layer::Wgen1 => &p.wgen1,
        Layer::Wgen2 => &p.wgen2,
        Layer::Disc1 => &p.disc1,
        Layer::Disc2 => &p.disc2,
    }
}

fn layer_mut(p: &mut ModelParams, l: Layer) -> &mut LinearLayer {
    match l {
        Layer::Qv => &mut p.q_v,
        Layer::Qt => &mut p.q_t,
        Layer::Phi1 => &mut p.phi1,
        Layer::Phi2 => &mut p.phi2,
        Layer::Wgen1 => &mut p.wgen1,
        Layer::Wgen2 => &mut p.wgen2,
        Layer::Disc1 => &mut p.disc1,
        Layer::Disc2 => &mut p.disc2,
    }
}

impl Slot {
    pub fn value(self, p: &ModelParams) -> Vec<f32> {
        match self {
            Slot::Weight(l) => layer(p, l).weight.data().to_vec(),
            Slot::Bias(l) => layer(p, l).bias.clone(),
            Slot::Mu => p.mu.0.value.data().to_vec(),
        }
    }

    pub fn value_mut(self, p: &mut ModelParams) -> &mut [f32] {
        match self {
            Slot::Weight(l) => layer_mut(p, l).weight.data_mut(),
            Slot::Bias(l) => &mut layer_mut(p, l).bias,
            Slot::Mu => p.mu.0.value.data_mut(),
        }
    }

    pub fn grad(self, p: &ModelParams) -> Vec<f32> {
        match self {
            Slot::Weight(l) => layer(p, l).grad_weight.data().to_vec(),
            Slot::Bias(l) => layer(p, l).grad_bias.clone(),
            Slot::Mu => p.mu.0.grad.data().to_vec(),
        }
    }

    fn both(l: Layer) -> [Slot; 2] {
        [Slot::Weight(l), Slot::Bias(l)]
    }
}

pub const D: usize = 6;
pub const K: usize = 4;
pub const B: usize = 3;

pub fn small_model(rng: &mut impl Rng, tau: f32) -> ModelParams {
    let text = rand_matrix(rng, K, D, 1.0);
    let cfg = ModelConfig {
        bottleneck: 5,
        hidden: 5,
        tau,
        separator_init_sigma: 0.3,
    };
    ModelParams::init(&text, &cfg, rng).unwrap()
}

/// Analytic gradients accumulated in `p` against finite differences of `f`
/// over up to `n_coords` coordinates of each slot, as one stacked vector.
pub fn slots_fd(
    p: &ModelParams,
    slots: &[Slot],
    h: f32,
    n_coords: usize,
    rng: &mut impl Rng,
    f: &dyn Fn(&ModelParams) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let (mut fd, mut an) = (Vec::new(), Vec::new());
    for &slot in slots {
        let value = slot.value(p);
        let grad = slot.grad(p);
        let mut coords: Vec<usize> = (0..value.len()).collect();
        while coords.len() > n_coords {
            coords.swap_remove(rng.random_range(0..coords.len()));
        }
        for c in coords {
            fd.push(fd_partial(
                |x| {
                    let mut q = p.clone();
                    slot.value_mut(&mut q)[c] = x;
                    f(&q)
                },
                value[c],
                h,
            ));
            an.push(f64::from(grad[c]));
        }
    }
    (fd, an)
}

fn check_ortho(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (lac, vac) = (rand_matrix(&mut r, B, D, 1.0), rand_matrix(&mut r, B, D, 1.0));
    let (_, gl, gv) = ortho_pair(&lac, &vac).unwrap();
    let theta = concat(lac.data(), vac.data());
    let fd = fd_grad(&theta, 0.1, |t| {
        let (a, b) = t.split_at(B * D);
        ortho_pair(&Matrix::new(B, D, a.to_vec()).unwrap(), &Matrix::new(B, D, b.to_vec()).unwrap())
            .unwrap()
            .0
    });
    rel_err(&fd, &to_f64(&concat(gl.data(), gv.data())))
}

fn check_kl(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (s, t) = (rand_vec(&mut r, 5, 3.0), rand_vec(&mut r, 5, 3.0));
    let (_, g) = loss_kl(&s, &t);
    rel_err(&fd_grad(&s, 0.02, |x| loss_kl(x, &t).0), &to_f64(&g))
}

fn check_ce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let z = rand_vec(&mut r, 5, 3.0);
    let label = r.random_range(0..5);
    let (_, g) = loss_ce(&z, label);
    rel_err(&fd_grad(&z, 0.02, |x| loss_ce(x, label).0), &to_f64(&g))
}

fn check_im(seed: u64) -> f64 {
    let mut r = rng(seed);
    let y = rand_matrix(&mut r, B + 1, 5, 2.0);
    let (_, g) = loss_im(&y);
    let fd = fd_grad(y.data(), 0.02, |t| loss_im(&Matrix::new(B + 1, 5, t.to_vec()).unwrap()).0);
    rel_err(&fd, &to_f64(g.data()))
}

fn check_bce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let z = rand_vec(&mut r, 6, 1.5);
    let y: Vec<f32> = (0..6).map(|_| f32::from(u8::from(r.random::<bool>()))).collect();
    let probs = |z: &[f32]| z.iter().map(|&v| sigmoid(v)).collect::<Vec<_>>();
    let (_, g) = loss_bce(&probs(&z), &y).unwrap();
    let fd = fd_grad(&z, 0.05, |t| loss_bce(&probs(t), &y).unwrap().0);
    rel_err(&fd, &to_f64(&g))
}

/// Cross-entropy through the train-time ensemble; `y_l` is held fixed.
fn check_ensemble_ce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let y_v = rand_matrix(&mut r, B, K, 2.0);
    let y_l = rand_matrix(&mut r, B, K, 2.0);
    let w: Vec<f32> = (0..B).map(|_| r.random_range(0.1..0.9)).collect();
    let labels: Vec<usize> = (0..B).map(|_| r.random_range(0..K)).collect();
    let loss = |y_v: &Matrix, w: &[f32]| mean_ce(&ensemble_train(y_v, &y_l, w).unwrap(), &labels).unwrap();
    let (_, g_e) = loss(&y_v, &w);
    let (g_v, g_w) = ensemble_train_backward(&y_v, &y_l, &w, &g_e).unwrap();
    let theta = concat(y_v.data(), &w);
    let fd = fd_grad(&theta, 0.02, |t| {
        let (v, w) = t.split_at(B * K);
        loss(&Matrix::new(B, K, v.to_vec()).unwrap(), w).0
    });
    rel_err(&fd, &to_f64(&concat(g_v.data(), &g_w)))
}

fn check_separators(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut p = small_model(&mut r, 0.5);
    let x = rand_matrix(&mut r, B, D, 1.0);
    let (r1, r2) = (rand_matrix(&mut r, B, D, 1.0), rand_matrix(&mut r, B, D, 1.0));
    p.zero_grad();
    p.backward_separators(&x, &r1, &r2).unwrap();
    let f = |q: &ModelParams| {
        let (vac, lac) = q.separate(&x).unwrap();
        probe(&vac, &r1) + probe(&lac, &r2)
    };
    let slots = [Slot::both(Layer::Qv), Slot::both(Layer::Qt)].concat();
    let (fd, an) = slots_fd(&p, &slots, 0.5, 24, &mut r, &f);
    rel_err(&fd, &an)
}

fn check_classifier(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut p = small_model(&mut r, 0.5);
    let x = rand_matrix(&mut r, B, D, 1.0);
    let rv = rand_matrix(&mut r, B, K, 1.0);
    p.zero_grad();
    let out = p.forward(&x).unwrap();
    let g_vac = p.backward_vision(&out, &rv).unwrap();
    p.backward_separators(&x, &g_vac, &Matrix::zeros(B, D)).unwrap();
    let f = |q: &ModelParams| probe(&q.forward(&x).unwrap().y_v, &rv);
    let slots = [Slot::both(Layer::Phi1), Slot::both(Layer::Phi2), Slot::both(Layer::Qv)].concat();
    let (fd, an) = slots_fd(&p, &slots, 0.5, 24, &mut r, &f);
    rel_err(&fd, &an)
}

fn check_weight_generator(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut p = small_model(&mut r, 0.5);
    let x = rand_matrix(&mut r, B, D, 1.0);
    let rw = rand_vec(&mut r, B, 1.0);
    p.zero_grad();
    let out = p.forward(&x).unwrap();
    let g: Vec<f32> = rw.iter().zip(&out.w_train).map(|(&a, &w)| a * w * (1.0 - w)).collect();
    let g_vac = p.backward_weight(&out, &g).unwrap();
    p.backward_separators(&x, &g_vac, &Matrix::zeros(B, D)).unwrap();
    let f = |q: &ModelParams| probe_vec(&q.forward(&x).unwrap().w_train, &rw);
    let slots = [Slot::both(Layer::Wgen1), Slot::both(Layer::Wgen2), Slot::both(Layer::Qv)].concat();
    let (fd, an) = slots_fd(&p, &slots, 0.05, 24, &mut r, &f);
    rel_err(&fd, &an)
}

/// Discriminator parameters and input. Inputs are redrawn until every hidden
/// pre-activation is at least 0.1 from the ReLU kink, so perturbations of
/// size `h` cannot cross it. Also checks that the frozen backward leaves the
/// discriminator gradients untouched.
fn check_discriminator(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut p = small_model(&mut r, 0.5);
    let n = 2 * B;
    let h = 0.02;
    let f_in = loop {
        let f = rand_matrix(&mut r, n, D, 1.0);
        let pre = p.disc1.forward(&f).unwrap();
        if pre.data().iter().all(|v| v.abs() > 0.1) {
            break f;
        }
    };
    let rd = rand_vec(&mut r, n, 1.0);
    p.zero_grad();
    let out = p.disc_forward(&f_in).unwrap();
    let g: Vec<f32> = rd.iter().zip(&out.probs).map(|(&a, &q)| a * q * (1.0 - q)).collect();
    let g_f = p.backward_disc(&f_in, &out, &g, false).unwrap();

    let mut frozen = p.clone();
    frozen.zero_grad();
    let g_f_frozen = frozen.backward_disc(&f_in, &out, &g, true).unwrap();
    let disc_slots = [Slot::both(Layer::Disc1), Slot::both(Layer::Disc2)].concat();
    let untouched = disc_slots.iter().all(|s| s.grad(&frozen).iter().all(|&v| v == 0.0));
    if !untouched || g_f_frozen != g_f {
        return f64::INFINITY;
    }

    let f = |q: &ModelParams| probe_vec(&q.disc_forward(&f_in).unwrap().probs, &rd);
    let (mut fd, mut an) = slots_fd(&p, &disc_slots, h, 24, &mut r, &f);
    fd.extend(fd_grad(f_in.data(), h, |t| {
        probe_vec(&p.disc_forward(&Matrix::new(n, D, t.to_vec()).unwrap()).unwrap().probs, &rd)
    }));
    an.extend(to_f64(g_f.data()));
    rel_err(&fd, &an)
}

/// Cosine text head: gradients wrt `μ` and the language component.
fn check_text_head(seed: u64) -> f64 {
    let mut r = rng(seed);
    let tau = r.random_range(0.1..1.0);
    let mut p = small_model(&mut r, tau);
    let f_lac = rand_matrix(&mut r, B, D, 1.0);
    let rt = rand_matrix(&mut r, B, K, 1.0);
    p.zero_grad();
    let g_f = p.backward_text(&f_lac, &rt).unwrap();
    let f = |q: &ModelParams| probe(&q.text_logits_raw(&f_lac).unwrap(), &rt);
    let (mut fd, mut an) = slots_fd(&p, &[Slot::Mu], 0.05, 24, &mut r, &f);
    fd.extend(fd_grad(f_lac.data(), 0.05, |t| {
        probe(&p.text_logits_raw(&Matrix::new(B, D, t.to_vec()).unwrap()).unwrap(), &rt)
    }));
    an.extend(to_f64(g_f.data()));
    rel_err(&fd, &an)
}

type Check = fn(u64) -> f64;

pub const A1_CHECKS: [(&str, Check); 11] = [
    ("ortho", check_ortho),
    ("kl", check_kl),
    ("ce", check_ce),
    ("im", check_im),
    ("bce", check_bce),
    ("ensemble_ce", check_ensemble_ce),
    ("separators", check_separators),
    ("classifier", check_classifier),
    ("weight_generator", check_weight_generator),
    ("discriminator", check_discriminator),
    ("text_head", check_text_head),
];

/// Worst relative error per check over `seeds` seeds.
pub fn gradient_suite(seeds: u64) -> BTreeMap<&'static str, f64> {
    A1_CHECKS
        .iter()
        .map(|&(name, check)| (name, (0..seeds).map(check).fold(0.0, f64::max)))
        .collect()
}

pub fn a1(seeds: u64) -> Outcome {
    let start = std::time::Instant::now();
    let worst = gradient_suite(seeds);
    let secs = start.elapsed().as_secs_f64();
    let failing: Vec<String> = worst
        .iter()
        .filter(|(_, &e)| e.is_nan() || e >= A1_TOL)
        .map(|(n, e)| format!("{n}={e:.2e}"))
        .collect();
    let (name, max) = worst.iter().fold(("", 0.0), |a, (&n, &e)| if e > a.1 { (n, e) } else { a });
    Outcome::new(
        failing.is_empty() && secs < 30.0,
        format!(
            "{} checks x {seeds} seeds, worst rel err {max:.2e} ({name}), tol {A1_TOL:.0e}, {secs:.2}s (limit 30s){}",
            worst.len(),
            if failing.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failing.join(", "))
            }
        ),
    )
}

/// Single-sample probe of the unlabeled vision loss `CE(y_e, ŷ)`.
struct Probe {
    p: ModelParams,
    x: Matrix,
    y_l: Matrix,
    label: usize,
}

impl Probe {
    fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let p = small_model(&mut r, 0.5);
        let x = rand_matrix(&mut r, 1, D, 1.0);
        let y_l = rand_matrix(&mut r, 1, K, 2.0);
        let label = r.random_range(0..K);
        Self { p, x, y_l, label }
    }
}

/// Max-abs differences between the full backward and the factored forms of
/// the vision-path and weight gradients.
pub fn factored_identity_errors(seed: u64) -> (f64, f64) {
    let Probe { mut p, x, y_l, label } = Probe::new(seed);
    p.zero_grad();
    let out = p.forward(&x).unwrap();
    let y_e = ensemble_train(&out.y_v, &y_l, &out.w_train).unwrap();
    let (_, g_e) = mean_ce(&y_e, &[label]).unwrap();
    let (g_v, g_w) = ensemble_train_backward(&out.y_v, &y_l, &out.w_train, &g_e).unwrap();
    p.backward_vision(&out, &g_v).unwrap();

    let ls = super::oracle::log_softmax(y_e.row(0));
    let resid: Vec<f64> = (0..K).map(|k| ls[k].exp() - f64::from(u8::from(k == label))).collect();
    let w = f64::from(out.w_train[0]);
    let (f_b, f_vac) = (out.f_b.row(0), out.f_vac.row(0));
    let w2 = &p.phi2.weight;
    let mut vision = 0.0f64;
    for (k, &rk) in resid.iter().enumerate() {
        for (j, &fb) in f_b.iter().enumerate() {
            let expect = rk * w * f64::from(fb);
            vision = vision.max((expect - f64::from(p.phi2.grad_weight.get(k, j))).abs());
        }
    }
    for j in 0..f_b.len() {
        for (i, &fv) in f_vac.iter().enumerate() {
            let expect: f64 = (0..K).map(|k| resid[k] * w * f64::from(w2.get(k, j)) * f64::from(fv)).sum();
            vision = vision.max((expect - f64::from(p.phi1.grad_weight.get(j, i))).abs());
        }
    }
    let expect_w: f64 = (0..K)
        .map(|k| resid[k] * (f64::from(out.y_v.get(0, k)) - f64::from(y_l.get(0, k))))
        .sum();
    (vision, (expect_w - f64::from(g_w[0])).abs())
}

/// A small batch with source, labeled and unlabeled target rows.
pub fn sample_batch(seed: u64, tau: f32) -> (ModelParams, DebiasState, BatchInput, LossWeights) {
    let mut r = rng(seed);
    let mut p = small_model(&mut r, tau);
    // Keeps every discriminator pre-activation positive so no ReLU kink lies
    // within finite-difference reach.
    p.disc1.bias.iter_mut().for_each(|b| *b = 3.0);
    let prior: Vec<f32> = {
        let raw: Vec<f32> = (0..K).map(|_| r.random_range(0.5..1.5)).collect();
        let s: f32 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    };
    let debias = DebiasState::with_prior(prior, 0.99, 0.5).unwrap();
    let labeled = vec![(0, r.random_range(0..K)), (2, r.random_range(0..K))];
    let input = BatchInput {
        x_s: rand_matrix(&mut r, 4, D, 1.0),
        y_s: (0..4).map(|_| r.random_range(0..K)).collect(),
        x_t: rand_matrix(&mut r, 5, D, 1.0),
        x_aug: rand_matrix(&mut r, labeled.len(), D, 1.0),
        labeled,
        unlabeled: vec![1, 3, 4],
        teacher: rand_matrix(&mut r, 3, K, 2.0),
        pseudo: (0..3).map(|_| r.random_range(0..K)).collect(),
    };
    let w = LossWeights {
        alpha: 0.7,
        beta: 0.8,
        gamma: 0.3,
        h: 1.0,
    };
    (p, debias, input, w)
}

/// Batch loss terms under `p`, leaving the caller's state untouched.
pub fn batch_losses(p: &ModelParams, debias: &DebiasState, input: &BatchInput, w: &LossWeights) -> LossBreakdown {
    let (mut q, mut d) = (p.clone(), debias.clone());
    let opts = BatchOptions {
        phase_a: true,
        trace: false,
    };
    batch_gradients(&mut q, &mut d, input, w, opts).unwrap().0
}

/// Relative error of the accumulated batch gradients against finite
/// differences. Vision-side parameters descend the full total. The text side
/// (`Q_t`, `μ`) sees the ensemble with `y_l` detached, so its objective is
/// `lac + γ·(ortho + d)`. The discriminator is left out: it is frozen for the
/// target terms, so its update is not the gradient of the total.
pub fn full_batch_error(seed: u64) -> f64 {
    let (mut p, debias, input, w) = sample_batch(seed, 0.2);
    let mut r = rng(seed ^ 0xfeed);
    let mut d = debias.clone();
    p.zero_grad();
    let opts = BatchOptions {
        phase_a: true,
        trace: false,
    };
    batch_gradients(&mut p, &mut d, &input, &w, opts).unwrap();
    let g = f64::from(w.gamma);
    let vision: Vec<Slot> = [Layer::Qv, Layer::Phi1, Layer::Phi2, Layer::Wgen1, Layer::Wgen2]
        .into_iter()
        .flat_map(Slot::both)
        .collect();
    let (mut fd, mut an) = slots_fd(&p, &vision, 0.02, 6, &mut r, &|q| {
        batch_losses(q, &debias, &input, &w).total(w.gamma)
    });
    let text = [Slot::Weight(Layer::Qt), Slot::Bias(Layer::Qt), Slot::Mu];
    let (fd_t, an_t) = slots_fd(&p, &text, 0.02, 6, &mut r, &|q| {
        let l = batch_losses(q, &debias, &input, &w);
        l.lac + g * (l.ortho + l.d)
    });
    fd.extend(fd_t);
    an.extend(an_t);
    rel_err(&fd, &an)
}

pub fn a2(seeds: u64) -> Outcome {
    let (mut vision, mut weight) = (0.0f64, 0.0f64);
    for s in 0..seeds {
        let (v, w) = factored_identity_errors(s);
        vision = vision.max(v);
        weight = weight.max(w);
    }
    let detached = (0..seeds).all(text_side_ignores_vision_targets);
    Outcome::new(
        vision < A2_TOL && weight < A2_TOL && detached,
        format!(
            "{seeds} seeds, vision-path max |diff| {vision:.2e}, weight max |diff| {weight:.2e} (tol {A2_TOL:.0e}); \
             text gradients independent of vision targets: {detached}"
        ),
    )
}

/// Changing only the unlabeled pseudo-labels, which feed the vision loss
/// alone, must leave the gradients of `μ` and `Q_t` bit-identical.
pub fn text_side_ignores_vision_targets(seed: u64) -> bool {
    let (p, debias, input, w) = sample_batch(seed, 0.2);
    let opts = BatchOptions {
        phase_a: true,
        trace: false,
    };
    let run = |input: &BatchInput| {
        let (mut q, mut d) = (p.clone(), debias.clone());
        q.zero_grad();
        batch_gradients(&mut q, &mut d, input, &w, opts).unwrap();
        q
    };
    let base = run(&input);
    let mut shifted = input.clone();
    shifted.pseudo.iter_mut().for_each(|l| *l = (*l + 1) % K);
    let other = run(&shifted);
    let same = |s: Slot| s.grad(&base) == s.grad(&other);
    same(Slot::Mu)
        && same(Slot::Weight(Layer::Qt))
        && same(Slot::Bias(Layer::Qt))
        && !same(Slot::Weight(Layer::Phi2))
}
