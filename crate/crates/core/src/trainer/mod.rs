//! Training loop: per-epoch teacher and pseudo-label refresh, mini-batch
//! optimization, active annotation rounds and evaluation.

pub mod batch;
mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::{batch_gradients, BatchInput, BatchOptions, BatchTrace, LossBreakdown};
pub use config::{Mode, TrainConfig};

use crate::dataio::{augment_row, DomainData, DomainRole, FeatureDataset, HiddenLabels};
use crate::error::{Error, Result};
use crate::losses::{center_rows, teacher_zeroshot, DebiasState};
use crate::mae::{ensemble_test, pick_test_weight, MaeConfig, MaeState, WeightSource};
use crate::mdi::{annotate_round, AnnotationOracle, AnnotationSet, CategoryCounts, MdiPartition, QueryItem, RoundOutcome};
use crate::model::{zero_shot_predict, Checkpoint, ModelParams};
use crate::numcore::{argmax, dot, norm, sgd_step, softmax_f64, Matrix};

/// Class mass below which a centroid falls back to the global mean.
pub const CENTROID_MIN_MASS: f64 = 1e-6;

/// Outputs of one inference pass over a feature matrix.
#[derive(Clone, Debug)]
pub struct Inference {
    pub f_b: Matrix,
    pub y_v: Matrix,
    pub y_tilde: Matrix,
    /// Debiased text logits.
    pub y_l: Matrix,
    pub w_train: Vec<f32>,
}

impl Inference {
    pub fn run(params: &ModelParams, debias: Option<&DebiasState>, x: &Matrix) -> Result<Self> {
        let out = params.forward(x)?;
        let y_l = match debias {
            Some(d) => d.apply(&out.y_tilde)?,
            None => out.y_tilde.clone(),
        };
        Ok(Self {
            f_b: out.f_b,
            y_v: out.y_v,
            y_tilde: out.y_tilde,
            y_l,
            w_train: out.w_train,
        })
    }

    pub fn mean_w(&self) -> Option<f32> {
        (!self.w_train.is_empty())
            .then(|| (self.w_train.iter().map(|&w| f64::from(w)).sum::<f64>() / self.w_train.len() as f64) as f32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Centroids {
    pub centroids: Matrix,
    /// Classes whose mass fell below [`CENTROID_MIN_MASS`].
    pub fallback: Vec<bool>,
}

/// Probability-weighted class means of `f_b`.
pub fn compute_centroids(f_b: &Matrix, probs: &Matrix) -> Result<Centroids> {
    if f_b.rows() != probs.rows() {
        return Err(Error::shape("compute_centroids", f_b.rows(), probs.rows()));
    }
    let (n, d) = f_b.shape();
    let k = probs.cols();
    let mut sums = vec![0.0f64; k * d];
    let mut mass = vec![0.0f64; k];
    let mut global = vec![0.0f64; d];
    for (f, p) in f_b.iter_rows().zip(probs.iter_rows()) {
        for (g, &v) in global.iter_mut().zip(f) {
            *g += f64::from(v);
        }
        for (c, &pc) in p.iter().enumerate() {
            let pc = f64::from(pc);
            mass[c] += pc;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(f) {
                *s += pc * f64::from(v);
            }
        }
    }
    let inv_n = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(k * d);
    let mut fallback = vec![false; k];
    for c in 0..k {
        if mass[c] < CENTROID_MIN_MASS {
            fallback[c] = true;
            out.extend(global.iter().map(|g| (g * inv_n) as f32));
        } else {
            out.extend(sums[c * d..(c + 1) * d].iter().map(|s| (s / mass[c]) as f32));
        }
    }
    Ok(Centroids {
        centroids: Matrix::new(k, d, out)?,
        fallback,
    })
}

fn cosine_or_zero(a: &[f32], b: &[f32], na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Class of the most cosine-similar centroid, ties to the lower index.
pub fn assign_pseudo(f_b: &[f32], centroids: &Matrix) -> usize {
    let nf = norm(f_b);
    let sims: Vec<f32> = centroids
        .iter_rows()
        .map(|c| cosine_or_zero(f_b, c, nf, norm(c)) as f32)
        .collect();
    argmax(&sims)
}

/// Mean-centered cosine similarities to the centroids, over `tau`.
pub fn centroid_teacher(f_b: &Matrix, centroids: &Matrix, tau: f32) -> Matrix {
    let c_norms: Vec<f64> = centroids.iter_rows().map(norm).collect();
    let inv_tau = 1.0 / f64::from(tau);
    let mut out = Vec::with_capacity(f_b.rows() * centroids.rows());
    for f in f_b.iter_rows() {
        let nf = norm(f);
        for (c, &nc) in centroids.iter_rows().zip(&c_norms) {
            out.push((cosine_or_zero(f, c, nf, nc) * inv_tau) as f32);
        }
    }
    let mut m = Matrix::new(f_b.rows(), centroids.rows(), out).expect("teacher shape");
    center_rows(&mut m);
    m
}

pub fn accuracy(preds: &[usize], labels: &[u32]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| **p == **l as usize).count();
    hits as f64 / preds.len() as f64
}

fn predictions(logits: &Matrix) -> Vec<usize> {
    logits.iter_rows().map(argmax).collect()
}

/// Everything refreshed at an epoch boundary from a full target pass.
#[derive(Clone, Debug)]
pub struct EpochArtifacts {
    pub inference: Inference,
    pub partition: MdiPartition,
    pub mae: MaeState,
    pub w_star: f32,
    pub w_source: WeightSource,
    pub y_ens: Matrix,
    pub centroids: Centroids,
    /// Clustering pseudo-labels per target sample.
    pub pseudo: Vec<usize>,
    /// Teacher logits per target sample.
    pub teacher: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub acc_v: Option<f64>,
    pub acc_l: Option<f64>,
    pub acc_ens: Option<f64>,
    pub w_star: f32,
    pub n_tc: usize,
    pub mdi_counts: CategoryCounts,
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub epoch: usize,
    pub queried: usize,
    pub added: usize,
    pub deferred: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    pub n_target: usize,
    /// Zero-shot accuracy of the raw features against the dataset text
    /// embeddings.
    pub zero_shot_acc: Option<f64>,
    pub final_metrics: EpochMetrics,
    pub best_acc_ens: Option<f64>,
    pub w_source: WeightSource,
    pub budget: usize,
    pub labeled: Vec<(usize, u32)>,
    pub rounds: Vec<RoundSummary>,
}

/// Callbacks for a live run (annotation service, progress display).
pub trait RunObserver {
    fn on_metrics(&mut self, _metrics: &EpochMetrics, _annotations: &AnnotationSet) {}

    /// Called at every epoch boundary before training continues; may block.
    fn at_boundary(&mut self, _epoch: usize) -> Result<()> {
        Ok(())
    }
}

#[derive(Default)]
pub struct RunHooks<'a> {
    pub oracle: Option<&'a mut dyn AnnotationOracle>,
    pub observer: Option<&'a mut dyn RunObserver>,
    pub interrupt: Option<Arc<AtomicBool>>,
    /// Run directory for metrics, checkpoint and report files.
    pub out_dir: Option<PathBuf>,
}

/// Answers queries from a domain's hidden ground truth.
pub struct HiddenLabelOracle {
    labels: Arc<HiddenLabels>,
}

impl HiddenLabelOracle {
    pub fn new(labels: Arc<HiddenLabels>) -> Self {
        Self { labels }
    }

    pub fn for_domain(domain: &DomainData) -> Result<Self> {
        domain
            .hidden_labels()
            .cloned()
            .map(Self::new)
            .ok_or_else(|| Error::Config(format!("domain {:?} has no hidden labels", domain.name())))
    }
}

impl AnnotationOracle for HiddenLabelOracle {
    fn annotate(&mut self, queries: &[QueryItem]) -> Result<RoundOutcome> {
        queries
            .iter()
            .map(|q| {
                self.labels
                    .query(q.index)
                    .map(|l| (q.index, l))
                    .ok_or_else(|| Error::Oracle(format!("no label for sample {}", q.index)))
            })
            .collect::<Result<_>>()
            .map(RoundOutcome::Labeled)
    }
}

fn pick_domain<'d>(ds: &'d FeatureDataset, role: DomainRole, name: Option<&str>) -> Result<Vec<&'d DomainData>> {
    let all: Vec<&DomainData> = ds.by_role(role).collect();
    let label = match role {
        DomainRole::Source => "source",
        DomainRole::Target => "target",
    };
    match name {
        Some(n) => all
            .into_iter()
            .find(|d| d.name() == n)
            .map(|d| vec![d])
            .ok_or_else(|| Error::Config(format!("no {label} domain named {n:?}"))),
        None if all.is_empty() => Err(Error::Config(format!("dataset has no {label} domain"))),
        None => Ok(all),
    }
}

/// Source features and labels for the configured mode; multi-source mode
/// concatenates every source domain.
fn source_pool(ds: &FeatureDataset, cfg: &TrainConfig) -> Result<(Matrix, Vec<usize>)> {
    let d = ds.d_v();
    if !cfg.mode.uses_source() {
        return Ok((Matrix::zeros(0, d), Vec::new()));
    }
    let domains = pick_domain(ds, DomainRole::Source, cfg.source_domain.as_deref())?;
    if domains.len() > 1 && cfg.mode != Mode::Msda {
        return Err(Error::Config(format!(
            "dataset has {} source domains; pick one with source_domain or use msda mode",
            domains.len()
        )));
    }
    let feats: Vec<&Matrix> = domains.iter().map(|d| &d.features).collect();
    let mut labels = Vec::new();
    for dom in &domains {
        let l = dom
            .labels()
            .ok_or_else(|| Error::Config(format!("source domain {:?} has no labels", dom.name())))?;
        labels.extend(l.iter().map(|&v| v as usize));
    }
    Ok((Matrix::vstack(&feats)?, labels))
}

fn target_domain<'d>(ds: &'d FeatureDataset, cfg: &TrainConfig) -> Result<&'d DomainData> {
    let t = pick_domain(ds, DomainRole::Target, cfg.target_domain.as_deref())?;
    if t.len() > 1 {
        return Err(Error::Config("dataset has several target domains; pick one with target_domain".into()));
    }
    Ok(t[0])
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub target: &'a DomainData,
    text_features: &'a Matrix,
    source_x: Matrix,
    source_y: Vec<usize>,
    pub params: ModelParams,
    pub debias: DebiasState,
    /// Frozen zero-shot teacher computed from the initial text embeddings.
    zeroshot_teacher: Matrix,
    pub annotations: AnnotationSet,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    /// Builds a trainer; `init` warm-starts from a checkpoint (required in
    /// source-free mode).
    pub fn new(ds: &'a FeatureDataset, cfg: TrainConfig, init: Option<Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode == Mode::Sfada && init.is_none() {
            return Err(Error::Config("sfada mode needs a source-trained checkpoint".into()));
        }
        let target = target_domain(ds, &cfg)?;
        let (source_x, source_y) = source_pool(ds, &cfg)?;
        if cfg.mode.uses_source() && source_x.rows() == 0 {
            return Err(Error::Config("source domain is empty".into()));
        }
        if target.is_empty() {
            return Err(Error::Config("target domain is empty".into()));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (params, debias) = match init {
            Some(ck) => {
                if ck.params.d_v() != ds.d_v() || ck.params.num_classes() != ds.num_classes() {
                    return Err(Error::Config(format!(
                        "checkpoint is {}-d/{} classes, dataset is {}-d/{} classes",
                        ck.params.d_v(),
                        ck.params.num_classes(),
                        ds.d_v(),
                        ds.num_classes()
                    )));
                }
                let debias = match ck.p_hat {
                    Some(p) => DebiasState::with_prior(p, cfg.debias_m, cfg.debias_eta)?,
                    None => DebiasState::uniform(ds.num_classes(), cfg.debias_m, cfg.debias_eta),
                };
                (ck.params, debias)
            }
            None => (
                ModelParams::init(&ds.text_features, &cfg.model, &mut init_rng)?,
                DebiasState::uniform(ds.num_classes(), cfg.debias_m, cfg.debias_eta),
            ),
        };
        let zeroshot_teacher = teacher_zeroshot(&target.features, &ds.text_features, params.tau)?;
        let budget = if cfg.mode.is_active() {
            cfg.budget_count(target.len())
        } else {
            0
        };
        let annotations = AnnotationSet::new(budget, cfg.round_count(budget), ds.num_classes());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            cfg,
            target,
            text_features: &ds.text_features,
            source_x,
            source_y,
            params,
            debias,
            zeroshot_teacher,
            annotations,
            rng,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            p_hat: Some(self.debias.p_hat.clone()),
        }
    }

    fn eval_labels(&self) -> Option<&[u32]> {
        self.target.hidden_labels().map(|h| h.for_evaluation())
    }

    /// Full target pass and every quantity derived from it. `epoch` is the
    /// index of the epoch about to be trained (equivalently, the number of
    /// epochs trained so far).
    pub fn refresh(&self, epoch: usize) -> Result<EpochArtifacts> {
        let cfg = &self.cfg;
        let inference = Inference::run(&self.params, Some(&self.debias), &self.target.features)?;
        let mut partition = MdiPartition::categorize(&inference.y_v, &inference.y_l)?;
        partition.select_confident(cfg.m_pct);
        let mae = MaeState::compute(&inference.y_v, &inference.y_l, &cfg.mae)?;
        let (w_star, w_source) = pick_test_weight(&mae, epoch, cfg.max_epoch, inference.mean_w(), &cfg.mae);
        let y_ens = ensemble_test(&inference.y_v, &inference.y_l, w_star)?;
        let probs = softmax_rows(&y_ens);
        let centroids = compute_centroids(&inference.f_b, &probs)?;
        let pseudo = inference
            .f_b
            .iter_rows()
            .map(|f| assign_pseudo(f, &centroids.centroids))
            .collect();
        let teacher = if epoch < cfg.switch_epoch() {
            self.zeroshot_teacher.clone()
        } else {
            centroid_teacher(&inference.f_b, &centroids.centroids, self.params.tau)
        };
        Ok(EpochArtifacts {
            inference,
            partition,
            mae,
            w_star,
            w_source,
            y_ens,
            centroids,
            pseudo,
            teacher,
        })
    }

    /// Label or label proxy per target sample for the coming epoch.
    fn supervision(&self, art: &EpochArtifacts) -> Vec<Option<usize>> {
        let mut out = vec![None; self.target.len()];
        if !self.cfg.mode.is_active() || self.cfg.active_uses_confident {
            for &i in &art.partition.t_c {
                out[i] = Some(argmax(art.inference.y_v.row(i)));
            }
        }
        for (i, l) in self.annotations.iter() {
            out[i] = Some(l as usize);
        }
        out
    }

    fn batch_count(&self) -> usize {
        let longest = self.source_x.rows().max(self.target.len());
        longest.div_ceil(self.cfg.batch_size)
    }

    /// One pass over the paired source/target streams. With `trace`, the
    /// first batch's intermediates are returned.
    pub fn train_epoch(
        &mut self,
        epoch: usize,
        art: &EpochArtifacts,
        interrupt: Option<&AtomicBool>,
        trace: bool,
    ) -> Result<(LossBreakdown, Option<BatchTrace>)> {
        let bsz = self.cfg.batch_size;
        let (n_s, n_t) = (self.source_x.rows(), self.target.len());
        let mut s_order: Vec<usize> = (0..n_s).collect();
        let mut t_order: Vec<usize> = (0..n_t).collect();
        s_order.shuffle(&mut self.rng);
        t_order.shuffle(&mut self.rng);
        let sup = self.supervision(art);
        let n_batches = self.batch_count();
        let longest = n_s.max(n_t);
        let k = self.params.num_classes();
        let mut sum = LossBreakdown::default();
        let mut first_trace = None;
        for b in 0..n_batches {
            if interrupt.is_some_and(|f| f.load(Ordering::SeqCst)) {
                return Err(Error::Interrupted);
            }
            let positions = b * bsz..((b + 1) * bsz).min(longest);
            let src_idx: Vec<usize> = if n_s == 0 {
                Vec::new()
            } else {
                positions.clone().map(|p| s_order[p % n_s]).collect()
            };
            let tgt_idx: Vec<usize> = positions.map(|p| t_order[p % n_t]).collect();

            let mut labeled = Vec::new();
            let mut aug_rows = Vec::new();
            let mut unlabeled = Vec::new();
            let mut teacher_rows = Vec::new();
            let mut pseudo = Vec::new();
            for (row, &i) in tgt_idx.iter().enumerate() {
                match sup[i] {
                    Some(l) => {
                        labeled.push((row, l));
                        aug_rows.extend(augment_row(self.target, i, &mut self.rng));
                    }
                    None => {
                        unlabeled.push(row);
                        teacher_rows.extend_from_slice(art.teacher.row(i));
                        pseudo.push(art.pseudo[i]);
                    }
                }
            }
            let d = self.params.d_v();
            let input = BatchInput {
                x_s: self.source_x.select_rows(&src_idx),
                y_s: src_idx.iter().map(|&i| self.source_y[i]).collect(),
                x_t: self.target.features.select_rows(&tgt_idx),
                x_aug: Matrix::new(labeled.len(), d, aug_rows)?,
                labeled,
                teacher: Matrix::new(unlabeled.len(), k, teacher_rows)?,
                unlabeled,
                pseudo,
            };
            let opts = BatchOptions {
                phase_a: self.cfg.mode.uses_source(),
                trace: trace && b == 0,
            };
            let (losses, tr) = batch_gradients(&mut self.params, &mut self.debias, &input, &self.cfg.loss, opts)?;
            if !losses.is_finite() {
                return Err(Error::Numeric {
                    epoch,
                    batch: b,
                    detail: format!(
                        "lac={} vac={} ortho={} d={} im={}",
                        losses.lac, losses.vac, losses.ortho, losses.d, losses.im
                    ),
                });
            }
            if tr.is_some() {
                first_trace = tr;
            }
            sum.accumulate(&losses);
            let progress = (epoch * n_batches + b) as f32 / (self.cfg.max_epoch * n_batches) as f32;
            sgd_step(&mut self.params.optimizables(), &self.cfg.sgd, progress);
        }
        Ok((sum.scaled(1.0 / n_batches as f64), first_trace))
    }

    fn metrics(&self, epoch: usize, art: &EpochArtifacts, losses: LossBreakdown) -> EpochMetrics {
        let labels = self.eval_labels();
        let acc = |m: &Matrix| labels.map(|l| accuracy(&predictions(m), l));
        EpochMetrics {
            epoch,
            acc_v: acc(&art.inference.y_v),
            acc_l: acc(&art.inference.y_l),
            acc_ens: acc(&art.y_ens),
            w_star: art.w_star,
            n_tc: art.partition.t_c.len(),
            mdi_counts: art.partition.counts(),
            losses,
        }
    }

    /// Runs the whole schedule and writes run artifacts when `hooks.out_dir`
    /// is set. An interrupt still saves the current checkpoint there.
    pub fn run(&mut self, hooks: RunHooks<'_>) -> Result<RunReport> {
        let out_dir = hooks.out_dir.clone();
        match self.run_schedule(hooks) {
            Err(Error::Interrupted) => {
                if let Some(dir) = &out_dir {
                    self.checkpoint().save(dir.join("checkpoint"))?;
                }
                Err(Error::Interrupted)
            }
            other => other,
        }
    }

    fn run_schedule(&mut self, mut hooks: RunHooks<'_>) -> Result<RunReport> {
        let out_dir = hooks.out_dir.clone();
        let mut metrics_out = match &out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
            }
            None => None,
        };
        let mut emit = |m: &EpochMetrics, ann: &AnnotationSet, obs: &mut Option<&mut dyn RunObserver>| -> Result<()> {
            if let Some((w, path)) = metrics_out.as_mut() {
                let line = serde_json::to_string(m).expect("metrics serialize");
                writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            if let Some(o) = obs.as_deref_mut() {
                o.on_metrics(m, ann);
            }
            Ok(())
        };

        let mut art = self.refresh(0)?;
        let first = self.metrics(0, &art, LossBreakdown::default());
        emit(&first, &self.annotations, &mut hooks.observer)?;
        let mut best = first.acc_ens;
        let mut last = first;
        let mut rounds = Vec::new();
        for epoch in 0..self.cfg.max_epoch {
            if let Some(o) = hooks.observer.as_deref_mut() {
                o.at_boundary(epoch)?;
            }
            let (losses, _) = self.train_epoch(epoch, &art, hooks.interrupt.as_deref(), false)?;
            art = self.refresh(epoch + 1)?;
            if self.cfg.mode.is_active() && self.annotations.remaining() > 0 {
                if let Some(oracle) = hooks.oracle.as_deref_mut() {
                    let r = annotate_round(
                        &mut art.partition,
                        &art.inference.y_v,
                        &art.inference.y_l,
                        &mut self.annotations,
                        oracle,
                    )?;
                    rounds.push(RoundSummary {
                        epoch: epoch + 1,
                        queried: r.queried.len(),
                        added: r.added,
                        deferred: r.deferred,
                    });
                } else {
                    return Err(Error::Config("active mode needs an annotation oracle".into()));
                }
            }
            let m = self.metrics(epoch + 1, &art, losses);
            emit(&m, &self.annotations, &mut hooks.observer)?;
            if let (Some(a), Some(b)) = (m.acc_ens, best) {
                best = Some(a.max(b));
            }
            last = m;
        }

        let zero_shot_acc = match self.eval_labels() {
            Some(l) => Some(accuracy(&zero_shot_predict(&self.target.features, self.text_features)?, l)),
            None => None,
        };
        let report = RunReport {
            mode: self.cfg.mode,
            seed: self.cfg.seed,
            epochs: self.cfg.max_epoch,
            n_target: self.target.len(),
            zero_shot_acc,
            final_metrics: last,
            best_acc_ens: best,
            w_source: art.w_source,
            budget: self.annotations.budget,
            labeled: self.annotations.iter().collect(),
            rounds,
        };
        if let Some(dir) = &out_dir {
            write_run_outputs(dir, self, &art, &report)?;
        }
        Ok(report)
    }
}

fn softmax_rows(m: &Matrix) -> Matrix {
    let data = m
        .iter_rows()
        .flat_map(|r| softmax_f64(r, 1.0).into_iter().map(|p| p as f32))
        .collect();
    Matrix::new(m.rows(), m.cols(), data).expect("softmax shape")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

fn write_run_outputs(dir: &Path, trainer: &Trainer<'_>, art: &EpochArtifacts, report: &RunReport) -> Result<()> {
    trainer.checkpoint().save(dir.join("checkpoint"))?;
    write_json(&dir.join("report.json"), report)?;
    let path = dir.join("partition.jsonl");
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    art.partition.write_jsonl(BufWriter::new(f)).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("delta_curve.csv");
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    art.mae
        .write_curve_csv(BufWriter::new(f), trainer.target.len(), trainer.cfg.mae.slope)
        .map_err(|e| Error::io(&path, e))
}

/// Accuracy and diagnostics of a model on a target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_target: usize,
    pub acc_v: Option<f64>,
    pub acc_l: Option<f64>,
    pub acc_ens: Option<f64>,
    pub zero_shot_acc: Option<f64>,
    pub w_star: f32,
    pub w_source: WeightSource,
    pub n_tc: usize,
    pub mdi_counts: CategoryCounts,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub inference: Inference,
    pub partition: MdiPartition,
    pub mae: MaeState,
    /// Per-sample predictions of each head.
    pub vision_predictions: Vec<usize>,
    pub text_predictions: Vec<usize>,
    pub ensemble_predictions: Vec<usize>,
}

/// Evaluates a checkpoint with the test-time ensemble. Text logits are
/// debiased only when the checkpoint carries a prior.
pub fn evaluate(
    ds: &FeatureDataset,
    ck: &Checkpoint,
    target: Option<&str>,
    mae_cfg: &MaeConfig,
    m_pct: f32,
) -> Result<Evaluation> {
    mae_cfg.validate()?;
    let domain = match target {
        Some(n) => ds
            .domain(n)
            .ok_or_else(|| Error::Config(format!("no domain named {n:?}")))?,
        None => target_domain(ds, &TrainConfig::default())?,
    };
    let debias = match &ck.p_hat {
        Some(p) => Some(DebiasState::with_prior(p.clone(), 0.99, 0.5)?),
        None => None,
    };
    let inference = Inference::run(&ck.params, debias.as_ref(), &domain.features)?;
    let mut partition = MdiPartition::categorize(&inference.y_v, &inference.y_l)?;
    partition.select_confident(m_pct);
    let mae = MaeState::compute(&inference.y_v, &inference.y_l, mae_cfg)?;
    let y_ens = ensemble_test(&inference.y_v, &inference.y_l, mae.w_star)?;
    let labels = domain
        .hidden_labels()
        .map(|h| h.for_evaluation())
        .or_else(|| domain.labels());
    let vision_predictions = predictions(&inference.y_v);
    let text_predictions = predictions(&inference.y_l);
    let ensemble_predictions = predictions(&y_ens);
    let acc = |p: &[usize]| labels.map(|l| accuracy(p, l));
    let zs = zero_shot_predict(&domain.features, &ds.text_features)?;
    let report = EvalReport {
        n_target: domain.len(),
        acc_v: acc(&vision_predictions),
        acc_l: acc(&text_predictions),
        acc_ens: acc(&ensemble_predictions),
        zero_shot_acc: acc(&zs),
        w_star: mae.w_star,
        w_source: mae.source,
        n_tc: partition.t_c.len(),
        mdi_counts: partition.counts(),
    };
    Ok(Evaluation {
        report,
        inference,
        partition,
        mae,
        vision_predictions,
        text_predictions,
        ensemble_predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub n_train: usize,
    pub n_holdout: usize,
    pub holdout_acc_v: Option<f64>,
    pub holdout_acc_l: Option<f64>,
    pub holdout_zero_shot_acc: Option<f64>,
}

/// Source-only training (text and vision cross-entropy, orthogonality and
/// phase-A discrimination), holding out a fraction of the source for
/// validation.
pub fn pretrain_source(ds: &FeatureDataset, cfg: &TrainConfig, holdout: f64) -> Result<(Checkpoint, PretrainReport)> {
    let cfg = TrainConfig {
        mode: Mode::Uda,
        budget: 0.0,
        ..cfg.clone()
    };
    cfg.validate()?;
    if !(0.0..1.0).contains(&holdout) {
        return Err(Error::Config(format!("holdout must lie in [0, 1), got {holdout}")));
    }
    let (x, y) = source_pool(ds, &TrainConfig {
        mode: Mode::Msda,
        ..cfg.clone()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(&ds.text_features, &cfg.model, &mut rng)?;
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    order.shuffle(&mut rng);
    let n_hold = (holdout * x.rows() as f64).round() as usize;
    let (hold, train) = order.split_at(n_hold);
    if train.is_empty() {
        return Err(Error::Config("no source samples left for training".into()));
    }
    let mut debias = DebiasState::uniform(ds.num_classes(), cfg.debias_m, cfg.debias_eta);
    let d = ds.d_v();
    let k = ds.num_classes();
    let n_batches = train.len().div_ceil(cfg.batch_size);
    let mut train = train.to_vec();
    for epoch in 0..cfg.max_epoch {
        train.shuffle(&mut rng);
        for (b, chunk) in train.chunks(cfg.batch_size).enumerate() {
            let input = BatchInput {
                x_s: x.select_rows(chunk),
                y_s: chunk.iter().map(|&i| y[i]).collect(),
                x_t: Matrix::zeros(0, d),
                labeled: vec![],
                x_aug: Matrix::zeros(0, d),
                unlabeled: vec![],
                teacher: Matrix::zeros(0, k),
                pseudo: vec![],
            };
            let opts = BatchOptions {
                phase_a: true,
                trace: false,
            };
            let (losses, _) = batch_gradients(&mut params, &mut debias, &input, &cfg.loss, opts)?;
            if !losses.is_finite() {
                return Err(Error::Numeric {
                    epoch,
                    batch: b,
                    detail: format!("lac={} vac={}", losses.lac, losses.vac),
                });
            }
            let progress = (epoch * n_batches + b) as f32 / (cfg.max_epoch * n_batches) as f32;
            sgd_step(&mut params.optimizables(), &cfg.sgd, progress);
        }
    }
    let (acc_v, acc_l, acc_zs) = if hold.is_empty() {
        (None, None, None)
    } else {
        let xh = x.select_rows(hold);
        let yh: Vec<u32> = hold.iter().map(|&i| y[i] as u32).collect();
        let inf = Inference::run(&params, None, &xh)?;
        (
            Some(accuracy(&predictions(&inf.y_v), &yh)),
            Some(accuracy(&predictions(&inf.y_l), &yh)),
            Some(accuracy(&zero_shot_predict(&xh, &ds.text_features)?, &yh)),
        )
    };
    let report = PretrainReport {
        epochs: cfg.max_epoch,
        n_train: train.len(),
        n_holdout: hold.len(),
        holdout_acc_v: acc_v,
        holdout_acc_l: acc_l,
        holdout_zero_shot_acc: acc_zs,
    };
    Ok((Checkpoint { params, p_hat: None }, report))
}
