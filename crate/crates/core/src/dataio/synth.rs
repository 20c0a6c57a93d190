//! Synthetic two-domain benchmark standing in for pre-extracted CLIP features.
//!
//! Geometry:
//! - class means: `K` orthonormal random directions in `R^d`;
//! - sample noise: isotropic `N(0, σ²)` plus a nuisance term
//!   `σ·gain·Σ_j z_j u_j` along `rank` random directions inside the span of
//!   the class means (shared style variation a linear probe can discount but a
//!   fixed text prototype cannot);
//! - target domain: means rotated by `rotation_deg` in every plane of a random
//!   orthonormal basis, then translated by a random vector of norm
//!   `translation_norm`;
//! - text embeddings: `normalize(mean_k + o)` with one shared random offset `o`
//!   of norm `modality_offset_norm`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, DomainEntry, DomainRole, FeatureDataset, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub d_v: usize,
    pub n_per_domain: usize,
    pub rotation_deg: f64,
    pub translation_norm: f64,
    pub modality_offset_norm: f64,
    pub noise_sigma: f64,
    /// Number of nuisance directions (clamped to `num_classes`).
    pub nuisance_rank: usize,
    /// Nuisance standard deviation relative to `noise_sigma`.
    pub nuisance_gain: f64,
    /// Source domains; each extra source is rotated by `rotation_deg` in its
    /// own random planes.
    pub num_sources: usize,
    /// Stored augmented views per sample.
    pub aug_views: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            d_v: 64,
            n_per_domain: 500,
            rotation_deg: 15.0,
            translation_norm: 0.3,
            modality_offset_norm: 0.4,
            noise_sigma: 0.15,
            nuisance_rank: 4,
            nuisance_gain: 3.5,
            num_sources: 1,
            aug_views: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.num_classes > self.d_v {
            return Err(Error::Config(format!(
                "num_classes ({}) must not exceed d_v ({})",
                self.num_classes, self.d_v
            )));
        }
        if self.num_sources == 0 {
            return Err(Error::Config("num_sources must be >= 1".into()));
        }
        let nonneg = [
            ("noise_sigma", self.noise_sigma),
            ("translation_norm", self.translation_norm),
            ("modality_offset_norm", self.modality_offset_norm),
            ("nuisance_gain", self.nuisance_gain),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.rotation_deg.is_finite() {
            return Err(Error::Config("rotation_deg must be finite".into()));
        }
        Ok(())
    }
}

type Vecs = Vec<Vec<f64>>;

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn scaled(v: &[f64], norm: f64) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x * norm / n).collect()
}

/// Gram-Schmidt (twice, for stability) on the given vectors.
fn orthonormalize(mut vs: Vecs) -> Vecs {
    for i in 0..vs.len() {
        for _ in 0..2 {
            for j in 0..i {
                let p = dot(&vs[i], &vs[j]);
                let (head, tail) = vs.split_at_mut(i);
                for (x, y) in tail[0].iter_mut().zip(&head[j]) {
                    *x -= p * y;
                }
            }
        }
        vs[i] = scaled(&vs[i], 1.0);
    }
    vs
}

/// Rotation by `angle` in each consecutive plane of a random orthonormal basis.
struct PlaneRotation {
    basis: Vecs,
    cos: f64,
    sin: f64,
}

impl PlaneRotation {
    fn random(rng: &mut ChaCha8Rng, d: usize, angle_deg: f64) -> Self {
        let basis = orthonormalize((0..d).map(|_| gaussian(rng, d)).collect());
        let a = angle_deg.to_radians();
        Self {
            basis,
            cos: a.cos(),
            sin: a.sin(),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        for pair in self.basis.chunks_exact(2) {
            let (b1, b2) = (&pair[0], &pair[1]);
            let (p1, p2) = (dot(x, b1), dot(x, b2));
            let (q1, q2) = (self.cos * p1 - self.sin * p2, self.sin * p1 + self.cos * p2);
            for ((o, u), v) in out.iter_mut().zip(b1).zip(b2) {
                *o += (q1 - p1) * u + (q2 - p2) * v;
            }
        }
        out
    }
}

struct Geometry<'a> {
    cfg: &'a SynthConfig,
    nuisance: Vecs,
}

impl Geometry<'_> {
    fn sample(&self, rng: &mut ChaCha8Rng, center: &[f64]) -> Vec<f32> {
        let d = center.len();
        let sigma = self.cfg.noise_sigma;
        let iso = gaussian(rng, d);
        let mut x: Vec<f64> = center.iter().zip(&iso).map(|(c, z)| c + sigma * z).collect();
        let amp = sigma * self.cfg.nuisance_gain;
        for u in &self.nuisance {
            let z: f64 = StandardNormal.sample(rng);
            for (xi, ui) in x.iter_mut().zip(u) {
                *xi += amp * z * ui;
            }
        }
        x.into_iter().map(|v| v as f32).collect()
    }

    fn domain(
        &self,
        rng: &mut ChaCha8Rng,
        centers: &Vecs,
    ) -> (Matrix, Vec<u32>, Vec<Matrix>) {
        let (n, d, k) = (self.cfg.n_per_domain, self.cfg.d_v, self.cfg.num_classes);
        let mut labels: Vec<u32> = (0..n).map(|i| (i % k) as u32).collect();
        labels.shuffle(rng);
        let mut feats = Vec::with_capacity(n * d);
        for &y in &labels {
            feats.extend(self.sample(rng, &centers[y as usize]));
        }
        let mut views = Vec::with_capacity(self.cfg.aug_views);
        for _ in 0..self.cfg.aug_views {
            let mut v = Vec::with_capacity(n * d);
            for &y in &labels {
                v.extend(self.sample(rng, &centers[y as usize]));
            }
            views.push(Matrix::from_vec_unchecked(n, d, v));
        }
        (Matrix::from_vec_unchecked(n, d, feats), labels, views)
    }
}

/// Generates a deterministic synthetic dataset with hidden target labels.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<FeatureDataset> {
    cfg.validate()?;
    let (k, d) = (cfg.num_classes, cfg.d_v);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let means = orthonormalize((0..k).map(|_| gaussian(&mut rng, d)).collect());
    let rank = cfg.nuisance_rank.min(k);
    let nuisance = orthonormalize(
        (0..rank)
            .map(|_| {
                let coef = gaussian(&mut rng, k);
                (0..d).map(|j| (0..k).map(|c| coef[c] * means[c][j]).sum()).collect()
            })
            .collect(),
    );
    let target_rot = PlaneRotation::random(&mut rng, d, cfg.rotation_deg);
    let translation = scaled(&gaussian(&mut rng, d), cfg.translation_norm);
    let offset = scaled(&gaussian(&mut rng, d), cfg.modality_offset_norm);
    let source_rots: Vec<PlaneRotation> = (1..cfg.num_sources)
        .map(|_| PlaneRotation::random(&mut rng, d, cfg.rotation_deg))
        .collect();

    let mut text = Vec::with_capacity(k * d);
    for m in &means {
        let t: Vec<f64> = m.iter().zip(&offset).map(|(a, b)| a + b).collect();
        text.extend(scaled(&t, 1.0).into_iter().map(|v| v as f32));
    }
    let text = Matrix::from_vec_unchecked(k, d, text);

    let geo = Geometry { cfg, nuisance };
    let mut entries = Vec::new();
    let mut parts = Vec::new();
    let mut push = |name: String, role, payload: (Matrix, Vec<u32>, Vec<Matrix>)| {
        entries.push(DomainEntry {
            features_file: format!("{name}.f32").into(),
            labels_file: Some(format!("{name}.labels.u32").into()),
            hidden: role == DomainRole::Target,
            aug_files: (0..payload.2.len()).map(|i| format!("{name}.aug{i}.f32").into()).collect(),
            media_refs: None,
            count: cfg.n_per_domain,
            role,
            name,
        });
        parts.push((payload.0, Some(payload.1), payload.2));
    };

    push("source".into(), DomainRole::Source, geo.domain(&mut rng, &means));
    for (i, rot) in source_rots.iter().enumerate() {
        let centers: Vecs = means.iter().map(|m| rot.apply(m)).collect();
        push(format!("source_{}", i + 1), DomainRole::Source, geo.domain(&mut rng, &centers));
    }
    let target_centers: Vecs = means
        .iter()
        .map(|m| {
            target_rot
                .apply(m)
                .iter()
                .zip(&translation)
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();
    push("target".into(), DomainRole::Target, geo.domain(&mut rng, &target_centers));

    let manifest = DatasetManifest {
        version: FORMAT_VERSION.into(),
        d_v: d,
        num_classes: k,
        class_names: (0..k).map(|c| format!("class_{c}")).collect(),
        text_features_file: "text.f32".into(),
        domains: entries,
    };
    FeatureDataset::from_parts(manifest, text, parts)
}
