//! Modality-adaptive ensemble: per-sample ensemble thresholds and knee-point
//! selection of the test-time weight.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdi::top2;
use crate::numcore::Matrix;

/// Reference-line slope used by the knee search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KneeSlope {
    /// Number of points that carry a threshold.
    #[default]
    Included,
    /// Number of target samples, including those without a threshold.
    Total,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    pub slope: KneeSlope,
    /// Fraction of training after which the learned weight may be used.
    pub late_start_frac: f32,
    pub learned_every: usize,
    /// Fixed test-time weight, bypassing the knee search.
    pub w_override: Option<f32>,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            slope: KneeSlope::Included,
            late_start_frac: 0.75,
            learned_every: 3,
            w_override: None,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self.w_override {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("w_override must lie in [0, 1], got {w}")));
            }
        }
        if self.learned_every == 0 {
            return Err(Error::Config("learned_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    Knee,
    LearnedW,
    Override,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeState {
    /// Valid thresholds, ascending.
    pub deltas: Vec<f32>,
    pub n_points: usize,
    pub w_star: f32,
    pub source: WeightSource,
}

/// Weight at which the ensemble argmax switches from the text top class to
/// the vision top class. `None` when both modalities agree or the crossing
/// does not exist.
pub fn ensemble_threshold(y_v: &[f32], y_l: &[f32]) -> Option<f32> {
    let i = top2(y_v).0 .0;
    let j = top2(y_l).0 .0;
    if i == j {
        return None;
    }
    let (vi, vj, li, lj) = (
        f64::from(y_v[i]),
        f64::from(y_v[j]),
        f64::from(y_l[i]),
        f64::from(y_l[j]),
    );
    let denom = (vi - li) - (vj - lj);
    if denom <= 0.0 {
        return None;
    }
    Some(((lj - li) / denom).clamp(0.0, 1.0) as f32)
}

fn slope_for(n: usize, n_total: usize, mode: KneeSlope) -> f64 {
    match mode {
        KneeSlope::Included => n as f64,
        KneeSlope::Total => n_total.max(n) as f64,
    }
}

/// Distances of each point `(δ_k, k)` to the line `a·x − y = 0`.
pub fn knee_distances(deltas: &[f32], a: f64) -> Vec<f64> {
    let scale = (a * a + 1.0).sqrt();
    deltas
        .iter()
        .enumerate()
        .map(|(k, &d)| (a * f64::from(d) - (k + 1) as f64).abs() / scale)
        .collect()
}

/// Distances closer than this count as ties (f32 thresholds are not exact).
const KNEE_TIE_EPS: f64 = 1e-6;

/// `δ` at the point farthest from the reference line: the smallest `k` whose
/// distance is within [`KNEE_TIE_EPS`] of the maximum. `None` when empty.
pub fn knee_w_star(deltas: &[f32], n_total: usize, mode: KneeSlope) -> Option<f32> {
    let a = slope_for(deltas.len(), n_total, mode);
    let dist = knee_distances(deltas, a);
    let max = dist.iter().copied().reduce(f64::max)?;
    dist.iter().position(|&d| d >= max - KNEE_TIE_EPS).map(|k| deltas[k])
}

impl MaeState {
    /// Thresholds over all samples and the resulting knee weight.
    pub fn compute(y_v: &Matrix, y_l: &Matrix, cfg: &MaeConfig) -> Result<Self> {
        if y_v.shape() != y_l.shape() {
            return Err(Error::shape("mae", y_v.rows(), y_l.rows()));
        }
        if y_v.cols() < 2 {
            return Err(Error::Config(format!("ensemble needs K >= 2, got {}", y_v.cols())));
        }
        let mut deltas: Vec<f32> = y_v
            .iter_rows()
            .zip(y_l.iter_rows())
            .filter_map(|(v, l)| ensemble_threshold(v, l))
            .collect();
        deltas.sort_by(f32::total_cmp);
        Ok(Self::from_deltas(deltas, y_v.rows(), cfg))
    }

    pub fn from_deltas(deltas: Vec<f32>, n_total: usize, cfg: &MaeConfig) -> Self {
        let (w_star, source) = match cfg.w_override {
            Some(w) => (w, WeightSource::Override),
            None => match knee_w_star(&deltas, n_total, cfg.slope) {
                Some(w) => (w, WeightSource::Knee),
                None => (0.5, WeightSource::Override),
            },
        };
        Self {
            n_points: deltas.len(),
            deltas,
            w_star,
            source,
        }
    }

    /// Sorted-δ curve as CSV rows `k,delta,distance`.
    pub fn write_curve_csv<W: Write>(&self, mut out: W, n_total: usize, mode: KneeSlope) -> std::io::Result<()> {
        let a = slope_for(self.deltas.len(), n_total, mode);
        writeln!(out, "k,delta,distance")?;
        for (k, (d, dist)) in self.deltas.iter().zip(knee_distances(&self.deltas, a)).enumerate() {
            writeln!(out, "{},{d},{dist}", k + 1)?;
        }
        Ok(())
    }
}

/// Test-time weight for an epoch: the override if configured, the learned
/// train-time mean on every `learned_every`-th late epoch, otherwise the knee.
pub fn pick_test_weight(
    state: &MaeState,
    epoch: usize,
    max_epoch: usize,
    learned_w_mean: Option<f32>,
    cfg: &MaeConfig,
) -> (f32, WeightSource) {
    if let Some(w) = cfg.w_override {
        return (w, WeightSource::Override);
    }
    let late_start = (f64::from(cfg.late_start_frac) * max_epoch as f64).ceil() as usize;
    if let Some(w) = learned_w_mean {
        if epoch >= late_start && epoch.is_multiple_of(cfg.learned_every) {
            return (w.clamp(0.0, 1.0), WeightSource::LearnedW);
        }
    }
    (state.w_star, state.source)
}

/// `w·y_v + (1 − w)·y_l` with one scalar weight for every sample.
pub fn ensemble_test(y_v: &Matrix, y_l: &Matrix, w: f32) -> Result<Matrix> {
    crate::losses::ensemble_train(y_v, y_l, &vec![w; y_v.rows()])
}
