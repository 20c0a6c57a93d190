//! Modality-discrepancy categorization of target samples, confident-set
//! selection and active-annotation selection.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    /// Both modalities agree on the top class.
    Mi,
    /// Top-2 classes swapped between modalities.
    Ms,
    /// Disjoint top-2 sets.
    UnA,
    /// Every other disagreement.
    UnE,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Mi => "mi",
            Category::Ms => "ms",
            Category::UnA => "un_a",
            Category::UnE => "un_e",
        }
    }

    pub fn is_un(self) -> bool {
        matches!(self, Category::UnA | Category::UnE)
    }
}

/// Top two `(index, value)` pairs; ties go to the lower index.
pub fn top2(v: &[f32]) -> ((usize, f32), (usize, f32)) {
    assert!(v.len() >= 2, "top2 needs at least two classes");
    let (mut a, mut b) = ((0, v[0]), (1, v[1]));
    if b.1 > a.1 {
        std::mem::swap(&mut a, &mut b);
    }
    for (i, &x) in v.iter().enumerate().skip(2) {
        if x > a.1 {
            b = a;
            a = (i, x);
        } else if x > b.1 {
            b = (i, x);
        }
    }
    (a, b)
}

pub fn categorize_one(y_v: &[f32], y_l: &[f32]) -> Category {
    let ((v1, _), (v2, _)) = top2(y_v);
    let ((l1, _), (l2, _)) = top2(y_l);
    if v1 == l1 {
        Category::Mi
    } else if v1 == l2 && v2 == l1 {
        Category::Ms
    } else if v1 != l2 && v2 != l1 && v2 != l2 {
        Category::UnA
    } else {
        Category::UnE
    }
}

/// `val1(y_v)·val1(y_l) − val2(y_v)·val2(y_l)`.
pub fn mi_score(y_v: &[f32], y_l: &[f32]) -> f32 {
    let ((_, v1), (_, v2)) = top2(y_v);
    let ((_, l1), (_, l2)) = top2(y_l);
    (f64::from(v1) * f64::from(l1) - f64::from(v2) * f64::from(l2)) as f32
}

/// Vision margin `val1 − val2`; lower means more informative to annotate.
pub fn un_score(y_v: &[f32]) -> f32 {
    let ((_, a), (_, b)) = top2(y_v);
    a - b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdiPartition {
    pub categories: Vec<Category>,
    /// Set for MI samples only.
    pub mi_score: Vec<Option<f32>>,
    /// Set for UN samples only.
    pub un_score: Vec<Option<f32>>,
    /// Confident MI subset, ascending.
    pub t_c: Vec<usize>,
    pub th_c: Option<f32>,
    pub th_l: Option<f32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub mi: usize,
    pub ms: usize,
    pub un_a: usize,
    pub un_e: usize,
}

impl MdiPartition {
    pub fn categorize(y_v: &Matrix, y_l: &Matrix) -> Result<Self> {
        if y_v.shape() != y_l.shape() {
            return Err(Error::shape(
                "categorize",
                format!("{}x{}", y_v.rows(), y_v.cols()),
                format!("{}x{}", y_l.rows(), y_l.cols()),
            ));
        }
        if y_v.cols() < 2 {
            return Err(Error::Config(format!("categorization needs K >= 2, got {}", y_v.cols())));
        }
        let n = y_v.rows();
        let mut p = Self {
            categories: Vec::with_capacity(n),
            mi_score: Vec::with_capacity(n),
            un_score: Vec::with_capacity(n),
            t_c: Vec::new(),
            th_c: None,
            th_l: None,
        };
        for (v, l) in y_v.iter_rows().zip(y_l.iter_rows()) {
            let c = categorize_one(v, l);
            p.categories.push(c);
            p.mi_score.push((c == Category::Mi).then(|| mi_score(v, l)));
            p.un_score.push(c.is_un().then(|| un_score(v)));
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn indices_of(&self, cat: Category) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.categories[i] == cat).collect()
    }

    pub fn counts(&self) -> CategoryCounts {
        let mut c = CategoryCounts::default();
        for cat in &self.categories {
            match cat {
                Category::Mi => c.mi += 1,
                Category::Ms => c.ms += 1,
                Category::UnA => c.un_a += 1,
                Category::UnE => c.un_e += 1,
            }
        }
        c
    }

    /// Keeps the `⌈m·|MI|⌉` highest-scoring MI samples (ties to lower index)
    /// as the confident set and records the threshold.
    pub fn select_confident(&mut self, m_pct: f32) -> &[usize] {
        let mut mi: Vec<(usize, f32)> = self
            .mi_score
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|s| (i, s)))
            .collect();
        // The epsilon keeps f32 fractions such as 0.1 from rounding the quota up.
        let exact = f64::from(m_pct.clamp(0.0, 1.0)) * mi.len() as f64;
        let quota = ((exact - 1e-6).ceil().max(0.0) as usize).min(mi.len());
        mi.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        mi.truncate(quota);
        self.th_c = mi.last().map(|&(_, s)| s);
        self.t_c = mi.into_iter().map(|(i, _)| i).collect();
        self.t_c.sort_unstable();
        &self.t_c
    }

    /// Up to `min(b_r, remaining budget)` unlabeled UN samples, UN-a first,
    /// each group by ascending UN-score (ties to lower index). Records `th_l`
    /// as the largest selected score.
    pub fn select_active(&mut self, set: &AnnotationSet, b_r: usize) -> Vec<usize> {
        let take = b_r.min(set.remaining());
        let mut picked = Vec::with_capacity(take);
        for cat in [Category::UnA, Category::UnE] {
            let mut group: Vec<(usize, f32)> = (0..self.len())
                .filter(|&i| self.categories[i] == cat && !set.contains(i))
                .map(|i| (i, self.un_score[i].unwrap_or(f32::INFINITY)))
                .collect();
            group.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            picked.extend(group.into_iter().take(take - picked.len()));
            if picked.len() == take {
                break;
            }
        }
        self.th_l = picked.iter().map(|p| p.1).reduce(f32::max);
        picked.into_iter().map(|(i, _)| i).collect()
    }

    /// One JSON object per sample: index, category, scores, confident flag.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut in_tc = vec![false; self.len()];
        self.t_c.iter().for_each(|&i| in_tc[i] = true);
        for (i, tc) in in_tc.into_iter().enumerate() {
            let row = serde_json::json!({
                "index": i,
                "category": self.categories[i],
                "mi_score": self.mi_score[i],
                "un_score": self.un_score[i],
                "in_t_c": tc,
            });
            writeln!(out, "{row}")?;
        }
        Ok(())
    }
}

/// Target samples with acquired labels, bounded by a total budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    labels: BTreeMap<usize, u32>,
    pub budget: usize,
    pub per_round: usize,
    pub num_classes: usize,
}

impl AnnotationSet {
    pub fn new(budget: usize, per_round: usize, num_classes: usize) -> Self {
        Self {
            labels: BTreeMap::new(),
            budget,
            per_round,
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.budget.saturating_sub(self.labels.len())
    }

    pub fn contains(&self, index: usize) -> bool {
        self.labels.contains_key(&index)
    }

    pub fn get(&self, index: usize) -> Option<u32> {
        self.labels.get(&index).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.labels.iter().map(|(&i, &l)| (i, l))
    }

    /// Adds one label; rejects duplicates, out-of-range labels and budget
    /// overflow.
    pub fn insert(&mut self, index: usize, label: u32) -> Result<()> {
        if label as usize >= self.num_classes {
            return Err(Error::Oracle(format!("label {label} out of range [0, {})", self.num_classes)));
        }
        if self.contains(index) {
            return Err(Error::Oracle(format!("sample {index} is already labeled")));
        }
        if self.remaining() == 0 {
            return Err(Error::Oracle("annotation budget exhausted".into()));
        }
        self.labels.insert(index, label);
        Ok(())
    }
}

/// One sample offered for annotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryItem {
    pub index: usize,
    pub category: Category,
    pub un_score: f32,
    /// Top-3 `(class, probability)` of the vision head.
    pub top_vision: Vec<(usize, f32)>,
    /// Top-3 `(class, probability)` of the text head.
    pub top_text: Vec<(usize, f32)>,
}

/// Highest `n` softmax probabilities, ties to the lower class.
pub fn top_probs(logits: &[f32], n: usize) -> Vec<(usize, f32)> {
    let p = crate::numcore::softmax(logits, 1.0);
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.into_iter().take(n).map(|i| (i, p[i])).collect()
}

/// Result of asking an oracle to label a round of queries.
#[derive(Clone, Debug, PartialEq)]
pub enum RoundOutcome {
    /// Labels for some or all queried indices.
    Labeled(Vec<(usize, u32)>),
    /// The round was not answered; training continues without it.
    Deferred(String),
}

pub trait AnnotationOracle {
    fn annotate(&mut self, queries: &[QueryItem]) -> Result<RoundOutcome>;
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundReport {
    pub queried: Vec<usize>,
    pub added: usize,
    pub deferred: Option<String>,
}

/// Selects a round of queries, asks the oracle, and appends answers that
/// belong to the round. `y_v`/`y_l` are the logits the partition was built
/// from; they only feed the query payloads.
pub fn annotate_round(
    partition: &mut MdiPartition,
    y_v: &Matrix,
    y_l: &Matrix,
    set: &mut AnnotationSet,
    oracle: &mut dyn AnnotationOracle,
) -> Result<RoundReport> {
    let queried = partition.select_active(set, set.per_round);
    let mut report = RoundReport {
        queried: queried.clone(),
        ..Default::default()
    };
    if queried.is_empty() {
        return Ok(report);
    }
    let items: Vec<QueryItem> = queried
        .iter()
        .map(|&i| QueryItem {
            index: i,
            category: partition.categories[i],
            un_score: partition.un_score[i].unwrap_or(f32::NAN),
            top_vision: top_probs(y_v.row(i), 3),
            top_text: top_probs(y_l.row(i), 3),
        })
        .collect();
    match oracle.annotate(&items)? {
        RoundOutcome::Labeled(pairs) => {
            for (i, l) in pairs {
                if queried.contains(&i) && !set.contains(i) {
                    set.insert(i, l)?;
                    report.added += 1;
                }
            }
        }
        RoundOutcome::Deferred(reason) => report.deferred = Some(reason),
    }
    Ok(report)
}
