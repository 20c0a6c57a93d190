//! Brute-force reference implementations written independently of the
//! library code they check.

use std::collections::BTreeSet;

use modsep::mdi::Category;

/// Class indices by descending value, ties to the lower index.
pub fn ranking(v: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
    idx
}

pub fn category(y_v: &[f32], y_l: &[f32]) -> Category {
    let (rv, rl) = (ranking(y_v), ranking(y_l));
    let top_v: BTreeSet<usize> = rv[..2].iter().copied().collect();
    let top_l: BTreeSet<usize> = rl[..2].iter().copied().collect();
    if rv[0] == rl[0] {
        Category::Mi
    } else if rv[0] == rl[1] && rv[1] == rl[0] {
        Category::Ms
    } else if top_v.is_disjoint(&top_l) {
        Category::UnA
    } else {
        Category::UnE
    }
}

pub fn mi_score(y_v: &[f32], y_l: &[f32]) -> f32 {
    let (rv, rl) = (ranking(y_v), ranking(y_l));
    let p = |a: f32, b: f32| f64::from(a) * f64::from(b);
    (p(y_v[rv[0]], y_l[rl[0]]) - p(y_v[rv[1]], y_l[rl[1]])) as f32
}

pub fn un_score(y_v: &[f32]) -> f32 {
    let r = ranking(y_v);
    y_v[r[0]] - y_v[r[1]]
}

/// Confident set for a quota of `pct` percent of the MI samples.
pub fn confident(cats: &[Category], scores: &[f32], pct: u32) -> Vec<usize> {
    let mut mi: Vec<usize> = (0..cats.len()).filter(|&i| cats[i] == Category::Mi).collect();
    let quota = (pct as usize * mi.len()).div_ceil(100);
    mi.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut keep = mi[..quota].to_vec();
    keep.sort_unstable();
    keep
}

/// Active selection: unlabeled UN-a by ascending UN-score, then UN-e.
pub fn active(cats: &[Category], un: &[f32], labeled: &BTreeSet<usize>, take: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for cat in [Category::UnA, Category::UnE] {
        let mut group: Vec<usize> = (0..cats.len())
            .filter(|i| cats[*i] == cat && !labeled.contains(i))
            .collect();
        group.sort_by(|&a, &b| un[a].partial_cmp(&un[b]).unwrap().then(a.cmp(&b)));
        out.extend(group);
    }
    out.truncate(take);
    out
}

/// Winner between the vision top class `i` and the text top class `j` under
/// `w·y_v + (1 − w)·y_l`, ties to the lower index.
pub fn pair_winner(y_v: &[f32], y_l: &[f32], i: usize, j: usize, w: f64) -> usize {
    let s = |c: usize| w * f64::from(y_v[c]) + (1.0 - w) * f64::from(y_l[c]);
    let (si, sj) = (s(i), s(j));
    if si > sj {
        i
    } else if sj > si {
        j
    } else {
        i.min(j)
    }
}

/// First weight on a uniform grid of `steps + 1` points at which vision's top
/// class wins the pair; `None` when text wins everywhere.
pub fn grid_flip(y_v: &[f32], y_l: &[f32], steps: usize) -> Option<f64> {
    let i = ranking(y_v)[0];
    let j = ranking(y_l)[0];
    (0..=steps)
        .map(|g| g as f64 / steps as f64)
        .find(|&w| pair_winner(y_v, y_l, i, j, w) == i)
}

/// Exhaustive knee search: the smallest `k` whose distance is within `eps`
/// of the maximum.
pub fn knee(deltas: &[f32], slope: f64, eps: f64) -> Option<f32> {
    let scale = (slope * slope + 1.0).sqrt();
    let dist: Vec<f64> = deltas
        .iter()
        .enumerate()
        .map(|(k, &d)| (slope * f64::from(d) - (k + 1) as f64).abs() / scale)
        .collect();
    let max = dist.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..deltas.len()).find(|&k| dist[k] >= max - eps).map(|k| deltas[k])
}

/// Zero-shot prediction: argmax of the cosine between a sample and each class
/// text embedding, ties to the lower index.
pub fn zero_shot(x: &[f32], text: &[Vec<f32>]) -> usize {
    let norm = |v: &[f32]| v.iter().map(|&a| f64::from(a).powi(2)).sum::<f64>().sqrt();
    let nx = norm(x);
    let mut best = (0, f64::NEG_INFINITY);
    for (c, t) in text.iter().enumerate() {
        let dot: f64 = x.iter().zip(t).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
        let cos = dot / (nx * norm(t));
        if cos > best.1 {
            best = (c, cos);
        }
    }
    best.0
}

pub fn log_softmax(z: &[f32]) -> Vec<f64> {
    let z: Vec<f64> = z.iter().map(|&v| f64::from(v)).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn ce(logits: &[f32], label: usize) -> f64 {
    -log_softmax(logits)[label]
}

/// `KL(softmax(teacher) ‖ softmax(student))`.
pub fn kl(student: &[f32], teacher: &[f32]) -> f64 {
    let (ls, lt) = (log_softmax(student), log_softmax(teacher));
    ls.iter().zip(&lt).map(|(s, t)| t.exp() * (t - s)).sum()
}

/// Mean per-row entropy plus `Σ q log q` of the mean prediction.
pub fn im(rows: &[&[f32]]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let n = rows.len() as f64;
    let k = rows[0].len();
    let mut q = vec![0.0; k];
    let mut ent = 0.0;
    for r in rows {
        let lp = log_softmax(r);
        for (c, l) in lp.iter().enumerate() {
            ent -= l.exp() * l;
            q[c] += l.exp() / n;
        }
    }
    ent / n + q.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>()
}

pub fn bce(probs: &[f32], targets: &[f32]) -> f64 {
    let n = probs.len() as f64;
    probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let (p, y) = (f64::from(p), f64::from(y));
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

pub fn ortho(lac: &[&[f32]], vac: &[&[f32]]) -> f64 {
    lac.iter()
        .zip(vac)
        .map(|(a, b)| {
            let ip: f64 = a.iter().zip(*b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
            ip * ip
        })
        .sum()
}

pub fn mean<T>(items: &[T], f: impl Fn(&T) -> f64) -> f64 {
    if items.is_empty() {
        0.0
    } else {
        items.iter().map(f).sum::<f64>() / items.len() as f64
    }
}
