//! Partition and ensemble oracles over random inputs, and end-to-end runs on
//! the synthetic benchmark through the library and the binary.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use modsep::dataio::{gen_synthetic, load_dataset, SynthConfig};
use modsep::mae::{ensemble_threshold, knee_w_star, KneeSlope};
use modsep::mdi::{AnnotationSet, Category, MdiPartition};
use modsep::model::{Checkpoint, ModelConfig, ModelParams};
use modsep::numcore::Matrix;
use modsep::trainer::{HiddenLabelOracle, Mode, RunHooks, RunReport, TrainConfig, Trainer};
use rand::Rng;
use serde_json::Value;

use super::oracle;
use super::{normal, rng, Outcome};

/// Logits with frequent exact ties: half the rows use small integers.
fn tie_prone_row(r: &mut impl Rng, k: usize) -> Vec<f32> {
    if r.random::<bool>() {
        (0..k).map(|_| r.random_range(0..3) as f32).collect()
    } else {
        (0..k).map(|_| normal(r, 2.0)).collect()
    }
}

fn matrix(rows: &[Vec<f32>]) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

/// Mismatch counts of one batch of random pairs against the MDI oracles.
#[derive(Default, Debug)]
pub struct MdiTally {
    pub pairs: usize,
    pub category: usize,
    pub scores: usize,
    pub confident: usize,
    pub active: usize,
    pub partition: usize,
}

impl MdiTally {
    pub fn mismatches(&self) -> usize {
        self.category + self.scores + self.confident + self.active + self.partition
    }
}

pub fn mdi_batch(seed: u64, n: usize, tally: &mut MdiTally) {
    let mut r = rng(seed);
    let k = r.random_range(2..=5);
    let y_v: Vec<Vec<f32>> = (0..n).map(|_| tie_prone_row(&mut r, k)).collect();
    let y_l: Vec<Vec<f32>> = (0..n).map(|_| tie_prone_row(&mut r, k)).collect();
    let mut part = MdiPartition::categorize(&matrix(&y_v), &matrix(&y_l)).unwrap();
    tally.pairs += n;

    let cats: Vec<Category> = (0..n).map(|i| oracle::category(&y_v[i], &y_l[i])).collect();
    let mi: Vec<f32> = (0..n).map(|i| oracle::mi_score(&y_v[i], &y_l[i])).collect();
    let un: Vec<f32> = (0..n).map(|i| oracle::un_score(&y_v[i])).collect();
    for i in 0..n {
        if part.categories[i] != cats[i] {
            tally.category += 1;
        }
        let is_mi = cats[i] == Category::Mi;
        let is_un = matches!(cats[i], Category::UnA | Category::UnE);
        if part.mi_score[i] != is_mi.then_some(mi[i]) || part.un_score[i] != is_un.then_some(un[i]) {
            tally.scores += 1;
        }
    }

    let pct = [0u32, 5, 10, 25, 30, 50, 70, 100][r.random_range(0..8)];
    let t_c = part.select_confident(pct as f32 / 100.0).to_vec();
    if t_c != oracle::confident(&cats, &mi, pct) {
        tally.confident += 1;
    }

    let budget = r.random_range(0..30);
    let mut set = AnnotationSet::new(budget, 10, k);
    let mut labeled = BTreeSet::new();
    for _ in 0..r.random_range(0..=budget) {
        let i = r.random_range(0..n);
        if labeled.insert(i) {
            set.insert(i, r.random_range(0..k) as u32).unwrap();
        }
    }
    let b_r = r.random_range(0..20);
    let picked = part.select_active(&set, b_r);
    if picked != oracle::active(&cats, &un, &labeled, b_r.min(set.remaining())) {
        tally.active += 1;
    }

    let counts = part.counts();
    let distinct: BTreeSet<usize> = picked.iter().copied().collect();
    let ok = counts.mi + counts.ms + counts.un_a + counts.un_e == n
        && t_c.iter().all(|&i| part.categories[i] == Category::Mi)
        && distinct.len() == picked.len()
        && picked.iter().all(|&i| part.categories[i].is_un() && !labeled.contains(&i) && !t_c.contains(&i));
    if !ok {
        tally.partition += 1;
    }
}

pub fn a3(n_pairs: usize) -> Outcome {
    let mut tally = MdiTally::default();
    let per_batch = 100;
    for b in 0..n_pairs.div_ceil(per_batch) {
        mdi_batch(b as u64, per_batch, &mut tally);
    }
    Outcome::new(
        tally.mismatches() == 0,
        format!(
            "{} random pairs (K <= 5, tie-prone): {} category, {} score, {} confident-set, {} active-set, \
             {} partition mismatches (tol 0)",
            tally.pairs, tally.category, tally.scores, tally.confident, tally.active, tally.partition
        ),
    )
}

/// Checks one pair's ensemble threshold against a grid flip of the pairwise
/// ensemble argmax. Returns false on disagreement.
pub fn threshold_matches_grid(y_v: &[f32], y_l: &[f32], steps: usize) -> bool {
    let got = ensemble_threshold(y_v, y_l);
    let i = oracle::ranking(y_v)[0];
    let j = oracle::ranking(y_l)[0];
    if i == j {
        return got.is_none();
    }
    let f = |v: &[f32], c: usize| f64::from(v[c]);
    let denom = (f(y_v, i) - f(y_l, i)) - (f(y_v, j) - f(y_l, j));
    let Some(delta) = got else {
        return denom <= 0.0;
    };
    if denom <= 0.0 || !(0.0..=1.0).contains(&delta) {
        return false;
    }
    let delta = f64::from(delta);
    let step = 1.0 / steps as f64;
    match oracle::grid_flip(y_v, y_l, steps) {
        Some(w) => delta <= w + 1e-6 && delta >= w - step - 1e-6,
        None => delta >= 1.0 - step - 1e-6,
    }
}

pub fn knee_matches_exhaustive(r: &mut impl Rng) -> bool {
    let n = r.random_range(1..300);
    let mut deltas: Vec<f32> = if r.random::<bool>() {
        (0..n).map(|_| r.random::<f32>()).collect()
    } else {
        // Coarse values: many duplicates and distance ties.
        (0..n).map(|_| r.random_range(0..8) as f32 / 8.0).collect()
    };
    deltas.sort_by(f32::total_cmp);
    let n_total = n + r.random_range(0..100);
    let included = knee_w_star(&deltas, n_total, KneeSlope::Included) == oracle::knee(&deltas, n as f64, 1e-6);
    let total = knee_w_star(&deltas, n_total, KneeSlope::Total) == oracle::knee(&deltas, n_total as f64, 1e-6);
    included && total
}

/// A dense low segment ending at the knee followed by a sparse segment that
/// hugs the reference line, both evenly spaced with jitter of up to a fifth
/// of the spacing. Returns the planted knee and the sorted deltas.
pub fn planted_knee(r: &mut impl Rng) -> (f32, Vec<f32>) {
    let n = 100;
    let n1 = r.random_range(60..=90);
    let knee: f32 = r.random_range(0.1..(n1 as f32 / n as f32 - 0.3));
    let mut segment = |lo: f32, hi: f32, count: usize| -> Vec<f32> {
        let step = (hi - lo) / count as f32;
        (1..=count)
            .map(|i| (lo + step * i as f32 + r.random_range(-0.2..0.2) * step).clamp(0.0, 1.0))
            .collect()
    };
    let mut deltas = segment(0.0, knee, n1);
    deltas.extend(segment(1.0 - (n - n1) as f32 / n as f32, 1.0, n - n1));
    deltas.sort_by(f32::total_cmp);
    (knee, deltas)
}

pub fn a4(n_pairs: usize, n_knees: usize, n_planted: usize) -> Outcome {
    let mut r = rng(4);
    let steps = 1000;
    let mut flip_bad = 0;
    for _ in 0..n_pairs {
        let k = r.random_range(2..=6);
        let y_v = tie_prone_row(&mut r, k);
        let y_l = tie_prone_row(&mut r, k);
        if !threshold_matches_grid(&y_v, &y_l, steps) {
            flip_bad += 1;
        }
    }
    let knee_bad = (0..n_knees).filter(|_| !knee_matches_exhaustive(&mut r)).count();
    let mut worst = 0.0f32;
    for _ in 0..n_planted {
        let (knee, deltas) = planted_knee(&mut r);
        let got = knee_w_star(&deltas, deltas.len(), KneeSlope::Included).unwrap();
        worst = worst.max((got - knee).abs());
    }
    Outcome::new(
        flip_bad == 0 && knee_bad == 0 && worst <= 0.05,
        format!(
            "{n_pairs} pairs vs {}-point grid flip: {flip_bad} mismatches; {n_knees} knee sets vs exhaustive argmax: \
             {knee_bad} mismatches; {n_planted} planted knees, worst error {worst:.4} (tol 0.05)",
            steps + 1
        ),
    )
}

/// Final metrics of one adaptation run on the synthetic benchmark.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub report: RunReport,
    pub secs: f64,
}

impl RunSummary {
    pub fn acc(&self) -> (f64, f64, f64, f64) {
        let m = &self.report.final_metrics;
        (
            self.report.zero_shot_acc.unwrap(),
            m.acc_v.unwrap(),
            m.acc_l.unwrap(),
            m.acc_ens.unwrap(),
        )
    }
}

pub fn adapt(mode: Mode, seed: u64) -> RunSummary {
    let ds = gen_synthetic(&SynthConfig {
        seed,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        mode,
        seed,
        budget: if mode.is_active() { 0.05 } else { 0.0 },
        ..Default::default()
    };
    let start = Instant::now();
    let mut trainer = Trainer::new(&ds, cfg, None).unwrap();
    let mut oracle = HiddenLabelOracle::for_domain(trainer.target).unwrap();
    let report = trainer
        .run(RunHooks {
            oracle: Some(&mut oracle),
            ..Default::default()
        })
        .unwrap();
    RunSummary {
        report,
        secs: start.elapsed().as_secs_f64(),
    }
}

/// Frozen final results on the synthetic benchmark (default generator and
/// training settings): `(seed, zero-shot, vision, text, ensemble)`.
pub const UDA_REGRESSION: [(u64, f64, f64, f64, f64); 3] = [
    (0, 0.832, 0.838, 0.94, 0.95),
    (1, 0.858, 0.882, 0.91, 0.918),
    (2, 0.838, 0.894, 0.95, 0.954),
];
pub const ADA_REGRESSION: [(u64, f64); 3] = [(0, 0.954), (1, 0.938), (2, 0.95)];
pub const REGRESSION_TOL: f64 = 0.01;

pub const MIN_GAIN: f64 = 0.05;
pub const ENSEMBLE_SLACK: f64 = 0.02;
pub const RUN_LIMIT_SECS: f64 = 120.0;

pub fn a5(runs: &[RunSummary]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (run, &(seed, zs0, v0, l0, e0)) in runs.iter().zip(&UDA_REGRESSION) {
        let (zs, v, l, e) = run.acc();
        let ok = e - zs >= MIN_GAIN && e >= v.max(l) - ENSEMBLE_SLACK && run.secs < RUN_LIMIT_SECS;
        let frozen = [(zs, zs0), (v, v0), (l, l0), (e, e0)]
            .iter()
            .all(|(a, b)| (a - b).abs() <= REGRESSION_TOL);
        pass &= ok && frozen;
        parts.push(format!(
            "seed {seed}: zs {zs:.3} -> ens {e:.3} (v {v:.3}, l {l:.3}, {:.1}s){}",
            run.secs,
            if frozen { "" } else { " [regression drift]" }
        ));
    }
    Outcome::new(
        pass,
        format!(
            "{}; need gain >= {MIN_GAIN}, ens >= max(v, l) - {ENSEMBLE_SLACK}, < {RUN_LIMIT_SECS}s per run",
            parts.join("; ")
        ),
    )
}

pub fn a6(uda: &[RunSummary], ada: &[RunSummary]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for ((u, a), &(seed, frozen)) in uda.iter().zip(ada).zip(&ADA_REGRESSION) {
        let (eu, ea) = (u.acc().3, a.acc().3);
        let used = a.report.labeled.len();
        let ok = ea >= eu && used == a.report.budget && (ea - frozen).abs() <= REGRESSION_TOL;
        pass &= ok;
        parts.push(format!(
            "seed {seed}: ada {ea:.3} vs uda {eu:.3} ({used} labels){}",
            if ok { "" } else { " FAIL" }
        ));
    }
    Outcome::new(pass, format!("{}; need ada >= uda at 5% budget", parts.join("; ")))
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_modsep")
}

pub fn run_cli(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn modsep")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = run_cli(args);
    assert!(
        out.status.success(),
        "modsep {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Default synthetic dataset generated through the binary.
pub fn gen_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    run_ok(&["gen-synth", "--out", path_str(&data)]);
    data
}

pub fn a7(dir: &Path) -> Outcome {
    let data = gen_data(dir);
    let ds = load_dataset(&data).unwrap();
    let cfg = ModelConfig {
        separator_init_sigma: 0.0,
        ..Default::default()
    };
    let params = ModelParams::init(&ds.text_features, &cfg, &mut rng(7)).unwrap();
    let ck_dir = dir.join("identity");
    Checkpoint { params, p_hat: None }.save(&ck_dir).unwrap();
    let out = dir.join("eval");
    run_ok(&[
        "eval",
        "--data",
        path_str(&data),
        "--checkpoint",
        path_str(&ck_dir),
        "--out",
        path_str(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    let text_preds: Vec<usize> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();

    let target = ds.domains().iter().find(|d| d.hidden_labels().is_some()).unwrap();
    let labels = target.hidden_labels().unwrap().for_evaluation();
    let text: Vec<Vec<f32>> = ds.text_features.iter_rows().map(<[f32]>::to_vec).collect();
    let expect: Vec<usize> = target.features.iter_rows().map(|x| oracle::zero_shot(x, &text)).collect();
    let correct = expect.iter().zip(labels).filter(|(p, l)| **p == **l as usize).count();
    let acc = correct as f64 / labels.len() as f64;
    let differing = expect.iter().zip(&text_preds).filter(|(a, b)| a != b).count();
    let acc_l = report["acc_l"].as_f64().unwrap();
    let zs = report["zero_shot_acc"].as_f64().unwrap();
    Outcome::new(
        differing == 0 && text_preds.len() == expect.len() && acc_l == acc && zs == acc,
        format!(
            "{} predictions, {differing} differ from standalone zero-shot; accuracy {acc_l} vs {acc} (exact)",
            text_preds.len()
        ),
    )
}

pub const ADA_ARGS: [&str; 6] = ["--mode", "ada", "--budget", "0.05", "--seed", "0"];

pub fn train_hidden(data: &Path, out: &Path) {
    let mut args = vec!["train", "--data", path_str(data), "--out", path_str(out), "--oracle", "hidden"];
    args.extend(ADA_ARGS);
    run_ok(&args);
}

/// Relative paths of every file under `dir`, sorted.
pub fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

pub fn same_bytes(a: &Path, b: &Path) -> bool {
    std::fs::read(a).ok().is_some_and(|x| std::fs::read(b).ok() == Some(x))
}

/// Two identical runs must agree byte-for-byte on metrics and checkpoint.
pub fn a8(data: &Path, first: &Path, second: &Path) -> Outcome {
    train_hidden(data, second);
    let metrics = same_bytes(&first.join("metrics.jsonl"), &second.join("metrics.jsonl"));
    let ck_files = files_under(&first.join("checkpoint"));
    let ck_same = ck_files == files_under(&second.join("checkpoint"))
        && ck_files
            .iter()
            .all(|f| same_bytes(&first.join("checkpoint").join(f), &second.join("checkpoint").join(f)));
    Outcome::new(
        metrics && ck_same && !ck_files.is_empty(),
        format!(
            "metrics.jsonl identical: {metrics}; {} checkpoint files identical: {ck_same}",
            ck_files.len()
        ),
    )
}

/// Spawns `serve` and returns the child with the address it bound.
pub fn spawn_serve(data: &Path, out: &Path, extra: &[&str]) -> (Child, String) {
    let mut args = vec!["serve", "--data", path_str(data), "--out", path_str(out), "--addr", "127.0.0.1:0"];
    args.extend(extra);
    let mut child = Command::new(bin())
        .args(&args)
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn serve");
    let stderr = child.stderr.take().unwrap();
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let mut sent = false;
        for line in BufReader::new(stderr).lines().map_while(Result::ok) {
            if !sent {
                if let Some(addr) = line.split("listening on http://").nth(1) {
                    let _ = tx.send(addr.trim().to_string());
                    sent = true;
                }
            }
        }
    });
    let addr = rx.recv_timeout(Duration::from_secs(60)).expect("service address");
    (child, addr)
}

pub fn get_json(addr: &str, path: &str) -> Option<Value> {
    let mut resp = ureq::get(&format!("http://{addr}{path}")).call().ok()?;
    serde_json::from_str(&resp.body_mut().read_to_string().ok()?).ok()
}

/// POSTs a JSON body; returns the status code.
pub fn post_json(addr: &str, path: &str, body: &Value) -> u16 {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    match agent
        .post(&format!("http://{addr}{path}"))
        .header("Content-Type", "application/json")
        .send(body.to_string())
    {
        Ok(r) => r.status().as_u16(),
        Err(_) => 0,
    }
}

/// Answers every queued request with the true label until the child exits.
pub fn scripted_annotator(child: &mut Child, addr: &str, labels: &[u32]) -> usize {
    let mut answered = 0;
    let deadline = Instant::now() + Duration::from_secs(600);
    while child.try_wait().unwrap().is_none() && Instant::now() < deadline {
        if let Some(Value::Array(items)) = get_json(addr, "/queue") {
            for item in items {
                let id = item["sample_id"].as_u64().unwrap() as usize;
                let body = serde_json::json!({ "sample_id": id, "label": labels[id], "annotator": "script" });
                if post_json(addr, "/labels", &body) == 200 {
                    answered += 1;
                }
            }
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    answered
}

pub fn a9(data: &Path, hidden_run: &Path, served: &Path) -> Outcome {
    let ds = load_dataset(data).unwrap();
    let target = ds.domains().iter().find(|d| d.hidden_labels().is_some()).unwrap();
    let labels = target.hidden_labels().unwrap().for_evaluation().to_vec();
    let (mut child, addr) = spawn_serve(data, served, &ADA_ARGS);
    let answered = scripted_annotator(&mut child, &addr, &labels);
    let status = child.wait().unwrap();
    let same = same_bytes(&hidden_run.join("report.json"), &served.join("report.json"));
    Outcome::new(
        status.success() && same && answered > 0,
        format!("served run answered {answered} requests over HTTP; report.json identical to hidden-oracle run: {same}"),
    )
}
