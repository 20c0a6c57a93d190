//! Command-line front end. Exit codes: 0 success, 1 usage or configuration,
//! 2 data error, 3 numeric abort.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::dataio::{gen_synthetic, load_dataset, write_dataset, FeatureDataset, SynthConfig};
use crate::error::{Error, Result};
use crate::mae::MaeConfig;
use crate::model::Checkpoint;
use crate::service::{self, ServiceLink, SessionInfo, Shared};
use crate::trainer::{evaluate, pretrain_source, HiddenLabelOracle, Mode, RunHooks, RunReport, TrainConfig, Trainer};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "modsep", version, about = "Modality-separation domain adaptation on precomputed features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic feature dataset.
    GenSynth(GenSynthArgs),
    /// Adapt to a target domain (uda, ada, sfada or msda).
    Train(TrainArgs),
    /// Source-only training, producing a checkpoint for source-free mode.
    PretrainSource(PretrainArgs),
    /// Evaluate a checkpoint on a target domain.
    Eval(EvalArgs),
    /// Interactive active adaptation with the annotation service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub dv: Option<usize>,
    /// Samples per domain.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rotation: Option<f64>,
    #[arg(long)]
    pub translation: Option<f64>,
    #[arg(long)]
    pub modality_offset: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub sources: Option<usize>,
    #[arg(long)]
    pub aug_views: Option<usize>,
    /// JSON generator config; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Options shared by every training entry point.
#[derive(Args, Debug, Clone)]
pub struct TrainOpts {
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory (metrics, checkpoint, report).
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Annotation budget: fraction of the target when below 1, else a count.
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long)]
    pub round_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    /// Fixed test-time ensemble weight.
    #[arg(long)]
    pub w_star: Option<f32>,
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long)]
    pub target: Option<String>,
    /// Warm start (required for sfada).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OracleKind {
    /// Ground-truth labels from the dataset.
    Hidden,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long, value_enum, default_value = "hidden")]
    pub oracle: OracleKind,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long, default_value = service::DEFAULT_ADDR)]
    pub addr: String,
    /// Keep serving after training finishes, until interrupted.
    #[arg(long)]
    pub keep_alive: bool,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub source: Option<String>,
    /// Fraction of the source held out for validation.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Domain to evaluate; defaults to the target domain.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub w_star: Option<f32>,
    #[arg(long, default_value_t = 0.10)]
    pub m_pct: f32,
    /// Directory for eval.json, partition.jsonl and delta_curve.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Defaults, then the config file, then flags.
pub fn effective_config(opts: &TrainOpts) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &opts.config {
        Some(p) => read_json_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = opts.mode {
        cfg.mode = m;
    }
    if let Some(e) = opts.epochs {
        cfg.max_epoch = e;
    }
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(b) = opts.budget {
        cfg.budget = b;
    }
    if opts.round_size.is_some() {
        cfg.round_size = opts.round_size;
    }
    if let Some(b) = opts.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = opts.lr {
        cfg.sgd.lr0 = lr;
    }
    if opts.w_star.is_some() {
        cfg.mae.w_override = opts.w_star;
    }
    if opts.source.is_some() {
        cfg.source_domain = opts.source.clone();
    }
    if opts.target.is_some() {
        cfg.target_domain = opts.target.clone();
    }
    if cfg.mode == Mode::Sfada && opts.checkpoint.is_none() {
        return Err(Error::Config("sfada mode needs --checkpoint from pretrain-source".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Prepared {
    ds: FeatureDataset,
    cfg: TrainConfig,
    init: Option<Checkpoint>,
}

fn prepare(opts: &TrainOpts) -> Result<Prepared> {
    let cfg = effective_config(opts)?;
    let ds = load_dataset(&opts.data)?;
    let init = opts.checkpoint.as_ref().map(Checkpoint::load).transpose()?;
    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    write_json(&opts.out.join("config.json"), &cfg)?;
    eprintln!("effective config: {}", serde_json::to_string(&cfg).expect("config"));
    Ok(Prepared { ds, cfg, init })
}

fn print_report(report: &RunReport) {
    println!("{}", serde_json::to_string_pretty(report).expect("report"));
}

/// Prints one progress line per epoch.
struct Progress;

impl crate::trainer::RunObserver for Progress {
    fn on_metrics(&mut self, m: &crate::trainer::EpochMetrics, ann: &crate::mdi::AnnotationSet) {
        let pct = |a: Option<f64>| a.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
        eprintln!(
            "epoch {:>3}  acc_v {}  acc_l {}  acc_ens {}  w* {:.3}  |T_C| {}  labeled {}",
            m.epoch,
            pct(m.acc_v),
            pct(m.acc_l),
            pct(m.acc_ens),
            m.w_star,
            m.n_tc,
            ann.len()
        );
    }
}

fn cmd_gen_synth(a: &GenSynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json_file(p)?,
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag { cfg.$field = v; })*};
    }
    set!(k => num_classes, dv => d_v, n => n_per_domain, seed => seed, rotation => rotation_deg,
         translation => translation_norm, modality_offset => modality_offset_norm, sigma => noise_sigma,
         sources => num_sources, aug_views => aug_views);
    let ds = gen_synthetic(&cfg)?;
    write_dataset(&ds, &a.out)?;
    eprintln!("wrote dataset to {}", a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs, interrupt: Arc<AtomicBool>) -> Result<()> {
    let Prepared { ds, cfg, init } = prepare(&a.opts)?;
    let mut trainer = Trainer::new(&ds, cfg, init)?;
    let mut oracle = match a.oracle {
        OracleKind::Hidden => HiddenLabelOracle::for_domain(trainer.target)?,
    };
    let mut progress = Progress;
    let active = trainer.cfg.mode.is_active();
    let report = trainer.run(RunHooks {
        oracle: active.then_some(&mut oracle as &mut dyn crate::mdi::AnnotationOracle),
        observer: Some(&mut progress),
        interrupt: Some(interrupt),
        out_dir: Some(a.opts.out.clone()),
    })?;
    print_report(&report);
    Ok(())
}

fn cmd_serve(a: &ServeArgs, interrupt: Arc<AtomicBool>) -> Result<()> {
    let Prepared { ds, cfg, init } = prepare(&a.opts)?;
    if !cfg.mode.is_active() {
        return Err(Error::Config(format!("serve needs an active mode (ada or sfada), got {}", cfg.mode.as_str())));
    }
    let mut trainer = Trainer::new(&ds, cfg, init)?;
    let info = SessionInfo {
        mode: trainer.cfg.mode,
        max_epoch: trainer.cfg.max_epoch,
        budget_total: trainer.annotations.budget,
        class_names: ds.class_names().to_vec(),
        n_target: trainer.target.len(),
        media_refs: trainer.target.entry.media_refs.clone(),
        response_log: Some(a.opts.out.join("responses.jsonl")),
    };
    let shared = Shared::new(&info)?;
    let handle = service::serve(&a.addr, Arc::clone(&shared))?;
    eprintln!("annotation service listening on http://{}", handle.addr);
    let mut oracle = ServiceLink::new(Arc::clone(&shared), &info, Some(Arc::clone(&interrupt)));
    let mut observer = ServiceLink::new(Arc::clone(&shared), &info, Some(Arc::clone(&interrupt)));
    let report = trainer.run(RunHooks {
        oracle: Some(&mut oracle),
        observer: Some(&mut observer),
        interrupt: Some(Arc::clone(&interrupt)),
        out_dir: Some(a.opts.out.clone()),
    })?;
    print_report(&report);
    if a.keep_alive {
        eprintln!("training finished; serving until interrupted");
        while !interrupt.load(std::sync::atomic::Ordering::SeqCst) {
            std::thread::sleep(std::time::Duration::from_millis(100));
        }
    }
    handle.shutdown();
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json_file(p)?,
        None => TrainConfig {
            max_epoch: 20,
            ..Default::default()
        },
    };
    if let Some(e) = a.epochs {
        cfg.max_epoch = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.source.is_some() {
        cfg.source_domain = a.source.clone();
    }
    let ds = load_dataset(&a.data)?;
    let (ck, report) = pretrain_source(&ds, &cfg, a.holdout)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_json(&a.out.join("config.json"), &cfg)?;
    ck.save(a.out.join("checkpoint"))?;
    write_json(&a.out.join("pretrain_report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report"));
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mae = MaeConfig {
        w_override: a.w_star,
        ..Default::default()
    };
    let ev = evaluate(&ds, &ck, a.target.as_deref(), &mae, a.m_pct)?;
    let r = &ev.report;
    let pct = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{:.2}%", 100.0 * x));
    eprintln!(
        "vision {}  text {}  ensemble {}  zero-shot {}  (w* = {:.4}, {:?})",
        pct(r.acc_v),
        pct(r.acc_l),
        pct(r.acc_ens),
        pct(r.zero_shot_acc),
        r.w_star,
        r.w_source
    );
    let c = r.mdi_counts;
    eprintln!("MDI: mi {}  ms {}  un_a {}  un_e {}  |T_C| {}", c.mi, c.ms, c.un_a, c.un_e, r.n_tc);
    println!("{}", serde_json::to_string_pretty(r).expect("report"));
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_json(&out.join("eval.json"), r)?;
        let p = out.join("partition.jsonl");
        let f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        ev.partition.write_jsonl(std::io::BufWriter::new(f)).map_err(|e| Error::io(&p, e))?;
        let p = out.join("delta_curve.csv");
        let f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        ev.mae
            .write_curve_csv(std::io::BufWriter::new(f), r.n_target, mae.slope)
            .map_err(|e| Error::io(&p, e))?;
        let mut csv = String::from("index,vision,text,ensemble\n");
        for (i, ((v, t), e)) in ev
            .vision_predictions
            .iter()
            .zip(&ev.text_predictions)
            .zip(&ev.ensemble_predictions)
            .enumerate()
        {
            csv.push_str(&format!("{i},{v},{t},{e}\n"));
        }
        let p = out.join("predictions.csv");
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric { .. } => EXIT_NUMERIC,
        Error::Shape { .. } | Error::Degenerate(_) => EXIT_DATA,
        e if e.is_data_error() => EXIT_DATA,
        _ => EXIT_USAGE,
    }
}

/// Runs one command and returns the process exit code.
pub fn run<I, T>(args: I, interrupt: Arc<AtomicBool>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::GenSynth(a) => cmd_gen_synth(a),
        Command::Train(a) => cmd_train(a, interrupt),
        Command::PretrainSource(a) => cmd_pretrain(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Serve(a) => cmd_serve(a, interrupt),
    };
    match result {
        Ok(()) => 0,
        Err(Error::Interrupted) => {
            eprintln!("interrupted; checkpoint saved");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
