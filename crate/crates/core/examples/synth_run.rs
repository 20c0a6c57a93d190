//! Runs one adaptation on a synthetic benchmark and prints per-epoch metrics.
//!
//! `cargo run --release --example synth_run -- [uda|ada] [seed] [config-overrides-json]`

use std::time::Instant;

use modsep::dataio::{gen_synthetic, SynthConfig};
use modsep::trainer::{pretrain_source, HiddenLabelOracle, Mode, RunHooks, RunObserver, EpochMetrics, TrainConfig, Trainer};
use modsep::mdi::AnnotationSet;

struct Print;

impl RunObserver for Print {
    fn on_metrics(&mut self, m: &EpochMetrics, _: &AnnotationSet) {
        eprintln!("{}", serde_json::to_string(m).unwrap());
    }
}

fn main() -> modsep::Result<()> {
    let mut args = std::env::args().skip(1);
    let mode: Mode = args.next().as_deref().unwrap_or("uda").parse()?;
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let ds = gen_synthetic(&SynthConfig { seed, ..Default::default() })?;
    let overrides: serde_json::Value =
        serde_json::from_str(&args.next().unwrap_or_else(|| "{}".into())).expect("overrides json");
    let mut cfg_json = serde_json::to_value(TrainConfig::default()).unwrap();
    for (k, v) in overrides.as_object().unwrap() {
        cfg_json[k] = v.clone();
    }
    let base: TrainConfig = serde_json::from_value(cfg_json).expect("config");
    let cfg = TrainConfig {
        mode,
        seed,
        budget: if mode.is_active() { 0.05 } else { 0.0 },
        ..base
    };
    let start = Instant::now();
    let init = if mode == Mode::Sfada {
        let pre = TrainConfig { max_epoch: 20, ..cfg.clone() };
        let (ck, rep) = pretrain_source(&ds, &pre, 0.2)?;
        eprintln!("pretrain: {rep:?}");
        Some(ck)
    } else {
        None
    };
    let mut trainer = Trainer::new(&ds, cfg, init)?;
    let mut oracle = HiddenLabelOracle::for_domain(trainer.target)?;
    let report = trainer.run(RunHooks {
        oracle: Some(&mut oracle),
        observer: Some(&mut Print),
        ..Default::default()
    })?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
