use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use tpf_core::cost::{measure, CostProfile, TimingRecord};
use tpf_core::episode::{read_pack_file, write_pack_file, SyntheticWorld};
use tpf_core::metrics::{evaluate, EvalParams};
use tpf_core::selector::{run_inference, InferenceParams};
use tpf_core::{Checkpoint, Episode, SelectionStrategy};

use crate::config::RunConfig;
use crate::report::{fixed, to_line, BenchRecord, BenchTiming, EvalRecord};
use crate::{BenchArgs, EvalArgs, GenArgs, StrategyArgs, TrainArgs};

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn apply_strategy(cfg: &mut RunConfig, a: StrategyArgs) {
    set(&mut cfg.eval.strategy, a.strategy);
    set(&mut cfg.eval.n, a.n);
    set(&mut cfg.eval.threshold, a.threshold);
    set(&mut cfg.eval.iou_threshold, a.iou);
    set(&mut cfg.eval.peak_threshold, a.peak_threshold);
}

fn load_pack(path: &Path) -> Result<Vec<Episode>> {
    let (_, episodes) =
        read_pack_file(path).with_context(|| format!("reading pack {}", path.display()))?;
    Ok(episodes)
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

pub fn gen(a: GenArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    set(&mut cfg.gen.episodes, a.episodes);
    set(&mut cfg.gen.offset, a.offset);
    set(&mut cfg.synth.num_classes, a.classes);
    set(&mut cfg.synth.present_count, a.present);
    set(&mut cfg.synth.instances_per_class, a.instances);
    set(&mut cfg.synth.shots, a.shots);
    set(&mut cfg.synth.sigma, a.sigma);
    set(&mut cfg.synth.amplitude, a.amplitude);
    set(&mut cfg.synth.seed, a.seed);
    if cfg.gen.episodes == 0 {
        bail!("--episodes must be at least 1");
    }

    let world = SyntheticWorld::new(cfg.synth.clone())?;
    let start = cfg.gen.offset;
    let episodes = (start..start + cfg.gen.episodes as u64)
        .map(|i| world.episode(i))
        .collect::<Result<Vec<_>, _>>()?;
    write_pack_file(&a.out, &episodes, Some(&cfg.synth))
        .with_context(|| format!("writing pack {}", a.out.display()))?;
    let s = &cfg.synth;
    println!(
        "wrote {} episodes to {}: {} classes, {} shot(s), channels {:?}, grids {:?}, config {}",
        episodes.len(),
        a.out.display(),
        s.num_classes,
        s.shots,
        s.channels,
        s.grids,
        cfg.hash()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    set(&mut cfg.train.phase, a.phase);
    set(&mut cfg.train.epochs, a.epochs);
    set(&mut cfg.train.learning_rate, a.lr);
    set(&mut cfg.train.batch_size, a.batch_size);
    set(&mut cfg.train.negative_ratio, a.negative_ratio);
    set(&mut cfg.train.hidden, a.hidden);
    set(&mut cfg.train.seed, a.seed);
    let phases = cfg.train.phases()?;
    if cfg.train.hidden == 0 {
        bail!("--hidden must be at least 1");
    }

    let episodes = load_pack(&a.pack)?;
    let first = &episodes[0];
    let channels = [0, 1, 2].map(|l| first.query()[l].channels());
    let mut ckpt = Checkpoint::initialize(channels, channels[2], cfg.train.hidden, cfg.train.seed)?;
    let mut last = None;
    for phase in phases {
        let tc = cfg.train.train_config(phase);
        let report = tpf_core::train(&mut ckpt, &episodes, &tc)?;
        println!(
            "phase {:?}: {} samples ({} positive), initial loss {:.4}",
            phase, report.samples, report.positives, report.initial_loss
        );
        for (i, loss) in report.epoch_losses.iter().enumerate() {
            println!("epoch {} loss {:.4}", i + 1, loss);
        }
        last = Some(report);
    }
    ckpt.save(&a.out)
        .with_context(|| format!("writing checkpoint {}", a.out.display()))?;
    let r = last.expect("at least one phase");
    println!(
        "final loss {:.4} accuracy {:.2} config {} -> {}",
        r.final_loss,
        r.final_accuracy,
        cfg.hash(),
        a.out.display()
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    apply_strategy(&mut cfg, a.strategy);
    let strategy = cfg.eval.strategy()?;
    let ckpt = load_model(&a.model)?;
    let episodes = load_pack(&a.pack)?;
    let params = EvalParams {
        iou_threshold: cfg.eval.iou_threshold,
        inference: InferenceParams { peak_threshold: cfg.eval.peak_threshold },
    };
    let report = evaluate(&ckpt, &episodes, strategy, &params)?;
    let record = to_line(&EvalRecord::new(&report, &cfg.hash()));
    println!("{record}");
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("eval.json"), format!("{record}\n"))?;
        fs::write(dir.join("recall.csv"), report.recall_csv())?;
    }
    let or = report.omission_rate.map_or("n/a".to_string(), |v| format!("{v:.2}"));
    let recall = report.mean_recall().map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "strategy {} OR {} AP_full {:.4} AP_minor {:.4} mean_recall {} selected {:.2} | wall-clock full {:.4}s minor {:.4}s",
        strategy,
        or,
        report.ap_full,
        report.ap_minor,
        recall,
        report.mean_selected,
        report.timing.full_total_s,
        report.timing.minor_total_s
    );
    Ok(())
}

fn load_profile(path: Option<&Path>) -> Result<CostProfile> {
    let Some(path) = path else {
        return Ok(CostProfile::reference());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading profile {}", path.display()))?;
    let p: CostProfile =
        toml::from_str(&text).with_context(|| format!("parsing profile {}", path.display()))?;
    p.validate()?;
    Ok(p)
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    apply_strategy(&mut cfg, a.strategy);
    set(&mut cfg.bench.repeat, a.repeat);
    if cfg.bench.repeat == 0 {
        bail!("--repeat must be at least 1");
    }
    let strategy = cfg.eval.strategy()?;
    let profile = load_profile(a.profile.as_deref())?;
    let ckpt = load_model(&a.model)?;
    let episodes = load_pack(&a.pack)?;
    let params = InferenceParams { peak_threshold: cfg.eval.peak_threshold };
    let uses_tpf = strategy != SelectionStrategy::All;

    // Untimed warm-up pass.
    for ep in &episodes {
        run_inference(&ckpt, ep, SelectionStrategy::All, &params)?;
        run_inference(&ckpt, ep, strategy, &params)?;
    }

    let mut full = Vec::new();
    let mut minor = Vec::new();
    for _ in 0..cfg.bench.repeat {
        for ep in &episodes {
            let f = run_inference(&ckpt, ep, SelectionStrategy::All, &params)?;
            full.push(TimingRecord::from_output(&f, ep.num_classes(), false));
            let m = run_inference(&ckpt, ep, strategy, &params)?;
            minor.push(TimingRecord::from_output(&m, ep.num_classes(), uses_tpf));
        }
    }

    let sum = |rs: &[TimingRecord], f: fn(&TimingRecord) -> f64| rs.iter().map(f).sum::<f64>();
    let full_total = sum(&full, |r| r.total_s);
    let full_heavy = sum(&full, |r| r.fusion_s + r.detection_s);
    let minor_total = sum(&minor, |r| r.total_s);
    let minor_heavy = sum(&minor, |r| r.fusion_s + r.detection_s);
    let minor_scoring = sum(&minor, |r| r.scoring_s);
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { f64::NAN };

    let n = minor.len() as f64;
    let mean_candidates = minor.iter().map(|r| r.n_candidates as f64).sum::<f64>() / n;
    let mean_selected = minor.iter().map(|r| r.n_selected as f64).sum::<f64>() / n;
    let predicted_full =
        minor.iter().map(|r| profile.predict_time(r.n_candidates, r.n_candidates, false)).sum::<f64>() / n;
    let predicted_minor =
        minor.iter().map(|r| profile.predict_time(r.n_candidates, r.n_selected, uses_tpf)).sum::<f64>() / n;

    let runs: Vec<TimingRecord> = full.iter().chain(&minor).copied().collect();
    let fit = measure(&runs, profile.n_ref);

    let record = BenchRecord {
        kind: "bench",
        config_hash: cfg.hash(),
        strategy: strategy.to_string(),
        episodes: episodes.len(),
        repeat: cfg.bench.repeat,
        mean_candidates: fixed(mean_candidates),
        mean_selected: fixed(mean_selected),
        predicted_full_s: fixed(predicted_full),
        predicted_minor_s: fixed(predicted_minor),
        predicted_ratio: fixed(ratio(predicted_minor, predicted_full)),
        nondeterministic: BenchTiming {
            full_total_s: fixed(full_total),
            full_heavy_s: fixed(full_heavy),
            minor_total_s: fixed(minor_total),
            minor_heavy_s: fixed(minor_heavy),
            minor_scoring_s: fixed(minor_scoring),
            heavy_ratio: fixed(ratio(minor_heavy, full_heavy)),
            scoring_overhead: fixed(ratio(minor_scoring, full_total)),
            fitted: fit.as_ref().ok().map(Into::into),
        },
    };
    println!("{}", to_line(&record));
    println!(
        "heavy-stage ratio {:.4} scoring overhead {:.4} | predicted full {:.4}s minor {:.4}s",
        ratio(minor_heavy, full_heavy),
        ratio(minor_scoring, full_total),
        predicted_full,
        predicted_minor
    );

    let fit = fit.context("fitting a cost profile needs runs with different selection counts")?;
    if let Some(path) = &a.save_profile {
        fs::write(path, toml::to_string(&fit.profile)?)
            .with_context(|| format!("writing profile {}", path.display()))?;
    }
    Ok(())
}
