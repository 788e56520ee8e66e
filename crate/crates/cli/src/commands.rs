use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context as _, Result};
use rayon::prelude::*;
use serde::Serialize;

use cyclenoise::analysis::{cost_model, eq5_verify};
use cyclenoise::encoder::{read_checkpoint, write_checkpoint, Encoder, ModelParams, SetEncoder};
use cyclenoise::eval::{embed, evaluate, features_csv, memorization_curve, variance_stats};
use cyclenoise::experiment::{ablation_cells, encoder_for, run_experiment, AblationTable, ExperimentConfig};
use cyclenoise::synth::{apply_corruption, CorruptionDescriptor, CorruptionKind, DatasetManifest};
use cyclenoise::trainer::{read_trace, run_training, Mode, RunSinks};
use cyclenoise::Error;

use crate::datadir::{self, DataDir};
use crate::{AblateArgs, CorruptArgs, CostArgs, EvalArgs, GenDataArgs, NoiseArgs, TrainArgs, VerifyArgs};

pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const MODEL_F: &str = "model_f.ckpt";
pub const MODEL_M: &str = "model_m.ckpt";
pub const INIT_F: &str = "init_f.ckpt";
pub const INIT_M: &str = "init_m.ckpt";
pub const TRACE: &str = "trace.bin";
pub const METRICS: &str = "metrics.jsonl";
pub const DIAGNOSTIC: &str = "diagnostic.json";

pub struct Context {
    out_root: Option<PathBuf>,
}

impl Context {
    pub fn new(out_root: Option<PathBuf>, threads: Option<usize>) -> Self {
        if let Some(n) = threads.filter(|&n| n > 0) {
            // Fails only if a pool already exists, which cannot happen this early.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Self { out_root }
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        match &self.out_root {
            Some(root) if path.is_relative() => root.join(path),
            _ => path.to_path_buf(),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn default_amount(kind: CorruptionKind) -> f64 {
    match kind {
        CorruptionKind::Split => 0.6,
        CorruptionKind::Label | CorruptionKind::Augmentation => 0.2,
    }
}

fn descriptor(noise: &NoiseArgs, seed: u64) -> Result<Option<CorruptionDescriptor>> {
    let Some(kind) = noise.kind.as_deref() else {
        if noise.fraction.is_some() || noise.rate.is_some() {
            bail!("--fraction/--rate need --corrupt");
        }
        return Ok(None);
    };
    let kind: CorruptionKind = kind.parse()?;
    let amount = noise.fraction.or(noise.rate).unwrap_or(default_amount(kind));
    Ok(Some(CorruptionDescriptor { kind, amount, seed }))
}

pub fn gen_data(ctx: &Context, a: GenDataArgs) -> Result<ExitCode> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    let g = &mut cfg.data.generator;
    if let Some(n) = a.ids {
        g.n_ids = n;
    }
    if let Some(v) = a.views {
        g.views = v;
    }
    if let Some(n) = a.train_ids {
        cfg.data.train_ids = n;
    }
    if let Some(c) = descriptor(&a.noise, cfg.data.generator.seed)? {
        cfg.corruption = Some(c);
    }
    cfg.data.generator.validate()?;

    let out = ctx.resolve(&a.out);
    datadir::prepare_output(&out, datadir::MANIFEST, a.force)?;
    let manifest = cfg.manifest();
    let (train, test) = manifest.materialize()?;
    let meta = datadir::write(&out, &manifest, &train, &test)?;
    println!(
        "wrote {}: {} train ids / {} sequences ({} noisy), {} test ids / {} sequences, manifest {}",
        out.display(),
        meta.train_n_ids,
        meta.train_sequences,
        meta.noisy_sequences,
        meta.test_n_ids,
        meta.test_sequences,
        meta.manifest_hash
    );
    Ok(ExitCode::SUCCESS)
}

pub fn corrupt(ctx: &Context, a: CorruptArgs) -> Result<ExitCode> {
    let src = ctx.resolve(&a.data);
    let DataDir { meta, train, test } = datadir::load(&src)?;
    if !meta.manifest.corruptions.is_empty() {
        bail!("{} is already corrupted; start from clean data", src.display());
    }
    let kind: CorruptionKind = a.kind.parse()?;
    let c = CorruptionDescriptor {
        kind,
        amount: a.amount.unwrap_or(default_amount(kind)),
        seed: a.seed.unwrap_or(meta.manifest.generator.seed),
    };
    let train = apply_corruption(train, &c)?;
    let mut manifest: DatasetManifest = meta.manifest;
    manifest.corruptions.push(c);

    let out = ctx.resolve(&a.out);
    datadir::prepare_output(&out, datadir::MANIFEST, a.force)?;
    let meta = datadir::write(&out, &manifest, &train, &test)?;
    println!(
        "wrote {}: {:?} amount {} seed {}: {} of {} training sequences flagged, {} train ids",
        out.display(),
        c.kind,
        c.amount,
        c.seed,
        meta.noisy_sequences,
        meta.train_sequences,
        meta.train_n_ids
    );
    Ok(ExitCode::SUCCESS)
}

/// Builds the experiment config of a training run on an existing dataset
/// directory, so the snapshot fully describes how the run was produced.
fn run_config(a: &TrainArgs, meta: &datadir::DataMeta, out: &Path) -> Result<ExperimentConfig> {
    let mut cfg = load_config(a.config.as_deref())?;
    let m = &meta.manifest;
    if m.corruptions.len() > 1 {
        bail!("datasets with more than one corruption are not supported");
    }
    cfg.data.generator = m.generator.clone();
    cfg.data.train_ids = m.train_ids;
    cfg.corruption = m.corruptions.first().copied();
    let t = &mut cfg.trainer;
    if let Some(mode) = &a.mode {
        t.mode = mode.parse::<Mode>()?;
        if matches!(t.mode, Mode::Supervised | Mode::Selfsup) {
            t.cyclic = false;
            t.and_enabled = false;
        }
    }
    if let Some(n) = a.iterations {
        t.iterations = n;
    }
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if let Some(c) = a.cyclic {
        t.cyclic = c;
    }
    if let Some(on) = a.and_enabled {
        t.and_enabled = on;
    }
    if a.trace {
        t.record_trace = true;
    }
    if let Some(n) = a.snapshot_every {
        t.snapshot_every = n;
    }
    cfg.output_dir = out.to_path_buf();
    cfg.validate()?;
    Ok(cfg)
}

/// Removes outputs of an earlier run so a forced rerun leaves no stale files.
fn clear_run_artifacts(dir: &Path) -> Result<()> {
    for name in [MODEL_F, MODEL_M, INIT_F, INIT_M, TRACE, METRICS, DIAGNOSTIC] {
        let path = dir.join(name);
        if path.exists() {
            std::fs::remove_file(&path).with_context(|| format!("removing {}", path.display()))?;
        }
    }
    let eval = dir.join("eval");
    if eval.exists() {
        std::fs::remove_dir_all(&eval).with_context(|| format!("removing {}", eval.display()))?;
    }
    Ok(())
}

fn save_checkpoint(path: &Path, params: &ModelParams, hash: &[u8; 32]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    write_checkpoint(&mut out, params, hash).with_context(|| format!("writing {}", path.display()))?;
    out.flush()?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<cyclenoise::encoder::Checkpoint> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_checkpoint(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

pub fn train(ctx: &Context, a: TrainArgs) -> Result<ExitCode> {
    let data_dir = ctx.resolve(&a.data);
    let data = datadir::load(&data_dir)?;
    let out = ctx.resolve(&a.out);
    let cfg = run_config(&a, &data.meta, &out)?;
    datadir::prepare_output(&out, CONFIG_SNAPSHOT, a.force)?;
    clear_run_artifacts(&out)?;
    write_text(&out.join(CONFIG_SNAPSHOT), &cfg.to_toml()?)?;
    let hash = cfg.hash()?;

    let encoder = encoder_for(&data.train, &cfg.trainer)?;
    let metrics_path = out.join(METRICS);
    let mut metrics = BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
    let trace_path = out.join(TRACE);
    let mut trace = if cfg.trainer.record_trace && cfg.trainer.has_memory_net() {
        Some(BufWriter::new(File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?))
    } else {
        None
    };
    let sinks = RunSinks {
        trace: trace.as_mut().map(|w| w as &mut dyn Write),
        metrics: Some(&mut metrics),
        config_hash: hash,
    };
    let run = match run_training(&encoder, &data.train, &cfg.trainer, sinks) {
        Ok(run) => run,
        Err(Error::NonFiniteLoss { iteration, diagnostic }) => {
            metrics.flush()?;
            drop(trace);
            let _ = std::fs::remove_file(&trace_path);
            let parsed: serde_json::Value = serde_json::from_str(&diagnostic).unwrap_or(serde_json::Value::String(diagnostic));
            let path = out.join(DIAGNOSTIC);
            write_json(&path, &serde_json::json!({ "iteration": iteration, "config_hash": hex(&hash), "batch": parsed }))?;
            bail!("non-finite loss at iteration {iteration}; batch dump in {}", path.display());
        }
        Err(e) => return Err(e.into()),
    };
    drop(metrics);
    if let Some(mut w) = trace {
        w.flush()?;
    }

    save_checkpoint(&out.join(MODEL_F), &run.theta_f, &hash)?;
    save_checkpoint(&out.join(INIT_F), &run.init_f, &hash)?;
    if let (Some(m), Some(m0)) = (&run.theta_m, &run.init_m) {
        save_checkpoint(&out.join(MODEL_M), m, &hash)?;
        save_checkpoint(&out.join(INIT_M), m0, &hash)?;
    }
    if !run.snapshots.is_empty() {
        let curve = memorization_curve(&encoder, &run.snapshots, &data.train)?;
        let eval_dir = out.join("eval");
        std::fs::create_dir_all(&eval_dir)?;
        write_text(&eval_dir.join("memorization.csv"), &curve.to_csv(&hex(&hash)))?;
    }

    let last = run.metrics.last();
    println!(
        "trained {} for {} iterations ({} forwards) into {}; final L_CRC {:.4}, kept {:.3}, config {}",
        cfg.trainer.mode.as_str(),
        cfg.trainer.iterations,
        run.forwards,
        out.display(),
        last.map_or(f64::NAN, |m| m.l_crc),
        last.map_or(f64::NAN, |m| m.kept_fraction),
        hex(&hash)
    );
    Ok(ExitCode::SUCCESS)
}

pub fn eval(ctx: &Context, a: EvalArgs) -> Result<ExitCode> {
    let run = ctx.resolve(&a.run);
    let data = datadir::load(&ctx.resolve(&a.data))?;
    let cfg = ExperimentConfig::load(&run.join(CONFIG_SNAPSHOT))
        .with_context(|| format!("loading {}", run.join(CONFIG_SNAPSHOT).display()))?;
    let ckpt = load_checkpoint(&run.join(&a.weights))?;
    let encoder = SetEncoder::new(*ckpt.params.shape())?;
    let d_in = data.test.samples.first().map_or(0, |s| s.frames[0].len());
    if encoder.shape().d_in != d_in {
        return Err(Error::InvalidArgument(format!(
            "checkpoint expects {}-dimensional frames, dataset has {d_in}",
            encoder.shape().d_in
        ))
        .into());
    }
    let exclude = a.exclude_same_view.unwrap_or(cfg.eval.exclude_same_view);
    let groups = a.gallery_groups.unwrap_or(cfg.eval.nm_gallery_groups);
    let report = evaluate(&encoder, &ckpt.params, &data.test, groups, exclude)?;
    let features = embed(&encoder, &ckpt.params, &data.test)?;
    let ids: Vec<usize> = data.test.samples.iter().map(|s| s.id).collect();
    let conditions: Vec<_> = data.test.samples.iter().map(|s| s.condition).collect();
    let variance = variance_stats(&features, &ids, &conditions)?;

    let hash = hex(&ckpt.config_hash);
    let eval_dir = run.join("eval");
    std::fs::create_dir_all(&eval_dir)?;
    let stem = a.weights.trim_end_matches(".ckpt");
    let suffix = if stem == "model_f" { String::new() } else { format!("_{stem}") };
    write_text(&eval_dir.join(format!("rank1{suffix}.csv")), &report.to_csv(&hash))?;
    write_json(&eval_dir.join(format!("rank1{suffix}.json")), &report)?;
    write_text(&eval_dir.join(format!("variance{suffix}.csv")), &variance.to_csv(&hash))?;
    write_text(&eval_dir.join(format!("features{suffix}.csv")), &features_csv(&data.test, &features, &hash))?;

    print!("{}", report.to_csv(&hash));
    Ok(ExitCode::SUCCESS)
}

pub fn ablate(ctx: &Context, a: AblateArgs) -> Result<ExitCode> {
    let mut base = match &a.config {
        Some(p) => load_config(Some(p))?,
        None => {
            let mut c = ExperimentConfig::default();
            c.corruption = Some(CorruptionDescriptor {
                kind: CorruptionKind::Split,
                amount: 0.6,
                seed: c.data.generator.seed,
            });
            c
        }
    };
    if let Some(n) = a.iterations {
        base.trainer.iterations = n;
    }
    if a.seeds.is_empty() {
        bail!("at least one seed is required");
    }
    base.validate()?;
    let out = ctx.resolve(&a.out);
    datadir::prepare_output(&out, "ablation.csv", a.force)?;
    base.output_dir = out.clone();

    let cells = ablation_cells(&base, &a.seeds);
    eprintln!("running {} cells ({} rows x {} seeds)", cells.len(), cells.len() / a.seeds.len(), a.seeds.len());
    let reports = cells
        .par_iter()
        .map(|(row, seed, cfg)| {
            run_experiment(cfg, None)
                .map(|o| o.report)
                .map_err(|e| anyhow!("row #{} seed {seed}: {e}", row.index))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = AblationTable::from_reports(&a.seeds, &reports)?;
    let hash = base.hash_hex()?;
    write_text(&out.join("ablation.csv"), &table.to_csv(&hash))?;
    write_json(&out.join("ablation.json"), &table)?;
    write_text(&out.join("base.toml"), &base.to_toml()?)?;

    println!("{:<4} {:<24} {:>14} {:>14} {:>14}", "row", "setting", "NM", "BG", "CL");
    for l in &table.lines {
        let cell = |m: &cyclenoise::experiment::MeanStd| format!("{:.1} ± {:.1}", m.mean, m.std);
        println!("#{:<3} {:<24} {:>14} {:>14} {:>14}", l.index, l.label, cell(&l.nm), cell(&l.bg), cell(&l.cl));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn verify_eq5(ctx: &Context, a: VerifyArgs) -> Result<ExitCode> {
    let run = ctx.resolve(&a.run);
    let trace_path = a.trace.map(|p| ctx.resolve(&p)).unwrap_or_else(|| run.join(TRACE));
    let file = File::open(&trace_path).with_context(|| format!("opening trace {}", trace_path.display()))?;
    let trace = match read_trace(BufReader::new(file)) {
        Ok(t) => t,
        Err(e) => {
            println!("FAIL: {} is corrupt: {e}", trace_path.display());
            return Ok(ExitCode::FAILURE);
        }
    };
    let init_f = load_checkpoint(&run.join(INIT_F))?.params;
    let init_m = load_checkpoint(&run.join(INIT_M))?.params;
    let report = match eq5_verify(&trace, &init_f, &init_m, trace.header.m) {
        Ok(r) => r,
        Err(e) => {
            println!("FAIL: {e}");
            return Ok(ExitCode::FAILURE);
        }
    };
    println!(
        "iterations {}, m {}, max relative deviation {:.3e} (tolerance {:.0e})",
        report.iterations, trace.header.m, report.max_rel_deviation, a.tolerance
    );
    if let Some(k) = report.first_digest_mismatch {
        println!("FAIL: recorded memory-network state diverges from the replay at iteration {k}");
        return Ok(ExitCode::FAILURE);
    }
    if !(report.max_rel_deviation <= a.tolerance) {
        println!("FAIL: deviation above tolerance");
        return Ok(ExitCode::FAILURE);
    }
    println!("PASS");
    Ok(ExitCode::SUCCESS)
}

/// Rounds away binary representation noise such as 28.800000000000004.
fn tidy(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

pub fn cost(a: CostArgs) -> Result<ExitCode> {
    let c = cost_model(a.n, a.sigma)?;
    let (with_aug, plain) = c.speedups();
    println!("batch N = {}, noise rate = {}", a.n, a.sigma);
    println!("co-teaching forwards per iteration: {}", tidy(c.coteach));
    println!("cyclic forwards per iteration (augmented): {}", tidy(c.cntn_aug));
    println!("cyclic forwards per iteration (plain): {}", tidy(c.cntn_plain));
    println!("co-teaching costs {with_aug:.1}% more (augmented), {plain:.1}% more (plain)");
    Ok(ExitCode::SUCCESS)
}
