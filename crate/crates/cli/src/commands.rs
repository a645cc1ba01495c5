use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bbs_core::beams::{dft_codebook, exhaustive_search, mrt_beamformer};
use bbs_core::brainstorm::{brainstorm, BrainstormConfig};
use bbs_core::evaluation::plots::{emit_plots, plot_beam_patterns, PlotFormat};
use bbs_core::evaluation::{
    beam_pattern, overhead_table, read_csv, render_overhead_table, run_sweep, summarize, train_regressor, write_csv,
    GainRecord, Method, Regressor, RegressorConfig, SummaryRow, SweepSpec,
};
use bbs_core::sitegen::{generate_synthetic_site, load_site, save_site, SiteDataset};
use bbs_core::training::{build_training_set, load_checkpoint, save_checkpoint, Trainer, TrainedModel, TrainingRecord};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{OutputLock, RunManifest};
use crate::{Cli, Command, FigureFormat, GlobalArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG: &str = "train_log.csv";
const TRAIN_LOG_HEADER: &str = "epoch,step,loss,grad_norm,time";

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.global.profile, cli.global.config.as_deref())?;
    apply_globals(&mut cfg, &cli.global)?;
    match cli.cmd {
        Command::GenData { out, users, antennas } => {
            if let Some(u) = users {
                cfg.site.num_users = u;
            }
            if let Some(n) = antennas {
                cfg.site.num_antennas = n;
            }
            gen_data(&cfg, &out)
        }
        Command::Train { data, out, q, epochs, fresh } => {
            if let Some(q) = q {
                cfg.train.q = q;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            train(&cfg, &data, &out, fresh)
        }
        Command::Infer { model, data, q, m, snr, out, max_users } => {
            if let Some(u) = max_users {
                cfg.eval.max_users = u;
            }
            infer(&cfg, &model, &data, q, m, snr, &out)
        }
        Command::Eval { models, data, out, q_list, m_list, snr_list, max_users } => {
            if let Some(v) = q_list {
                cfg.eval.q_list = v;
            }
            if let Some(v) = m_list {
                cfg.eval.m_list = v;
            }
            if let Some(v) = snr_list {
                cfg.eval.snr_db = v;
            }
            if let Some(u) = max_users {
                cfg.eval.max_users = u;
            }
            eval(&cfg, &models, &data, &out)
        }
        Command::Report { csv, out, format } => {
            let format = match format {
                FigureFormat::Svg => PlotFormat::Svg,
                FigureFormat::Png => PlotFormat::Png,
            };
            report(&cfg, &csv, &out, format)
        }
    }
}

fn apply_globals(cfg: &mut RunConfig, g: &GlobalArgs) -> Result<()> {
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(t) = g.threads {
        if !bbs_core::par::set_threads(t) {
            bail!("could not configure {t} worker threads");
        }
    }
    Ok(())
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.array().validate()?;
    cfg.site.geometry.validate()?;
    let _lock = OutputLock::acquire(out)?;
    let mut manifest = RunManifest::new("gen-data", cfg);
    let mut site = generate_synthetic_site(&cfg.array(), cfg.site.num_users, &cfg.site.geometry, cfg.seed)?;
    site.train_ratio = cfg.site.train_ratio;
    site.split()?;
    if cfg.site.normalize_power {
        site.normalize_power()?;
    }
    save_site(&site, out)?;
    for f in ["manifest.toml", "channels.bin", "paths.jsonl"] {
        let p = out.join(f);
        if p.exists() {
            manifest.artifact(out, &p)?;
        }
    }
    manifest.write(out)?;
    eprintln!("wrote {} users ({} antennas) to {}", site.len(), site.array.num_antennas, out.display());
    Ok(())
}

fn load_data(dir: &Path) -> Result<(SiteDataset, Vec<usize>, Vec<usize>)> {
    let site = load_site(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let (train, test) = site.split()?;
    Ok((site, train, test))
}

fn write_log_header(path: &Path) -> Result<()> {
    fs::write(path, format!("{TRAIN_LOG_HEADER}\n"))?;
    Ok(())
}

/// Drops log rows written after the checkpoint being resumed.
fn trim_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return write_log_header(path);
    }
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0 || line.split(',').nth(1).and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

fn append_log(path: &Path, recs: &[TrainingRecord]) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).open(path)?;
    for r in recs {
        writeln!(f, "{},{},{},{},{:.3}", r.epoch, r.step, r.loss, r.grad_norm, r.wall_time)?;
    }
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, out: &Path, fresh: bool) -> Result<()> {
    cfg.validate()?;
    let _lock = OutputLock::acquire(out)?;
    let mut manifest = RunManifest::new("train", cfg);
    manifest.input("data", data);
    let (site, train_idx, _) = load_data(data)?;
    if site.array.num_antennas != cfg.site.num_antennas {
        bail!(
            "dataset has {} antennas but site.num_antennas = {}",
            site.array.num_antennas,
            cfg.site.num_antennas
        );
    }
    let q = cfg.train.q;
    let set = build_training_set(&site, &train_idx, q)?;
    let tc = cfg.trainer(q);
    let dc = cfg.denoiser(q);
    let ckpt = out.join(CHECKPOINT_FILE);
    let log = out.join(TRAIN_LOG);
    let mut trainer = if ckpt.exists() && !fresh {
        let ck = load_checkpoint(&ckpt)?;
        let t = Trainer::from_checkpoint(ck, Some((&tc, &dc)))
            .with_context(|| format!("resuming from {}", ckpt.display()))?;
        trim_log(&log, t.step)?;
        eprintln!("resuming at epoch {} step {}", t.epoch, t.step);
        t
    } else {
        write_log_header(&log)?;
        Trainer::new(tc.clone(), &dc, &set)?
    };
    let interval = cfg.train.checkpoint_interval.max(1);
    while !trainer.is_done() {
        let recs = trainer.train_epoch(&set)?;
        append_log(&log, &recs)?;
        let mean = recs.iter().map(|r| r.loss).sum::<f64>() / recs.len().max(1) as f64;
        eprintln!("epoch {} loss {mean:.5}", trainer.epoch);
        if trainer.epoch % interval == 0 || trainer.is_done() {
            save_checkpoint(&trainer.checkpoint(), &ckpt)?;
        }
    }
    if !ckpt.exists() {
        save_checkpoint(&trainer.checkpoint(), &ckpt)?;
    }
    manifest.inputs.insert("data_sha256".into(), crate::manifest::file_sha256(&data.join("channels.bin"))?);
    manifest.artifact(out, &ckpt)?;
    manifest.artifact(out, &log)?;
    manifest.write(out)?;
    Ok(())
}

fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

fn load_model(path: &Path, use_ema: bool) -> Result<TrainedModel> {
    let ck = resolve_checkpoint(path);
    if !ck.exists() {
        bail!("missing checkpoint {}", ck.display());
    }
    Ok(load_checkpoint(&ck)?.into_model(use_ema)?)
}

fn test_users(cfg: &RunConfig, test: Vec<usize>) -> Vec<usize> {
    match cfg.eval.max_users {
        0 => test,
        k => test.into_iter().take(k).collect(),
    }
}

#[derive(Serialize)]
struct BeamRow {
    user_id: usize,
    best_chain: usize,
    gain_db: f64,
    phases: String,
}

fn infer(cfg: &RunConfig, model: &Path, data: &Path, q: usize, m: usize, snr: Option<f64>, out: &Path) -> Result<()> {
    let model = load_model(model, cfg.train.use_ema)?;
    let (site, _, test) = load_data(data)?;
    let users = test_users(cfg, test);
    let _lock = OutputLock::acquire(out)?;
    let mut manifest = RunManifest::new("infer", cfg);
    manifest.input("data", data);
    let bcfg = BrainstormConfig { m, q, snr_db: snr, seed: cfg.seed };
    let mut models = BTreeMap::new();
    models.insert(q, model);
    let spec = SweepSpec { q_list: vec![q], m_list: vec![m], snr_list: vec![snr], seeds: vec![cfg.seed], baselines: false };
    bcfg.validate(site.array.num_antennas)?;
    let sweep = run_sweep(&site, &users, &models, &BTreeMap::new(), &spec)?;
    let gains = out.join("gains.csv");
    write_csv(&sweep.records, &gains)?;
    let model = &models[&q];
    let mut w = csv::Writer::from_path(out.join("beams.csv"))?;
    for &u in &users {
        let r = brainstorm(&site.channels[u], u, model, &bcfg)?;
        let best = &r.beams[r.best_index];
        let phases: Vec<String> = best.as_slice().iter().map(|z| format!("{:.9}", z.arg())).collect();
        w.serialize(BeamRow {
            user_id: u,
            best_chain: r.best_index,
            gain_db: 10.0 * r.best_gain.log10(),
            phases: phases.join(" "),
        })?;
    }
    w.flush()?;
    manifest.artifact(out, &gains)?;
    manifest.artifact(out, &out.join("beams.csv"))?;
    manifest.write(out)?;
    Ok(())
}

fn discover_models(cfg: &RunConfig, dir: &Path) -> Result<BTreeMap<usize, TrainedModel>> {
    let mut found = BTreeMap::new();
    let mut missing = Vec::new();
    for &q in &cfg.eval.q_list {
        let p = dir.join(format!("q{q}")).join(CHECKPOINT_FILE);
        if p.exists() {
            found.insert(q, load_model(&p, cfg.train.use_ema)?);
        } else {
            missing.push(p);
        }
    }
    if found.is_empty() {
        let names: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        bail!("no trained model found; missing checkpoint {}", names.join(", "));
    }
    Ok(found)
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    rows: &'a [SummaryRow],
    skipped: &'a [String],
}

fn write_summary(out: &Path, rows: &[SummaryRow], skipped: &[String]) -> Result<PathBuf> {
    let p = out.join("summary.json");
    fs::write(&p, serde_json::to_string_pretty(&SummaryFile { rows, skipped })?)?;
    Ok(p)
}

fn table_m(cfg: &RunConfig) -> usize {
    if cfg.eval.m_list.contains(&5) {
        5
    } else {
        *cfg.eval.m_list.iter().max().unwrap_or(&1)
    }
}

fn write_table(cfg: &RunConfig, out: &Path, q_list: &[usize], rows: &[SummaryRow]) -> Result<PathBuf> {
    let reference = cfg.eval.reference_beams;
    let table = overhead_table(q_list, table_m(cfg), reference, rows);
    let p = out.join("overhead_table.md");
    fs::write(&p, render_overhead_table(&table, reference))?;
    Ok(p)
}

fn eval(cfg: &RunConfig, models_dir: &Path, data: &Path, out: &Path) -> Result<()> {
    let spec = cfg.sweep();
    spec.validate()?;
    let models = discover_models(cfg, models_dir)?;
    let (site, train_idx, test) = load_data(data)?;
    let users = test_users(cfg, test);
    let _lock = OutputLock::acquire(out)?;
    let mut manifest = RunManifest::new("eval", cfg);
    manifest.input("data", data);
    manifest.input("models", models_dir);
    let mut regressors: BTreeMap<usize, Regressor> = BTreeMap::new();
    if spec.baselines {
        for (&q, model) in &models {
            let set = build_training_set(&site, &train_idx, q)?;
            let budget = model.denoiser.params.num_scalars();
            let rc = RegressorConfig::matched(budget, q, site.array.num_antennas, cfg.eval.regressor_epochs, cfg.seed);
            match train_regressor(&set, &rc) {
                Ok((r, _)) => {
                    regressors.insert(q, r);
                }
                Err(e) => eprintln!("discriminative baseline for Q = {q} excluded: {e}"),
            }
        }
    }
    let sweep = run_sweep(&site, &users, &models, &regressors, &spec)?;
    for s in &sweep.skipped {
        eprintln!("skipped: {s}");
    }
    let gains = out.join("gains.csv");
    write_csv(&sweep.records, &gains)?;
    let rows = summarize(&sweep.records);
    let summary = write_summary(out, &rows, &sweep.skipped)?;
    let table = write_table(cfg, out, &cfg.eval.q_list, &rows)?;
    let patterns = out.join("beam_patterns.svg");
    if let (Some(&u), Some((&q, model))) = (users.first(), models.iter().next()) {
        let h = &site.channels[u];
        let cb = dft_codebook(&site.array);
        let m = *cfg.eval.m_list.iter().max().unwrap_or(&1);
        let r = brainstorm(h, u, model, &BrainstormConfig { m, q, snr_db: None, seed: cfg.seed })?;
        let (k, _) = exhaustive_search(h, &cb)?;
        let series = vec![
            ("MRT".to_string(), beam_pattern(&site.array, &mrt_beamformer(h))),
            (format!("BBS Q={q} M={m}"), beam_pattern(&site.array, &r.beams[r.best_index])),
            ("DFT-exhaustive".to_string(), beam_pattern(&site.array, &cb.beams[k])),
        ];
        plot_beam_patterns(&patterns, PlotFormat::Svg, &format!("Beam patterns, user {u}"), &series)?;
        manifest.artifact(out, &patterns)?;
    }
    for p in [&gains, &summary, &table] {
        manifest.artifact(out, p)?;
    }
    manifest.write(out)?;
    print_headline(&rows);
    Ok(())
}

fn print_headline(rows: &[SummaryRow]) {
    for r in rows.iter().filter(|r| r.snr_db.is_none()) {
        let tag = match r.method {
            Method::Bbs => format!("BBS Q={} M={}", r.q, r.m),
            Method::DftProbingBest | Method::Discriminative => format!("{} Q={}", r.method.tag(), r.q),
            m => m.tag().to_string(),
        };
        println!("{tag:<28} median {:>8.3} dB  mean {:>8.3} dB  (n = {})", r.median_norm_gain_db, r.mean_norm_gain_db, r.count);
    }
}

fn report(cfg: &RunConfig, csv: &Path, out: &Path, format: PlotFormat) -> Result<()> {
    let records: Vec<GainRecord> = read_csv(csv).with_context(|| format!("reading {}", csv.display()))?;
    if records.is_empty() {
        bail!("{} contains no records", csv.display());
    }
    let _lock = OutputLock::acquire(out)?;
    let mut manifest = RunManifest::new("report", cfg);
    manifest.input("csv", csv);
    let rows = summarize(&records);
    let summary = write_summary(out, &rows, &[])?;
    let mut q_list: Vec<usize> = records.iter().filter(|r| r.method == Method::Bbs).map(|r| r.q).collect();
    q_list.sort_unstable();
    q_list.dedup();
    let table = write_table(cfg, out, &q_list, &rows)?;
    let figs = emit_plots(&records, out, format)?;
    for p in figs.iter().chain([&summary, &table]) {
        manifest.artifact(out, p)?;
    }
    manifest.write(out)?;
    Ok(())
}
