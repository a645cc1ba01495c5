//! Normalized gains, baselines, sweeps, summaries and plots.

pub mod plots;
pub mod regressor;
pub mod stats;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::beams::{beam_gain, dft_codebook, median, mrt_beamformer, search_subset, BeamformingVector, Codebook};
use crate::brainstorm::{brainstorm_many, measure_user_prompt, overhead_change_pct, BrainstormConfig};
use crate::error::{config_err, Error, Result};
use crate::latent::{from_latent, normalize_prompt};
use crate::sitegen::{steering_vector, synthesize_channel, ArrayConfig, Channel, PathParams, SiteDataset};
use crate::training::TrainedModel;

pub use regressor::{train_regressor, Regressor, RegressorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "BBS")]
    Bbs,
    #[serde(rename = "DFT-exhaustive")]
    DftExhaustive,
    #[serde(rename = "DFT-probing-best")]
    DftProbingBest,
    #[serde(rename = "discriminative")]
    Discriminative,
    #[serde(rename = "MRT")]
    Mrt,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Bbs => "BBS",
            Method::DftExhaustive => "DFT-exhaustive",
            Method::DftProbingBest => "DFT-probing-best",
            Method::Discriminative => "discriminative",
            Method::Mrt => "MRT",
        }
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRecord {
    pub user_id: usize,
    pub method: Method,
    #[serde(rename = "Q")]
    pub q: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub snr_db: Option<f64>,
    pub overhead: usize,
    pub gain_db: f64,
    pub norm_gain_db: f64,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "user_id,method,Q,M,snr_db,overhead,gain_db,norm_gain_db,seed";

fn db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// `10 log10(|h^H w|^2 / |h^H w_MRT|^2)`.
pub fn normalized_gain(h: &Channel, w: &BeamformingVector) -> Result<f64> {
    if !(h.norm_sqr() > 0.0) {
        return Err(Error::DegenerateChannel);
    }
    let g = beam_gain(h, w)?;
    let g_mrt = beam_gain(h, &mrt_beamformer(h))?;
    Ok(db(g / g_mrt))
}

/// Best probing beam by measured power (ties to the lowest index) and its true gain.
pub fn select_by_measurement(h: &Channel, codebook: &Codebook, indices: &[usize], powers: &[f64]) -> Result<(usize, f64)> {
    if indices.is_empty() || indices.len() != powers.len() {
        return Err(config_err("probing indices and powers must be non-empty and aligned"));
    }
    let mut best = 0;
    for (k, &p) in powers.iter().enumerate() {
        if p > powers[best] {
            best = k;
        }
    }
    let i = indices[best];
    Ok((i, beam_gain(h, &codebook.beams[i])?))
}

/// Best true gain among the probing beams only.
pub fn baseline_probing_best(h: &Channel, indices: &[usize], codebook: &Codebook) -> Result<(usize, f64)> {
    search_subset(h, codebook, indices.iter().copied())
}

fn record(
    user: usize,
    method: Method,
    q: usize,
    m: usize,
    snr_db: Option<f64>,
    overhead: usize,
    h: &Channel,
    gain: f64,
    seed: u64,
) -> Result<GainRecord> {
    let g_mrt = beam_gain(h, &mrt_beamformer(h))?;
    if !(g_mrt > 0.0) {
        return Err(Error::DegenerateChannel);
    }
    Ok(GainRecord {
        user_id: user,
        method,
        q,
        m,
        snr_db,
        overhead,
        gain_db: db(gain),
        norm_gain_db: db(gain / g_mrt),
        seed,
    })
}

/// Grid of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub q_list: Vec<usize>,
    pub m_list: Vec<usize>,
    /// `None` means noiseless prompts.
    pub snr_list: Vec<Option<f64>>,
    pub seeds: Vec<u64>,
    pub baselines: bool,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.q_list.is_empty() || self.m_list.is_empty() || self.snr_list.is_empty() || self.seeds.is_empty() {
            return Err(config_err("sweep lists must be non-empty"));
        }
        if self.m_list.contains(&0) {
            return Err(config_err("M values must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutput {
    pub records: Vec<GainRecord>,
    /// Human-readable reasons for skipped grid cells.
    pub skipped: Vec<String>,
}

/// Evaluates every method on `users` of `site` over the grid in `spec`.
/// A `Q` without a model is skipped (and reported) rather than failing the run.
pub fn run_sweep(
    site: &SiteDataset,
    users: &[usize],
    models: &BTreeMap<usize, TrainedModel>,
    regressors: &BTreeMap<usize, Regressor>,
    spec: &SweepSpec,
) -> Result<SweepOutput> {
    spec.validate()?;
    let n = site.array.num_antennas;
    let codebook = dft_codebook(&site.array);
    let chans: Vec<(usize, &Channel)> = users
        .iter()
        .map(|&u| site.channels.get(u).map(|h| (u, h)).ok_or_else(|| config_err(format!("user {u} out of range"))))
        .collect::<Result<_>>()?;
    let mut out = SweepOutput::default();
    let m_max = *spec.m_list.iter().max().expect("validated");
    for &seed in &spec.seeds {
        if spec.baselines {
            for &(u, h) in &chans {
                let (_, g) = search_subset(h, &codebook, 0..n)?;
                out.records.push(record(u, Method::DftExhaustive, n, 0, None, n, h, g, seed)?);
                let g = beam_gain(h, &mrt_beamformer(h))?;
                out.records.push(record(u, Method::Mrt, 0, 0, None, 0, h, g, seed)?);
            }
        }
        for &q in &spec.q_list {
            let model = models.get(&q);
            if model.is_none() {
                out.skipped.push(format!("Q = {q}: no trained model"));
            }
            for &snr in &spec.snr_list {
                if let Some(model) = model {
                    let cfg = BrainstormConfig { m: m_max, q, snr_db: snr, seed };
                    let results = brainstorm_many(&chans, model, &cfg)?;
                    for (res, &(u, h)) in results.iter().zip(&chans) {
                        for &m in &spec.m_list {
                            let r = res.prefix(m);
                            out.records.push(record(u, Method::Bbs, q, m, snr, r.overhead, h, r.best_gain, seed)?);
                        }
                    }
                }
                if !spec.baselines {
                    continue;
                }
                let indices = crate::beams::select_probing_indices(n, q)?;
                let reg = regressors.get(&q);
                if reg.is_none() && snr == spec.snr_list[0] {
                    out.skipped.push(format!("Q = {q}: no discriminative baseline"));
                }
                for &(u, h) in &chans {
                    let prompt = measure_user_prompt(h, u, &indices, &codebook, snr, seed)?;
                    let (_, g) = select_by_measurement(h, &codebook, &indices, &prompt.powers)?;
                    out.records.push(record(u, Method::DftProbingBest, q, 0, snr, q, h, g, seed)?);
                    if let Some(reg) = reg {
                        let c = normalize_prompt(&prompt, &reg.stats)?.c;
                        let x = reg.predict(&[&c])?.remove(0).from_model_space();
                        let w = from_latent(&x)?;
                        out.records.push(record(u, Method::Discriminative, q, 0, snr, q, h, beam_gain(h, &w)?, seed)?);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn write_csv(records: &[GainRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<GainRecord>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Format { field: "csv header".into(), reason: format!("expected `{CSV_HEADER}`") });
    }
    Ok(r.deserialize().collect::<Result<Vec<GainRecord>, _>>()?)
}

/// Key of a summary cell; `snr_db` is compared by bit pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct CellKey {
    method: Method,
    q: usize,
    m: usize,
    snr_bits: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    #[serde(rename = "Q")]
    pub q: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub snr_db: Option<f64>,
    pub count: usize,
    pub median_norm_gain_db: f64,
    pub mean_norm_gain_db: f64,
}

/// Median and mean normalized gain per (method, Q, M, SNR) cell, pooled over seeds.
pub fn summarize(records: &[GainRecord]) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();
    for r in records {
        let key = CellKey { method: r.method, q: r.q, m: r.m, snr_bits: r.snr_db.map(f64::to_bits) };
        cells.entry(key).or_default().push(r.norm_gain_db);
    }
    cells
        .into_iter()
        .map(|(k, v)| SummaryRow {
            method: k.method,
            q: k.q,
            m: k.m,
            snr_db: k.snr_bits.map(f64::from_bits),
            count: v.len(),
            median_norm_gain_db: median(&v),
            mean_norm_gain_db: stats::mean(&v),
        })
        .collect()
}

/// Normalized gains of one cell, ordered by `(seed, user_id)`.
pub fn cell_values(records: &[GainRecord], method: Method, q: usize, m: usize, snr_db: Option<f64>) -> Vec<f64> {
    let mut v: Vec<(u64, usize, f64)> = records
        .iter()
        .filter(|r| r.method == method && r.q == q && r.m == m && r.snr_db.map(f64::to_bits) == snr_db.map(f64::to_bits))
        .map(|r| (r.seed, r.user_id, r.norm_gain_db))
        .collect();
    v.sort_by_key(|a| (a.0, a.1));
    v.into_iter().map(|x| x.2).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    #[serde(rename = "Q")]
    pub q: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub overhead: usize,
    pub delta_overhead_pct: f64,
    /// Change of the median linear normalized gain vs exhaustive search, when both are available.
    pub delta_gain_pct: Option<f64>,
}

/// Percentage changes relative to an exhaustive sweep of `reference` beams.
pub fn overhead_table(q_list: &[usize], m: usize, reference: usize, summary: &[SummaryRow]) -> Vec<OverheadRow> {
    let lin = |d: f64| 10f64.powf(d / 10.0);
    let exh = summary
        .iter()
        .find(|r| r.method == Method::DftExhaustive && r.snr_db.is_none())
        .map(|r| r.median_norm_gain_db);
    q_list
        .iter()
        .map(|&q| {
            let o = crate::brainstorm::overhead(q, m);
            let bbs = summary
                .iter()
                .find(|r| r.method == Method::Bbs && r.q == q && r.m == m && r.snr_db.is_none())
                .map(|r| r.median_norm_gain_db);
            OverheadRow {
                q,
                m,
                overhead: o,
                delta_overhead_pct: overhead_change_pct(o, reference),
                delta_gain_pct: match (bbs, exh) {
                    (Some(b), Some(e)) => Some(100.0 * (lin(b) - lin(e)) / lin(e)),
                    _ => None,
                },
            }
        })
        .collect()
}

/// One decimal, truncated toward zero (so -68.75 prints as -68.7).
pub fn truncate1(x: f64) -> f64 {
    (x * 10.0).trunc() / 10.0
}

/// Markdown rendering of [`overhead_table`].
pub fn render_overhead_table(rows: &[OverheadRow], reference: usize) -> String {
    let mut s = String::new();
    let m = rows.first().map_or(0, |r| r.m);
    let _ = writeln!(s, "Change vs {reference}-beam exhaustive search (BBS, M = {m})\n");
    let _ = write!(s, "| metric |");
    for r in rows {
        let _ = write!(s, " Q = {} |", r.q);
    }
    let _ = write!(s, "\n|---|");
    for _ in rows {
        let _ = write!(s, "---|");
    }
    let _ = write!(s, "\n| O |");
    for r in rows {
        let _ = write!(s, " {} |", r.overhead);
    }
    let _ = write!(s, "\n| ΔO |");
    for r in rows {
        let _ = write!(s, " {:+.1}% |", truncate1(r.delta_overhead_pct));
    }
    let _ = write!(s, "\n| Δg |");
    for r in rows {
        match r.delta_gain_pct {
            Some(g) => {
                let _ = write!(s, " {:+.1}% |", truncate1(g));
            }
            None => {
                let _ = write!(s, " n/a |");
            }
        }
    }
    s.push('\n');
    s
}

/// `|a(phi)^H w|^2` on a 1 degree grid over `[-90, 90]`.
pub fn beam_pattern(array: &ArrayConfig, w: &BeamformingVector) -> Vec<(f64, f64)> {
    (-90..=90)
        .map(|deg| {
            let a = steering_vector(array, deg as f64);
            let g: Complex64 = crate::beams::inner(&a, w.as_slice());
            (deg as f64, g.norm_sqr())
        })
        .collect()
}

/// Angles of strict local maxima of a sampled pattern (interior points only).
pub fn pattern_peaks(pattern: &[(f64, f64)]) -> Vec<f64> {
    pattern
        .windows(3)
        .filter(|w| w[1].1 > w[0].1 && w[1].1 >= w[2].1)
        .map(|w| w[1].0)
        .collect()
}

/// Two users whose probing prompts coincide but whose MRT beams differ:
/// on-grid paths at DFT bins `k` and `N - k` with the second gain negated.
pub fn multimodal_pair(array: &ArrayConfig, k: usize, g1: Complex64, g2: Complex64) -> Result<(Channel, Channel)> {
    let n = array.num_antennas;
    if k == 0 || 2 * k >= n {
        return Err(config_err(format!("bin {k} must lie strictly between 0 and N/2")));
    }
    let ang = |bin: f64| {
        let s = bin / (n as f64 * array.spacing_over_wavelength);
        s.asin().to_degrees()
    };
    let (phi1, phi2) = (ang(k as f64), ang(-(k as f64)));
    let a = synthesize_channel(
        array,
        &[PathParams { gain: g1, azimuth_deg: phi1 }, PathParams { gain: g2, azimuth_deg: phi2 }],
    )?;
    let b = synthesize_channel(
        array,
        &[PathParams { gain: g1, azimuth_deg: phi1 }, PathParams { gain: -g2, azimuth_deg: phi2 }],
    )?;
    Ok((a, b))
}
