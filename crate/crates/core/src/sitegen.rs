//! Site profiles: ray-based multipath channels for a uniform linear array,
//! a clustered synthetic site generator, and the on-disk dataset format.
//!
//! Angles are degrees at every public boundary and radians inside the math.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::par;
use crate::rng::{substream, Stream};

/// Version written into every manifest.
pub const FORMAT_VERSION: u32 = 1;
/// Paths per user in generated sites.
pub const PATHS_PER_USER: usize = 5;

const MANIFEST_FILE: &str = "manifest.toml";
const CHANNELS_FILE: &str = "channels.bin";
const PATHS_FILE: &str = "paths.jsonl";

/// Uniform linear array description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub num_antennas: usize,
    pub spacing_over_wavelength: f64,
    /// Metadata only.
    pub carrier_freq_ghz: f64,
}

impl ArrayConfig {
    pub fn new(num_antennas: usize) -> Self {
        Self {
            num_antennas,
            spacing_over_wavelength: 0.5,
            carrier_freq_ghz: 28.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_antennas < 2 {
            return Err(config_err("num_antennas must be at least 2"));
        }
        if !(self.spacing_over_wavelength > 0.0) || !self.spacing_over_wavelength.is_finite() {
            return Err(config_err("spacing_over_wavelength must be positive"));
        }
        Ok(())
    }
}

/// One propagation path: complex linear gain and departure azimuth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub gain: Complex64,
    pub azimuth_deg: f64,
}

/// A user channel `h = sum_l gain_l * a(azimuth_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub h: Vec<Complex64>,
    /// Empty when the channel was loaded without path metadata.
    pub paths: Vec<PathParams>,
    pub los: bool,
}

impl Channel {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.h.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Channel rescaled to unit norm. Paths are rescaled with it.
    pub fn normalized(&self) -> Result<Channel> {
        let n = self.norm_sqr().sqrt();
        if !(n > 0.0) {
            return Err(Error::DegenerateChannel);
        }
        Ok(Channel {
            h: self.h.iter().map(|z| z / n).collect(),
            paths: self
                .paths
                .iter()
                .map(|p| PathParams {
                    gain: p.gain / n,
                    azimuth_deg: p.azimuth_deg,
                })
                .collect(),
            los: self.los,
        })
    }

    /// Checks `h` against its path list to `rel_tol` relative error.
    pub fn check_consistency(&self, array: &ArrayConfig, rel_tol: f64) -> Result<()> {
        if self.paths.is_empty() {
            return Ok(());
        }
        let rebuilt = synthesize_channel(array, &self.paths)?;
        let err: f64 = rebuilt
            .h
            .iter()
            .zip(&self.h)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let scale = self.norm_sqr().sqrt().max(f64::MIN_POSITIVE);
        if err / scale > rel_tol {
            return Err(Error::Format {
                field: "paths".into(),
                reason: format!("path list does not reproduce channel (rel. err {:.3e})", err / scale),
            });
        }
        Ok(())
    }
}

/// A collection of channels sharing one array, plus its split parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDataset {
    pub array: ArrayConfig,
    pub channels: Vec<Channel>,
    pub split_seed: u64,
    pub train_ratio: f64,
    /// Whether every channel was rescaled to unit norm.
    pub power_normalized: bool,
}

impl SiteDataset {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Deterministic train/test partition.
    pub fn split(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        split_train_test(self.len(), self.train_ratio, self.split_seed)
    }

    /// Rescales every channel to unit norm.
    pub fn normalize_power(&mut self) -> Result<()> {
        for c in &mut self.channels {
            *c = c.normalized()?;
        }
        self.power_normalized = true;
        Ok(())
    }
}

/// Array response `(1/sqrt N) exp(j 2 pi (d/lambda) m sin(phi))`.
pub fn steering_vector(array: &ArrayConfig, azimuth_deg: f64) -> Vec<Complex64> {
    let n = array.num_antennas;
    let amp = 1.0 / (n as f64).sqrt();
    let k = 2.0 * std::f64::consts::PI * array.spacing_over_wavelength * azimuth_deg.to_radians().sin();
    (0..n)
        .map(|m| Complex64::from_polar(amp, k * m as f64))
        .collect()
}

/// Superposes the paths into a channel vector.
pub fn synthesize_channel(array: &ArrayConfig, paths: &[PathParams]) -> Result<Channel> {
    if paths.is_empty() {
        return Err(Error::NoPaths);
    }
    let mut h = vec![Complex64::new(0.0, 0.0); array.num_antennas];
    for p in paths {
        for (hm, am) in h.iter_mut().zip(steering_vector(array, p.azimuth_deg)) {
            *hm += p.gain * am;
        }
    }
    Ok(Channel {
        h,
        paths: paths.to_vec(),
        los: false,
    })
}

/// A site-level scatterer cluster: paths drawn from it share a mean direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub mean_deg: f64,
    pub spread_deg: f64,
    /// Mean path power relative to a unit-power reference, dB.
    pub power_db: f64,
    /// Relative selection probability.
    pub weight: f64,
}

/// Parameters of the clustered synthetic site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteGeometrySpec {
    pub clusters: Vec<ClusterSpec>,
    /// Sector from which user LoS directions are drawn, degrees.
    pub user_sector_deg: (f64, f64),
    pub blockage_prob: f64,
    /// LoS power relative to the strongest cluster's mean, dB.
    pub los_offset_db: f64,
    /// Log-normal shadowing standard deviation, dB.
    pub shadowing_db: f64,
    pub paths_per_user: usize,
}

impl Default for SiteGeometrySpec {
    fn default() -> Self {
        Self {
            clusters: vec![
                ClusterSpec { mean_deg: -42.0, spread_deg: 4.0, power_db: -3.0, weight: 0.4 },
                ClusterSpec { mean_deg: 12.0, spread_deg: 3.0, power_db: -6.0, weight: 0.35 },
                ClusterSpec { mean_deg: 48.0, spread_deg: 5.0, power_db: -9.0, weight: 0.25 },
            ],
            user_sector_deg: (-60.0, 60.0),
            blockage_prob: 0.4,
            los_offset_db: 6.0,
            shadowing_db: 4.0,
            paths_per_user: PATHS_PER_USER,
        }
    }
}

impl SiteGeometrySpec {
    pub fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() {
            return Err(config_err("cluster count must be at least 1"));
        }
        for (i, c) in self.clusters.iter().enumerate() {
            if !(c.spread_deg >= 0.0) {
                return Err(config_err(format!("cluster {i}: negative angular spread")));
            }
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(config_err(format!("cluster {i}: weight must be positive")));
            }
            if !(-90.0..=90.0).contains(&c.mean_deg) {
                return Err(config_err(format!("cluster {i}: mean angle outside [-90, 90]")));
            }
        }
        let (lo, hi) = self.user_sector_deg;
        if !(lo < hi && lo >= -90.0 && hi <= 90.0) {
            return Err(config_err("user sector must satisfy -90 <= lo < hi <= 90"));
        }
        if !(0.0..=1.0).contains(&self.blockage_prob) {
            return Err(config_err("blockage_prob must lie in [0, 1]"));
        }
        if !(self.shadowing_db >= 0.0) {
            return Err(config_err("negative shadowing spread"));
        }
        if self.paths_per_user == 0 {
            return Err(config_err("paths_per_user must be at least 1"));
        }
        Ok(())
    }
}

fn draw_user(array: &ArrayConfig, geo: &SiteGeometrySpec, seed: u64, user: usize) -> Channel {
    let mut rng = substream(seed, Stream::Site, &[user as u64]);
    let total_w: f64 = geo.clusters.iter().map(|c| c.weight).sum();
    let strongest = geo
        .clusters
        .iter()
        .map(|c| c.power_db)
        .fold(f64::NEG_INFINITY, f64::max);
    let shadow = Normal::new(0.0, geo.shadowing_db).expect("validated spread");

    let los = rng.random::<f64>() >= geo.blockage_prob;
    let mut paths = Vec::with_capacity(geo.paths_per_user);
    let gain = |power_db: f64, rng: &mut crate::rng::Rng| {
        let db = power_db + shadow.sample(rng);
        let phase = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
        Complex64::from_polar(10f64.powf(db / 20.0), phase)
    };
    if los {
        let (lo, hi) = geo.user_sector_deg;
        let az = lo + (hi - lo) * rng.random::<f64>();
        let g = gain(strongest + geo.los_offset_db, &mut rng);
        paths.push(PathParams { gain: g, azimuth_deg: az });
    }
    while paths.len() < geo.paths_per_user {
        let mut pick = rng.random::<f64>() * total_w;
        let mut k = geo.clusters.len() - 1;
        for (i, c) in geo.clusters.iter().enumerate() {
            if pick < c.weight {
                k = i;
                break;
            }
            pick -= c.weight;
        }
        let c = &geo.clusters[k];
        let z: f64 = StandardNormal.sample(&mut rng);
        let az = (c.mean_deg + c.spread_deg * z).clamp(-90.0, 90.0);
        let g = gain(c.power_db, &mut rng);
        paths.push(PathParams { gain: g, azimuth_deg: az });
    }
    let mut ch = synthesize_channel(array, &paths).expect("non-empty paths");
    ch.los = los;
    ch
}

/// Generates a clustered synthetic site. Pure in `(array, geometry, seed)`.
pub fn generate_synthetic_site(
    array: &ArrayConfig,
    num_users: usize,
    geometry: &SiteGeometrySpec,
    rng_seed: u64,
) -> Result<SiteDataset> {
    array.validate()?;
    geometry.validate()?;
    if num_users == 0 {
        return Err(config_err("num_users must be at least 1"));
    }
    let channels = par::map_range(num_users, |u| draw_user(array, geometry, rng_seed, u));
    Ok(SiteDataset {
        array: *array,
        channels,
        split_seed: rng_seed,
        train_ratio: 0.8,
        power_normalized: false,
    })
}

/// Shuffles `0..d` with `seed` and returns `(train, test)` index lists.
pub fn split_train_test(d: usize, train_ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(config_err(format!("train_ratio {train_ratio} outside (0, 1)")));
    }
    if d == 0 {
        return Err(config_err("cannot split an empty dataset"));
    }
    let mut idx: Vec<usize> = (0..d).collect();
    idx.shuffle(&mut substream(seed, Stream::Split, &[]));
    let n_train = (train_ratio * d as f64).round() as usize;
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    num_antennas: usize,
    spacing_over_wavelength: f64,
    carrier_freq_ghz: f64,
    num_users: usize,
    train_ratio: f64,
    split_seed: u64,
    #[serde(default)]
    power_normalized: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct PathRecord {
    user: usize,
    los: bool,
    paths: Vec<PathParams>,
}

fn fmt_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Format {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Writes `manifest.toml`, `channels.bin` and `paths.jsonl` into `dir`.
pub fn save_site(ds: &SiteDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        num_antennas: ds.array.num_antennas,
        spacing_over_wavelength: ds.array.spacing_over_wavelength,
        carrier_freq_ghz: ds.array.carrier_freq_ghz,
        num_users: ds.len(),
        train_ratio: ds.train_ratio,
        split_seed: ds.split_seed,
        power_normalized: ds.power_normalized,
    };
    let text = toml::to_string(&manifest).map_err(|e| fmt_err("manifest", e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;

    let n = ds.array.num_antennas;
    let mut buf = Vec::with_capacity(16 * n * ds.len());
    for (u, c) in ds.channels.iter().enumerate() {
        if c.len() != n {
            return Err(fmt_err("channels", format!("user {u} has {} antennas, array has {n}", c.len())));
        }
        for z in &c.h {
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    fs::write(dir.join(CHANNELS_FILE), buf)?;

    if ds.channels.iter().any(|c| !c.paths.is_empty() || c.los) {
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join(PATHS_FILE))?);
        for (user, c) in ds.channels.iter().enumerate() {
            let rec = PathRecord {
                user,
                los: c.los,
                paths: c.paths.clone(),
            };
            serde_json::to_writer(&mut f, &rec)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    Ok(())
}

/// Reads a dataset directory written by [`save_site`] (or by an external
/// exporter following the same layout).
pub fn load_site(dir: &Path) -> Result<SiteDataset> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Err(Error::Missing(mpath));
    }
    let manifest: Manifest =
        toml::from_str(&fs::read_to_string(&mpath)?).map_err(|e| fmt_err("manifest", e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(fmt_err(
            "format_version",
            format!("unsupported version {}", manifest.format_version),
        ));
    }
    let array = ArrayConfig {
        num_antennas: manifest.num_antennas,
        spacing_over_wavelength: manifest.spacing_over_wavelength,
        carrier_freq_ghz: manifest.carrier_freq_ghz,
    };
    array.validate()?;
    let n = array.num_antennas;
    let d = manifest.num_users;

    let cpath = dir.join(CHANNELS_FILE);
    if !cpath.exists() {
        return Err(Error::Missing(cpath));
    }
    let raw = fs::read(&cpath)?;
    let expected = 16 * n * d;
    if raw.len() != expected {
        return Err(fmt_err(
            "num_users x num_antennas",
            format!(
                "channel payload size mismatch: manifest implies {d} x {n} x 16 = {expected} bytes, found {}",
                raw.len()
            ),
        ));
    }
    let vals: Vec<f64> = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    let mut channels: Vec<Channel> = vals
        .chunks_exact(2 * n)
        .map(|row| Channel {
            h: row.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect(),
            paths: Vec::new(),
            los: false,
        })
        .collect();

    let ppath = dir.join(PATHS_FILE);
    if ppath.exists() {
        let reader = BufReader::new(fs::File::open(&ppath)?);
        let mut seen = 0usize;
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PathRecord = serde_json::from_str(&line)?;
            let c = channels
                .get_mut(rec.user)
                .ok_or_else(|| fmt_err("paths.user", format!("user {} out of range", rec.user)))?;
            c.paths = rec.paths;
            c.los = rec.los;
            seen += 1;
        }
        if seen != d {
            return Err(fmt_err("paths", format!("{seen} path records for {d} users")));
        }
    }
    for c in &channels {
        c.check_consistency(&array, 1e-9)?;
    }
    Ok(SiteDataset {
        array,
        channels,
        split_seed: manifest.split_seed,
        train_ratio: manifest.train_ratio,
        power_normalized: manifest.power_normalized,
    })
}

/// Writes arbitrary complex vectors (e.g. a codebook) in the channel binary
/// layout for inspection.
pub fn write_complex_rows(path: &Path, rows: &[Vec<Complex64>]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        for z in r {
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn arr(n: usize) -> ArrayConfig {
        ArrayConfig::new(n)
    }

    #[test]
    fn steering_broadside_is_flat() {
        let a = steering_vector(&arr(4), 0.0);
        for z in a {
            assert_abs_diff_eq!(z.re, 0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(z.im, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn steering_thirty_degrees_quarter_turns() {
        let a = steering_vector(&arr(4), 30.0);
        let want = [(0.5, 0.0), (0.0, 0.5), (-0.5, 0.0), (0.0, -0.5)];
        for (z, (re, im)) in a.iter().zip(want) {
            assert_abs_diff_eq!(z.re, re, epsilon = 1e-12);
            assert_abs_diff_eq!(z.im, im, epsilon = 1e-12);
        }
    }

    #[test]
    fn steering_unit_norm_and_modulus() {
        let a = steering_vector(&arr(64), 17.3);
        let norm: f64 = a.iter().map(|z| z.norm_sqr()).sum();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
        for z in &a {
            assert_abs_diff_eq!(z.norm(), 0.125, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_path_is_steering_vector() {
        let c = synthesize_channel(
            &arr(4),
            &[PathParams { gain: Complex64::new(1.0, 0.0), azimuth_deg: 0.0 }],
        )
        .unwrap();
        for z in &c.h {
            assert_abs_diff_eq!(z.re, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn symmetric_pair_is_real() {
        let a = arr(16);
        let one = Complex64::new(1.0, 0.0);
        let c = synthesize_channel(
            &a,
            &[
                PathParams { gain: one, azimuth_deg: 23.0 },
                PathParams { gain: one, azimuth_deg: -23.0 },
            ],
        )
        .unwrap();
        let p = steering_vector(&a, 23.0);
        let m = steering_vector(&a, -23.0);
        for i in 0..16 {
            assert_abs_diff_eq!(c.h[i].im, 0.0, epsilon = 1e-14);
            assert_abs_diff_eq!((c.h[i] - p[i] - m[i]).norm(), 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn empty_paths_rejected() {
        let e = synthesize_channel(&arr(4), &[]).unwrap_err();
        assert_eq!(e.to_string(), "no propagation paths");
    }

    #[test]
    fn generator_rejects_bad_geometry() {
        let mut g = SiteGeometrySpec::default();
        g.clusters.clear();
        assert!(matches!(generate_synthetic_site(&arr(8), 4, &g, 1), Err(Error::Config(_))));
        let mut g = SiteGeometrySpec::default();
        g.clusters[0].spread_deg = -1.0;
        assert!(matches!(generate_synthetic_site(&arr(8), 4, &g, 1), Err(Error::Config(_))));
        assert!(generate_synthetic_site(&arr(8), 0, &SiteGeometrySpec::default(), 1).is_err());
    }

    #[test]
    fn full_blockage_means_no_los() {
        let g = SiteGeometrySpec { blockage_prob: 1.0, ..Default::default() };
        let ds = generate_synthetic_site(&arr(16), 200, &g, 3).unwrap();
        assert!(ds.channels.iter().all(|c| !c.los));
        assert!(ds.channels.iter().all(|c| c.paths.len() == PATHS_PER_USER));
    }

    #[test]
    fn split_small() {
        let (tr, te) = split_train_test(10, 0.8, 5).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_train_test(10, 0.8, 5).unwrap(), (tr, te));
    }

    #[test]
    fn split_full_scale_counts() {
        let (tr, te) = split_train_test(100_000, 0.8, 11).unwrap();
        assert_eq!((tr.len(), te.len()), (80_000, 20_000));
    }

    #[test]
    fn split_rejects_bad_ratio() {
        assert!(split_train_test(10, 1.0, 0).is_err());
        assert!(split_train_test(10, 0.0, 0).is_err());
    }

    #[test]
    fn normalization_flag() {
        let mut ds = generate_synthetic_site(&arr(8), 5, &SiteGeometrySpec::default(), 2).unwrap();
        ds.normalize_power().unwrap();
        for c in &ds.channels {
            assert_abs_diff_eq!(c.norm_sqr(), 1.0, epsilon = 1e-12);
            c.check_consistency(&ds.array, 1e-12).unwrap();
        }
    }
}
