//! DFT codebooks, constant-modulus beamformers, beam gains and RSRP probing.

use num_complex::Complex64;
use rand::Rng as RandRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::sitegen::{ArrayConfig, Channel};

/// Unit-norm analog beamformer with every element of modulus `1/sqrt(N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformingVector(Vec<Complex64>);

impl BeamformingVector {
    /// Builds `(1/sqrt N) exp(j theta_n)`.
    pub fn from_phases(phases: impl IntoIterator<Item = f64>) -> Self {
        let phases: Vec<f64> = phases.into_iter().collect();
        let amp = 1.0 / (phases.len() as f64).sqrt();
        Self(phases.into_iter().map(|p| Complex64::from_polar(amp, p)).collect())
    }

    /// Projects arbitrary complex weights onto the constant-modulus set by
    /// keeping their phases. Zero entries get phase 0.
    pub fn from_weights(weights: &[Complex64]) -> Self {
        Self::from_phases(weights.iter().map(|z| phase_or_zero(*z)))
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Largest deviation from the constant-modulus and unit-norm constraints.
    pub fn constraint_violation(&self) -> f64 {
        let target = 1.0 / (self.0.len() as f64).sqrt();
        let modulus = self
            .0
            .iter()
            .map(|z| (z.norm() - target).abs())
            .fold(0.0, f64::max);
        let norm: f64 = self.0.iter().map(|z| z.norm_sqr()).sum();
        modulus.max((norm.sqrt() - 1.0).abs())
    }
}

pub(crate) fn phase_or_zero(z: Complex64) -> f64 {
    if z.re == 0.0 && z.im == 0.0 {
        0.0
    } else {
        z.arg()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodebookKind {
    Dft,
    Generated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub beams: Vec<BeamformingVector>,
    pub kind: CodebookKind,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }
}

/// N orthonormal beams; beam `n` has elements `(1/sqrt N) exp(j 2 pi n m / N)`.
pub fn dft_codebook(array: &ArrayConfig) -> Codebook {
    let n = array.num_antennas;
    let beams = (0..n)
        .map(|b| {
            BeamformingVector::from_phases(
                (0..n).map(|m| 2.0 * std::f64::consts::PI * ((b * m) % n) as f64 / n as f64),
            )
        })
        .collect();
    Codebook {
        beams,
        kind: CodebookKind::Dft,
    }
}

/// Phase-matched beamformer `(1/sqrt N) exp(j arg h[n])`.
pub fn mrt_beamformer(h: &Channel) -> BeamformingVector {
    BeamformingVector::from_weights(&h.h)
}

/// `h^H w`.
pub fn inner(h: &[Complex64], w: &[Complex64]) -> Complex64 {
    h.iter().zip(w).map(|(a, b)| a.conj() * b).sum()
}

/// `|h^H w|^2`.
pub fn beam_gain(h: &Channel, w: &BeamformingVector) -> Result<f64> {
    if h.len() != w.len() {
        return Err(Error::Dimension {
            expected: h.len(),
            got: w.len(),
        });
    }
    Ok(inner(&h.h, w.as_slice()).norm_sqr())
}

/// Uniformly spaced probing indices `floor(q N / Q)`.
pub fn select_probing_indices(n: usize, q: usize) -> Result<Vec<usize>> {
    if q == 0 || q > n {
        return Err(config_err(format!("probing count Q={q} must satisfy 1 <= Q <= N={n}")));
    }
    Ok((0..q).map(|i| i * n / q).collect())
}

/// Transmit power and noise power, both linear.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub transmit_power: f64,
    pub noise_power: f64,
}

impl Default for LinkBudget {
    fn default() -> Self {
        Self {
            transmit_power: 1.0,
            noise_power: 0.0,
        }
    }
}

impl LinkBudget {
    /// Noise power such that the median probing beam sees `snr_db`.
    pub fn from_median_snr(transmit_power: f64, median_gain: f64, snr_db: f64) -> Self {
        let snr = 10f64.powf(snr_db / 10.0);
        Self {
            transmit_power,
            noise_power: transmit_power * median_gain / snr,
        }
    }

    /// One noisy received-power sample `|sqrt(P_T) g + n|^2 / P_T`.
    pub fn noisy_power<R: RandRng + ?Sized>(&self, response: Complex64, rng: &mut R) -> f64 {
        let s = (self.noise_power / 2.0).sqrt();
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        let y = self.transmit_power.sqrt() * response + Complex64::new(s * re, s * im);
        y.norm_sqr() / self.transmit_power
    }
}

/// How a prompt is measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureConfig {
    pub noisy: bool,
    pub snr_db: Option<f64>,
    /// Noisy samples averaged per probing beam.
    pub averages: usize,
}

impl MeasureConfig {
    pub fn noiseless() -> Self {
        Self {
            noisy: false,
            snr_db: None,
            averages: 1,
        }
    }

    pub fn at_snr(snr_db: f64) -> Self {
        Self {
            noisy: true,
            snr_db: Some(snr_db),
            averages: 1,
        }
    }
}

/// Probing-beam received powers (linear).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsrpPrompt {
    pub powers: Vec<f64>,
    pub probing_indices: Vec<usize>,
    pub noisy: bool,
    pub snr_db: Option<f64>,
}

fn check_indices(indices: &[usize], n: usize) -> Result<()> {
    if indices.is_empty() {
        return Err(config_err("empty probing index set"));
    }
    if indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(config_err("probing indices must be strictly increasing"));
    }
    if let Some(&last) = indices.last() {
        if last >= n {
            return Err(config_err(format!("probing index {last} outside codebook of {n}")));
        }
    }
    Ok(())
}

/// Sweeps the probing beams and records their received powers.
///
/// Noiseless mode returns `|h^H w_q|^2`. Noisy mode draws circular Gaussian
/// noise whose power puts the median probing beam at `snr_db`, and divides by
/// `P_T` so both modes share units.
pub fn measure_rsrp<R: RandRng + ?Sized>(
    h: &Channel,
    codebook: &Codebook,
    indices: &[usize],
    budget: &LinkBudget,
    cfg: &MeasureConfig,
    rng: &mut R,
) -> Result<RsrpPrompt> {
    check_indices(indices, codebook.len())?;
    let responses: Vec<Complex64> = indices
        .iter()
        .map(|&i| {
            let w = &codebook.beams[i];
            if w.len() != h.len() {
                return Err(Error::Dimension {
                    expected: h.len(),
                    got: w.len(),
                });
            }
            Ok(inner(&h.h, w.as_slice()))
        })
        .collect::<Result<_>>()?;
    let clean: Vec<f64> = responses.iter().map(|z| z.norm_sqr()).collect();
    if !cfg.noisy {
        return Ok(RsrpPrompt {
            powers: clean,
            probing_indices: indices.to_vec(),
            noisy: false,
            snr_db: None,
        });
    }
    let snr_db = cfg
        .snr_db
        .ok_or_else(|| config_err("noisy measurement requires snr_db"))?;
    if cfg.averages == 0 {
        return Err(config_err("averages must be at least 1"));
    }
    if !(budget.transmit_power > 0.0) {
        return Err(config_err("transmit power must be positive"));
    }
    let link = LinkBudget::from_median_snr(budget.transmit_power, median(&clean), snr_db);
    let powers = responses
        .iter()
        .map(|&g| {
            (0..cfg.averages)
                .map(|_| link.noisy_power(g, rng))
                .sum::<f64>()
                / cfg.averages as f64
        })
        .collect();
    Ok(RsrpPrompt {
        powers,
        probing_indices: indices.to_vec(),
        noisy: true,
        snr_db: Some(snr_db),
    })
}

/// Argmax of beam gain over the codebook; ties go to the lowest index.
pub fn exhaustive_search(h: &Channel, codebook: &Codebook) -> Result<(usize, f64)> {
    search_subset(h, codebook, 0..codebook.len())
}

/// Argmax restricted to `indices`, ties to the earliest candidate.
pub fn search_subset(
    h: &Channel,
    codebook: &Codebook,
    indices: impl IntoIterator<Item = usize>,
) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for i in indices {
        let g = beam_gain(h, &codebook.beams[i])?;
        if best.is_none_or(|(_, bg)| g > bg) {
            best = Some((i, g));
        }
    }
    best.ok_or_else(|| config_err("empty codebook"))
}

/// Median of a non-empty slice (mean of the two middle values for even length).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
