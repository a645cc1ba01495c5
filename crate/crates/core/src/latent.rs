//! Angular-domain representation of channels and beams.
//!
//! A channel `h` maps to its unitary DFT `H`, stored as a 2 x N real matrix:
//! row 0 holds `arg H` wrapped to `[-pi, pi)`, row 1 holds `|H| / max|H|`.
//! Beams are recovered by an inverse DFT followed by phase extraction, which
//! ignores any positive rescaling of the amplitude row.
//!
//! The diffusion model works in "model space": the phase row divided by pi,
//! the amplitude row unchanged.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::beams::{phase_or_zero, BeamformingVector, RsrpPrompt};
use crate::error::{config_err, Error, Result};
use crate::sitegen::Channel;

/// Offset added before converting powers to dB.
pub const PROMPT_EPS: f64 = 1e-12;

/// Real 2 x N matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    n: usize,
    data: Vec<f64>,
}

impl Latent {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; 2 * n] }
    }

    pub fn from_vec(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 2 * n {
            return Err(Error::Dimension { expected: 2 * n, got: data.len() });
        }
        Ok(Self { n, data })
    }

    pub fn from_rows(phase: &[f64], amp: &[f64]) -> Result<Self> {
        if phase.len() != amp.len() {
            return Err(Error::Dimension { expected: phase.len(), got: amp.len() });
        }
        let mut data = phase.to_vec();
        data.extend_from_slice(amp);
        Ok(Self { n: phase.len(), data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn phase(&self) -> &[f64] {
        &self.data[..self.n]
    }

    pub fn amplitude(&self) -> &[f64] {
        &self.data[self.n..]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Elementwise `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &Latent, b: f64) -> Latent {
        debug_assert_eq!(self.n, other.n);
        Latent {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect(),
        }
    }

    pub fn scale(&self, a: f64) -> Latent {
        Latent { n: self.n, data: self.data.iter().map(|x| a * x).collect() }
    }

    /// Phase row divided by pi.
    pub fn to_model_space(&self) -> Latent {
        let mut out = self.clone();
        out.data[..self.n].iter_mut().for_each(|p| *p /= PI);
        out
    }

    /// Inverse of [`Latent::to_model_space`].
    pub fn from_model_space(&self) -> Latent {
        let mut out = self.clone();
        out.data[..self.n].iter_mut().for_each(|p| *p *= PI);
        out
    }
}

/// A channel's angular-domain sample plus the amplitude scale removed from it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub x: Latent,
    pub scale: f64,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Unitary DFT `H[k] = (1/sqrt N) sum_m h[m] exp(-j 2 pi k m / N)`.
pub fn unitary_dft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    plan(x.len(), false).process(&mut buf);
    let s = 1.0 / (x.len() as f64).sqrt();
    buf.iter_mut().for_each(|z| *z *= s);
    buf
}

/// Unitary inverse DFT.
pub fn unitary_idft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    plan(x.len(), true).process(&mut buf);
    let s = 1.0 / (x.len() as f64).sqrt();
    buf.iter_mut().for_each(|z| *z *= s);
    buf
}

fn wrap_phase(p: f64) -> f64 {
    if p >= PI {
        p - 2.0 * PI
    } else {
        p
    }
}

/// Maps a channel into its angular-domain sample.
pub fn to_latent(h: &Channel) -> Result<LatentSample> {
    let ha = unitary_dft(&h.h);
    let scale = ha.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::DegenerateChannel);
    }
    let phase: Vec<f64> = ha.iter().map(|z| wrap_phase(phase_or_zero(*z))).collect();
    let amp: Vec<f64> = ha.iter().map(|z| z.norm() / scale).collect();
    Ok(LatentSample { x: Latent::from_rows(&phase, &amp)?, scale })
}

/// Rebuilds the complex channel `scale * IDFT(amp * exp(j phase))`.
pub fn reconstruct_channel(sample: &LatentSample) -> Vec<Complex64> {
    let spec: Vec<Complex64> = sample
        .x
        .phase()
        .iter()
        .zip(sample.x.amplitude())
        .map(|(&p, &a)| Complex64::from_polar(sample.scale * a, p))
        .collect();
    unitary_idft(&spec)
}

/// Reconstructs a constant-modulus beam from a raw-space 2 x N matrix.
///
/// An inverse-DFT output that is exactly zero is assigned phase 0.
pub fn from_latent(x: &Latent) -> Result<BeamformingVector> {
    if !x.is_finite() {
        return Err(config_err("latent matrix has non-finite entries"));
    }
    let spec: Vec<Complex64> = x
        .phase()
        .iter()
        .zip(x.amplitude())
        .map(|(&p, &a)| Complex64::new(a * p.cos(), a * p.sin()))
        .collect();
    Ok(BeamformingVector::from_weights(&unitary_idft(&spec)))
}

/// Per-component standardization statistics of dB prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl PromptStats {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Conditioning vector in model space.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPrompt {
    pub c: Vec<f64>,
    pub stats: PromptStats,
}

fn to_db(powers: &[f64]) -> Result<Vec<f64>> {
    powers
        .iter()
        .map(|&p| {
            if p < 0.0 || !p.is_finite() {
                Err(config_err(format!("invalid received power {p}")))
            } else {
                Ok(10.0 * (p + PROMPT_EPS).log10())
            }
        })
        .collect()
}

/// Fits per-component mean and standard deviation of dB prompts.
pub fn fit_prompt_stats<'a>(prompts: impl IntoIterator<Item = &'a RsrpPrompt>) -> Result<PromptStats> {
    let rows: Vec<Vec<f64>> = prompts
        .into_iter()
        .map(|p| to_db(&p.powers))
        .collect::<Result<_>>()?;
    let q = rows.first().map(Vec::len).ok_or_else(|| config_err("no prompts to fit"))?;
    if rows.iter().any(|r| r.len() != q) {
        return Err(config_err("prompts have differing lengths"));
    }
    let d = rows.len() as f64;
    let mean: Vec<f64> = (0..q).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / d).collect();
    let std: Vec<f64> = (0..q)
        .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / d).sqrt())
        .collect();
    if let Some(j) = std.iter().position(|&s| !(s > 1e-12)) {
        return Err(config_err(format!(
            "prompt component {j} is constant across the training set (degenerate site)"
        )));
    }
    Ok(PromptStats { mean, std })
}

/// `c[q] = (10 log10(p[q] + eps) - mean[q]) / std[q]`.
pub fn normalize_prompt(p: &RsrpPrompt, stats: &PromptStats) -> Result<NormalizedPrompt> {
    if p.powers.len() != stats.len() {
        return Err(Error::Dimension { expected: stats.len(), got: p.powers.len() });
    }
    if stats.std.iter().any(|&s| !(s > 0.0)) {
        return Err(config_err("prompt statistics have zero spread"));
    }
    let c = to_db(&p.powers)?
        .iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(x, (m, s))| (x - m) / s)
        .collect();
    Ok(NormalizedPrompt { c, stats: stats.clone() })
}

/// Recovers linear powers from a normalized prompt.
pub fn denormalize_prompt(np: &NormalizedPrompt) -> Vec<f64> {
    np.c
        .iter()
        .zip(np.stats.mean.iter().zip(&np.stats.std))
        .map(|(c, (m, s))| 10f64.powf((c * s + m) / 10.0) - PROMPT_EPS)
        .collect()
}
