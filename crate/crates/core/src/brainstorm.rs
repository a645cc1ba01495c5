//! Online inference: prompt, M deterministic reverse chains, mini-sweep.

use serde::{Deserialize, Serialize};

use crate::beams::{
    beam_gain, dft_codebook, measure_rsrp, BeamformingVector, Codebook, LinkBudget, MeasureConfig, RsrpPrompt,
};
use crate::diffusion::reverse_chain_batch;
use crate::error::{config_err, Error, Result};
use crate::latent::{from_latent, normalize_prompt, Latent};
use crate::rng::{substream, Stream};
use crate::sitegen::{ArrayConfig, Channel};
use crate::training::{gaussian_latent, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrainstormConfig {
    pub m: usize,
    pub q: usize,
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl BrainstormConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.m == 0 {
            return Err(config_err("brainstorm count M must be at least 1"));
        }
        if self.q == 0 || self.q > n {
            return Err(config_err(format!("Q = {} must lie in 1..={n}", self.q)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrainstormResult {
    pub user: usize,
    pub beams: Vec<BeamformingVector>,
    pub gains: Vec<f64>,
    pub best_index: usize,
    pub best_gain: f64,
    pub overhead: usize,
    pub q: usize,
}

impl BrainstormResult {
    fn from_beams(user: usize, q: usize, beams: Vec<BeamformingVector>, gains: Vec<f64>) -> Self {
        let (best_index, best_gain) = argmax_first(&gains);
        Self { user, overhead: overhead(q, beams.len()), beams, gains, best_index, best_gain, q }
    }

    /// The result a run with only the first `m` chains would have produced.
    pub fn prefix(&self, m: usize) -> Self {
        let m = m.clamp(1, self.beams.len());
        Self::from_beams(self.user, self.q, self.beams[..m].to_vec(), self.gains[..m].to_vec())
    }
}

fn argmax_first(xs: &[f64]) -> (usize, f64) {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bg), (i, &g)| if g > bg { (i, g) } else { (bi, bg) })
}

/// Sweeping overhead: `Q + M` when brainstorming, `Q` for a single beam.
pub fn overhead(q: usize, m: usize) -> usize {
    if m > 1 {
        q + m
    } else {
        q
    }
}

/// Percentage change of `overhead` relative to a `reference` sweep.
pub fn overhead_change_pct(overhead: usize, reference: usize) -> f64 {
    100.0 * (overhead as f64 - reference as f64) / reference as f64
}

/// Starting noise for chain `m` of `user`. Independent of `M`, so runs with
/// more chains extend runs with fewer.
pub fn initial_noise(seed: u64, user: usize, m: usize, n: usize) -> Latent {
    gaussian_latent(n, &mut substream(seed, Stream::ChainNoise, &[user as u64, m as u64]))
}

/// Probing measurement of `user`; noisy iff `snr_db` is set. The noise stream
/// depends only on `(seed, user)`, so every method sees the same prompt.
pub fn measure_user_prompt(
    h: &Channel,
    user: usize,
    indices: &[usize],
    codebook: &Codebook,
    snr_db: Option<f64>,
    seed: u64,
) -> Result<RsrpPrompt> {
    let measure = match snr_db {
        Some(s) => MeasureConfig::at_snr(s),
        None => MeasureConfig::noiseless(),
    };
    let mut rng = substream(seed, Stream::PromptNoise, &[user as u64]);
    measure_rsrp(h, codebook, indices, &LinkBudget::default(), &measure, &mut rng)
}

/// Measures and normalizes the prompt of `user`.
pub fn acquire_prompt(
    h: &Channel,
    user: usize,
    model: &TrainedModel,
    codebook: &Codebook,
    cfg: &BrainstormConfig,
) -> Result<Vec<f64>> {
    let p = measure_user_prompt(h, user, &model.probing_indices, codebook, cfg.snr_db, cfg.seed)?;
    Ok(normalize_prompt(&p, &model.stats)?.c)
}

fn check_model(model: &TrainedModel, cfg: &BrainstormConfig) -> Result<()> {
    cfg.validate(model.num_antennas)?;
    if model.prompt_len() != cfg.q {
        return Err(config_err(format!(
            "model was trained with Q = {} but Q = {} was requested",
            model.prompt_len(),
            cfg.q
        )));
    }
    Ok(())
}

/// Runs brainstorm inference for one user.
pub fn brainstorm(h: &Channel, user: usize, model: &TrainedModel, cfg: &BrainstormConfig) -> Result<BrainstormResult> {
    Ok(brainstorm_many(&[(user, h)], model, cfg)?.remove(0))
}

/// Users per reverse-chain batch.
const USERS_PER_BATCH: usize = 64;

/// Runs brainstorm inference for many users, batching all their chains
/// through the network together. Per-user results do not depend on batching.
pub fn brainstorm_many(
    users: &[(usize, &Channel)],
    model: &TrainedModel,
    cfg: &BrainstormConfig,
) -> Result<Vec<BrainstormResult>> {
    check_model(model, cfg)?;
    let n = model.num_antennas;
    let codebook = dft_codebook(&ArrayConfig::new(n));
    let mut out = Vec::with_capacity(users.len());
    for group in users.chunks(USERS_PER_BATCH) {
        let prompts = group
            .iter()
            .map(|&(u, h)| {
                if h.len() != n {
                    return Err(Error::Dimension { expected: n, got: h.len() });
                }
                acquire_prompt(h, u, model, &codebook, cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut states = Vec::with_capacity(group.len() * cfg.m);
        let mut conds: Vec<&[f64]> = Vec::with_capacity(group.len() * cfg.m);
        for (&(u, _), p) in group.iter().zip(&prompts) {
            for m in 0..cfg.m {
                states.push(initial_noise(cfg.seed, u, m, n));
                conds.push(p);
            }
        }
        let finals = reverse_chain_batch(states, &model.denoiser, &conds, &model.sched).map_err(|e| match e {
            Error::NonFinite { t, max_abs, index } => Error::Inference {
                chain: index % cfg.m,
                reason: format!("user {}: non-finite prediction at t = {t} (max |entry| = {max_abs})", group[index / cfg.m].0),
            },
            other => other,
        })?;
        for (k, &(u, h)) in group.iter().enumerate() {
            let mut beams = Vec::with_capacity(cfg.m);
            let mut gains = Vec::with_capacity(cfg.m);
            for m in 0..cfg.m {
                let x = finals[k * cfg.m + m].from_model_space();
                let w = from_latent(&x).map_err(|e| Error::Inference { chain: m, reason: e.to_string() })?;
                gains.push(beam_gain(h, &w)?);
                beams.push(w);
            }
            out.push(BrainstormResult::from_beams(u, cfg.q, beams, gains));
        }
    }
    Ok(out)
}
