//! Discriminative baseline: an MLP regressing the latent from the prompt.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::denoiser::{pack_prompts, unpack_latents};
use crate::error::{config_err, Error, Result};
use crate::latent::{Latent, PromptStats};
use crate::nn::ops::{gelu, gelu_backward, Feat, Linear};
use crate::nn::ParamStore;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{substream, Stream};
use crate::training::TrainingSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl RegressorConfig {
    /// Hidden width whose parameter count is closest to `budget`.
    pub fn matched(budget: usize, q: usize, n: usize, epochs: usize, seed: u64) -> Self {
        let count = |h: usize| (q + 1) * h + (h + 1) * h + (h + 1) * 2 * n;
        let hidden = (1..=4096).min_by_key(|&h| count(h).abs_diff(budget)).unwrap_or(1);
        Self { hidden, epochs, batch_size: 32, learning_rate: 1e-3, seed }
    }
}

/// `Q -> hidden -> hidden -> 2N` with GELU between layers.
#[derive(Debug, Clone)]
pub struct Regressor {
    l1: Linear,
    l2: Linear,
    l3: Linear,
    pub params: ParamStore<f32>,
    pub q: usize,
    pub n: usize,
    /// Prompt normalization and probing set of the training data.
    pub stats: PromptStats,
    pub probing_indices: Vec<usize>,
}

struct Acts {
    x: Vec<f32>,
    u1: Vec<f32>,
    a1: Vec<f32>,
    u2: Vec<f32>,
    a2: Vec<f32>,
}

impl Regressor {
    pub fn new(q: usize, n: usize, hidden: usize, seed: u64, stats: PromptStats, probing_indices: Vec<usize>) -> Self {
        let mut params = ParamStore::new();
        let l1 = Linear::new(&mut params, "fc1", q, hidden);
        let l2 = Linear::new(&mut params, "fc2", hidden, hidden);
        let l3 = Linear::new(&mut params, "fc3", hidden, 2 * n);
        let mut rng = substream(seed, Stream::Baseline, &[0]);
        for l in [&l1, &l2, &l3] {
            l.init(&mut params, &mut rng);
        }
        Self { l1, l2, l3, params, q, n, stats, probing_indices }
    }

    fn forward(&self, x: Vec<f32>, b: usize) -> (Vec<f32>, Acts) {
        let u1 = self.l1.forward(&self.params, &x, b);
        let a1 = gelu(&u1);
        let u2 = self.l2.forward(&self.params, &a1, b);
        let a2 = gelu(&u2);
        let y = self.l3.forward(&self.params, &a2, b);
        (y, Acts { x, u1, a1, u2, a2 })
    }

    /// Predicted latents (model space).
    pub fn predict(&self, conds: &[&[f64]]) -> Result<Vec<Latent>> {
        let b = conds.len();
        let x = pack_prompts::<f32>(conds, self.q)?;
        let (y, _) = self.forward(x, b);
        Ok(unpack_latents(&Feat::from_data(2, b, self.n, rows_to_feat(&y, b, self.n))))
    }

    /// One Adam step on a batch; returns the MSE.
    fn step(&mut self, adam: &mut Adam<f32>, conds: &[&[f64]], targets: &[Latent]) -> Result<f64> {
        let b = conds.len();
        let x = pack_prompts::<f32>(conds, self.q)?;
        let (y, acts) = self.forward(x, b);
        let z = feat_to_rows(&crate::denoiser::pack_latents::<f32>(targets));
        let denom = (y.len()) as f64;
        let mut sse = 0.0;
        let dy: Vec<f32> = y
            .iter()
            .zip(&z)
            .map(|(&a, &t)| {
                let d = a - t;
                sse += (d as f64).powi(2);
                (2.0 / denom) as f32 * d
            })
            .collect();
        let mut g = self.params.zeros_like();
        let da2 = self.l3.backward(&self.params, &acts.a2, b, &dy, &mut g, true).unwrap();
        let du2 = gelu_backward(&acts.u2, &da2);
        let da1 = self.l2.backward(&self.params, &acts.a1, b, &du2, &mut g, true).unwrap();
        let du1 = gelu_backward(&acts.u1, &da1);
        self.l1.backward(&self.params, &acts.x, b, &du1, &mut g, false);
        adam.step(&mut self.params, &g);
        Ok(sse / denom)
    }
}

/// `[2, B, N]` feature layout to `[2N, B]` columns.
fn feat_to_rows(f: &Feat<f32>) -> Vec<f32> {
    let (b, n) = (f.b, f.l);
    let mut out = vec![0.0; 2 * n * b];
    for c in 0..2 {
        for j in 0..b {
            for i in 0..n {
                out[(c * n + i) * b + j] = f.data[f.idx(c, j, i)];
            }
        }
    }
    out
}

fn rows_to_feat(y: &[f32], b: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; 2 * n * b];
    for c in 0..2 {
        for j in 0..b {
            for i in 0..n {
                out[(c * b + j) * n + i] = y[(c * n + i) * b + j];
            }
        }
    }
    out
}

/// Trains the regressor with MSE on the training latents. Divergence is an error.
pub fn train_regressor(data: &TrainingSet, cfg: &RegressorConfig) -> Result<(Regressor, Vec<f64>)> {
    if data.is_empty() {
        return Err(config_err("empty training set"));
    }
    if cfg.batch_size == 0 {
        return Err(config_err("batch_size must be positive"));
    }
    let q = data.probing_indices.len();
    let mut reg = Regressor::new(
        q,
        data.num_antennas,
        cfg.hidden,
        cfg.seed,
        data.stats.clone(),
        data.probing_indices.clone(),
    );
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), &reg.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut substream(cfg.seed, Stream::Baseline, &[1, epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0;
        for (k, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let conds: Vec<&[f64]> = chunk.iter().map(|&i| data.examples[i].cond.as_slice()).collect();
            let targets: Vec<Latent> = chunk.iter().map(|&i| data.examples[i].x0.clone()).collect();
            let loss = reg.step(&mut adam, &conds, &targets)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { batch: k });
            }
            total += loss;
            batches += 1;
        }
        losses.push(total / batches as f64);
    }
    Ok((reg, losses))
}
