//! Offline training: dataset assembly, corrupted minibatches, Adam + EMA,
//! and binary checkpoints.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::beams::{dft_codebook, measure_rsrp, select_probing_indices, LinkBudget, MeasureConfig};
use crate::denoiser::{pack_latents, pack_prompts, Denoiser, DenoiserConfig, UNet};
use crate::diffusion::{forward_diffuse, NoiseSchedule, ScheduleConfig};
use crate::error::{config_err, Error, Result};
use crate::latent::{fit_prompt_stats, normalize_prompt, to_latent, Latent, PromptStats};
use crate::nn::{Grads, ParamStore, Real};
use crate::optim::{ema_update, Adam, AdamConfig};
use crate::par;
use crate::rng::{substream, Stream};
use crate::sitegen::SiteDataset;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BBSCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Samples per gradient shard. Fixed so results do not depend on thread count.
const GRAD_SHARD: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub schedule: ScheduleConfig,
    pub prompt_len: usize,
    pub seed: u64,
    /// Epochs between checkpoints written by long-running drivers.
    pub checkpoint_interval: usize,
}

impl TrainConfig {
    pub fn desk(prompt_len: usize, seed: u64) -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            learning_rate: 1e-3,
            ema_decay: 0.995,
            schedule: ScheduleConfig::linear(200),
            prompt_len,
            seed,
            checkpoint_interval: 10,
        }
    }

    pub fn full(prompt_len: usize, seed: u64) -> Self {
        Self {
            epochs: 300,
            learning_rate: 1e-4,
            schedule: ScheduleConfig::linear(1000),
            ..Self::desk(prompt_len, seed)
        }
    }

    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > dataset_len {
            return Err(config_err(format!(
                "batch_size {} must lie in 1..={dataset_len}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(config_err("learning_rate must be positive"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(config_err("ema_decay must lie in (0, 1)"));
        }
        if self.prompt_len == 0 {
            return Err(config_err("prompt_len must be positive"));
        }
        self.schedule.build().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Seconds since the trainer was created or restored.
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub user: usize,
    /// Target latent in model space.
    pub x0: Latent,
    /// Normalized prompt.
    pub cond: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub examples: Vec<TrainExample>,
    pub stats: PromptStats,
    pub probing_indices: Vec<usize>,
    pub num_antennas: usize,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Builds `(X0, noiseless prompt)` pairs for the given users and fits prompt
/// statistics on them.
pub fn build_training_set(site: &SiteDataset, users: &[usize], q: usize) -> Result<TrainingSet> {
    let n = site.array.num_antennas;
    let indices = select_probing_indices(n, q)?;
    let codebook = dft_codebook(&site.array);
    let budget = LinkBudget::default();
    let noiseless = MeasureConfig::noiseless();
    let mut rng = substream(0, Stream::PromptNoise, &[]);
    let mut prompts = Vec::with_capacity(users.len());
    let mut latents = Vec::with_capacity(users.len());
    for &u in users {
        let h = site.channels.get(u).ok_or_else(|| config_err(format!("user {u} out of range")))?;
        latents.push(to_latent(h)?.x.to_model_space());
        prompts.push(measure_rsrp(h, &codebook, &indices, &budget, &noiseless, &mut rng)?);
    }
    let stats = fit_prompt_stats(&prompts)?;
    let examples = users
        .iter()
        .zip(latents)
        .zip(&prompts)
        .map(|((&user, x0), p)| Ok(TrainExample { user, x0, cond: normalize_prompt(p, &stats)?.c }))
        .collect::<Result<_>>()?;
    Ok(TrainingSet { examples, stats, probing_indices: indices, num_antennas: n })
}

/// Standard-normal latent.
pub fn gaussian_latent<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Latent {
    Latent::from_vec(n, (0..2 * n).map(|_| StandardNormal.sample(rng)).collect()).expect("2n entries")
}

/// MSE between predictions and targets over a batch, with its gradient
/// accumulated into `g`. Returns `(sum of squared errors, count)`.
fn shard_loss<T: Real>(
    net: &UNet,
    p: &ParamStore<T>,
    xt: &[Latent],
    ts: &[usize],
    conds: &[&[f64]],
    targets: &[Latent],
    denom: f64,
) -> Result<(f64, Grads<T>)> {
    let x = pack_latents::<T>(xt);
    let c = pack_prompts::<T>(conds, net.config().prompt_len)?;
    let (y, cache) = net.forward_train(p, &x, ts, &c)?;
    let z = pack_latents::<T>(targets);
    let scale = T::lit(2.0 / denom);
    let mut sse = 0.0;
    let dy: Vec<T> = y
        .data
        .iter()
        .zip(&z.data)
        .map(|(&a, &b)| {
            let d = a - b;
            sse += d.to_f64().unwrap().powi(2);
            scale * d
        })
        .collect();
    let mut g = p.zeros_like();
    net.backward(p, &cache, &y.with_data(y.c, dy), &mut g);
    Ok((sse, g))
}

/// Mean squared error and its parameter gradient over a whole batch.
pub fn loss_and_grads<T: Real>(
    net: &UNet,
    p: &ParamStore<T>,
    xt: &[Latent],
    ts: &[usize],
    conds: &[&[f64]],
    targets: &[Latent],
) -> Result<(f64, Grads<T>)> {
    let b = xt.len();
    if b == 0 || ts.len() != b || conds.len() != b || targets.len() != b {
        return Err(config_err("batch components must be non-empty and equally long"));
    }
    let denom = (b * 2 * xt[0].n()) as f64;
    let shards = b.div_ceil(GRAD_SHARD);
    let parts = par::try_map_range(shards, |s| {
        let r = s * GRAD_SHARD..((s + 1) * GRAD_SHARD).min(b);
        shard_loss(net, p, &xt[r.clone()], &ts[r.clone()], &conds[r.clone()], &targets[r], denom)
    })?;
    let mut it = parts.into_iter();
    let (mut sse, mut g) = it.next().expect("at least one shard");
    for (s, gs) in it {
        sse += s;
        for (a, &v) in g.iter_scalars_mut().zip(gs.iter_scalars()) {
            *a += v;
        }
    }
    Ok((sse / denom, g))
}

/// Owns the model, its EMA shadow and the optimizer, and tracks the position
/// `(epoch, batch)` in the counter-based sample stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: UNet,
    pub params: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub sched: NoiseSchedule,
    pub stats: PromptStats,
    pub probing_indices: Vec<usize>,
    pub num_antennas: usize,
    /// Current epoch (0-based).
    pub epoch: usize,
    /// Next batch within the current epoch.
    pub batch: usize,
    pub step: u64,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: &DenoiserConfig, data: &TrainingSet) -> Result<Self> {
        cfg.validate(data.len())?;
        if model.prompt_len != cfg.prompt_len || data.probing_indices.len() != cfg.prompt_len {
            return Err(config_err(format!(
                "prompt length differs: model {}, training config {}, data {}",
                model.prompt_len,
                cfg.prompt_len,
                data.probing_indices.len()
            )));
        }
        if model.seq_len != data.num_antennas {
            return Err(config_err(format!(
                "model seq_len {} differs from {} antennas",
                model.seq_len, data.num_antennas
            )));
        }
        let mut rng = substream(cfg.seed, Stream::Init, &[]);
        let d = Denoiser::new(model, &mut rng)?;
        let adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), &d.params);
        Ok(Self {
            sched: cfg.schedule.build()?,
            ema: d.params.clone(),
            params: d.params,
            net: d.net,
            adam,
            cfg,
            stats: data.stats.clone(),
            probing_indices: data.probing_indices.clone(),
            num_antennas: data.num_antennas,
            epoch: 0,
            batch: 0,
            step: 0,
            started: Instant::now(),
        })
    }

    pub fn model_config(&self) -> &DenoiserConfig {
        self.net.config()
    }

    pub fn batches_per_epoch(&self, data_len: usize) -> usize {
        data_len.div_ceil(self.cfg.batch_size)
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// One Adam + EMA update on an explicit batch of corrupted inputs.
    pub fn train_step(
        &mut self,
        xt: &[Latent],
        ts: &[usize],
        conds: &[&[f64]],
        targets: &[Latent],
    ) -> Result<(f64, f64)> {
        let (loss, g) = loss_and_grads(&self.net, &self.params, xt, ts, conds, targets)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { batch: self.batch });
        }
        let gnorm = g.l2_norm();
        self.adam.step(&mut self.params, &g);
        ema_update(&mut self.ema, &self.params, self.cfg.ema_decay);
        self.step += 1;
        Ok((loss, gnorm))
    }

    fn order(&self, len: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut substream(self.cfg.seed, Stream::Shuffle, &[self.epoch as u64]));
        order
    }

    /// Trains on the next minibatch of the stream and advances the cursor.
    pub fn next_batch(&mut self, data: &TrainingSet) -> Result<TrainingRecord> {
        if data.is_empty() {
            return Err(config_err("empty training set"));
        }
        let order = self.order(data.len());
        let bs = self.cfg.batch_size;
        let lo = self.batch * bs;
        let hi = (lo + bs).min(data.len());
        let mut rng = substream(self.cfg.seed, Stream::Corrupt, &[self.epoch as u64, self.batch as u64]);
        let t_max = self.sched.steps();
        let mut xt = Vec::with_capacity(hi - lo);
        let mut ts = Vec::with_capacity(hi - lo);
        let mut zs = Vec::with_capacity(hi - lo);
        let mut conds = Vec::with_capacity(hi - lo);
        for &i in &order[lo..hi] {
            let ex = &data.examples[i];
            let t = rng.random_range(1..=t_max);
            let z = gaussian_latent(ex.x0.n(), &mut rng);
            xt.push(forward_diffuse(&ex.x0, t, &z, &self.sched)?);
            ts.push(t);
            zs.push(z);
            conds.push(ex.cond.as_slice());
        }
        let (loss, grad_norm) = self.train_step(&xt, &ts, &conds, &zs)?;
        let rec = TrainingRecord {
            epoch: self.epoch,
            step: self.step,
            loss,
            grad_norm,
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        self.batch += 1;
        if self.batch >= self.batches_per_epoch(data.len()) {
            self.batch = 0;
            self.epoch += 1;
        }
        Ok(rec)
    }

    /// Runs to the end of the current epoch.
    pub fn train_epoch(&mut self, data: &TrainingSet) -> Result<Vec<TrainingRecord>> {
        let epoch = self.epoch;
        let mut out = Vec::new();
        while self.epoch == epoch {
            out.push(self.next_batch(data)?);
        }
        Ok(out)
    }

    /// Inference model using EMA weights (default) or raw weights.
    pub fn model(&self, use_ema: bool) -> Result<TrainedModel> {
        let params = if use_ema { self.ema.clone() } else { self.params.clone() };
        Ok(TrainedModel {
            denoiser: Denoiser::with_params(self.model_config(), params)?,
            sched: self.sched.clone(),
            stats: self.stats.clone(),
            probing_indices: self.probing_indices.clone(),
            num_antennas: self.num_antennas,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            train: self.cfg.clone(),
            model: self.model_config().clone(),
            stats: self.stats.clone(),
            probing_indices: self.probing_indices.clone(),
            num_antennas: self.num_antennas,
            epoch: self.epoch,
            batch: self.batch,
            step: self.step,
            adam_t: self.adam.t,
            params: self.params.clone(),
            ema: self.ema.clone(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
        }
    }

    /// Restores a trainer. With `expected` set, any difference in trajectory-
    /// relevant settings is refused; `epochs` and `checkpoint_interval` may change.
    pub fn from_checkpoint(ck: Checkpoint, expected: Option<(&TrainConfig, &DenoiserConfig)>) -> Result<Self> {
        let mut cfg = ck.train.clone();
        if let Some((tc, mc)) = expected {
            let mut lhs = ck.train.clone();
            lhs.epochs = tc.epochs;
            lhs.checkpoint_interval = tc.checkpoint_interval;
            let mut diffs = diff_fields("train", &lhs, tc);
            diffs.extend(diff_fields("model", &ck.model, mc));
            if !diffs.is_empty() {
                return Err(Error::ConfigMismatch(diffs.join("; ")));
            }
            cfg = tc.clone();
        }
        let (net, layout) = UNet::new::<f32>(&ck.model)?;
        for (name, store) in [("params", &ck.params), ("ema", &ck.ema), ("adam_m", &ck.adam_m), ("adam_v", &ck.adam_v)] {
            if !layout.same_layout(store) {
                return Err(Error::ConfigMismatch(format!("{name} tensors do not match the model layout")));
            }
        }
        Ok(Self {
            sched: cfg.schedule.build()?,
            adam: Adam { cfg: AdamConfig::with_lr(cfg.learning_rate), m: ck.adam_m, v: ck.adam_v, t: ck.adam_t },
            cfg,
            net,
            params: ck.params,
            ema: ck.ema,
            stats: ck.stats,
            probing_indices: ck.probing_indices,
            num_antennas: ck.num_antennas,
            epoch: ck.epoch,
            batch: ck.batch,
            step: ck.step,
            started: Instant::now(),
        })
    }
}

/// Everything online inference needs.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub denoiser: Denoiser,
    pub sched: NoiseSchedule,
    pub stats: PromptStats,
    pub probing_indices: Vec<usize>,
    pub num_antennas: usize,
}

impl TrainedModel {
    pub fn prompt_len(&self) -> usize {
        self.probing_indices.len()
    }
}

/// Lists `prefix.field: a -> b` for every top-level field that differs.
pub fn diff_fields<S: Serialize>(prefix: &str, a: &S, b: &S) -> Vec<String> {
    let (va, vb) = match (serde_json::to_value(a), serde_json::to_value(b)) {
        (Ok(x), Ok(y)) => (x, y),
        _ => return vec![format!("{prefix}: not comparable")],
    };
    match (va, vb) {
        (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => {
            let mut keys: Vec<&String> = ma.keys().chain(mb.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter()
                .filter(|k| ma.get(*k) != mb.get(*k))
                .map(|k| {
                    let show = |v: Option<&serde_json::Value>| v.map_or("<absent>".to_string(), |v| v.to_string());
                    format!("{prefix}.{k}: checkpoint {} vs requested {}", show(ma.get(k)), show(mb.get(k)))
                })
                .collect()
        }
        (x, y) if x != y => vec![format!("{prefix}: checkpoint {x} vs requested {y}")],
        _ => Vec::new(),
    }
}

/// Full training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub model: DenoiserConfig,
    pub stats: PromptStats,
    pub probing_indices: Vec<usize>,
    pub num_antennas: usize,
    pub epoch: usize,
    pub batch: usize,
    pub step: u64,
    pub adam_t: u64,
    pub params: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub adam_m: ParamStore<f32>,
    pub adam_v: ParamStore<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    train: TrainConfig,
    model: DenoiserConfig,
    stats: PromptStats,
    probing_indices: Vec<usize>,
    num_antennas: usize,
    epoch: usize,
    batch: usize,
    step: u64,
    adam_t: u64,
    /// Layout shared by the four tensor groups, stored in the order
    /// params, ema, adam_m, adam_v.
    tensors: Vec<TensorEntry>,
}

const GROUPS: usize = 4;

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            train: self.train.clone(),
            model: self.model.clone(),
            stats: self.stats.clone(),
            probing_indices: self.probing_indices.clone(),
            num_antennas: self.num_antennas,
            epoch: self.epoch,
            batch: self.batch,
            step: self.step,
            adam_t: self.adam_t,
            tensors: self
                .params
                .tensors()
                .iter()
                .map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * GROUPS * self.params.num_scalars() + 32);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for store in [&self.params, &self.ema, &self.adam_m, &self.adam_v] {
            for x in store.iter_scalars() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Integrity { path: path.to_path_buf(), reason: reason.to_string() };
        if bytes.len() < 8 + 8 + 32 {
            return Err(bad("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        if &body[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("header length"))?;
        let header: Header = serde_json::from_slice(&body[16..payload_start])?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        let (_, layout) = UNet::new::<f32>(&header.model)?;
        let declared: Vec<(&str, &[usize])> = header.tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice())).collect();
        let actual: Vec<(&str, &[usize])> = layout.tensors().iter().map(|t| (t.name.as_str(), t.shape.as_slice())).collect();
        if declared != actual {
            return Err(Error::ConfigMismatch("tensor table does not match the model config".into()));
        }
        let payload = &body[payload_start..];
        let per_group = layout.num_scalars();
        if payload.len() != 4 * GROUPS * per_group {
            return Err(bad("payload size"));
        }
        let mut floats = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut read_group = || {
            let mut s = layout.clone();
            s.iter_scalars_mut().for_each(|x| *x = floats.next().expect("sized above"));
            s
        };
        let (params, ema, adam_m, adam_v) = (read_group(), read_group(), read_group(), read_group());
        Ok(Self {
            train: header.train,
            model: header.model,
            stats: header.stats,
            probing_indices: header.probing_indices,
            num_antennas: header.num_antennas,
            epoch: header.epoch,
            batch: header.batch,
            step: header.step,
            adam_t: header.adam_t,
            params,
            ema,
            adam_m,
            adam_v,
        })
    }

    /// Inference model from this checkpoint.
    pub fn into_model(self, use_ema: bool) -> Result<TrainedModel> {
        let params = if use_ema { self.ema } else { self.params };
        Ok(TrainedModel {
            denoiser: Denoiser::with_params(&self.model, params)?,
            sched: self.train.schedule.build()?,
            stats: self.stats,
            probing_indices: self.probing_indices,
            num_antennas: self.num_antennas,
        })
    }
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ck.to_bytes()?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&std::fs::read(path)?, path)
}
