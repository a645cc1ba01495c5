//! Run configuration: profile defaults, overlaid by a TOML file, overlaid by flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use bbs_core::denoiser::DenoiserConfig;
use bbs_core::diffusion::ScheduleConfig;
use bbs_core::evaluation::SweepSpec;
use bbs_core::sitegen::{ArrayConfig, SiteGeometrySpec};
use bbs_core::training::TrainConfig;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSection {
    pub num_antennas: usize,
    pub num_users: usize,
    pub train_ratio: f64,
    pub normalize_power: bool,
    pub geometry: SiteGeometrySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub level_channels: Vec<usize>,
    pub attention_heads: usize,
    pub attention_levels: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub q: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub schedule: ScheduleConfig,
    pub checkpoint_interval: usize,
    /// Infer with EMA weights rather than raw weights.
    pub use_ema: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub q_list: Vec<usize>,
    pub m_list: Vec<usize>,
    pub snr_db: Vec<f64>,
    /// Also evaluate noiseless prompts.
    pub noiseless: bool,
    /// Cap on test users; 0 means all.
    pub max_users: usize,
    pub baselines: bool,
    pub regressor_epochs: usize,
    pub seeds: Vec<u64>,
    /// Exhaustive sweep size the overhead table compares against.
    pub reference_beams: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub site: SiteSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        let n = match profile {
            Profile::Desk => 32,
            Profile::Full => 64,
        };
        let (dc, tc, users, q_list) = match profile {
            Profile::Desk => (DenoiserConfig::desk(8, n), TrainConfig::desk(8, 0), 5000, vec![4, 8, 16]),
            Profile::Full => (DenoiserConfig::full(9, n), TrainConfig::full(9, 0), 100_000, vec![9, 15, 21, 32, 64]),
        };
        Self {
            profile,
            seed: 0,
            site: SiteSection {
                num_antennas: n,
                num_users: users,
                train_ratio: 0.8,
                normalize_power: true,
                geometry: SiteGeometrySpec::default(),
            },
            model: ModelSection {
                level_channels: dc.level_channels,
                attention_heads: dc.attention_heads,
                attention_levels: dc.attention_levels,
                embed_dim: dc.embed_dim,
            },
            train: TrainSection {
                q: tc.prompt_len,
                epochs: tc.epochs,
                batch_size: tc.batch_size,
                learning_rate: tc.learning_rate,
                ema_decay: tc.ema_decay,
                schedule: tc.schedule,
                checkpoint_interval: tc.checkpoint_interval,
                use_ema: true,
            },
            eval: EvalSection {
                q_list,
                m_list: vec![1, 5, 8],
                snr_db: vec![10.0, 20.0, 30.0],
                noiseless: true,
                max_users: 0,
                baselines: true,
                regressor_epochs: tc.epochs,
                seeds: vec![0],
                reference_beams: 64,
            },
        }
    }

    /// Profile defaults overlaid with the keys present in `file`. Unknown keys
    /// are errors. An explicit `profile` beats the file's.
    pub fn load(profile: Option<Profile>, file: Option<&Path>) -> Result<Self> {
        let Some(path) = file else { return Ok(Self::defaults(profile.unwrap_or(Profile::Desk))) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut overlay: toml::Table =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let file_profile = match overlay.remove("profile") {
            Some(v) => Some(Profile::deserialize(v).with_context(|| format!("{}: key `profile`", path.display()))?),
            None => None,
        };
        let mut merged = toml::Table::try_from(Self::defaults(profile.or(file_profile).unwrap_or(Profile::Desk)))?;
        merge(&mut merged, overlay, "")?;
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .with_context(|| format!("config {} does not match the schema", path.display()))?;
        Ok(cfg)
    }

    pub fn array(&self) -> ArrayConfig {
        ArrayConfig::new(self.site.num_antennas)
    }

    pub fn denoiser(&self, q: usize) -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 2,
            level_channels: self.model.level_channels.clone(),
            attention_heads: self.model.attention_heads,
            attention_levels: self.model.attention_levels,
            embed_dim: self.model.embed_dim,
            prompt_len: q,
            seq_len: self.site.num_antennas,
        }
    }

    pub fn trainer(&self, q: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            ema_decay: self.train.ema_decay,
            schedule: self.train.schedule,
            prompt_len: q,
            seed: self.seed,
            checkpoint_interval: self.train.checkpoint_interval,
        }
    }

    pub fn sweep(&self) -> SweepSpec {
        let mut snr_list: Vec<Option<f64>> = Vec::new();
        if self.eval.noiseless {
            snr_list.push(None);
        }
        snr_list.extend(self.eval.snr_db.iter().map(|&s| Some(s)));
        SweepSpec {
            q_list: self.eval.q_list.clone(),
            m_list: self.eval.m_list.clone(),
            snr_list,
            seeds: self.eval.seeds.clone(),
            baselines: self.eval.baselines,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.array().validate()?;
        self.site.geometry.validate()?;
        self.denoiser(self.train.q).validate()?;
        self.sweep().validate()?;
        if self.train.q == 0 || self.train.q > self.site.num_antennas {
            bail!("train.q = {} must lie in 1..={}", self.train.q, self.site.num_antennas);
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn merge(base: &mut toml::Table, overlay: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in overlay {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &key)?,
            (Some(slot), v) => *slot = v,
            (None, _) => bail!("unknown config key `{key}`"),
        }
    }
    Ok(())
}
