//! Conditional noise-prediction U-Net over 2 x N latents.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::error::{config_err, Error, Result};
use crate::latent::Latent;
use crate::nn::ops::{
    broadcast_add, concat_channels, gelu, gelu_backward, maxpool2, maxpool2_backward, split_channels,
    sum_over_length, upsample2, upsample2_backward, AttnCache, Attention, Conv1d, Feat, Linear,
};
use crate::nn::{Grads, ParamStore, Real};
use crate::par;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    /// Encoder output widths; the last entry is the bridge.
    pub level_channels: Vec<usize>,
    pub attention_heads: usize,
    /// Number of coarsest resolutions that get self-attention.
    pub attention_levels: usize,
    pub embed_dim: usize,
    pub prompt_len: usize,
    pub seq_len: usize,
}

impl DenoiserConfig {
    pub fn desk(prompt_len: usize, seq_len: usize) -> Self {
        Self {
            in_channels: 2,
            level_channels: vec![32, 64, 128],
            attention_heads: 4,
            attention_levels: 2,
            embed_dim: 128,
            prompt_len,
            seq_len,
        }
    }

    pub fn full(prompt_len: usize, seq_len: usize) -> Self {
        Self {
            in_channels: 2,
            level_channels: vec![64, 128, 256, 512, 1024],
            attention_heads: 4,
            attention_levels: 5,
            embed_dim: 256,
            prompt_len,
            seq_len,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.level_channels.len()
    }

    fn has_attention(&self, level: usize) -> bool {
        level + self.attention_levels >= self.num_levels()
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.num_levels();
        if levels < 2 {
            return Err(config_err("level_channels needs at least one encoder level and a bridge"));
        }
        if self.in_channels == 0 || self.prompt_len == 0 || self.seq_len == 0 {
            return Err(config_err("in_channels, prompt_len and seq_len must be positive"));
        }
        if self.level_channels.contains(&0) {
            return Err(config_err("level_channels entries must be positive"));
        }
        let div = 1usize << (levels - 1);
        if !self.seq_len.is_multiple_of(div) {
            return Err(config_err(format!(
                "seq_len {} is not divisible by 2^{} required by {} levels",
                self.seq_len,
                levels - 1,
                levels
            )));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return Err(config_err(format!("embed_dim {} must be even and positive", self.embed_dim)));
        }
        if self.attention_levels > levels {
            return Err(config_err("attention_levels exceeds the number of levels"));
        }
        if self.attention_heads == 0 {
            return Err(config_err("attention_heads must be positive"));
        }
        for (i, &c) in self.level_channels.iter().enumerate() {
            if self.has_attention(i) && c % self.attention_heads != 0 {
                return Err(config_err(format!(
                    "level {i} width {c} is not divisible by {} heads",
                    self.attention_heads
                )));
            }
        }
        Ok(())
    }
}

/// Sinusoidal timestep embedding: `v[2i] = sin(t / 10000^(2i/E))`, `v[2i+1] = cos(..)`.
pub fn time_embedding(t: usize, embed_dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; embed_dim];
    for i in 0..embed_dim / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / embed_dim as f64);
        let arg = t as f64 * freq;
        v[2 * i] = arg.sin();
        v[2 * i + 1] = arg.cos();
    }
    v
}

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv1d,
    conv2: Conv1d,
    res: Option<Conv1d>,
    emb: Linear,
    attn: Option<Attention>,
}

struct BlockCache<T> {
    x: Feat<T>,
    col1: Vec<T>,
    h1: Feat<T>,
    col2: Vec<T>,
    a2: Feat<T>,
    res_col: Vec<T>,
    pre_attn: Feat<T>,
    attn: Option<AttnCache<T>>,
}

impl Block {
    fn new<T: Real>(p: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, cfg: &DenoiserConfig, attn: bool) -> Self {
        Self {
            conv1: Conv1d::new(p, &format!("{name}.conv1"), cin, cout, 3),
            conv2: Conv1d::new(p, &format!("{name}.conv2"), cout, cout, 3),
            res: (cin != cout).then(|| Conv1d::new(p, &format!("{name}.res"), cin, cout, 1)),
            emb: Linear::new(p, &format!("{name}.emb"), cfg.embed_dim, cout),
            attn: attn.then(|| Attention::new(p, &format!("{name}.attn"), cout, cfg.attention_heads)),
        }
    }

    fn init<T: Real, R: Rng + ?Sized>(&self, p: &mut ParamStore<T>, rng: &mut R) {
        self.conv1.lin.init(p, rng);
        self.conv2.lin.init(p, rng);
        if let Some(r) = &self.res {
            r.lin.init(p, rng);
        }
        self.emb.init(p, rng);
        if let Some(a) = &self.attn {
            a.init(p, rng);
        }
    }

    fn forward<T: Real>(&self, p: &ParamStore<T>, x: Feat<T>, emb: &[T]) -> (Feat<T>, BlockCache<T>) {
        let a1 = x.with_data(x.c, gelu(&x.data));
        let (h1, col1) = self.conv1.forward(p, &a1);
        let a2 = h1.with_data(h1.c, gelu(&h1.data));
        let (mut out, col2) = self.conv2.forward(p, &a2);
        let res_col = match &self.res {
            Some(r) => {
                let (rx, col) = r.forward(p, &x);
                out.add_assign(&rx);
                col
            }
            None => {
                out.add_assign(&x);
                Vec::new()
            }
        };
        let proj = self.emb.forward(p, emb, x.b);
        broadcast_add(&mut out, &proj);
        let (out, pre_attn, attn) = match &self.attn {
            Some(a) => {
                let (y, cache) = a.forward(p, &out);
                let mut o = out.clone();
                o.add_assign(&y);
                (o, out, Some(cache))
            }
            None => (out.clone(), out, None),
        };
        let cache = BlockCache { x, col1, h1, col2, a2, res_col, pre_attn, attn };
        (out, cache)
    }

    /// Returns `dL/dx`; adds into `demb`.
    fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        c: &BlockCache<T>,
        dout: Feat<T>,
        emb: &[T],
        demb: &mut [T],
        g: &mut Grads<T>,
    ) -> Feat<T> {
        let mut d = dout;
        if let (Some(a), Some(ac)) = (&self.attn, &c.attn) {
            let da = a.backward(p, &c.pre_attn, ac, &d, g);
            d.add_assign(&da);
        }
        let dproj = sum_over_length(&d);
        let de = self.emb.backward(p, emb, c.x.b, &dproj, g, true).unwrap();
        for (a, b) in demb.iter_mut().zip(de) {
            *a += b;
        }
        let da2 = self.conv2.backward(p, &c.a2, &c.col2, &d, g);
        let dh1 = c.h1.with_data(c.h1.c, gelu_backward(&c.h1.data, &da2.data));
        // conv1 has k = 3, so its backward reads only the im2col buffer and x's shape.
        let da1 = self.conv1.backward(p, &c.x, &c.col1, &dh1, g);
        let mut dx = c.x.with_data(c.x.c, gelu_backward(&c.x.data, &da1.data));
        match &self.res {
            Some(r) => dx.add_assign(&r.backward(p, &c.x, &c.res_col, &d, g)),
            None => dx.add_assign(&d),
        }
        dx
    }
}

/// Parameter layout of the U-Net. Holds ids only; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct UNet {
    cfg: DenoiserConfig,
    cond1: Linear,
    cond2: Linear,
    enc: Vec<Block>,
    dec: Vec<Block>,
    out: Conv1d,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache<T> {
    b: usize,
    cond: Vec<T>,
    u: Vec<T>,
    gu: Vec<T>,
    emb: Vec<T>,
    enc: Vec<BlockCache<T>>,
    pool_arg: Vec<Vec<u8>>,
    dec: Vec<BlockCache<T>>,
    skip_c: Vec<usize>,
    last: Feat<T>,
}

impl UNet {
    /// Builds the layout and a zero-filled parameter store.
    pub fn new<T: Real>(cfg: &DenoiserConfig) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        let e = cfg.embed_dim;
        let cond1 = Linear::new(&mut p, "cond.fc1", cfg.prompt_len, e);
        let cond2 = Linear::new(&mut p, "cond.fc2", e, e);
        let lv = &cfg.level_channels;
        let levels = lv.len();
        let mut enc = Vec::with_capacity(levels);
        for i in 0..levels {
            let cin = if i == 0 { cfg.in_channels } else { lv[i - 1] };
            let name = if i + 1 == levels { "bridge".to_string() } else { format!("enc{i}") };
            enc.push(Block::new(&mut p, &name, cin, lv[i], cfg, cfg.has_attention(i)));
        }
        let mut dec = Vec::with_capacity(levels - 1);
        for i in (0..levels - 1).rev() {
            dec.push(Block::new(&mut p, &format!("dec{i}"), lv[i + 1] + lv[i], lv[i], cfg, cfg.has_attention(i)));
        }
        let out = Conv1d::new(&mut p, "out", lv[0], cfg.in_channels, 1);
        Ok((Self { cfg: cfg.clone(), cond1, cond2, enc, dec, out }, p))
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Fan-in uniform init with a zero output layer.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, p: &mut ParamStore<T>, rng: &mut R) {
        self.cond1.init(p, rng);
        self.cond2.init(p, rng);
        for b in self.enc.iter().chain(&self.dec) {
            b.init(p, rng);
        }
        self.out.lin.zero(p);
    }

    /// Condition embedding of a `[Q, B]` column batch.
    pub fn condition_embedding<T: Real>(&self, p: &ParamStore<T>, cond: &[T], b: usize) -> Result<Vec<T>> {
        if cond.len() != self.cfg.prompt_len * b {
            return Err(Error::Dimension { expected: self.cfg.prompt_len * b, got: cond.len() });
        }
        let u = self.cond1.forward(p, cond, b);
        Ok(self.cond2.forward(p, &gelu(&u), b))
    }

    fn fused_embedding<T: Real>(&self, ts: &[usize], cemb: &[T]) -> Vec<T> {
        let (e, b) = (self.cfg.embed_dim, ts.len());
        let mut emb = cemb.to_vec();
        for (j, &t) in ts.iter().enumerate() {
            for (k, v) in time_embedding(t, e).into_iter().enumerate() {
                emb[k * b + j] += T::lit(v);
            }
        }
        emb
    }

    fn check_input<T: Real>(&self, x: &Feat<T>, ts: &[usize], cond: &[T]) -> Result<()> {
        if x.c != self.cfg.in_channels || x.l != self.cfg.seq_len {
            return Err(Error::Dimension {
                expected: self.cfg.in_channels * self.cfg.seq_len,
                got: x.c * x.l,
            });
        }
        if ts.len() != x.b {
            return Err(Error::Dimension { expected: x.b, got: ts.len() });
        }
        if cond.len() != self.cfg.prompt_len * x.b {
            return Err(Error::Dimension { expected: self.cfg.prompt_len * x.b, got: cond.len() });
        }
        Ok(())
    }

    /// Noise prediction for `x` (`[C, B, N]`), per-sample timesteps and
    /// column-batched prompts `[Q, B]`.
    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Feat<T>, ts: &[usize], cond: &[T]) -> Result<Feat<T>> {
        Ok(self.forward_impl(p, x, ts, cond, None)?.0)
    }

    /// Like [`UNet::forward`] but replaces the skip tensor at `level` by zeros.
    pub fn forward_ablated<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &Feat<T>,
        ts: &[usize],
        cond: &[T],
        level: usize,
    ) -> Result<Feat<T>> {
        Ok(self.forward_impl(p, x, ts, cond, Some(level))?.0)
    }

    pub fn forward_train<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &Feat<T>,
        ts: &[usize],
        cond: &[T],
    ) -> Result<(Feat<T>, ForwardCache<T>)> {
        self.forward_impl(p, x, ts, cond, None)
    }

    fn forward_impl<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &Feat<T>,
        ts: &[usize],
        cond: &[T],
        ablate: Option<usize>,
    ) -> Result<(Feat<T>, ForwardCache<T>)> {
        self.check_input(x, ts, cond)?;
        let b = x.b;
        let u = self.cond1.forward(p, cond, b);
        let gu = gelu(&u);
        let cemb = self.cond2.forward(p, &gu, b);
        let emb = self.fused_embedding(ts, &cemb);

        let levels = self.enc.len();
        let mut enc_caches = Vec::with_capacity(levels);
        let mut skips = Vec::with_capacity(levels - 1);
        let mut pool_arg = Vec::with_capacity(levels - 1);
        let mut h = x.clone();
        for (i, blk) in self.enc.iter().enumerate() {
            let (y, c) = blk.forward(p, h, &emb);
            enc_caches.push(c);
            if i + 1 < levels {
                let (pooled, arg) = maxpool2(&y);
                pool_arg.push(arg);
                skips.push(y);
                h = pooled;
            } else {
                h = y;
            }
        }
        let mut dec_caches = Vec::with_capacity(levels - 1);
        let mut skip_c = Vec::with_capacity(levels - 1);
        for (k, blk) in self.dec.iter().enumerate() {
            let level = levels - 2 - k;
            let up = upsample2(&h);
            let mut skip = skips.pop().expect("one skip per decoder block");
            if ablate == Some(level) {
                skip.data.iter_mut().for_each(|v| *v = T::zero());
            }
            skip_c.push(up.c);
            let cat = concat_channels(&up, &skip);
            let (y, c) = blk.forward(p, cat, &emb);
            dec_caches.push(c);
            h = y;
        }
        let (out, _) = self.out.forward(p, &h);
        let cache = ForwardCache {
            b,
            cond: cond.to_vec(),
            u,
            gu,
            emb,
            enc: enc_caches,
            pool_arg,
            dec: dec_caches,
            skip_c,
            last: h,
        };
        Ok((out, cache))
    }

    /// Accumulates `dL/dparams` into `g` given `dL/dout`.
    pub fn backward<T: Real>(&self, p: &ParamStore<T>, cache: &ForwardCache<T>, dout: &Feat<T>, g: &mut Grads<T>) {
        let b = cache.b;
        let mut demb = vec![T::zero(); cache.emb.len()];
        let dlast = self.out.backward(p, &cache.last, &[], dout, g);
        let levels = self.enc.len();
        let mut dskips: Vec<Feat<T>> = Vec::with_capacity(levels - 1);
        let mut d = dlast;
        for (k, blk) in self.dec.iter().enumerate().rev() {
            let dcat = blk.backward(p, &cache.dec[k], d, &cache.emb, &mut demb, g);
            let (dup, dskip) = split_channels(&dcat, cache.skip_c[k]);
            dskips.push(dskip);
            d = upsample2_backward(&dup);
        }
        // dskips now ordered from finest (level 0) to coarsest.
        for (i, blk) in self.enc.iter().enumerate().rev() {
            if i + 1 < levels {
                let mut dy = maxpool2_backward(&d, &cache.pool_arg[i]);
                dy.add_assign(&dskips[i]);
                d = dy;
            }
            d = blk.backward(p, &cache.enc[i], d, &cache.emb, &mut demb, g);
        }
        let dgu = self.cond2.backward(p, &cache.gu, b, &demb, g, true).unwrap();
        let du = gelu_backward(&cache.u, &dgu);
        self.cond1.backward(p, &cache.cond, b, &du, g, false);
    }
}

/// Packs latents (already in model space) into a `[2, B, N]` feature map.
pub fn pack_latents<T: Real>(xs: &[Latent]) -> Feat<T> {
    let b = xs.len();
    let n = xs.first().map_or(0, Latent::n);
    let mut f = Feat::zeros(2, b, n);
    for (j, x) in xs.iter().enumerate() {
        for c in 0..2 {
            let row = &x.as_slice()[c * n..(c + 1) * n];
            let base = f.idx(c, j, 0);
            for (dst, &v) in f.data[base..base + n].iter_mut().zip(row) {
                *dst = T::lit(v);
            }
        }
    }
    f
}

pub fn unpack_latents<T: Real>(f: &Feat<T>) -> Vec<Latent> {
    (0..f.b)
        .map(|j| {
            let mut data = Vec::with_capacity(2 * f.l);
            for c in 0..2 {
                let base = f.idx(c, j, 0);
                data.extend(f.data[base..base + f.l].iter().map(|v| v.to_f64().unwrap()));
            }
            Latent::from_vec(f.l, data).expect("packed shape")
        })
        .collect()
}

/// Packs prompts into `[Q, B]` columns.
pub fn pack_prompts<T: Real>(conds: &[&[f64]], q: usize) -> Result<Vec<T>> {
    let b = conds.len();
    let mut out = vec![T::zero(); q * b];
    for (j, c) in conds.iter().enumerate() {
        if c.len() != q {
            return Err(config_err(format!("prompt length {} does not match model Q = {q}", c.len())));
        }
        for (k, &v) in c.iter().enumerate() {
            out[k * b + j] = T::lit(v);
        }
    }
    Ok(out)
}

/// Trained network with `f32` parameters, usable as a [`NoisePredictor`].
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub net: UNet,
    pub params: ParamStore<f32>,
    /// Maximum samples per forward call; larger batches are split across threads.
    pub chunk: usize,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(cfg: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        let (net, mut params) = UNet::new::<f32>(cfg)?;
        net.init(&mut params, rng);
        Ok(Self { net, params, chunk: 64 })
    }

    pub fn with_params(cfg: &DenoiserConfig, params: ParamStore<f32>) -> Result<Self> {
        let (net, layout) = UNet::new::<f32>(cfg)?;
        if !layout.same_layout(&params) {
            return Err(Error::ConfigMismatch("parameter layout does not match denoiser config".into()));
        }
        Ok(Self { net, params, chunk: 64 })
    }

    pub fn config(&self) -> &DenoiserConfig {
        self.net.config()
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, states: &[Latent], conds: &[&[f64]], t: usize) -> Result<Vec<Latent>> {
        if states.len() != conds.len() {
            return Err(Error::Dimension { expected: states.len(), got: conds.len() });
        }
        let q = self.config().prompt_len;
        let chunk = self.chunk.max(1);
        let nchunks = states.len().div_ceil(chunk);
        let parts = par::try_map_range(nchunks, |k| {
            let lo = k * chunk;
            let hi = (lo + chunk).min(states.len());
            let x = pack_latents::<f32>(&states[lo..hi]);
            let c = pack_prompts::<f32>(&conds[lo..hi], q)?;
            let ts = vec![t; hi - lo];
            let y = self.net.forward(&self.params, &x, &ts, &c)?;
            Ok::<_, Error>(unpack_latents(&y))
        })?;
        Ok(parts.into_iter().flatten().collect())
    }
}
