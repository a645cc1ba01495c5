use bbs_core::denoiser::{DenoiserConfig, UNet};
use bbs_core::nn::ops::Feat;
use bbs_core::nn::ParamStore;
use bbs_core::rng::{substream, Stream};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn tiny(attention_levels: usize) -> DenoiserConfig {
    DenoiserConfig {
        in_channels: 2,
        level_channels: vec![4, 8],
        attention_heads: 2,
        attention_levels,
        embed_dim: 6,
        prompt_len: 3,
        seq_len: 8,
    }
}

/// Small trainable config for prompt length `q` and `n` antennas.
#[allow(dead_code)]
pub fn tiny_for(q: usize, n: usize) -> DenoiserConfig {
    DenoiserConfig { level_channels: vec![8, 16], embed_dim: 16, prompt_len: q, seq_len: n, ..tiny(1) }
}

struct Problem {
    x: Feat<f64>,
    ts: Vec<usize>,
    cond: Vec<f64>,
    probe: Vec<f64>,
}

fn problem(cfg: &DenoiserConfig, b: usize, seed: u64) -> Problem {
    let mut rng = substream(seed, Stream::Corrupt, &[]);
    let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
    let x = Feat::from_data(2, b, cfg.seq_len, (0..2 * b * cfg.seq_len).map(|_| g()).collect());
    let cond = (0..cfg.prompt_len * b).map(|_| g()).collect();
    let probe = (0..2 * b * cfg.seq_len).map(|_| g()).collect();
    let ts = (0..b).map(|i| 1 + 7 * i).collect();
    Problem { x, ts, cond, probe }
}

fn loss(net: &UNet, p: &ParamStore<f64>, pr: &Problem) -> f64 {
    let y = net.forward(p, &pr.x, &pr.ts, &pr.cond).unwrap();
    y.data.iter().zip(&pr.probe).map(|(a, b)| a * b).sum()
}

/// Central differences against the analytic gradient for every scalar.
pub fn max_rel_error(cfg: &DenoiserConfig, seed: u64) -> (f64, String) {
    let (net, mut p) = UNet::new::<f64>(cfg).unwrap();
    let mut rng = substream(seed, Stream::Init, &[]);
    net.init(&mut p, &mut rng);
    // the output layer starts at zero; randomize it so upstream gradients are nonzero
    for t in p.tensors_mut() {
        if t.name.starts_with("out.") {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let pr = problem(cfg, 2, seed);
    let (y, cache) = net.forward_train(&p, &pr.x, &pr.ts, &pr.cond).unwrap();
    let dy = y.with_data(y.c, pr.probe.clone());
    let mut g = p.zeros_like();
    net.backward(&p, &cache, &dy, &mut g);

    let h = 1e-6;
    let mut worst = (0.0, String::new());
    for ti in 0..p.tensors().len() {
        for k in 0..p.tensors()[ti].data.len() {
            let orig = p.tensors()[ti].data[k];
            p.tensors_mut()[ti].data[k] = orig + h;
            let lp = loss(&net, &p, &pr);
            p.tensors_mut()[ti].data[k] = orig - h;
            let lm = loss(&net, &p, &pr);
            p.tensors_mut()[ti].data[k] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = g.tensors()[ti].data[k];
            let scale = num.abs().max(ana.abs());
            let err = if scale < 1e-6 { (num - ana).abs() } else { (num - ana).abs() / scale };
            if err > worst.0 {
                worst = (err, format!("{}[{k}] analytic {ana:e} numeric {num:e}", p.tensors()[ti].name));
            }
        }
    }
    worst
}
