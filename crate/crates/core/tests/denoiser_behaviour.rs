use bbs_core::denoiser::{time_embedding, DenoiserConfig, UNet};
use bbs_core::nn::ops::Feat;
use bbs_core::nn::ParamStore;
use bbs_core::rng::{substream, Stream};
use rand::Rng;

fn small() -> DenoiserConfig {
    DenoiserConfig {
        in_channels: 2,
        level_channels: vec![4, 8, 8],
        attention_heads: 2,
        attention_levels: 2,
        embed_dim: 8,
        prompt_len: 4,
        seq_len: 16,
    }
}

/// A network with every parameter random, including the zero-initialized output layer.
fn randomized(cfg: &DenoiserConfig, seed: u64) -> (UNet, ParamStore<f64>) {
    let (net, mut p) = UNet::new::<f64>(cfg).unwrap();
    let mut rng = substream(seed, Stream::Init, &[]);
    net.init(&mut p, &mut rng);
    for t in p.tensors_mut() {
        if t.name.starts_with("out.") {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    (net, p)
}

fn input(cfg: &DenoiserConfig, b: usize, seed: u64) -> (Feat<f64>, Vec<f64>) {
    let mut rng = substream(seed, Stream::Corrupt, &[]);
    let x = Feat::from_data(2, b, cfg.seq_len, (0..2 * b * cfg.seq_len).map(|_| rng.random_range(-1.0..1.0)).collect());
    let c = (0..cfg.prompt_len * b).map(|_| rng.random_range(-1.0..1.0)).collect();
    (x, c)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn time_embedding_small_case_by_hand() {
    let v = time_embedding(1, 4);
    let expected = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
    for (a, b) in v.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-15);
    }
    for t in [0, 1, 17, 999] {
        assert!(time_embedding(t, 64).iter().all(|x| (-1.0..=1.0).contains(x)));
    }
}

#[test]
fn zero_weights_give_zero_condition_embedding() {
    let cfg = small();
    let (net, p) = UNet::new::<f64>(&cfg).unwrap();
    let e = net.condition_embedding(&p, &[0.3, -1.0, 2.0, 0.5], 1).unwrap();
    assert!(e.iter().all(|&x| x == 0.0));
}

#[test]
fn condition_embedding_is_nonlinear() {
    let cfg = small();
    let (net, p) = randomized(&cfg, 1);
    let c = [0.7, -0.4, 1.3, 0.2];
    let c2: Vec<f64> = c.iter().map(|x| 2.0 * x).collect();
    let f1 = net.condition_embedding(&p, &c, 1).unwrap();
    let f2 = net.condition_embedding(&p, &c2, 1).unwrap();
    let doubled: Vec<f64> = f1.iter().map(|x| 2.0 * x).collect();
    assert!(max_diff(&f2, &doubled) > 1e-6);
}

#[test]
fn output_shape_matches_input_for_several_configs() {
    for (levels, n) in [(vec![4, 8], 8), (vec![4, 8, 8], 16), (vec![2, 4, 4, 8], 32)] {
        let cfg = DenoiserConfig { level_channels: levels, seq_len: n, ..small() };
        let (net, p) = randomized(&cfg, 2);
        let (x, c) = input(&cfg, 3, 2);
        let y = net.forward(&p, &x, &[1, 5, 9], &c).unwrap();
        assert_eq!((y.c, y.b, y.l), (x.c, x.b, x.l));
    }
}

#[test]
fn prompt_order_matters() {
    let cfg = small();
    let (net, p) = randomized(&cfg, 3);
    let (x, c) = input(&cfg, 1, 3);
    let mut rev = c.clone();
    rev.reverse();
    let a = net.forward(&p, &x, &[10], &c).unwrap();
    let b = net.forward(&p, &x, &[10], &rev).unwrap();
    assert!(max_diff(&a.data, &b.data) > 1e-9);
}

#[test]
fn forward_is_deterministic() {
    let cfg = small();
    let (net, p) = randomized(&cfg, 4);
    let (x, c) = input(&cfg, 4, 4);
    let a = net.forward(&p, &x, &[1, 2, 3, 4], &c).unwrap();
    let b = net.forward(&p, &x, &[1, 2, 3, 4], &c).unwrap();
    assert_eq!(a.data, b.data);
}

#[test]
fn every_skip_connection_is_wired() {
    let cfg = small();
    let (net, p) = randomized(&cfg, 5);
    let (x, c) = input(&cfg, 2, 5);
    let full = net.forward(&p, &x, &[3, 7], &c).unwrap();
    for level in 0..cfg.level_channels.len() - 1 {
        let cut = net.forward_ablated(&p, &x, &[3, 7], &c, level).unwrap();
        assert!(max_diff(&full.data, &cut.data) > 1e-9, "skip {level} has no effect");
    }
}

#[test]
fn samples_in_a_batch_do_not_interact() {
    let cfg = small();
    let (net, p) = randomized(&cfg, 6);
    let (x, c) = input(&cfg, 2, 6);
    let both = net.forward(&p, &x, &[4, 9], &c).unwrap();
    let n = cfg.seq_len;
    for j in 0..2 {
        let mut data = Vec::new();
        for ch in 0..2 {
            data.extend_from_slice(&x.data[x.idx(ch, j, 0)..x.idx(ch, j, 0) + n]);
        }
        let single = Feat::from_data(2, 1, n, data);
        let cond: Vec<f64> = (0..cfg.prompt_len).map(|k| c[k * 2 + j]).collect();
        let y = net.forward(&p, &single, &[[4, 9][j]], &cond).unwrap();
        for ch in 0..2 {
            let a = &both.data[both.idx(ch, j, 0)..both.idx(ch, j, 0) + n];
            let b = &y.data[y.idx(ch, 0, 0)..y.idx(ch, 0, 0) + n];
            assert!(max_diff(a, b) < 1e-12);
        }
    }
}
