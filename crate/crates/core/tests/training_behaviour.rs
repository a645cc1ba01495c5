use bbs_core::beams::{beam_gain, dft_codebook, measure_rsrp, mrt_beamformer, LinkBudget, MeasureConfig};
use bbs_core::denoiser::DenoiserConfig;
use bbs_core::diffusion::{forward_diffuse, ScheduleConfig};
use bbs_core::latent::{from_latent, normalize_prompt};
use bbs_core::rng::{substream, Stream};
use bbs_core::sitegen::{generate_synthetic_site, ArrayConfig, SiteDataset, SiteGeometrySpec};
use bbs_core::training::*;
use rand::Rng;

const N: usize = 16;
const Q: usize = 4;

fn site() -> SiteDataset {
    let mut s = generate_synthetic_site(&ArrayConfig::new(N), 200, &SiteGeometrySpec::default(), 21).unwrap();
    s.normalize_power().unwrap();
    s
}

fn model() -> DenoiserConfig {
    DenoiserConfig {
        in_channels: 2,
        level_channels: vec![8, 16],
        attention_heads: 2,
        attention_levels: 1,
        embed_dim: 16,
        prompt_len: Q,
        seq_len: N,
    }
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 16,
        schedule: ScheduleConfig::linear(50),
        ..TrainConfig::desk(Q, 5)
    }
}

fn data() -> TrainingSet {
    let s = site();
    let (train, _) = s.split().unwrap();
    build_training_set(&s, &train, Q).unwrap()
}

#[test]
fn training_targets_decode_to_mrt() {
    let s = site();
    let (train, _) = s.split().unwrap();
    let d = build_training_set(&s, &train, Q).unwrap();
    assert_eq!(d.len(), 160);
    for ex in &d.examples {
        let h = &s.channels[ex.user];
        let w = from_latent(&ex.x0.from_model_space()).unwrap();
        let (g, gm) = (beam_gain(h, &w).unwrap(), beam_gain(h, &mrt_beamformer(h)).unwrap());
        assert!((g - gm).abs() <= 1e-9 * gm);
    }
}

#[test]
fn training_prompts_are_noiseless_measurements() {
    let s = site();
    let (train, _) = s.split().unwrap();
    let d = build_training_set(&s, &train, Q).unwrap();
    let cb = dft_codebook(&s.array);
    for seed in [1, 2] {
        let mut rng = substream(seed, Stream::PromptNoise, &[]);
        for ex in d.examples.iter().take(20) {
            let p = measure_rsrp(&s.channels[ex.user], &cb, &d.probing_indices, &LinkBudget::default(), &MeasureConfig::noiseless(), &mut rng)
                .unwrap();
            assert_eq!(normalize_prompt(&p, &d.stats).unwrap().c, ex.cond);
        }
    }
    assert_eq!(build_training_set(&s, &train, Q).unwrap(), d);
}

#[test]
fn same_seed_same_losses() {
    let d = data();
    let mut a = Trainer::new(train_cfg(), &model(), &d).unwrap();
    let mut b = Trainer::new(train_cfg(), &model(), &d).unwrap();
    for _ in 0..12 {
        assert_eq!(a.next_batch(&d).unwrap().loss, b.next_batch(&d).unwrap().loss);
    }
    assert_eq!(a.params, b.params);
}

#[test]
fn resumed_run_tracks_unbroken_run() {
    let d = data();
    let mut full = Trainer::new(train_cfg(), &model(), &d).unwrap();
    let reference: Vec<f64> = (0..20).map(|_| full.next_batch(&d).unwrap().loss).collect();

    let mut first = Trainer::new(train_cfg(), &model(), &d).unwrap();
    for _ in 0..10 {
        first.next_batch(&d).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.bin");
    save_checkpoint(&first.checkpoint(), &path).unwrap();
    drop(first);
    let mut resumed = Trainer::from_checkpoint(load_checkpoint(&path).unwrap(), Some((&train_cfg(), &model()))).unwrap();
    for r in &reference[10..] {
        let l = resumed.next_batch(&d).unwrap().loss;
        assert!((l - r).abs() <= 1e-6, "{l} vs {r}");
    }
}

#[test]
fn zero_initialized_model_has_unit_loss() {
    let d = data();
    let tr = Trainer::new(train_cfg(), &model(), &d).unwrap();
    let mut rng = substream(77, Stream::Corrupt, &[]);
    let mut total = 0.0;
    for _ in 0..100 {
        let mut xt = Vec::new();
        let mut ts = Vec::new();
        let mut zs = Vec::new();
        let mut conds = Vec::new();
        for _ in 0..16 {
            let ex = &d.examples[rng.random_range(0..d.len())];
            let t = rng.random_range(1..=tr.sched.steps());
            let z = gaussian_latent(N, &mut rng);
            xt.push(forward_diffuse(&ex.x0, t, &z, &tr.sched).unwrap());
            ts.push(t);
            zs.push(z);
            conds.push(ex.cond.as_slice());
        }
        total += loss_and_grads(&tr.net, &tr.params, &xt, &ts, &conds, &zs).unwrap().0;
    }
    let mean = total / 100.0;
    assert!((mean - 1.0).abs() <= 0.05, "{mean}");
}

#[test]
fn single_sample_overfits() {
    let d = data();
    let cfg = TrainConfig { learning_rate: 1e-3, ..train_cfg() };
    let mut tr = Trainer::new(cfg, &model(), &d).unwrap();
    let mut rng = substream(8, Stream::Corrupt, &[]);
    let ex = &d.examples[0];
    let z = gaussian_latent(N, &mut rng);
    let t = 25;
    let xt = forward_diffuse(&ex.x0, t, &z, &tr.sched).unwrap();
    let mut loss = f64::INFINITY;
    let mut steps = 0;
    while steps < 2000 && loss >= 1e-3 {
        loss = tr.train_step(std::slice::from_ref(&xt), &[t], &[ex.cond.as_slice()], std::slice::from_ref(&z)).unwrap().0;
        steps += 1;
    }
    assert!(loss < 1e-3, "loss {loss} after {steps} steps");
}

#[test]
fn true_noise_oracle_has_zero_loss() {
    let d = data();
    let sched = train_cfg().schedule.build().unwrap();
    let mut rng = substream(9, Stream::Corrupt, &[]);
    let mut sse = 0.0;
    for ex in d.examples.iter().take(32) {
        let t = rng.random_range(1..=sched.steps());
        let z = gaussian_latent(N, &mut rng);
        let xt = forward_diffuse(&ex.x0, t, &z, &sched).unwrap();
        let oracle = xt.axpby(1.0 / sched.one_minus_alpha_bar(t).sqrt(), &ex.x0, -sched.alpha_bar(t).sqrt() / sched.one_minus_alpha_bar(t).sqrt());
        sse += oracle.as_slice().iter().zip(z.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    assert!(sse < 1e-18);
}

#[test]
fn checkpoint_for_another_model_is_refused() {
    let d = data();
    let tr = Trainer::new(train_cfg(), &model(), &d).unwrap();
    let other = DenoiserConfig { embed_dim: 8, ..model() };
    let e = Trainer::from_checkpoint(tr.checkpoint(), Some((&train_cfg(), &other))).unwrap_err();
    assert!(e.to_string().contains("embed_dim"), "{e}");
}
