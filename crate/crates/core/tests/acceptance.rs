//! Acceptance run. Prints one PASS/FAIL line per criterion (with indented
//! detail lines) and exits nonzero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use bbs_core::beams::*;
use bbs_core::brainstorm::{brainstorm, overhead, overhead_change_pct, BrainstormConfig};
use bbs_core::denoiser::DenoiserConfig;
use bbs_core::diffusion::*;
use bbs_core::evaluation::plots::{emit_plots, plot_beam_patterns, PlotFormat};
use bbs_core::evaluation::stats::{paired_bootstrap_median_diff, spearman};
use bbs_core::evaluation::*;
use bbs_core::latent::{from_latent, to_latent, Latent};
use bbs_core::rng::{substream, Stream};
use bbs_core::sitegen::*;
use bbs_core::training::*;
use num_complex::Complex64;
use rand::Rng;

const SITE_SEED: u64 = 7;
const TRAIN_SEED: u64 = 1;
const SWEEP_SEED: u64 = 11;
const TEST_USERS: usize = 500;
const Q_LIST: [usize; 3] = [4, 8, 16];
const Q_MAIN: usize = 8;
const BOOT_REPS: usize = 2000;

struct Criterion {
    id: u32,
    title: &'static str,
    checks: Vec<(String, bool)>,
}

impl Criterion {
    fn new(id: u32, title: &'static str) -> Self {
        Self { id, title, checks: Vec::new() }
    }

    fn check(&mut self, ok: bool, detail: impl Into<String>) {
        let detail = detail.into();
        println!("    [{}] {detail}", if ok { "ok" } else { "FAILED" });
        self.checks.push((detail, ok));
    }

    fn finish(self, started: Instant) -> bool {
        let ok = self.checks.iter().all(|c| c.1);
        println!(
            "criterion {} {}: {} ({:.0} s)",
            self.id,
            if ok { "PASS" } else { "FAIL" },
            self.title,
            started.elapsed().as_secs_f64()
        );
        ok
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_channel(rng: &mut impl Rng, n: usize) -> Channel {
    let paths: Vec<PathParams> = (0..5)
        .map(|_| PathParams {
            gain: Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            azimuth_deg: rng.random_range(-90.0..90.0),
        })
        .collect();
    synthesize_channel(&ArrayConfig::new(n), &paths).unwrap()
}

fn exact_math() -> bool {
    let t0 = Instant::now();
    let mut c = Criterion::new(1, "exact-math suite");
    let mut rng = substream(1, Stream::Site, &[]);

    let (mut w_err, mut g_err) = (0.0f64, 0.0f64);
    for k in 0..1000 {
        let n = [16, 32, 64][k % 3];
        let h = random_channel(&mut rng, n);
        let w = from_latent(&to_latent(&h).unwrap().x).unwrap();
        let mrt = mrt_beamformer(&h);
        for (a, b) in w.as_slice().iter().zip(mrt.as_slice()) {
            w_err = w_err.max((a - b).norm());
        }
        let (g, gm) = (beam_gain(&h, &w).unwrap(), beam_gain(&h, &mrt).unwrap());
        g_err = g_err.max((g - gm).abs() / gm);
    }
    c.check(w_err <= 1e-9 && g_err <= 1e-9, format!("latent roundtrip on 1000 channels: beam {w_err:.1e}, gain rel {g_err:.1e}"));

    let s = ScheduleConfig::linear(1000).build().unwrap();
    let (mut eq_err, mut inv_err) = (0.0f64, 0.0f64);
    for k in 0..10_000 {
        let t = 1 + k % 1000;
        let x0 = gaussian_latent(16, &mut rng);
        let z = gaussian_latent(16, &mut rng);
        let xt = forward_diffuse(&x0, t, &z, &s).unwrap();
        let direct = denoise_step(&xt, &z, t, &s).unwrap();
        let composed = posterior_mean(&xt, &predict_x0(&xt, &z, t, &s).unwrap(), t, &s).unwrap();
        eq_err = eq_err.max(max_abs_diff(direct.as_slice(), composed.as_slice()));
        inv_err = inv_err.max(max_abs_diff(predict_x0(&xt, &z, t, &s).unwrap().as_slice(), x0.as_slice()));
    }
    c.check(eq_err <= 1e-10, format!("closed-form step vs posterior-of-predicted-x0 on 1e4 tuples: {eq_err:.1e}"));
    c.check(inv_err <= 1e-12, format!("predict_x0 inverts forward_diffuse: {inv_err:.1e}"));
    let x0 = gaussian_latent(16, &mut rng);
    let xt = gaussian_latent(16, &mut rng);
    let u1 = posterior_mean(&xt, &x0, 1, &s).unwrap();
    c.check(u1 == x0, "posterior mean at t=1 returns X0 exactly");

    let x0 = gaussian_latent(32, &mut rng);
    let oracle = FnPredictor(|x: &Latent, _: &[f64], t: usize| {
        let r = s.one_minus_alpha_bar(t).sqrt();
        x.axpby(1.0 / r, &x0, -s.alpha_bar(t).sqrt() / r)
    });
    let out = reverse_chain(gaussian_latent(32, &mut rng), &oracle, &[], &s).unwrap();
    let chain_err = max_abs_diff(out.as_slice(), x0.as_slice());
    c.check(chain_err <= 1e-6, format!("oracle reverse chain at T=1000: {chain_err:.1e}"));

    let mut worst = 0.0f64;
    for n in [16, 32, 64] {
        for b in &dft_codebook(&ArrayConfig::new(n)).beams {
            worst = worst.max(b.constraint_violation());
        }
        for _ in 0..100 {
            worst = worst.max(mrt_beamformer(&random_channel(&mut rng, n)).constraint_violation());
            let x = Latent::from_vec(n, (0..2 * n).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
            worst = worst.max(from_latent(&x).unwrap().constraint_violation());
        }
    }
    let site = generate_synthetic_site(&ArrayConfig::new(16), 100, &SiteGeometrySpec::default(), 3).unwrap();
    let data = build_training_set(&site, &(0..80).collect::<Vec<_>>(), 4).unwrap();
    let tcfg = TrainConfig { schedule: ScheduleConfig::linear(10), ..TrainConfig::desk(4, 0) };
    let mut model = Trainer::new(tcfg, &common::tiny_for(4, 16), &data).unwrap().model(true).unwrap();
    let mut prng = substream(2, Stream::Init, &[]);
    for t in model.denoiser.params.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v = prng.random_range(-0.3..0.3));
    }
    for u in 80..100 {
        let r = brainstorm(&site.channels[u], u, &model, &BrainstormConfig { m: 4, q: 4, snr_db: Some(10.0), seed: 0 }).unwrap();
        for w in &r.beams {
            worst = worst.max(w.constraint_violation());
        }
    }
    c.check(worst <= 1e-12, format!("constant modulus and unit norm over codebook, MRT, decoded and brainstormed beams: {worst:.1e}"));

    let o = overhead(9, 5);
    let pct = truncate1(overhead_change_pct(o, 64));
    c.check(o == 14 && pct == -78.1, format!("(Q=9, M=5) -> O={o}, change vs 64 beams {pct}%"));
    let single = [9, 15, 21, 32, 64].iter().all(|&q| overhead(q, 1) == q);
    c.check(single, "M=1 -> O=Q");
    c.finish(t0)
}

fn network_correctness() -> bool {
    let t0 = Instant::now();
    let mut c = Criterion::new(2, "network correctness");
    for (levels, seed) in [(0, 21), (2, 22)] {
        let (err, at) = common::max_rel_error(&common::tiny(levels), seed);
        c.check(err <= 1e-3, format!("finite-difference gradients, {levels} attention levels: max rel error {err:.1e} ({at})"));
    }

    let site = generate_synthetic_site(&ArrayConfig::new(16), 100, &SiteGeometrySpec::default(), 4).unwrap();
    let data = build_training_set(&site, &(0..80).collect::<Vec<_>>(), 4).unwrap();
    let tcfg = TrainConfig { schedule: ScheduleConfig::linear(50), batch_size: 16, ..TrainConfig::desk(4, 2) };
    let mcfg = common::tiny_for(4, 16);
    let mut tr = Trainer::new(tcfg.clone(), &mcfg, &data).unwrap();
    let mut rng = substream(3, Stream::Corrupt, &[]);
    let ex = &data.examples[0];
    let (z, t) = (gaussian_latent(16, &mut rng), 25);
    let xt = forward_diffuse(&ex.x0, t, &z, &tr.sched).unwrap();
    let (mut loss, mut steps) = (f64::INFINITY, 0);
    while steps < 2000 && loss >= 1e-3 {
        loss = tr.train_step(std::slice::from_ref(&xt), &[t], &[ex.cond.as_slice()], std::slice::from_ref(&z)).unwrap().0;
        steps += 1;
    }
    c.check(loss < 1e-3, format!("single-sample overfit: loss {loss:.1e} after {steps} steps"));

    let fresh = Trainer::new(tcfg, &mcfg, &data).unwrap();
    let mut total = 0.0;
    for _ in 0..100 {
        let (mut xs, mut ts, mut zs, mut conds) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..16 {
            let ex = &data.examples[rng.random_range(0..data.len())];
            let t = rng.random_range(1..=fresh.sched.steps());
            let z = gaussian_latent(16, &mut rng);
            xs.push(forward_diffuse(&ex.x0, t, &z, &fresh.sched).unwrap());
            ts.push(t);
            zs.push(z);
            conds.push(ex.cond.as_slice());
        }
        total += loss_and_grads(&fresh.net, &fresh.params, &xs, &ts, &conds, &zs).unwrap().0;
    }
    let init = total / 100.0;
    c.check((init - 1.0).abs() <= 0.05, format!("zero-initialized loss over 100 batches: {init:.4}"));
    c.finish(t0)
}

struct Desk {
    site: SiteDataset,
    test: Vec<usize>,
    models: BTreeMap<usize, TrainedModel>,
    regressors: BTreeMap<usize, Regressor>,
    records: Vec<GainRecord>,
}

fn train_desk() -> Desk {
    let mut site = generate_synthetic_site(&ArrayConfig::new(32), 5000, &SiteGeometrySpec::default(), SITE_SEED).unwrap();
    site.normalize_power().unwrap();
    let (train, test) = site.split().unwrap();
    let test: Vec<usize> = test.into_iter().take(TEST_USERS).collect();
    let mut models = BTreeMap::new();
    let mut regressors = BTreeMap::new();
    for q in Q_LIST {
        let t0 = Instant::now();
        let data = build_training_set(&site, &train, q).unwrap();
        let mcfg = DenoiserConfig::desk(q, 32);
        let mut tr = Trainer::new(TrainConfig::desk(q, TRAIN_SEED), &mcfg, &data).unwrap();
        let mut last = Vec::new();
        while !tr.is_done() {
            last = tr.train_epoch(&data).unwrap();
        }
        let loss = last.iter().map(|r| r.loss).sum::<f64>() / last.len() as f64;
        let budget = tr.params.num_scalars();
        models.insert(q, tr.model(true).unwrap());
        let rcfg = RegressorConfig::matched(budget, q, 32, tr.cfg.epochs, TRAIN_SEED);
        let (reg, rl) = train_regressor(&data, &rcfg).unwrap();
        regressors.insert(q, reg);
        println!(
            "    trained Q={q}: {} epochs, final loss {loss:.4}, {budget} parameters; regressor hidden {} final loss {:.4} ({:.0} s)",
            tr.cfg.epochs,
            rcfg.hidden,
            rl.last().unwrap(),
            t0.elapsed().as_secs_f64()
        );
    }
    Desk { site, test, models, regressors, records: Vec::new() }
}

fn median_of(xs: &[f64]) -> f64 {
    median(xs)
}

fn desk_learning(d: &mut Desk) -> bool {
    let t0 = Instant::now();
    let mut c = Criterion::new(3, "desk-scale learning (N=32, D=5000, T=200, 60 epochs, 500 test users)");
    for q in Q_LIST {
        let m_list = if q == Q_MAIN { vec![1, 5, 8] } else { vec![5] };
        let spec = SweepSpec { q_list: vec![q], m_list, snr_list: vec![None], seeds: vec![SWEEP_SEED], baselines: true };
        let out = run_sweep(&d.site, &d.test, &d.models, &d.regressors, &spec).unwrap();
        let keep_refs = q == Q_MAIN;
        d.records.extend(out.records.into_iter().filter(|r| keep_refs || !matches!(r.method, Method::Mrt | Method::DftExhaustive)));
    }
    let cell = |m: Method, q: usize, mm: usize| cell_values(&d.records, m, q, mm, None);
    let (m1, m5, m8) = (cell(Method::Bbs, Q_MAIN, 1), cell(Method::Bbs, Q_MAIN, 5), cell(Method::Bbs, Q_MAIN, 8));
    let probe = cell(Method::DftProbingBest, Q_MAIN, 0);
    let disc = cell(Method::Discriminative, Q_MAIN, 0);
    let exh = cell(Method::DftExhaustive, 32, 0);
    println!(
        "    medians at Q={Q_MAIN} [dB]: BBS M1 {:.2}, M5 {:.2}, M8 {:.2}; probing-best {:.2}; discriminative {:.2}; exhaustive {:.2}",
        median_of(&m1),
        median_of(&m5),
        median_of(&m8),
        median_of(&probe),
        median_of(&disc),
        median_of(&exh)
    );

    let margin = median_of(&m5) - median_of(&probe);
    c.check(m5.len() >= 500 && margin >= 1.0, format!("BBS M=5 minus probing-best median: {margin:.2} dB (need >= 1 dB, {} users)", m5.len()));

    let monotone = (0..m1.len()).all(|i| m1[i] <= m5[i] && m5[i] <= m8[i]);
    c.check(monotone, "per-user gain non-decreasing over M in {1, 5, 8}");
    let (lo, hi) = paired_bootstrap_median_diff(&m5, &m1, BOOT_REPS, 0.95, 1);
    c.check(lo > 0.0, format!("median(M=5) - median(M=1): 95% bootstrap [{lo:.3}, {hi:.3}] dB excludes 0"));

    let gap = median_of(&m5) - median_of(&disc);
    c.check(disc.len() == m5.len() && gap > 0.0, format!("BBS M=5 minus discriminative median: {gap:.2} dB"));

    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut meds = Vec::new();
    for q in Q_LIST {
        let v = cell(Method::Bbs, q, 5);
        meds.push(median_of(&v));
        xs.extend(std::iter::repeat_n(q as f64, v.len()));
        ys.extend(v);
    }
    let (rho, p) = spearman(&xs, &ys);
    let nondecreasing = meds.windows(2).all(|w| w[0] <= w[1]);
    c.check(
        nondecreasing && rho > 0.0 && p < 0.05,
        format!("BBS M=5 medians over Q {Q_LIST:?}: {meds:.2?} dB; Spearman rho {rho:.3}, p {p:.1e}"),
    );
    c.finish(t0)
}

fn noisy_prompts(d: &mut Desk) -> bool {
    let t0 = Instant::now();
    let mut c = Criterion::new(4, "noisy-prompt robustness (Q=8, M=5)");
    let spec = SweepSpec {
        q_list: vec![Q_MAIN],
        m_list: vec![5],
        snr_list: vec![Some(10.0), Some(30.0)],
        seeds: vec![SWEEP_SEED],
        baselines: false,
    };
    let out = run_sweep(&d.site, &d.test, &d.models, &d.regressors, &spec).unwrap();
    let g10 = cell_values(&out.records, Method::Bbs, Q_MAIN, 5, Some(10.0));
    let g30 = cell_values(&out.records, Method::Bbs, Q_MAIN, 5, Some(30.0));
    let clean = cell_values(&d.records, Method::Bbs, Q_MAIN, 5, None);
    d.records.extend(out.records);
    println!(
        "    medians [dB]: noiseless {:.2}, 30 dB {:.2}, 10 dB {:.2}",
        median_of(&clean),
        median_of(&g30),
        median_of(&g10)
    );
    let (lo, hi) = paired_bootstrap_median_diff(&g30, &g10, BOOT_REPS, 0.95, 2);
    c.check(lo >= 0.0, format!("median(30 dB) - median(10 dB): 95% bootstrap [{lo:.3}, {hi:.3}] dB, lower bound >= 0"));
    c.finish(t0)
}

fn report(d: &Desk) -> bool {
    let t0 = Instant::now();
    let mut c = Criterion::new(5, "desk-scale report in place of full-scale numbers");
    println!(
        "    Absolute gains tied to ray-traced scenarios and full-scale training (headline improvement \
         percentages, the gain rows of the overhead table, the beam-pattern figures) are not reproducible \
         at desk scale. Criteria 1-4 stand in for them; the files below have the same figure and table structure."
    );
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_report");
    std::fs::create_dir_all(&dir).unwrap();
    let csv = dir.join("gains.csv");
    write_csv(&d.records, &csv).unwrap();
    let back = read_csv(&csv).unwrap();
    c.check(back.len() == d.records.len(), format!("{} gain records written to {}", back.len(), csv.display()));

    let summary = summarize(&back);
    let table = render_overhead_table(&overhead_table(&Q_LIST, 5, 32, &summary), 32);
    std::fs::write(dir.join("overhead_table.md"), &table).unwrap();
    println!("{}", table.lines().map(|l| format!("    {l}")).collect::<Vec<_>>().join("\n"));
    let reference: Vec<f64> =
        [9, 15, 21, 32, 64].iter().map(|&q| truncate1(overhead_change_pct(overhead(q, 5), 64))).collect();
    c.check(
        reference == [-78.1, -68.7, -59.3, -42.1, 7.8],
        format!("overhead change at M=5 vs 64 beams for Q 9..64: {reference:?}"),
    );

    let figures = emit_plots(&back, &dir, PlotFormat::Svg).unwrap();
    let h = &d.site.channels[d.test[0]];
    let model = &d.models[&Q_MAIN];
    let r = brainstorm(h, d.test[0], model, &BrainstormConfig { m: 5, q: Q_MAIN, snr_db: None, seed: SWEEP_SEED }).unwrap();
    let cb = dft_codebook(&d.site.array);
    let (k, _) = exhaustive_search(h, &cb).unwrap();
    let patterns = vec![
        ("MRT".to_string(), beam_pattern(&d.site.array, &mrt_beamformer(h))),
        ("BBS M=5".to_string(), beam_pattern(&d.site.array, &r.beams[r.best_index])),
        ("DFT-exhaustive".to_string(), beam_pattern(&d.site.array, &cb.beams[k])),
    ];
    let bp = dir.join("beam_patterns.svg");
    plot_beam_patterns(&bp, PlotFormat::Svg, "Beam patterns, first test user", &patterns).unwrap();
    let mut files = figures;
    files.push(bp);
    let nonempty = files.iter().all(|f| std::fs::metadata(f).map(|m| m.len() > 0).unwrap_or(false));
    c.check(
        files.len() == 3 && nonempty,
        format!("figures: {}", files.iter().map(|f| f.file_name().unwrap().to_string_lossy()).collect::<Vec<_>>().join(", ")),
    );
    c.finish(t0)
}

fn main() {
    let t0 = Instant::now();
    let mut ok = exact_math();
    ok &= network_correctness();
    let t = Instant::now();
    let mut desk = train_desk();
    println!("    desk training finished ({:.0} s)", t.elapsed().as_secs_f64());
    ok &= desk_learning(&mut desk);
    ok &= noisy_prompts(&mut desk);
    ok &= report(&desk);
    println!("acceptance: {} ({:.0} s)", if ok { "all criteria pass" } else { "FAILURES" }, t0.elapsed().as_secs_f64());
    if !ok {
        std::process::exit(1);
    }
}
