//! Noise schedules and the closed-form forward/reverse diffusion algebra.
//!
//! Index conventions: timesteps run `1..=T`; `alpha_bar(0) = 1`.
//! The reverse update is deterministic (no posterior-variance injection).

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::latent::Latent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Schedule parameters, persisted with checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub fn linear(steps: usize) -> Self {
        Self { steps, kind: ScheduleKind::Linear, beta_start: 1e-4, beta_end: 0.02 }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.kind, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=T`; entry 0 is exactly 1.
    alpha_bars: Vec<f64>,
    /// `1 - alpha_bars[t]` without cancellation.
    one_minus: Vec<f64>,
    /// Posterior variances, entry `t` for `t = 1..=T` (entry 0 unused).
    posterior_vars: Vec<f64>,
}

/// Builds a schedule of `steps` betas.
///
/// Linear schedules interpolate `beta_start..=beta_end`. Cosine schedules
/// follow the squared-cosine `alpha_bar` curve (offset 0.008) and ignore the
/// beta range apart from validation.
pub fn make_schedule(steps: usize, kind: ScheduleKind, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(config_err("diffusion steps must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(config_err(format!(
            "beta range must satisfy 0 < start <= end < 1 (got {beta_start}, {beta_end})"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| (((t / steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, 0.999))
                .collect()
        }
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    /// Precomputes cumulative products from an explicit beta list.
    ///
    /// Products are accumulated as compensated sums of `ln(1 - beta)` so that
    /// long schedules do not drift.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(config_err("empty beta list"));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(config_err(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut one_minus = Vec::with_capacity(betas.len() + 1);
        one_minus.push(0.0);
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for &b in &betas {
            // Neumaier summation
            let term = (-b).ln_1p();
            let t = sum + term;
            if sum.abs() >= term.abs() {
                comp += (sum - t) + term;
            } else {
                comp += (term - t) + sum;
            }
            sum = t;
            alpha_bars.push((sum + comp).exp());
            one_minus.push(-(sum + comp).exp_m1());
        }
        let mut posterior_vars = vec![0.0; betas.len() + 1];
        for t in 1..=betas.len() {
            let denom = one_minus[t];
            posterior_vars[t] = if denom > 0.0 {
                betas[t - 1] * one_minus[t - 1] / denom
            } else {
                0.0
            };
        }
        Ok(Self { betas, alpha_bars, one_minus, posterior_vars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t`, `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar_t`, `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `1 - alpha_bar_t`, accurate even when `alpha_bar_t` is close to 1.
    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.one_minus[t]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(config_err(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `X_t = sqrt(ab_t) X0 + sqrt(1 - ab_t) Z`.
pub fn forward_diffuse(x0: &Latent, t: usize, z: &Latent, sched: &NoiseSchedule) -> Result<Latent> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    Ok(x0.axpby(ab.sqrt(), z, sched.one_minus_alpha_bar(t).sqrt()))
}

/// `X0_hat = (X_t - sqrt(1 - ab_t) Z_hat) / sqrt(ab_t)`.
pub fn predict_x0(xt: &Latent, z_hat: &Latent, t: usize, sched: &NoiseSchedule) -> Result<Latent> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let s = ab.sqrt();
    Ok(xt.axpby(1.0 / s, z_hat, -sched.one_minus_alpha_bar(t).sqrt() / s))
}

/// Mean of `q(X_{t-1} | X_t, X0)`.
pub fn posterior_mean(xt: &Latent, x0: &Latent, t: usize, sched: &NoiseSchedule) -> Result<Latent> {
    sched.check_t(t)?;
    let b = sched.beta(t);
    if t == 1 {
        // alpha_bar_0 = 1 makes the X_t weight vanish and the X0 weight one.
        return Ok(x0.clone());
    }
    let om = sched.one_minus_alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let c_xt = (1.0 - b).sqrt() * sched.one_minus_alpha_bar(t - 1) / om;
    let c_x0 = b * ab_prev.sqrt() / om;
    Ok(xt.axpby(c_xt, x0, c_x0))
}

/// Deterministic reverse update
/// `X_{t-1} = (X_t - beta_t / sqrt(1 - ab_t) Z_hat) / sqrt(1 - beta_t)`.
pub fn denoise_step(xt: &Latent, z_hat: &Latent, t: usize, sched: &NoiseSchedule) -> Result<Latent> {
    sched.check_t(t)?;
    let b = sched.beta(t);
    let inv = 1.0 / (1.0 - b).sqrt();
    Ok(xt.axpby(inv, z_hat, -inv * b / sched.one_minus_alpha_bar(t).sqrt()))
}

/// A conditional noise predictor evaluated on a batch that shares a timestep.
pub trait NoisePredictor {
    fn predict(&self, states: &[Latent], conds: &[&[f64]], t: usize) -> Result<Vec<Latent>>;
}

/// Adapts a per-sample closure into a [`NoisePredictor`].
pub struct FnPredictor<F>(pub F);

impl<F> NoisePredictor for FnPredictor<F>
where
    F: Fn(&Latent, &[f64], usize) -> Latent,
{
    fn predict(&self, states: &[Latent], conds: &[&[f64]], t: usize) -> Result<Vec<Latent>> {
        Ok(states.iter().zip(conds).map(|(x, c)| (self.0)(x, c, t)).collect())
    }
}

/// Runs the deterministic reverse chain from `X_T` down to `X_0` for a batch
/// of independent states. Chains never interact; batching is only for speed.
pub fn reverse_chain_batch<P: NoisePredictor + ?Sized>(
    mut states: Vec<Latent>,
    predictor: &P,
    conds: &[&[f64]],
    sched: &NoiseSchedule,
) -> Result<Vec<Latent>> {
    if states.len() != conds.len() {
        return Err(Error::Dimension { expected: states.len(), got: conds.len() });
    }
    for t in (1..=sched.steps()).rev() {
        let z_hat = predictor.predict(&states, conds, t)?;
        if z_hat.len() != states.len() {
            return Err(Error::Dimension { expected: states.len(), got: z_hat.len() });
        }
        for (index, (x, z)) in states.iter_mut().zip(&z_hat).enumerate() {
            if !z.is_finite() {
                return Err(Error::NonFinite { t, max_abs: z.max_abs(), index });
            }
            *x = denoise_step(x, z, t, sched)?;
        }
    }
    Ok(states)
}

/// Single-chain form of [`reverse_chain_batch`].
pub fn reverse_chain<P: NoisePredictor + ?Sized>(
    x_t: Latent,
    predictor: &P,
    prompt: &[f64],
    sched: &NoiseSchedule,
) -> Result<Latent> {
    Ok(reverse_chain_batch(vec![x_t], predictor, &[prompt], sched)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(n: usize, seed: u64) -> Latent {
        let mut rng = substream(seed, Stream::Corrupt, &[]);
        Latent::from_vec(n, (0..2 * n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn linear_schedule_basics() {
        let s = make_schedule(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        assert_abs_diff_eq!(s.alpha_bar(1), 0.9999, epsilon = 1e-15);
        assert_abs_diff_eq!(s.beta(1000), 0.02, epsilon = 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.posterior_var(t) >= 0.0 && s.posterior_var(t) <= s.beta(t));
        }
        assert_eq!(s.posterior_var(1), 0.0);
    }

    #[test]
    fn cosine_schedule_is_valid() {
        let s = make_schedule(200, ScheduleKind::Cosine, 1e-4, 0.02).unwrap();
        for t in 1..=200 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, ScheduleKind::Linear, 0.5, 0.5).unwrap();
        assert_eq!(s.posterior_var(1), 0.0);
        assert_abs_diff_eq!(s.alpha_bar(1), 0.5);
    }

    #[test]
    fn invalid_schedules() {
        assert!(make_schedule(0, ScheduleKind::Linear, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, ScheduleKind::Linear, 0.0, 0.02).is_err());
        assert!(make_schedule(10, ScheduleKind::Linear, 0.03, 0.02).is_err());
        assert!(make_schedule(10, ScheduleKind::Linear, 1e-4, 1.0).is_err());
    }

    #[test]
    fn alpha_bars_match_naive_products() {
        let s = make_schedule(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let mut prod = 1.0f64;
        for t in 1..=1000 {
            prod *= 1.0 - s.beta(t);
            assert_abs_diff_eq!(s.alpha_bar(t) / prod, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_edge_cases() {
        let s = make_schedule(50, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let x0 = gauss(8, 1);
        let zero = Latent::zeros(8);
        let xt = forward_diffuse(&x0, 17, &zero, &s).unwrap();
        for (a, b) in xt.as_slice().iter().zip(x0.as_slice()) {
            assert_abs_diff_eq!(*a, s.alpha_bar(17).sqrt() * b, epsilon = 1e-15);
        }
        assert!(forward_diffuse(&x0, 0, &zero, &s).is_err());
        assert!(forward_diffuse(&x0, 51, &zero, &s).is_err());

        let tiny = NoiseSchedule::from_betas(vec![1e-30; 10]).unwrap();
        let xt = forward_diffuse(&x0, 10, &gauss(8, 2), &tiny).unwrap();
        for (a, b) in xt.as_slice().iter().zip(x0.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn predict_x0_inverts_forward() {
        let s = make_schedule(100, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let x0 = gauss(16, 3);
        let z = gauss(16, 4);
        for t in [1, 2, 50, 100] {
            let xt = forward_diffuse(&x0, t, &z, &s).unwrap();
            let back = predict_x0(&xt, &z, t, &s).unwrap();
            for (a, b) in back.as_slice().iter().zip(x0.as_slice()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
            let zero = predict_x0(&xt, &Latent::zeros(16), t, &s).unwrap();
            for (a, b) in zero.as_slice().iter().zip(xt.as_slice()) {
                assert_abs_diff_eq!(*a, b / s.alpha_bar(t).sqrt(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn posterior_mean_at_first_step_is_x0() {
        let s = make_schedule(30, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let x0 = gauss(8, 5);
        let xt = gauss(8, 6);
        let u = posterior_mean(&xt, &x0, 1, &s).unwrap();
        assert_eq!(u, x0);
    }

    #[test]
    fn posterior_mean_vanishing_beta() {
        let s = NoiseSchedule::from_betas(vec![1e-12; 5]).unwrap();
        let x0 = gauss(8, 7);
        let u = posterior_mean(&x0, &x0, 3, &s).unwrap();
        for (a, b) in u.as_slice().iter().zip(x0.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn small_beta_step_barely_moves() {
        let s = make_schedule(100, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let xt = gauss(8, 8);
        let next = denoise_step(&xt, &Latent::zeros(8), 1, &s).unwrap();
        for (a, b) in next.as_slice().iter().zip(xt.as_slice()) {
            assert!((a - b).abs() <= s.beta(1) * b.abs());
        }
    }

    #[test]
    fn non_finite_prediction_aborts() {
        let s = make_schedule(5, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let bad = FnPredictor(|x: &Latent, _c: &[f64], t: usize| {
            if t == 3 {
                Latent::from_vec(x.n(), vec![f64::NAN; 2 * x.n()]).unwrap()
            } else {
                Latent::zeros(x.n())
            }
        });
        match reverse_chain(gauss(4, 1), &bad, &[], &s) {
            Err(Error::NonFinite { t, .. }) => assert_eq!(t, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_step_chain_is_one_denoise_step() {
        let s = make_schedule(1, ScheduleKind::Linear, 0.3, 0.3).unwrap();
        let xt = gauss(4, 9);
        let zp = gauss(4, 10);
        let zp2 = zp.clone();
        let p = FnPredictor(move |_x: &Latent, _c: &[f64], _t: usize| zp2.clone());
        let out = reverse_chain(xt.clone(), &p, &[], &s).unwrap();
        assert_eq!(out, denoise_step(&xt, &zp, 1, &s).unwrap());
    }
}
