//! Aggregates and significance tests over per-user gains.

use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::beams::median;
use crate::rng::{substream, Stream};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Percentile interval of `median(a[i]) - median(b[i])` under paired resampling of users.
pub fn paired_bootstrap_median_diff(a: &[f64], b: &[f64], reps: usize, level: f64, seed: u64) -> (f64, f64) {
    assert_eq!(a.len(), b.len(), "paired samples differ in length");
    assert!(!a.is_empty() && reps > 0);
    let n = a.len();
    let mut rng = substream(seed, Stream::Bootstrap, &[n as u64]);
    let mut diffs = Vec::with_capacity(reps);
    let (mut ra, mut rb) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..reps {
        for i in 0..n {
            let k = rng.random_range(0..n);
            ra[i] = a[k];
            rb[i] = b[k];
        }
        diffs.push(median(&ra) - median(&rb));
    }
    diffs.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let at = |p: f64| diffs[((p * reps as f64).floor() as usize).min(reps - 1)];
    (at(alpha), at(1.0 - alpha))
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman correlation with a two-sided p-value from the t approximation.
pub fn spearman(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let rho = pearson(&ranks(x), &ranks(y));
    if n < 3.0 || !rho.is_finite() {
        return (rho, f64::NAN);
    }
    if rho.abs() >= 1.0 {
        return (rho, 0.0);
    }
    let t = rho * ((n - 2.0) / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 2.0).expect("valid dof");
    (rho, 2.0 * (1.0 - dist.cdf(t.abs())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_of_monotone_map_is_one() {
        let x: Vec<f64> = (0..20).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| v.powi(3)).collect();
        let (rho, p) = spearman(&x, &y);
        assert!((rho - 1.0).abs() < 1e-12);
        assert_eq!(p, 0.0);
    }

    #[test]
    fn bootstrap_of_shifted_sample_excludes_zero() {
        let a: Vec<f64> = (0..200).map(|i| (i % 17) as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| v - 1.0).collect();
        let (lo, hi) = paired_bootstrap_median_diff(&a, &b, 500, 0.95, 1);
        assert!((lo - 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
    }
}
