use std::f64::consts::PI;

use diffspan::data::{SynthConfig, SynthCorpus};
use diffspan::schedule::sample_timesteps;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Asymptotic Kolmogorov tail probability with Stephens' small-sample correction.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1.18 {
        // the alternating series converges badly here; use the dual form
        let s: f64 = (1..=99)
            .step_by(2)
            .map(|k| (-((k * k) as f64) * PI * PI / (8.0 * lambda * lambda)).exp())
            .sum();
        return (1.0 - (2.0 * PI).sqrt() / lambda * s).clamp(0.0, 1.0);
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        p += if k % 2 == 1 { term } else { -term };
    }
    p.clamp(0.0, 1.0)
}

fn ks_uniform(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).max((i + 1) as f64 / n - x))
        .fold(0.0, f64::max);
    ks_p_value(d, xs.len())
}

#[test]
fn timesteps_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let draws = sample_timesteps(100_000, 10, &mut rng);
    let mut counts = [0usize; 10];
    for t in draws {
        assert!((1..=10).contains(&t));
        counts[t - 1] += 1;
    }
    let expected = 10_000.0;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new(9.0).unwrap().cdf(stat);
    assert!(p > 0.001, "chi-square {stat}, p {p}");
}

#[test]
fn span_starts_are_uniform_given_width() {
    let corpus = SynthCorpus::new(SynthConfig { seed: 4, ..SynthConfig::default() }).unwrap();
    // Start is uniform on [0, 1 - width] for each width, so start / (1 - width) is U(0, 1).
    let u: Vec<f64> = corpus
        .examples(0..10_000)
        .iter()
        .map(|e| e.target.start / (1.0 - (e.target.end - e.target.start)))
        .collect();
    let p = ks_uniform(u);
    assert!(p > 0.001, "p {p}");
}

#[test]
fn ks_rejects_skewed_samples() {
    let xs: Vec<f64> = (0..10_000).map(|i| (i as f64 / 10_000.0).powi(2)).collect();
    assert!(ks_uniform(xs) < 1e-6);
    let ys: Vec<f64> = (0..10_000).map(|i| (i as f64 + 0.5) / 10_000.0).collect();
    assert!(ks_uniform(ys) > 0.99);
    // both branches agree where they meet
    assert!((ks_p_value(0.011785, 10_000) - ks_p_value(0.011787, 10_000)).abs() < 1e-3);
}
