//! Randomized self-checks of the span, schedule and pooling math against
//! brute-force reference computations.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Mat, Tape};
use crate::model::{Model, ModelConfig};
use crate::schedule::{sampling_sequence, DiffusionPoint, NoiseSchedule, COSINE_OFFSET, MAX_BETA};
use crate::span_math::{giou, iou, vote, Span};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn(&mut ChaCha8Rng) -> Result<String, String>;

pub const CHECKS: &[(&str, Check)] = &[
    ("iou/giou fuzz", iou_fuzz),
    ("vote vs brute force", vote_oracle),
    ("schedule invariants", schedule_invariants),
    ("forward-noising moments", q_sample_moments),
    ("ddim recovery", ddim_recovery),
    ("soft-pool convexity", soft_pool_convexity),
];

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let t0 = Instant::now();
            let r = check(&mut rng);
            let seconds = t0.elapsed().as_secs_f64();
            let (passed, detail) = match r {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult {
                name,
                passed,
                detail,
                seconds,
            }
        })
        .collect()
}

fn random_span(rng: &mut ChaCha8Rng) -> Span {
    // a quarter of the draws snap to a coarse grid to produce touching and equal endpoints
    let (a, b): (f64, f64) = if rng.gen_bool(0.25) {
        (
            rng.gen_range(0..=8) as f64 / 8.0,
            rng.gen_range(0..=8) as f64 / 8.0,
        )
    } else {
        (rng.gen(), rng.gen())
    };
    let (mut s, mut e) = if a <= b { (a, b) } else { (b, a) };
    if e - s < 1e-3 {
        if s + 1e-3 <= 1.0 {
            e = s + 1e-3;
        } else {
            s = e - 1e-3;
        }
    }
    Span { start: s, end: e }
}

/// Union length by merging sorted intervals; no closed-form overlap formula.
fn merged_length(mut v: Vec<(f64, f64)>) -> f64 {
    v.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut total = 0.0;
    let (mut cs, mut ce) = v[0];
    for &(s, e) in &v[1..] {
        if s <= ce {
            ce = ce.max(e);
        } else {
            total += ce - cs;
            cs = s;
            ce = e;
        }
    }
    total + (ce - cs)
}

fn oracle_iou_giou(a: &Span, b: &Span) -> (f64, f64) {
    let union = merged_length(vec![(a.start, a.end), (b.start, b.end)]);
    let inter = (a.end - a.start) + (b.end - b.start) - union;
    let ends = [a.start, a.end, b.start, b.end];
    let hull = ends.iter().cloned().fold(f64::MIN, f64::max) - ends.iter().cloned().fold(f64::MAX, f64::min);
    let i = inter.max(0.0) / union;
    (i, i - (hull - union) / hull)
}

fn iou_fuzz(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let n = 100_000;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let a = random_span(rng);
        let b = random_span(rng);
        let (oi, og) = oracle_iou_giou(&a, &b);
        let (i, g) = (iou(&a, &b), giou(&a, &b));
        worst = worst.max((i - oi).abs()).max((g - og).abs());
        if !(0.0..=1.0).contains(&i) || !(-1.0..=1.0).contains(&g) || g > i + 1e-12 {
            return Err(format!("range violated for {a:?} {b:?}: iou {i}, giou {g}"));
        }
        if i != iou(&b, &a) || g != giou(&b, &a) {
            return Err(format!("asymmetric for {a:?} {b:?}"));
        }
        if (i - oi).abs() > 1e-9 || (g - og).abs() > 1e-9 {
            return Err(format!("{a:?} {b:?}: iou {i} vs {oi}, giou {g} vs {og}"));
        }
    }
    Ok(format!("{n} pairs, max deviation {worst:.1e}"))
}

fn vote_oracle(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let sets = 1000;
    for k in 0..sets {
        let n = rng.gen_range(1..=8);
        let mut spans: Vec<Span> = (0..n).map(|_| random_span(rng)).collect();
        if n > 2 && k % 3 == 0 {
            // duplicates force exact ties
            spans[n - 1] = spans[0];
        }
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| oracle_iou_giou(&spans[i], &spans[j]).0)
                    .sum()
            })
            .collect();
        let best = scores.iter().cloned().fold(f64::MIN, f64::max);
        let expected = scores.iter().position(|&s| s >= best - 1e-12).unwrap();
        let got = vote(&spans).map_err(|e| e.to_string())?;
        for (s, o) in got.scores.iter().zip(&scores) {
            if (s - o).abs() > 1e-9 {
                return Err(format!("score {s} vs {o} for {spans:?}"));
            }
        }
        if got.winner != expected && (scores[got.winner] - scores[expected]).abs() > 1e-12 {
            return Err(format!(
                "winner {} vs {expected} for {spans:?}",
                got.winner
            ));
        }
    }
    Ok(format!("{sets} candidate sets"))
}

fn schedule_invariants(_rng: &mut ChaCha8Rng) -> Result<String, String> {
    for steps in [1usize, 10, 100, 1000] {
        let s = NoiseSchedule::cosine(steps, 2.0).map_err(|e| e.to_string())?;
        let ab = s.alpha_bars();
        if ab.len() != steps + 1 || ab[0] != 1.0 {
            return Err(format!("T={steps}: bad length or alpha_bar[0]"));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::PI / 2.0).cos().powi(2)
        };
        let mut expect = 1.0;
        for t in 1..=steps {
            let ratio = (f(t) / f(t - 1)).max(1.0 - MAX_BETA);
            expect *= ratio;
            if (ab[t] - expect).abs() > 1e-12 {
                return Err(format!("T={steps}: alpha_bar[{t}] {} vs {expect}", ab[t]));
            }
            if !(ab[t] < ab[t - 1] && ab[t] > 0.0) {
                return Err(format!("T={steps}: not strictly decreasing at {t}"));
            }
            if 1.0 - ab[t] / ab[t - 1] > MAX_BETA + 1e-12 {
                return Err(format!("T={steps}: beta above cap at {t}"));
            }
        }
        for n in 1..=steps.min(60) {
            let seq = sampling_sequence(n, steps).map_err(|e| e.to_string())?;
            if seq.len() != n || seq[0] != steps || *seq.last().unwrap() < 1 {
                return Err(format!("T={steps}, n={n}: sequence {seq:?}"));
            }
            if seq.windows(2).any(|w| w[0] <= w[1]) {
                return Err(format!("T={steps}, n={n}: not strictly decreasing"));
            }
        }
        if sampling_sequence(steps + 1, steps).is_ok() || sampling_sequence(0, steps).is_ok() {
            return Err(format!("T={steps}: out-of-range step count accepted"));
        }
    }
    Ok("T in {1, 10, 100, 1000}".into())
}

fn q_sample_moments(rng: &mut ChaCha8Rng) -> Result<String, String> {
    // a wide clamp range keeps clipping out of the measured moments
    let s = NoiseSchedule::cosine(1000, 50.0).map_err(|e| e.to_string())?;
    let n = 20_000usize;
    let x0 = DiffusionPoint([0.8, -1.3]);
    let mut checked = 0;
    for t in [1usize, 100, 500, 900, 1000] {
        let ab = s.alpha_bar(t);
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eps = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let x = s.q_sample(x0, t, eps).map_err(|e| e.to_string())?;
            for k in 0..2 {
                sum[k] += x.0[k];
                sq[k] += x.0[k] * x.0[k];
            }
        }
        let var = 1.0 - ab;
        for k in 0..2 {
            let mean = sum[k] / n as f64;
            let sample_var = (sq[k] - n as f64 * mean * mean) / (n - 1) as f64;
            let mean_se = (var / n as f64).sqrt();
            let var_se = var * (2.0 / (n - 1) as f64).sqrt();
            let want = ab.sqrt() * x0.0[k];
            if (mean - want).abs() > 3.0 * mean_se {
                return Err(format!("t={t}: mean {mean} vs {want} (se {mean_se:.2e})"));
            }
            if (sample_var - var).abs() > 3.0 * var_se {
                return Err(format!("t={t}: variance {sample_var} vs {var} (se {var_se:.2e})"));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} moment pairs from {n} draws each"))
}

fn ddim_recovery(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let s = NoiseSchedule::cosine(1000, 50.0).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x0 = DiffusionPoint([rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
        let eps: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let t = rng.gen_range(1..=999);
        let t_prev = rng.gen_range(0..t);
        let xt = s.q_sample(x0, t, eps).map_err(|e| e.to_string())?;
        let next = s.ddim_step(xt, x0, t, t_prev).map_err(|e| e.to_string())?;
        let (a, b) = (s.alpha_bar(t_prev).sqrt(), (1.0 - s.alpha_bar(t_prev)).sqrt());
        for k in 0..2 {
            let want = a * x0.0[k] + b * eps[k];
            worst = worst.max((next.0[k] - want).abs());
        }
        let end = s.ddim_step(xt, x0, t, 0).map_err(|e| e.to_string())?;
        for k in 0..2 {
            worst = worst.max((end.0[k] - x0.0[k]).abs());
        }
    }
    if worst > 1e-6 {
        return Err(format!("max deviation {worst:.2e}"));
    }
    Ok(format!("1000 transitions, max deviation {worst:.1e}"))
}

fn soft_pool_convexity(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let cfg = ModelConfig {
        clips: 16,
        hidden: 8,
        heads: 2,
        ffn: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        ..ModelConfig::default()
    };
    let mut trials = 0;
    for seed in 0..20 {
        let mut model = Model::new(cfg.clone(), seed).map_err(|e| e.to_string())?;
        // inflate the pooling map so the weights are far from uniform
        let w = model.decoder.pool.weight;
        model.params.get_mut(w).mapv_inplace(|x| x * 20.0);
        for _ in 0..25 {
            let n = rng.gen_range(1..=16);
            let seg = Mat::from_shape_fn((n, 8), |_| rng.gen_range(-3.0..3.0));
            let mut tape = Tape::new(&model.params);
            let x = tape.constant(seg.clone());
            let pooled = model.decoder.soft_pool(&mut tape, x);
            let out = tape.value(pooled);
            for c in 0..8 {
                let col = seg.column(c);
                let lo = col.iter().cloned().fold(f64::MAX, f64::min);
                let hi = col.iter().cloned().fold(f64::MIN, f64::max);
                let v = out[[0, c]];
                if v < lo - 1e-9 || v > hi + 1e-9 {
                    return Err(format!("coordinate {c} = {v} outside [{lo}, {hi}]"));
                }
            }
            // the bias shifts every logit equally, so the weights depend on W alone
            let logits = seg.dot(&model.params.get(model.decoder.pool.weight).view());
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = ex.iter().sum();
            let weights: Vec<f64> = ex.iter().map(|e| e / z).collect();
            let total: f64 = weights.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(format!("weights sum to {total}"));
            }
            let recon = Mat::from_shape_vec((1, n), weights).unwrap().dot(&seg);
            for c in 0..8 {
                if (recon[[0, c]] - out[[0, c]]).abs() > 1e-9 {
                    return Err(format!("pooled value differs from softmax-weighted sum at {c}"));
                }
            }
            trials += 1;
        }
    }
    Ok(format!("{trials} segments"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merged_length_cases() {
        assert_eq!(merged_length(vec![(0.0, 0.5), (0.25, 1.0)]), 1.0);
        assert_eq!(merged_length(vec![(0.5, 0.75), (0.0, 0.25)]), 0.5);
        assert_eq!(merged_length(vec![(0.0, 0.5), (0.5, 0.75)]), 0.75);
    }

    #[test]
    fn all_checks_pass() {
        for r in run_all(0) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
