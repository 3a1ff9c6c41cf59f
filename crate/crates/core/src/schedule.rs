//! Diffusion-time machinery: the cosine noise schedule, signal scaling into
//! diffusion space, forward noising and the deterministic DDIM update.
//!
//! Diffusion runs on `(center, width)` coordinates scaled from `[0, 1]` to
//! `[-scale, scale]`.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::span_math::{cw_to_se, se_to_cw, CwSpan};

/// Offset that keeps the first cosine-schedule betas away from zero.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper bound on any single-step beta.
pub const MAX_BETA: f64 = 0.999;

/// Cumulative signal-retention coefficients for `t` in `0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    alpha_bar: Vec<f64>,
    scale: f64,
}

/// A point in scaled diffusion space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionPoint(pub [f64; 2]);

impl NoiseSchedule {
    /// Cosine schedule: `f(t) = cos²(((t/T + s) / (1 + s)) · π/2)`, with per-step
    /// betas `1 - f(t)/f(t-1)` clipped at [`MAX_BETA`].
    pub fn cosine(steps: usize, scale: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("diffusion steps T must be at least 1"));
        }
        if scale <= 0.0 || !scale.is_finite() {
            return Err(invalid(format!("signal scale {scale} must be positive")));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for t in 1..=steps {
            let beta = (1.0 - f(t) / f(t - 1)).min(MAX_BETA);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule {
            steps,
            alpha_bar,
            scale,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.steps,
            });
        }
        Ok(())
    }

    fn clamp(&self, x: [f64; 2]) -> DiffusionPoint {
        let l = self.scale;
        DiffusionPoint([x[0].clamp(-l, l), x[1].clamp(-l, l)])
    }

    /// One-shot forward noising `sqrt(ab_t)·x0 + sqrt(1-ab_t)·eps`, clamped to
    /// `[-scale, scale]`. `t = 0` returns `x0` unchanged (up to clamping).
    pub fn q_sample(&self, x0: DiffusionPoint, t: usize, eps: [f64; 2]) -> Result<DiffusionPoint> {
        self.check_t(t)?;
        let ab = self.alpha_bar[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(self.clamp([a * x0.0[0] + b * eps[0], a * x0.0[1] + b * eps[1]]))
    }

    /// Deterministic DDIM update from `t` to `t_prev` given a clean-sample
    /// estimate.
    pub fn ddim_step(
        &self,
        x_t: DiffusionPoint,
        x0_hat: DiffusionPoint,
        t: usize,
        t_prev: usize,
    ) -> Result<DiffusionPoint> {
        self.check_t(t)?;
        if t_prev >= t {
            return Err(invalid(format!(
                "ddim step must move backwards in time (t = {t}, t_prev = {t_prev})"
            )));
        }
        let ab_t = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t_prev];
        let (sa_t, sn_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
        let (sa_p, sn_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        let mut out = [0.0; 2];
        for k in 0..2 {
            let eps_hat = (x_t.0[k] - sa_t * x0_hat.0[k]) / sn_t;
            out[k] = sa_p * x0_hat.0[k] + sn_p * eps_hat;
        }
        Ok(self.clamp(out))
    }

    pub fn to_diffusion(&self, c: &CwSpan) -> DiffusionPoint {
        scale_to_diffusion(c, self.scale)
    }

    pub fn from_diffusion(&self, x: &DiffusionPoint, w_min: f64) -> CwSpan {
        unscale_from_diffusion(x, self.scale, w_min)
    }
}

/// `(2·c - 1)·scale` on both coordinates.
pub fn scale_to_diffusion(c: &CwSpan, scale: f64) -> DiffusionPoint {
    DiffusionPoint([(2.0 * c.center - 1.0) * scale, (2.0 * c.width - 1.0) * scale])
}

/// Inverse of [`scale_to_diffusion`], followed by span clamping.
pub fn unscale_from_diffusion(x: &DiffusionPoint, scale: f64, w_min: f64) -> CwSpan {
    let raw = CwSpan {
        center: (x.0[0] / scale + 1.0) * 0.5,
        width: (x.0[1] / scale + 1.0) * 0.5,
    };
    se_to_cw(&cw_to_se(&raw, w_min))
}

pub fn checked_scale(scale: f64) -> Result<f64> {
    if scale > 0.0 && scale.is_finite() {
        Ok(scale)
    } else {
        Err(invalid(format!("signal scale {scale} must be positive")))
    }
}

/// Evenly spaced descending timesteps `round(i·T/n)` for `i = n..1`.
/// The reverse loop's final update targets `t = 0`, which is implicit.
pub fn sampling_sequence(n: usize, steps: usize) -> Result<Vec<usize>> {
    if n == 0 || n > steps {
        return Err(invalid(format!(
            "sampling steps {n} must lie in 1..={steps}"
        )));
    }
    let mut seq: Vec<usize> = (1..=n)
        .rev()
        .map(|i| (2 * i * steps + n) / (2 * n))
        .collect();
    seq.dedup();
    Ok(seq)
}

/// `n` independent uniform draws from `1..=steps`.
pub fn sample_timesteps<R: Rng + ?Sized>(n: usize, steps: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(1..=steps)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_schedule_values() {
        let s = NoiseSchedule::cosine(1000, 2.0).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        // f(500)/f(0) evaluated directly
        let f = |x: f64| ((x + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let direct = f(0.5) / f(0.0);
        assert_abs_diff_eq!(direct, 0.4937, epsilon = 1e-3);
        assert_abs_diff_eq!(s.alpha_bar(500), direct, epsilon = 1e-9);
    }

    #[test]
    fn schedule_invariants() {
        for steps in [1, 10, 100, 1000] {
            let s = NoiseSchedule::cosine(steps, 2.0).unwrap();
            let ab = s.alpha_bars();
            assert_eq!(ab.len(), steps + 1);
            assert_eq!(ab[0], 1.0);
            for w in ab.windows(2) {
                assert!(w[0] > w[1], "T={steps}");
            }
            assert!(ab.iter().all(|&a| a > 0.0 && a <= 1.0));
        }
        assert!(NoiseSchedule::cosine(0, 2.0).is_err());
        assert!(NoiseSchedule::cosine(10, 0.0).is_err());
    }

    #[test]
    fn scaling_examples() {
        let x = scale_to_diffusion(&CwSpan::new(0.5, 0.5), 2.0);
        assert_eq!(x, DiffusionPoint([0.0, 0.0]));
        let x = scale_to_diffusion(&CwSpan::new(1.0, 1.0), 2.0);
        assert_eq!(x, DiffusionPoint([2.0, 2.0]));
        assert!(checked_scale(-1.0).is_err());
    }

    #[test]
    fn q_sample_examples() {
        let s = NoiseSchedule::cosine(1000, 2.0).unwrap();
        let x0 = DiffusionPoint([0.5, -0.3]);
        let out = s.q_sample(x0, 400, [0.0, 0.0]).unwrap();
        let a = s.alpha_bar(400).sqrt();
        assert_eq!(out.0, [a * 0.5, a * -0.3]);
        assert_eq!(s.q_sample(x0, 0, [0.7, 0.1]).unwrap(), x0);
        assert!(matches!(
            s.q_sample(x0, 1001, [0.0, 0.0]),
            Err(Error::TimestepOutOfRange { .. })
        ));
    }

    #[test]
    fn q_sample_clamps() {
        let s = NoiseSchedule::cosine(10, 1.0).unwrap();
        let out = s.q_sample(DiffusionPoint([0.9, -0.9]), 10, [50.0, -50.0]).unwrap();
        assert_eq!(out.0, [1.0, -1.0]);
    }

    #[test]
    fn ddim_examples() {
        let s = NoiseSchedule::cosine(1000, 2.0).unwrap();
        let x0 = DiffusionPoint([0.4, -1.2]);
        let a = s.alpha_bar(600).sqrt();
        let xt = DiffusionPoint([a * 0.4, a * -1.2]);
        let out = s.ddim_step(xt, x0, 600, 300).unwrap();
        let b = s.alpha_bar(300).sqrt();
        assert_abs_diff_eq!(out.0[0], b * 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(out.0[1], b * -1.2, epsilon = 1e-12);

        let any = DiffusionPoint([1.7, 0.2]);
        assert_eq!(s.ddim_step(any, x0, 5, 0).unwrap(), x0);
        assert!(s.ddim_step(any, x0, 5, 5).is_err());
    }

    #[test]
    fn ddim_chain_recovers_oracle_target() {
        let s = NoiseSchedule::cosine(1000, 2.0).unwrap();
        let x0 = DiffusionPoint([0.3, -0.8]);
        for start in [[-2.0, 2.0], [1.9, 0.0], [0.0, -1.5]] {
            let seq = sampling_sequence(5, 1000).unwrap();
            let mut x = DiffusionPoint(start);
            for (i, &t) in seq.iter().enumerate() {
                let t_prev = seq.get(i + 1).copied().unwrap_or(0);
                x = s.ddim_step(x, x0, t, t_prev).unwrap();
            }
            assert!((x.0[0] - x0.0[0]).abs() < 1e-6 && (x.0[1] - x0.0[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn sampling_sequence_examples() {
        assert_eq!(sampling_sequence(1, 1000).unwrap(), vec![1000]);
        assert_eq!(
            sampling_sequence(5, 1000).unwrap(),
            vec![1000, 800, 600, 400, 200]
        );
        let full = sampling_sequence(50, 50).unwrap();
        assert_eq!(full, (1..=50).rev().collect::<Vec<_>>());
        assert!(sampling_sequence(0, 10).is_err());
        assert!(sampling_sequence(11, 10).is_err());
        let odd = sampling_sequence(3, 10).unwrap();
        assert_eq!(odd[0], 10);
        assert!(odd.windows(2).all(|w| w[0] > w[1]) && *odd.last().unwrap() >= 1);
    }

    #[test]
    fn timestep_draws_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_timesteps(500, 1, &mut rng).iter().all(|&t| t == 1));
        assert!(sample_timesteps(500, 7, &mut rng)
            .iter()
            .all(|&t| (1..=7).contains(&t)));
    }
}
