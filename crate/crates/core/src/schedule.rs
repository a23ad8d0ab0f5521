//! Noise schedule and the per-level preconditioning coefficients that wrap
//! the raw network into a denoiser usable across five orders of magnitude
//! of noise.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("schedule needs at least 2 steps, got {0}")]
    TooShort(usize),
    #[error("sigmas must decrease strictly from a positive maximum to a terminal zero")]
    NotDecreasing,
}

/// Sampling noise levels. `sigmas` holds N positive strictly decreasing
/// values followed by a terminal zero, so a run of N denoiser calls lands
/// exactly on the clean residual; the last positive entry is sigma_min.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Geometric interpolation from sigma_max down to sigma_min over `n`
    /// levels, plus the terminal zero.
    pub fn geometric(n: usize, sigma_max: f64, sigma_min: f64) -> Result<Self, ScheduleError> {
        if n < 2 {
            return Err(ScheduleError::TooShort(n));
        }
        if !(sigma_max > sigma_min && sigma_min > 0.0) {
            return Err(ScheduleError::NotDecreasing);
        }
        let (lo, hi) = (sigma_min.ln(), sigma_max.ln());
        let mut sigmas: Vec<f64> = (0..n)
            .map(|i| (hi + (lo - hi) * i as f64 / (n - 1) as f64).exp())
            .collect();
        sigmas.push(0.0);
        let s = Self { sigmas };
        s.validate()?;
        Ok(s)
    }

    pub fn default_schedule() -> Self {
        Self::geometric(20, 80.0, 0.03).expect("default constants are valid")
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let n = self.n_steps();
        if n < 2 {
            return Err(ScheduleError::TooShort(n));
        }
        for i in 0..n {
            if !(self.sigmas[i] > self.sigmas[i + 1] && self.sigmas[i] > 0.0) {
                return Err(ScheduleError::NotDecreasing);
            }
        }
        if self.sigmas[n] != 0.0 {
            return Err(ScheduleError::NotDecreasing);
        }
        Ok(())
    }

    /// Number of denoiser calls in a full sampling run.
    pub fn n_steps(&self) -> usize {
        self.sigmas.len().saturating_sub(1)
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[0]
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigmas[self.n_steps() - 1]
    }

    /// Split the call indices 0..N into `n` consecutive subsets of nearly
    /// equal size; used to pick representative levels.
    pub fn consecutive_subsets(&self, n: usize) -> Vec<std::ops::Range<usize>> {
        let total = self.n_steps();
        assert!(n >= 1 && n <= total, "subset count out of range");
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        for k in 0..n {
            let end = ((k + 1) * total) / n;
            out.push(start..end);
            start = end;
        }
        out
    }

    /// Draw one level index per consecutive block, uniformly within the
    /// block. The result is strictly increasing and always contains `n`
    /// entries, so a reduced rollout touches every part of the noise range.
    pub fn representative_levels(&self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        self.consecutive_subsets(n)
            .into_iter()
            .map(|r| rng.random_range(r))
            .collect()
    }
}

/// First-order deterministic update from level `sigma_cur` to `sigma_next`
/// given the denoised estimate.
pub fn sampler_update(z: &[f64], denoised: &[f64], sigma_cur: f64, sigma_next: f64) -> Vec<f64> {
    debug_assert_eq!(z.len(), denoised.len());
    let ratio = sigma_next / sigma_cur;
    z.iter()
        .zip(denoised)
        .map(|(&zi, &di)| di + ratio * (zi - di))
        .collect()
}

/// Per-level input/output scalings. `sigma_data` is the residual std in
/// normalized units (1 by construction of the residual statistics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Precond {
    pub c_in: f64,
    pub c_skip: f64,
    pub c_out: f64,
    pub c_noise: f64,
}

pub fn precond(sigma: f64, sigma_data: f64) -> Precond {
    debug_assert!(sigma > 0.0, "no denoiser call happens at the terminal level");
    let s2 = sigma * sigma + sigma_data * sigma_data;
    Precond {
        c_in: 1.0 / s2.sqrt(),
        c_skip: sigma_data * sigma_data / s2,
        c_out: sigma * sigma_data / s2.sqrt(),
        c_noise: sigma.ln() / 4.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn geometric_endpoints_and_terminal_zero() {
        let s = NoiseSchedule::default_schedule();
        assert_eq!(s.n_steps(), 20);
        assert_eq!(s.sigmas.len(), 21);
        assert_abs_diff_eq!(s.sigma_max(), 80.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.sigma_min(), 0.03, epsilon = 1e-12);
        assert_eq!(s.sigmas[20], 0.0);
    }

    #[test]
    fn representative_levels_strictly_increasing_within_blocks() {
        use crate::rng::{stream, Purpose};
        let s = NoiseSchedule::default_schedule();
        for n in [1, 2, 3, 5, 20] {
            let mut rng = stream(11, Purpose::GuidanceNoise, n as u64);
            let levels = s.representative_levels(n, &mut rng);
            assert_eq!(levels.len(), n);
            let blocks = s.consecutive_subsets(n);
            for (lv, b) in levels.iter().zip(&blocks) {
                assert!(b.contains(lv));
            }
            assert!(levels.windows(2).all(|w| w[0] < w[1]));
        }
        // With as many blocks as steps the draw is forced.
        let mut rng = stream(11, Purpose::GuidanceNoise, 99);
        assert_eq!(
            s.representative_levels(20, &mut rng),
            (0..20).collect::<Vec<_>>()
        );
    }

    #[test]
    fn geometric_has_constant_ratio() {
        let s = NoiseSchedule::geometric(10, 50.0, 0.1).unwrap();
        let r0 = s.sigmas[1] / s.sigmas[0];
        for i in 1..9 {
            assert_abs_diff_eq!(s.sigmas[i + 1] / s.sigmas[i], r0, epsilon = 1e-10);
        }
    }

    #[test]
    fn validation_rejects_bad_schedules() {
        assert!(NoiseSchedule::geometric(1, 80.0, 0.03).is_err());
        assert!(NoiseSchedule::geometric(10, 0.03, 80.0).is_err());
        let bad = NoiseSchedule {
            sigmas: vec![2.0, 2.0, 0.0],
        };
        assert!(bad.validate().is_err());
        let no_terminal = NoiseSchedule {
            sigmas: vec![2.0, 1.0, 0.5],
        };
        assert!(no_terminal.validate().is_err());
    }

    #[test]
    fn duplicate_level_update_is_identity() {
        let z = vec![0.3, -1.2, 4.0];
        let d = vec![9.9, 0.0, -3.0];
        let out = sampler_update(&z, &d, 1.7, 1.7);
        for (a, b) in out.iter().zip(&z) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn terminal_update_returns_denoised() {
        let z = vec![0.3, -1.2];
        let d = vec![9.9, 0.5];
        let out = sampler_update(&z, &d, 0.03, 0.0);
        assert_eq!(out, d);
    }

    #[test]
    fn precond_hand_values_at_unit_sigma() {
        let p = precond(1.0, 1.0);
        assert_abs_diff_eq!(p.c_in, 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(p.c_skip, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.c_out, 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(p.c_noise, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn subsets_partition_all_steps() {
        let s = NoiseSchedule::default_schedule();
        for n in [1, 2, 3, 7, 20] {
            let subs = s.consecutive_subsets(n);
            assert_eq!(subs.len(), n);
            assert_eq!(subs[0].start, 0);
            assert_eq!(subs.last().unwrap().end, 20);
            for w in subs.windows(2) {
                assert_eq!(w[0].end, w[1].start);
                assert!(!w[1].is_empty());
            }
            assert!(!subs[0].is_empty());
        }
    }
}
