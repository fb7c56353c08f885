//! Cosine noise schedule for multinomial diffusion.
//!
//! `alpha_bar(t) = f(t) / f(0)` with `f(t) = cos(((t/T + s) / (1 + s)) * pi/2)`.
//! The cosine ratio itself is the categorical mixing weight: `x_t` keeps its
//! class with weight `alpha_bar(t)` and is uniform otherwise.
//!
//! Arrays are indexed by step `t = 1..=T`; index 0 holds the noiseless state
//! (`alpha_bar = 1`).

use alloc::vec::Vec;

use crate::math;
use crate::numerics::log_1_min_a;
use crate::{Error, Result};

/// Default cosine offset.
pub const COSINE_S: f64 = 0.008;

/// Clip range for `alpha_bar(t)`, `t >= 1`, before taking logs.
pub const ALPHA_BAR_MIN: f64 = 1e-8;
pub const ALPHA_BAR_MAX: f64 = 1.0 - 1e-8;

/// Unclipped cosine `alpha_bar` at a real-valued time `t` in `[0, T]`.
pub fn cosine_alpha_bar(t: f64, steps: usize, s: f64) -> f64 {
    let f = |t: f64| math::cos((t / steps as f64 + s) / (1.0 + s) * core::f64::consts::FRAC_PI_2);
    f(t) / f(0.0)
}

/// Precomputed log-space schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    s: f64,
    log_alpha: Vec<f64>,
    log_cumprod_alpha: Vec<f64>,
    log_1_min_alpha: Vec<f64>,
    log_1_min_cumprod_alpha: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule with `steps` forward steps.
    pub fn cosine(steps: usize, s: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("a noise schedule needs at least one step"));
        }
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::invalid("cosine offset s must be finite and non-negative"));
        }
        let alpha_bar = (0..=steps).map(|t| {
            if t == 0 {
                1.0
            } else {
                cosine_alpha_bar(t as f64, steps, s).clamp(ALPHA_BAR_MIN, ALPHA_BAR_MAX)
            }
        });
        Self::from_alpha_bar(steps, s, alpha_bar.collect())
    }

    /// Build from an explicit `alpha_bar` sequence of length `steps + 1`
    /// starting at `alpha_bar[0] = 1`. Used by tests and oracles that need
    /// arbitrary decreasing schedules.
    pub fn from_alpha_bar(steps: usize, s: f64, alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() != steps + 1 || alpha_bar[0] != 1.0 {
            return Err(Error::invalid("alpha_bar must have T + 1 entries starting at 1"));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0]) || w[1] <= 0.0) {
            return Err(Error::invalid("alpha_bar must be strictly decreasing and positive"));
        }
        let log_cumprod_alpha: Vec<f64> = alpha_bar.iter().map(|&a| math::ln(a)).collect();
        // alpha_t is the ratio of consecutive alpha_bar values.
        let mut log_alpha = alloc::vec![0.0; steps + 1];
        for t in 1..=steps {
            log_alpha[t] = log_cumprod_alpha[t] - log_cumprod_alpha[t - 1];
        }
        let log_1_min_alpha = log_alpha.iter().map(|&a| log_1_min_a(a)).collect();
        let log_1_min_cumprod_alpha = log_cumprod_alpha.iter().map(|&a| log_1_min_a(a)).collect();
        Ok(Self { steps, s, log_alpha, log_cumprod_alpha, log_1_min_alpha, log_1_min_cumprod_alpha })
    }

    /// Number of forward steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> f64 {
        self.s
    }

    pub fn log_alpha(&self, t: usize) -> f64 {
        self.log_alpha[t]
    }

    pub fn log_cumprod_alpha(&self, t: usize) -> f64 {
        self.log_cumprod_alpha[t]
    }

    pub fn log_1_min_alpha(&self, t: usize) -> f64 {
        self.log_1_min_alpha[t]
    }

    pub fn log_1_min_cumprod_alpha(&self, t: usize) -> f64 {
        self.log_1_min_cumprod_alpha[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        math::exp(self.log_alpha[t])
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        math::exp(self.log_cumprod_alpha[t])
    }

    /// The four arrays, each of length `T + 1` (index 0 is the data state).
    pub fn arrays(&self) -> [&[f64]; 4] {
        [&self.log_alpha, &self.log_cumprod_alpha, &self.log_1_min_alpha, &self.log_1_min_cumprod_alpha]
    }

    /// Rebuild from stored arrays (checkpoint loading).
    pub fn from_arrays(steps: usize, s: f64, arrays: [Vec<f64>; 4]) -> Result<Self> {
        if arrays.iter().any(|a| a.len() != steps + 1) {
            return Err(Error::invalid("schedule arrays must have T + 1 entries"));
        }
        let [log_alpha, log_cumprod_alpha, log_1_min_alpha, log_1_min_cumprod_alpha] = arrays;
        Ok(Self { steps, s, log_alpha, log_cumprod_alpha, log_1_min_alpha, log_1_min_cumprod_alpha })
    }

    /// The same schedule with every entry rounded through `f32`.
    pub fn to_f32_precision(&self) -> Self {
        let r = |v: &Vec<f64>| v.iter().map(|&x| x as f32 as f64).collect();
        Self {
            steps: self.steps,
            s: self.s,
            log_alpha: r(&self.log_alpha),
            log_cumprod_alpha: r(&self.log_cumprod_alpha),
            log_1_min_alpha: r(&self.log_1_min_alpha),
            log_1_min_cumprod_alpha: r(&self.log_1_min_cumprod_alpha),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::log_add_exp;

    #[test]
    fn endpoints() {
        assert_eq!(cosine_alpha_bar(0.0, 100, COSINE_S), 1.0);
        assert!(cosine_alpha_bar(100.0, 100, COSINE_S).abs() < 1e-15);
        assert_eq!(COSINE_S, 0.008);
        let s = NoiseSchedule::cosine(100, COSINE_S).unwrap();
        assert!((s.alpha_bar(100) - ALPHA_BAR_MIN).abs() < 1e-20);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(NoiseSchedule::cosine(0, COSINE_S).is_err());
    }

    #[test]
    fn single_step_alpha_equals_alpha_bar() {
        let s = NoiseSchedule::cosine(1, COSINE_S).unwrap();
        assert_eq!(s.log_alpha(1), s.log_cumprod_alpha(1));
    }

    #[test]
    fn final_complement_matches_direct_recomputation() {
        for steps in [1, 5, 100, 1000] {
            let s = NoiseSchedule::cosine(steps, COSINE_S).unwrap();
            let direct = 1.0 - ALPHA_BAR_MIN;
            assert!((libm::exp(s.log_1_min_cumprod_alpha(steps)) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn midpoint_matches_formula() {
        let s = NoiseSchedule::cosine(100, COSINE_S).unwrap();
        let f = |t: f64| libm::cos((t / 100.0 + 0.008) / 1.008 * core::f64::consts::PI / 2.0);
        let expected = f(50.0) / f(0.0);
        assert!((s.alpha_bar(50) - expected).abs() < 1e-14);
    }

    #[test]
    fn invariants_hold_up_to_4000_steps() {
        for steps in [1, 2, 3, 8, 100, 1000, 4000] {
            let s = NoiseSchedule::cosine(steps, COSINE_S).unwrap();
            let mut cum = 0.0;
            for t in 1..=steps {
                cum += s.log_alpha(t);
                assert!((cum - s.log_cumprod_alpha(t)).abs() <= 1e-12, "T={steps} t={t}");
                assert!(s.log_alpha(t) < 0.0 && s.log_alpha(t).is_finite());
                assert!(s.log_1_min_cumprod_alpha(t).is_finite());
                assert!(s.log_1_min_alpha(t).is_finite());
                assert!(log_add_exp(s.log_cumprod_alpha(t), s.log_1_min_cumprod_alpha(t)).abs() <= 1e-9);
                if t > 1 {
                    assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                }
            }
            for arr in s.arrays() {
                assert!(arr.iter().all(|v| v.is_finite()));
            }
        }
    }
}
