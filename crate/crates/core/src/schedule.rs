//! Cosine `ᾱ` schedule and its decode-time subsampling.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

pub const DEFAULT_OFFSET: f64 = 1e-4;

/// `ᾱ` at integer `t` of a `steps`-long cosine schedule with offset `s`,
/// evaluated straight from the closed form.
pub fn cosine_alpha_bar(t: usize, steps: usize, s: f64) -> f64 {
    let r = |t: f64| ((t / steps as f64 + s) / (1.0 + s) * FRAC_PI_2).cos().powi(2);
    r(t as f64) / r(0.0)
}

/// Table of `ᾱ` over a grid of training timesteps.
///
/// Grid index `k` runs over `0..=len()`. For a full schedule the grid is
/// the identity (`timestep(k) == k`); a subsampled schedule keeps the
/// parent's training timesteps so the model's `t/T` input is unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    train_steps: usize,
    offset: f64,
    timesteps: Vec<usize>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one timestep"));
        }
        if !(offset > 0.0) {
            return Err(Error::invalid(format!("schedule offset {offset} must be positive")));
        }
        let alpha_bar = (0..=steps).map(|t| cosine_alpha_bar(t, steps, offset)).collect();
        Ok(NoiseSchedule {
            train_steps: steps,
            offset,
            timesteps: (0..=steps).collect(),
            alpha_bar,
        })
    }

    /// Number of denoising steps on this grid (`T` or `T_decode`).
    pub fn len(&self) -> usize {
        self.timesteps.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `T` of the training schedule this grid lives on.
    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// Training timestep at grid index `k`.
    pub fn timestep(&self, k: usize) -> usize {
        self.timesteps[k]
    }

    /// `t / T` fed to the timestep embedding.
    pub fn time_fraction(&self, k: usize) -> f64 {
        self.timesteps[k] as f64 / self.train_steps as f64
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.len() {
            return Err(Error::TimestepOutOfRange {
                t: k,
                min: 1,
                max: self.len(),
            });
        }
        Ok(())
    }

    /// `α_k = ᾱ_k / ᾱ_{k−1}` for `1 <= k <= len()`.
    pub fn alpha(&self, k: usize) -> Result<f64> {
        self.check_step(k)?;
        Ok(self.alpha_bar[k] / self.alpha_bar[k - 1])
    }

    /// `sqrt((α_k − ᾱ_k) / (1 − ᾱ_k))`, the factor relating a DDPM reverse
    /// step to re-noising the predicted clean sample.
    pub fn compensation_coefficient(&self, k: usize) -> Result<f64> {
        let alpha = self.alpha(k)?;
        let ab = self.alpha_bar[k];
        if ab >= 1.0 {
            return Err(Error::invalid(format!("ᾱ at step {k} is 1; coefficient undefined")));
        }
        Ok(((alpha - ab).max(0.0) / (1.0 - ab)).sqrt())
    }

    /// Evenly spaced sub-grid `t_k = round(k·T / T_decode)`, `k = 0..=T_decode`,
    /// with `ᾱ` read from this table.
    pub fn subsample(&self, decode_steps: usize) -> Result<Self> {
        let steps = self.len();
        if decode_steps == 0 || decode_steps > steps {
            return Err(Error::invalid(format!(
                "decode steps {decode_steps} outside 1..={steps}"
            )));
        }
        let idx: Vec<usize> = (0..=decode_steps)
            .map(|k| (2 * k * steps + decode_steps) / (2 * decode_steps))
            .collect();
        Ok(NoiseSchedule {
            train_steps: self.train_steps,
            offset: self.offset,
            timesteps: idx.iter().map(|&i| self.timesteps[i]).collect(),
            alpha_bar: idx.iter().map(|&i| self.alpha_bar[i]).collect(),
        })
    }

    /// Checks `ᾱ_0 = 1`, strict decrease, `ᾱ_T <= 1e-6` and `α ∈ (0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if self.alpha_bar[0] != 1.0 {
            return Err(Error::invalid("ᾱ_0 must be 1"));
        }
        if self.alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("ᾱ must be strictly decreasing"));
        }
        if self.alpha_bar[self.len()] > 1e-6 {
            return Err(Error::invalid("ᾱ_T must be at most 1e-6"));
        }
        for k in 1..=self.len() {
            let a = self.alpha(k)?;
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::invalid(format!("α_{k} = {a} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = NoiseSchedule::cosine(5000, 1e-4).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(5000) < 1e-30);
        s.validate().unwrap();
    }

    #[test]
    fn midpoint_matches_closed_form() {
        let s = NoiseSchedule::cosine(5000, 1e-4).unwrap();
        // independent evaluation: r(t) = cos^2(((t/T + s)/(1 + s))·π/2)
        let r = |t: f64| ((t / 5000.0 + 1e-4) / (1.0 + 1e-4) * std::f64::consts::PI / 2.0).cos().powi(2);
        let want = r(2500.0) / r(0.0);
        assert!((s.alpha_bar(2500) - want).abs() < 1e-12);
        assert!((want - 0.49992148).abs() < 1e-8);
    }

    #[test]
    fn alpha_times_previous_alpha_bar() {
        let s = NoiseSchedule::cosine(1000, 1e-4).unwrap();
        for k in 1..=1000 {
            assert!((s.alpha(k).unwrap() * s.alpha_bar(k - 1) - s.alpha_bar(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(NoiseSchedule::cosine(0, 1e-4).is_err());
        assert!(NoiseSchedule::cosine(10, 0.0).is_err());
        assert!(NoiseSchedule::cosine(10, -1.0).is_err());
        let s = NoiseSchedule::cosine(10, 1e-4).unwrap();
        assert!(s.compensation_coefficient(0).is_err());
        assert!(s.compensation_coefficient(11).is_err());
        assert!(s.subsample(0).is_err());
        assert!(s.subsample(11).is_err());
    }

    #[test]
    fn coefficient_spot_values() {
        let s = NoiseSchedule::cosine(5000, 1e-4).unwrap();
        let ab = |t: usize| cosine_alpha_bar(t, 5000, 1e-4);
        for t in [1usize, 50, 4999] {
            let a = ab(t) / ab(t - 1);
            let want = ((a - ab(t)) / (1.0 - ab(t))).sqrt();
            assert!((s.compensation_coefficient(t).unwrap() - want).abs() < 1e-12);
        }
        // t = 1: α_1 = ᾱ_1, so the coefficient vanishes
        assert_eq!(s.compensation_coefficient(1).unwrap(), 0.0);
        // ᾱ_T → 0 limit: coefficient ≈ sqrt(α_t)
        let c = s.compensation_coefficient(4999).unwrap();
        assert!((c - s.alpha(4999).unwrap().sqrt()).abs() < 1e-6);
    }

    #[test]
    fn subsampling() {
        let s = NoiseSchedule::cosine(5000, 1e-4).unwrap();
        assert_eq!(s.subsample(5000).unwrap(), s);
        let one = s.subsample(1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.alpha_bar(0), 1.0);
        assert_eq!(one.alpha_bar(1), s.alpha_bar(5000));
        let sub = s.subsample(1000).unwrap();
        for k in [0usize, 1, 2, 333, 999, 1000] {
            assert_eq!(sub.timestep(k), 5 * k);
            assert_eq!(sub.alpha_bar(k), s.alpha_bar(5 * k));
        }
        let odd = NoiseSchedule::cosine(200, 1e-4).unwrap().subsample(40).unwrap();
        assert_eq!(odd.timestep(1), 5);
        let thirds = NoiseSchedule::cosine(10, 1e-4).unwrap().subsample(3).unwrap();
        // round(10/3)=3, round(20/3)=7
        assert_eq!((0..=3).map(|k| thirds.timestep(k)).collect::<Vec<_>>(), vec![0, 3, 7, 10]);
        assert_eq!(sub.train_steps(), 5000);
        assert!((sub.time_fraction(500) - 0.5).abs() < 1e-15);
    }
}
