//! The distribution commanded targets are drawn from.
//!
//! A scalar Gaussian over target values. Its mean tracks a temperature-scaled
//! soft maximum of the values seen in the buffer and its spread tracks their
//! empirical standard deviation, floored so evaluation (`mean + std`) always
//! asks for something above the mean.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::estimators::mean_std;

/// Smallest temperature and floor used when the buffer has no spread.
const MIN_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMode {
    /// `mean = τ · ln((1/N) Σ exp(Z_i / τ))`, `std = max(floor, std(Z))`.
    SoftMax,
    /// Fit a Gaussian to the buffer, then tilt it by `exp(Z / β)`.
    Tilted,
}

/// How temperature and variance floor are chosen at each update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Scale {
    /// A fixed value in units of Z.
    Fixed(f64),
    /// This fraction of the current buffer range (max - min).
    RangeFraction(f64),
}

impl Scale {
    fn resolve(self, range: f64) -> f64 {
        match self {
            Scale::Fixed(v) => v,
            Scale::RangeFraction(f) => (f * range).max(MIN_SCALE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetModel {
    pub mean: f64,
    pub std: f64,
    /// Soft-max temperature used by the last update.
    pub temperature: f64,
    /// Variance floor used by the last update.
    pub std_floor: f64,
    pub beta: f64,
    pub temperature_rule: Scale,
    pub floor_rule: Scale,
    pub mode: UpdateMode,
}

impl Default for TargetModel {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
            temperature: 1.0,
            std_floor: MIN_SCALE,
            beta: 1.0,
            temperature_rule: Scale::RangeFraction(0.1),
            floor_rule: Scale::RangeFraction(0.05),
            mode: UpdateMode::SoftMax,
        }
    }
}

impl TargetModel {
    /// A model with fixed temperature and floor.
    pub fn fixed(mean: f64, std: f64, temperature: f64, std_floor: f64, beta: f64) -> Self {
        Self {
            mean,
            std: std.max(std_floor),
            temperature,
            std_floor,
            beta,
            temperature_rule: Scale::Fixed(temperature),
            floor_rule: Scale::Fixed(std_floor),
            mode: UpdateMode::SoftMax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(
            [self.mean, self.std, self.temperature, self.std_floor, self.beta]
                .iter()
                .all(|v| v.is_finite()),
            || "target model has non-finite parameters".into(),
        )?;
        ensure(self.temperature > 0.0 && self.std_floor > 0.0 && self.beta > 0.0, || {
            "temperature, std floor and beta must be positive".into()
        })?;
        ensure(self.std >= self.std_floor, || {
            format!("std {} below floor {}", self.std, self.std_floor)
        })
    }

    /// Refits the model to the buffer's target values. An empty buffer leaves
    /// the model unchanged.
    pub fn update(&self, values: &[f64]) -> Result<TargetModel> {
        if values.is_empty() {
            return Ok(self.clone());
        }
        ensure(values.iter().all(|v| v.is_finite()), || {
            "target update received a non-finite value".into()
        })?;
        // Sorting makes the result independent of buffer order, bit for bit.
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let min = sorted[0];
        let max = sorted[sorted.len() - 1];
        let range = max - min;
        let temperature = self.temperature_rule.resolve(range);
        let std_floor = self.floor_rule.resolve(range);
        ensure(temperature > 0.0 && std_floor > 0.0, || {
            "temperature and std floor must be positive".into()
        })?;

        let (mean, std) = mean_std(&sorted);
        let (new_mean, new_std) = match self.mode {
            UpdateMode::SoftMax => {
                // τ ln mean exp(Z/τ), shifted by the max for stability.
                let n = sorted.len() as f64;
                let sum: f64 = sorted.iter().map(|z| ((z - max) / temperature).exp()).sum();
                let soft = max + temperature * (sum / n).ln();
                (soft.clamp(mean.min(max), max), std.max(std_floor))
            }
            UpdateMode::Tilted => {
                let spread = std.max(std_floor);
                let (m, s) = tilt_gaussian(mean, spread, self.beta)?;
                (m, s)
            }
        };
        Ok(TargetModel {
            mean: new_mean,
            std: new_std,
            temperature,
            std_floor,
            ..self.clone()
        })
    }

    /// One draw from `Normal(mean, std²)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let eps: f64 = StandardNormal.sample(rng);
        self.mean + self.std * eps
    }

    /// The target used for evaluation: `mean + std`.
    pub fn eval_target(&self) -> f64 {
        self.mean + self.std
    }
}

pub fn target_update(model: &TargetModel, buffer_values: &[f64]) -> Result<TargetModel> {
    model.update(buffer_values)
}

pub fn sample_target<R: Rng + ?Sized>(model: &TargetModel, rng: &mut R) -> f64 {
    model.sample(rng)
}

pub fn eval_target(model: &TargetModel) -> f64 {
    model.eval_target()
}

/// Exponentially tilts `Normal(mean, std²)` by `exp(z/β)`.
///
/// The product of a Gaussian density and `exp(z/β)` is again Gaussian with the
/// same spread and its mean moved up by `std²/β`.
pub fn tilt_gaussian(mean: f64, std: f64, beta: f64) -> Result<(f64, f64)> {
    ensure(beta > 0.0 && beta.is_finite(), || format!("beta must be positive, got {beta}"))?;
    ensure(std > 0.0 && std.is_finite(), || format!("std must be positive, got {std}"))?;
    ensure(mean.is_finite(), || "mean must be finite".into())?;
    Ok((mean + std * std / beta, std))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    /// First two moments of `N(mean, std²)·exp(z/β)` by Simpson integration
    /// on a wide uniform grid around the untilted mean.
    pub(crate) fn integrate_tilted(mean: f64, std: f64, beta: f64) -> (f64, f64) {
        let half_width = 20.0 * std + 2.0 * std * std / beta;
        let lo = mean - half_width;
        let hi = mean + 3.0 * half_width;
        let n = 200_000usize; // even
        let h = (hi - lo) / n as f64;
        let log_density =
            |z: f64| -0.5 * ((z - mean) / std).powi(2) + z / beta;
        let peak = (0..=n)
            .map(|i| log_density(lo + i as f64 * h))
            .fold(f64::NEG_INFINITY, f64::max);
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..=n {
            let z = lo + i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let p = w * (log_density(z) - peak).exp();
            m0 += p;
            m1 += p * z;
            m2 += p * z * z;
        }
        let mu = m1 / m0;
        (mu, (m2 / m0 - mu * mu).sqrt())
    }

    #[test]
    fn equal_values_collapse_to_floor() {
        let model = TargetModel::fixed(0.0, 1.0, 1.0, 0.1, 1.0);
        let m = model.update(&[2.5; 6]).unwrap();
        assert_eq!(m.mean, 2.5);
        assert_eq!(m.std, 0.1);
    }

    #[test]
    fn soft_max_of_zero_and_one() {
        let model = TargetModel::fixed(0.0, 1.0, 1.0, 0.1, 1.0);
        let m = model.update(&[0.0, 1.0]).unwrap();
        let expected = ((1.0 + std::f64::consts::E) / 2.0).ln();
        assert!((m.mean - expected).abs() < 1e-15);
        assert!((m.mean - 0.62011).abs() < 1e-5);
    }

    #[test]
    fn small_temperature_approaches_max() {
        let model = TargetModel::fixed(0.0, 1.0, 0.01, 0.1, 1.0);
        let m = model.update(&[0.0, 1.0]).unwrap();
        assert!((m.mean - 1.0).abs() < 0.05, "{}", m.mean);
    }

    #[test]
    fn empty_buffer_is_a_no_op() {
        let model = TargetModel::fixed(3.0, 2.0, 1.0, 0.1, 1.0);
        assert_eq!(model.update(&[]).unwrap(), model);
    }

    #[test]
    fn non_finite_values_rejected() {
        let model = TargetModel::default();
        assert!(model.update(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn range_rules_scale_with_buffer() {
        let m = TargetModel::default().update(&[0.0, 10.0, 5.0]).unwrap();
        assert_eq!(m.temperature, 1.0);
        assert_eq!(m.std_floor, 0.5);
        m.validate().unwrap();
    }

    #[test]
    fn eval_target_definition() {
        let m = TargetModel::fixed(3.0, 1.0, 1.0, 0.1, 1.0);
        assert_eq!(m.eval_target(), 4.0);
        let m = TargetModel::fixed(3.0, 0.01, 1.0, 0.1, 1.0);
        assert_eq!(m.eval_target(), 3.1);
    }

    #[test]
    fn eval_after_update_composes() {
        let model = TargetModel::fixed(0.0, 1.0, 1.0, 0.1, 1.0);
        let m = model.update(&[0.0, 1.0]).unwrap();
        let expected = ((1.0 + std::f64::consts::E) / 2.0).ln() + 0.5;
        assert!((m.eval_target() - expected).abs() < 1e-15);
    }

    #[test]
    fn sampling_concentrates_at_floor() {
        let m = TargetModel::fixed(1.5, 1e-4, 1.0, 1e-4, 1.0);
        let mut rng = seeded(4);
        let draws: Vec<f64> = (0..1000).map(|_| m.sample(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.5).abs() <= 3.0 * 1e-4 / 1000f64.sqrt());
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = TargetModel::fixed(0.0, 2.0, 1.0, 0.1, 1.0);
        let a: Vec<f64> = {
            let mut rng = seeded(9);
            (0..10).map(|_| m.sample(&mut rng)).collect()
        };
        let b: Vec<f64> = {
            let mut rng = seeded(9);
            (0..10).map(|_| m.sample(&mut rng)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn sample_spread_matches_std() {
        let m = TargetModel::fixed(-1.0, 2.0, 1.0, 0.1, 1.0);
        let mut rng = seeded(10);
        let draws: Vec<f64> = (0..10_000).map(|_| m.sample(&mut rng)).collect();
        let (_, s) = mean_std(&draws);
        assert!((s - 2.0).abs() < 0.05 * 2.0, "{s}");
    }

    #[test]
    fn tilt_closed_form_cases() {
        assert_eq!(tilt_gaussian(0.0, 1.0, 1.0).unwrap(), (1.0, 1.0));
        let (m, s) = tilt_gaussian(0.7, 1.3, 1e9).unwrap();
        assert!((m - 0.7).abs() < 1e-8);
        assert_eq!(s, 1.3);
        assert_eq!(tilt_gaussian(2.0, 0.5, 0.25).unwrap(), (3.0, 0.5));
        let (mi, si) = integrate_tilted(2.0, 0.5, 0.25);
        assert!((mi - 3.0).abs() < 1e-6 && (si - 0.5).abs() < 1e-6, "{mi} {si}");
    }

    #[test]
    fn tilt_rejects_bad_beta() {
        assert!(tilt_gaussian(0.0, 1.0, 0.0).is_err());
        assert!(tilt_gaussian(0.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn tilted_mode_shifts_by_variance_over_beta() {
        let mut model = TargetModel::fixed(0.0, 1.0, 1.0, 0.01, 2.0);
        model.mode = UpdateMode::Tilted;
        let m = model.update(&[0.0, 2.0]).unwrap();
        assert_eq!(m.mean, 1.0 + 0.5);
        assert_eq!(m.std, 1.0);
    }

    proptest! {
        #[test]
        fn soft_max_lies_between_mean_and_max(
            values in prop::collection::vec(-50.0f64..50.0, 1..60),
            temp in 0.01f64..100.0,
        ) {
            let model = TargetModel::fixed(0.0, 1.0, temp, 0.1, 1.0);
            let m = model.update(&values).unwrap();
            let (mean, _) = mean_std(&values);
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m.mean >= mean - 1e-9 && m.mean <= max);
        }

        #[test]
        fn adding_a_new_max_never_lowers_the_mean(
            values in prop::collection::vec(-50.0f64..50.0, 1..60),
            bump in 0.0f64..20.0,
            temp in 0.01f64..100.0,
        ) {
            let model = TargetModel::fixed(0.0, 1.0, temp, 0.1, 1.0);
            let before = model.update(&values).unwrap();
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut more = values.clone();
            more.push(max + bump + 1e-9);
            let after = model.update(&more).unwrap();
            prop_assert!(after.mean >= before.mean);
        }

        #[test]
        fn double_tilt_is_harmonic_tilt(
            mean in -10.0f64..10.0,
            std in 0.01f64..5.0,
            b1 in 0.1f64..10.0,
            b2 in 0.1f64..10.0,
        ) {
            let (m1, s1) = tilt_gaussian(mean, std, b1).unwrap();
            let (m2, s2) = tilt_gaussian(m1, s1, b2).unwrap();
            let combined = 1.0 / (1.0 / b1 + 1.0 / b2);
            let (m3, s3) = tilt_gaussian(mean, std, combined).unwrap();
            prop_assert!((m2 - m3).abs() <= 1e-12 * m3.abs().max(1.0));
            prop_assert_eq!(s2, s3);
        }

        #[test]
        fn eval_target_ignores_buffer_order(
            values in prop::collection::vec(-20.0f64..20.0, 2..40),
            seed in 0u64..100,
        ) {
            use rand::seq::SliceRandom;
            let model = TargetModel::default();
            let mut shuffled = values.clone();
            shuffled.shuffle(&mut seeded(seed));
            let a = model.update(&values).unwrap().eval_target();
            let b = model.update(&shuffled).unwrap().eval_target();
            prop_assert_eq!(a, b);
        }
    }
}
