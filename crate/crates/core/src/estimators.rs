//! Relabeling targets: discounted reward-to-go, baseline-subtracted
//! advantages, and TD(λ) value-regression targets.

use serde::{Deserialize, Serialize};

use crate::envs::{Action, EndKind};
use crate::error::{ensure, Result};

fn check_unit(name: &str, v: f64) -> Result<()> {
    ensure((0.0..=1.0).contains(&v), || format!("{name} = {v} is outside [0, 1]"))
}

fn check_finite(name: &str, xs: &[f64]) -> Result<()> {
    ensure(xs.iter().all(|x| x.is_finite()), || {
        format!("{name} contains a non-finite value")
    })
}

/// `out[t] = Σ_{t' >= t} γ^(t'-t) r[t']`, computed in one backward pass.
pub fn reward_to_go(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    ensure(!rewards.is_empty(), || "reward_to_go needs at least one reward".into())?;
    check_unit("gamma", gamma)?;
    check_finite("rewards", rewards)?;
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    Ok(out)
}

/// Monte Carlo return minus a per-state baseline.
pub fn advantages(rewards: &[f64], baselines: &[f64], gamma: f64) -> Result<Vec<f64>> {
    ensure(rewards.len() == baselines.len(), || {
        format!(
            "advantages: {} rewards but {} baselines",
            rewards.len(),
            baselines.len()
        )
    })?;
    check_finite("baselines", baselines)?;
    let mut out = reward_to_go(rewards, gamma)?;
    for (o, b) in out.iter_mut().zip(baselines) {
        *o -= b;
    }
    Ok(out)
}

/// TD(λ) targets by backward recursion:
/// `G[t] = r[t] + γ((1-λ) V(s[t+1]) + λ G[t+1])`, where `V(s[T+1])` and
/// `G[T+1]` are both `bootstrap`.
///
/// `values[t]` is the current estimate for `s[t]`; `bootstrap` is the estimate
/// for the state after the last step (zero after a goal termination).
pub fn td_lambda_targets(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    check_unit("gamma", gamma)?;
    check_unit("lambda", lambda)?;
    ensure(rewards.len() == values.len(), || {
        format!(
            "td_lambda_targets: {} rewards but {} values",
            rewards.len(),
            values.len()
        )
    })?;
    ensure(!rewards.is_empty(), || "td_lambda_targets needs at least one step".into())?;
    check_finite("rewards", rewards)?;
    check_finite("values", values)?;
    ensure(bootstrap.is_finite(), || "non-finite bootstrap value".into())?;

    let n = rewards.len();
    let mut out = vec![0.0; n];
    let mut next_return = bootstrap;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let g = rewards[t] + gamma * ((1.0 - lambda) * next_value + lambda * next_return);
        out[t] = g;
        next_return = g;
        next_value = values[t];
    }
    Ok(out)
}

/// Mean/standard-deviation normalizer for conditioning inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl Normalizer {
    const MIN_STD: f64 = 1e-6;

    /// Fits mean and population standard deviation; identity when empty.
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let (mean, std) = mean_std(values);
        Self {
            mean,
            std: std.max(Self::MIN_STD),
        }
    }

    pub fn normalize(&self, z: f64) -> f64 {
        (z - self.mean) / self.std
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One rollout before relabeling.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    /// Commanded target fed to the policy at each step.
    pub commanded: Vec<f64>,
    /// How the rollout stopped.
    pub end: EndKind,
    /// Observation after the last step.
    pub final_observation: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn undiscounted_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// A rollout together with its per-step relabeled targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrajectory {
    pub trajectory: Trajectory,
    pub targets: Vec<f64>,
    pub gamma: f64,
    pub lambda: f64,
}

impl LabeledTrajectory {
    /// Return-conditioned labels: discounted reward-to-go.
    pub fn returns(trajectory: Trajectory, gamma: f64, lambda: f64) -> Result<Self> {
        check_unit("lambda", lambda)?;
        let targets = reward_to_go(&trajectory.rewards, gamma)?;
        Ok(Self {
            trajectory,
            targets,
            gamma,
            lambda,
        })
    }

    /// Advantage-conditioned labels. `values` are baseline estimates for each
    /// visited state; a time-limit cutoff adds the discounted `bootstrap`
    /// estimate of the post-cutoff state to the Monte Carlo return.
    pub fn advantages(
        trajectory: Trajectory,
        values: &[f64],
        bootstrap: f64,
        gamma: f64,
        lambda: f64,
    ) -> Result<Self> {
        check_unit("lambda", lambda)?;
        let mut rewards = trajectory.rewards.clone();
        if trajectory.end == EndKind::Timeout {
            if let Some(last) = rewards.last_mut() {
                *last += gamma * bootstrap;
            }
        }
        let targets = advantages(&rewards, values, gamma)?;
        Ok(Self {
            trajectory,
            targets,
            gamma,
            lambda,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    /// Double-loop reward-to-go.
    fn brute_rtg(r: &[f64], g: f64) -> Vec<f64> {
        (0..r.len())
            .map(|t| (t..r.len()).map(|k| g.powi((k - t) as i32) * r[k]).sum())
            .collect()
    }

    /// Forward-view λ-return: a λ-weighted mix of n-step returns.
    fn forward_view(r: &[f64], v: &[f64], boot: f64, g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        let value_at = |k: usize| if k < n { v[k] } else { boot };
        let n_step = |t: usize, steps: usize| -> f64 {
            let mut acc = 0.0;
            for k in 0..steps {
                acc += g.powi(k as i32) * r[t + k];
            }
            acc + g.powi(steps as i32) * value_at(t + steps)
        };
        (0..n)
            .map(|t| {
                let m = n - t;
                let mut acc = 0.0;
                for steps in 1..m {
                    acc += (1.0 - l) * l.powi(steps as i32 - 1) * n_step(t, steps);
                }
                acc + l.powi(m as i32 - 1) * n_step(t, m)
            })
            .collect()
    }

    #[test]
    fn zero_discount_returns_rewards() {
        let r = [1.0, -2.0, 3.5];
        assert_eq!(reward_to_go(&r, 0.0).unwrap(), r.to_vec());
    }

    #[test]
    fn half_discount_three_ones() {
        assert_eq!(brute_rtg(&[1.0, 1.0, 1.0], 0.5), vec![1.75, 1.5, 1.0]);
        assert_eq!(reward_to_go(&[1.0, 1.0, 1.0], 0.5).unwrap(), vec![1.75, 1.5, 1.0]);
    }

    #[test]
    fn zero_rewards_give_zero() {
        assert_eq!(reward_to_go(&[0.0; 4], 0.9).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn reward_to_go_rejects_bad_input() {
        assert!(reward_to_go(&[1.0, f64::NAN], 0.9).is_err());
        assert!(reward_to_go(&[], 0.9).is_err());
        assert!(reward_to_go(&[1.0], 1.5).is_err());
    }

    #[test]
    fn advantage_edge_cases() {
        let r = [0.5, -1.0, 2.0, 0.25];
        let rtg = reward_to_go(&r, 0.9).unwrap();
        assert_eq!(advantages(&r, &[0.0; 4], 0.9).unwrap(), rtg);
        assert_eq!(advantages(&r, &rtg, 0.9).unwrap(), vec![0.0; 4]);
        assert!(advantages(&r, &[0.0; 3], 0.9).is_err());
    }

    #[test]
    fn advantages_match_brute_force() {
        let mut rng = seeded(17);
        let r: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = advantages(&r, &b, 0.95).unwrap();
        let expect: Vec<f64> = brute_rtg(&r, 0.95).iter().zip(&b).map(|(x, y)| x - y).collect();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn td_lambda_limits() {
        let mut rng = seeded(2);
        let r: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(
            td_lambda_targets(&r, &v, 0.0, 0.9, 1.0).unwrap(),
            reward_to_go(&r, 0.9).unwrap()
        );
        let boot = 0.3;
        let one_step = td_lambda_targets(&r, &v, boot, 0.9, 0.0).unwrap();
        for t in 0..8 {
            let next = if t + 1 < 8 { v[t + 1] } else { boot };
            assert_eq!(one_step[t], r[t] + 0.9 * next);
        }
    }

    #[test]
    fn td_lambda_matches_forward_view() {
        let mut rng = seeded(8);
        let r: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = td_lambda_targets(&r, &v, 0.4, 0.99, 0.95).unwrap();
        let expect = forward_view(&r, &v, 0.4, 0.99, 0.95);
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-10);
        }
    }

    #[test]
    fn td_lambda_rejects_out_of_range() {
        assert!(td_lambda_targets(&[1.0], &[0.0], 0.0, 0.9, 1.1).is_err());
        assert!(td_lambda_targets(&[1.0], &[0.0], 0.0, -0.1, 0.5).is_err());
        assert!(td_lambda_targets(&[1.0, 2.0], &[0.0], 0.0, 0.9, 0.5).is_err());
    }

    fn traj(rewards: Vec<f64>, end: EndKind) -> Trajectory {
        let n = rewards.len();
        Trajectory {
            observations: vec![vec![0.0]; n],
            actions: vec![Action::Discrete(0); n],
            rewards,
            commanded: vec![0.0; n],
            end,
            final_observation: vec![0.0],
        }
    }

    #[test]
    fn advantage_labels_bootstrap_only_on_timeout() {
        let goal = LabeledTrajectory::advantages(traj(vec![1.0, 1.0], EndKind::Goal), &[0.0, 0.0], 5.0, 0.5, 0.9)
            .unwrap();
        assert_eq!(goal.targets, vec![1.5, 1.0]);
        let cut =
            LabeledTrajectory::advantages(traj(vec![1.0, 1.0], EndKind::Timeout), &[0.0, 0.0], 4.0, 0.5, 0.9)
                .unwrap();
        assert_eq!(cut.targets, vec![2.5, 3.0]);
    }

    #[test]
    fn normalizer_basics() {
        let n = Normalizer::fit(&[1.0, 3.0]);
        assert_eq!(n, Normalizer { mean: 2.0, std: 1.0 });
        assert_eq!(n.normalize(4.0), 2.0);
        assert_eq!(Normalizer::fit(&[]), Normalizer::default());
        assert!(Normalizer::fit(&[2.0, 2.0]).std > 0.0);
    }

    proptest! {
        #[test]
        fn backward_and_forward_views_agree(
            r in prop::collection::vec(-2.0f64..2.0, 1..50),
            seed in 0u64..1000,
            gamma in 0.0f64..=1.0,
            lambda in 0.0f64..=1.0,
            boot in -3.0f64..3.0,
        ) {
            let mut rng = seeded(seed);
            let v: Vec<f64> = r.iter().map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = td_lambda_targets(&r, &v, boot, gamma, lambda).unwrap();
            let expect = forward_view(&r, &v, boot, gamma, lambda);
            for (g, e) in got.iter().zip(&expect) {
                prop_assert!((g - e).abs() < 1e-10, "{} vs {}", g, e);
            }
        }

        #[test]
        fn reward_to_go_is_linear(
            r in prop::collection::vec(-5.0f64..5.0, 1..40),
            c in -4.0f64..4.0,
            gamma in 0.0f64..=1.0,
        ) {
            let base = reward_to_go(&r, gamma).unwrap();
            let scaled: Vec<f64> = r.iter().map(|x| c * x).collect();
            let out = reward_to_go(&scaled, gamma).unwrap();
            for (o, b) in out.iter().zip(&base) {
                prop_assert!((o - c * b).abs() <= 1e-12 * (1.0 + (c * b).abs()) * 10.0);
            }
        }

        #[test]
        fn advantages_shift_with_baseline(
            r in prop::collection::vec(-5.0f64..5.0, 1..40),
            c in -4.0f64..4.0,
        ) {
            let b: Vec<f64> = r.iter().map(|x| 0.5 * x).collect();
            let base = advantages(&r, &b, 0.9).unwrap();
            let shifted: Vec<f64> = b.iter().map(|x| x + c).collect();
            let out = advantages(&r, &shifted, 0.9).unwrap();
            for (o, a) in out.iter().zip(&base) {
                prop_assert!((o - (a - c)).abs() < 1e-12);
            }
        }
    }
}
