//! Online training loop, offline training, baselines and evaluation.

use std::time::Instant;

use log::{debug, info};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::{env_reset, env_step, optimal_return_from, Action, EndKind, EnvSpec};
use crate::error::{ensure, Error, Result};
use crate::estimators::{td_lambda_targets, LabeledTrajectory, Normalizer, Trajectory};
use crate::numerics::{AdamConfig, OptimizerState};
use crate::policy::{
    exp_weight, policy_loss, value_loss, ActMode, Conditioning, NetworkConfig, PolicyGrads,
    PolicyNet, ValueNet,
};
use crate::replay::{RingBuffer, Transition};
use crate::rng::{seeded, stream, Rng, Stream};
use crate::target_model::{Scale, TargetModel, UpdateMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Conditioned on discounted reward-to-go.
    RcpR,
    /// Conditioned on advantage against a fitted value baseline.
    RcpA,
    /// Unconditioned, advantage-weighted regression.
    Awr,
    /// Unconditioned, unweighted regression.
    Bc,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::RcpR => "rcp-r",
            Algorithm::RcpA => "rcp-a",
            Algorithm::Awr => "awr",
            Algorithm::Bc => "bc",
        }
    }

    fn uses_value(self) -> bool {
        matches!(self, Algorithm::RcpA | Algorithm::Awr)
    }

    fn conditioned(self) -> bool {
        matches!(self, Algorithm::RcpR | Algorithm::RcpA)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Exponential regression weights on the raw target.
    pub weighted: bool,
    pub beta: f64,
    pub w_max: f64,
    pub env: String,
    pub gamma: f64,
    pub lambda: f64,
    pub buffer_capacity: usize,
    pub samples_per_iteration: usize,
    pub batch_size: usize,
    pub value_steps: usize,
    pub policy_steps: usize,
    pub iterations: usize,
    pub seed: u64,
    pub eval_episodes: usize,
    pub diagnostic_episodes: usize,
    pub target_mode: UpdateMode,
    /// Soft-max temperature as a fraction of the buffer's value range.
    pub target_temperature: f64,
    /// Floor on the target spread as a fraction of the buffer's value range.
    pub target_std_floor: f64,
    pub architecture: Conditioning,
    pub hidden_width: usize,
    pub embed_width: usize,
    pub init_log_std: f64,
    pub policy_step_size: f64,
    pub value_step_size: f64,
    /// Value-function steps taken on a static dataset before it is labeled.
    pub offline_value_warmup: usize,
    /// Add the discounted value of the cut-off state to returns of rollouts
    /// that hit the time limit.
    pub bootstrap_timeouts: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::RcpA,
            weighted: true,
            beta: 1.0,
            w_max: 20.0,
            env: "gridworld8x8".into(),
            gamma: 0.99,
            lambda: 0.95,
            buffer_capacity: 100_000,
            samples_per_iteration: 2000,
            batch_size: 256,
            value_steps: 200,
            policy_steps: 1000,
            iterations: 300,
            seed: 0,
            eval_episodes: 10,
            diagnostic_episodes: 10,
            target_mode: UpdateMode::SoftMax,
            target_temperature: 0.1,
            target_std_floor: 0.05,
            architecture: Conditioning::Multiply,
            hidden_width: 128,
            embed_width: 32,
            init_log_std: -0.5,
            policy_step_size: 3e-4,
            value_step_size: 1e-3,
            offline_value_warmup: 2000,
            bootstrap_timeouts: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        cfg(self.beta > 0.0 && self.beta.is_finite(), "beta must be positive")?;
        cfg(self.w_max > 0.0, "w_max must be positive")?;
        cfg((0.0..=1.0).contains(&self.gamma), "gamma must lie in [0, 1]")?;
        cfg((0.0..=1.0).contains(&self.lambda), "lambda must lie in [0, 1]")?;
        for (name, v) in [
            ("buffer_capacity", self.buffer_capacity),
            ("samples_per_iteration", self.samples_per_iteration),
            ("batch_size", self.batch_size),
            ("value_steps", self.value_steps),
            ("policy_steps", self.policy_steps),
            ("eval_episodes", self.eval_episodes),
            ("hidden_width", self.hidden_width),
            ("embed_width", self.embed_width),
        ] {
            cfg(v >= 1, &format!("{name} must be at least 1"))?;
        }
        cfg(self.target_temperature > 0.0, "target_temperature must be positive")?;
        cfg(self.target_std_floor > 0.0, "target_std_floor must be positive")?;
        cfg(self.policy_step_size > 0.0, "policy_step_size must be positive")?;
        cfg(self.value_step_size > 0.0, "value_step_size must be positive")?;
        cfg(
            self.architecture != Conditioning::None,
            "architecture must be concat or multiply",
        )?;
        EnvSpec::by_name(&self.env)?;
        Ok(())
    }

    fn network(&self) -> NetworkConfig {
        NetworkConfig {
            hidden_width: self.hidden_width,
            hidden_layers: 3,
            embed_width: self.embed_width,
            init_log_std: self.init_log_std,
        }
    }

    fn conditioning(&self) -> Conditioning {
        if self.algorithm.conditioned() {
            self.architecture
        } else {
            Conditioning::None
        }
    }

    /// Regression weight for a raw target under this configuration.
    pub fn weight_for(&self, z: f64) -> f64 {
        let exp = match self.algorithm {
            Algorithm::Awr => true,
            Algorithm::Bc => false,
            Algorithm::RcpR | Algorithm::RcpA => self.weighted,
        };
        if exp {
            exp_weight(z, self.beta, self.w_max)
        } else {
            1.0
        }
    }
}

/// One row of the learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub eval_mean_return: f64,
    pub eval_max_return: f64,
    pub target_mean: f64,
    pub target_std: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub buffer_size: usize,
    pub wall_clock_seconds: f64,
}

/// Anything that can pick an action from an observation and a normalized target.
pub trait Actor {
    fn choose(&self, obs: &[f64], z_norm: f64, mode: ActMode, rng: &mut Rng) -> Result<Action>;
}

impl Actor for PolicyNet {
    fn choose(&self, obs: &[f64], z_norm: f64, mode: ActMode, rng: &mut Rng) -> Result<Action> {
        self.act(obs, z_norm, mode, rng)
    }
}

/// Runs one episode (or its first `max_steps` steps). `command` yields the raw
/// target for each step.
pub fn rollout(
    spec: &EnvSpec,
    actor: &dyn Actor,
    reset_seed: u64,
    max_steps: usize,
    mode: ActMode,
    normalizer: &Normalizer,
    command: &mut dyn FnMut() -> f64,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let (mut state, mut obs) = env_reset(spec, reset_seed)?;
    let mut traj = Trajectory {
        observations: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        commanded: Vec::new(),
        end: EndKind::Timeout,
        final_observation: Vec::new(),
    };
    for _ in 0..max_steps {
        let z = command();
        let action = actor.choose(&obs, normalizer.normalize(z), mode, rng)?;
        let step = env_step(spec, &mut state, &action)?;
        if !step.reward.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite reward {} at step {} of a {} rollout (observation {:?}, action {:?})",
                step.reward,
                traj.len(),
                spec.name,
                obs,
                action
            )));
        }
        traj.observations.push(std::mem::replace(&mut obs, step.observation));
        traj.actions.push(action);
        traj.rewards.push(step.reward);
        traj.commanded.push(z);
        if let Some(end) = step.end {
            traj.end = end;
            break;
        }
    }
    traj.final_observation = obs;
    Ok(traj)
}

/// How targets are chosen and scored during evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Conditioner<'a> {
    pub target: &'a TargetModel,
    pub normalizer: &'a Normalizer,
    /// Draw a fresh target every step instead of once per episode.
    pub per_step: bool,
    /// Observed values are advantages against this baseline when present,
    /// otherwise discounted returns.
    pub value: Option<&'a ValueNet>,
    pub gamma: f64,
    pub bootstrap_timeouts: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalResult {
    pub mean_return: f64,
    pub max_return: f64,
    /// Undiscounted return of each deterministic episode.
    pub returns: Vec<f64>,
    /// (commanded, observed) target pairs from the stochastic episodes.
    pub pairs: Vec<(f64, f64)>,
}

/// Reset seeds used for `n` evaluation episodes under `seed`.
pub fn episode_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = seeded(seed);
    (0..n).map(|_| rng.gen()).collect()
}

fn diagnostic_seed(seed: u64) -> u64 {
    seed ^ 0xD1A6_0000_0000_0001
}

/// Deterministic episodes conditioned on `mean + std` of the target model,
/// followed by `diagnostic_episodes` stochastic episodes with sampled targets.
pub fn evaluate(
    actor: &dyn Actor,
    spec: &EnvSpec,
    cond: &Conditioner,
    episodes: usize,
    diagnostic_episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    ensure(episodes >= 1, || "evaluate needs at least one episode".into())?;
    let mut rng = seeded(seed);
    let z_eval = cond.target.eval_target();
    let mut returns = Vec::with_capacity(episodes);
    for reset in episode_seeds(seed, episodes) {
        let traj = rollout(
            spec,
            actor,
            reset,
            spec.max_episode_length,
            ActMode::Deterministic,
            cond.normalizer,
            &mut || z_eval,
            &mut rng,
        )?;
        returns.push(traj.undiscounted_return());
    }

    let mut pairs = Vec::new();
    let dseed = diagnostic_seed(seed);
    let mut drng = seeded(dseed);
    let mut zrng = seeded(dseed.wrapping_add(1));
    for reset in episode_seeds(dseed, diagnostic_episodes) {
        let fixed = cond.target.sample(&mut zrng);
        let traj = {
            let mut command = || {
                if cond.per_step {
                    cond.target.sample(&mut zrng)
                } else {
                    fixed
                }
            };
            rollout(
                spec,
                actor,
                reset,
                spec.max_episode_length,
                ActMode::Stochastic,
                cond.normalizer,
                &mut command,
                &mut drng,
            )?
        };
        let commanded = traj.commanded.clone();
        let labeled = label_trajectory(traj, cond.value, cond.gamma, 1.0, cond.bootstrap_timeouts)?;
        if cond.per_step {
            pairs.extend(commanded.into_iter().zip(labeled.targets));
        } else if let Some(first) = labeled.targets.first() {
            pairs.push((commanded[0], *first));
        }
    }

    let mean_return = returns.iter().sum::<f64>() / returns.len() as f64;
    let max_return = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(EvalResult {
        mean_return,
        max_return,
        returns,
        pairs,
    })
}

/// Relabels a rollout with advantages if a baseline is given, otherwise with
/// discounted reward-to-go.
fn label_trajectory(
    traj: Trajectory,
    value: Option<&ValueNet>,
    gamma: f64,
    lambda: f64,
    bootstrap_timeouts: bool,
) -> Result<LabeledTrajectory> {
    match value {
        None => LabeledTrajectory::returns(traj, gamma, lambda),
        Some(v) => {
            let values = traj
                .observations
                .iter()
                .map(|o| v.predict(o))
                .collect::<Result<Vec<_>>>()?;
            let bootstrap = match traj.end {
                EndKind::Timeout if bootstrap_timeouts => v.predict(&traj.final_observation)?,
                _ => 0.0,
            };
            LabeledTrajectory::advantages(traj, &values, bootstrap, gamma, lambda)
        }
    }
}

fn to_transitions(labeled: LabeledTrajectory) -> Vec<Transition> {
    let LabeledTrajectory {
        trajectory, targets, ..
    } = labeled;
    let n = trajectory.len();
    let Trajectory {
        observations,
        actions,
        rewards,
        end,
        final_observation,
        ..
    } = trajectory;
    let mut final_observation = Some(final_observation);
    observations
        .into_iter()
        .zip(actions)
        .zip(rewards)
        .zip(targets)
        .enumerate()
        .map(|(i, (((obs, action), reward), z))| {
            let mut t = Transition::new(obs, action, z);
            t.reward = reward;
            if i + 1 == n {
                t.end = Some(end);
                t.final_observation = final_observation.take();
            }
            t
        })
        .collect()
}

/// Splits buffer contents (oldest first) into rollouts at their end markers.
fn segments(items: &[&Transition]) -> Result<Vec<std::ops::Range<usize>>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, t) in items.iter().enumerate() {
        if t.end.is_some() {
            out.push(start..i + 1);
            start = i + 1;
        }
    }
    ensure(start == items.len(), || {
        "buffer ends in the middle of a rollout".into()
    })?;
    Ok(out)
}

/// TD(λ) value targets for every buffered transition under the current
/// value estimate, in buffer order.
pub fn buffer_value_targets(
    items: &[&Transition],
    value: &ValueNet,
    gamma: f64,
    lambda: f64,
    bootstrap_timeouts: bool,
) -> Result<Vec<f64>> {
    let mut targets = Vec::with_capacity(items.len());
    for seg in segments(items)? {
        let part = &items[seg];
        let rewards: Vec<f64> = part.iter().map(|t| t.reward).collect();
        let values = part
            .iter()
            .map(|t| value.predict(&t.observation))
            .collect::<Result<Vec<_>>>()?;
        let last = part.last().expect("segments are non-empty");
        let bootstrap = match (last.end, &last.final_observation) {
            (Some(EndKind::Timeout), _) if !bootstrap_timeouts => 0.0,
            (Some(EndKind::Timeout), Some(obs)) => value.predict(obs)?,
            (Some(EndKind::Timeout), None) => {
                return Err(Error::Format("timeout transition lacks a final observation".into()))
            }
            _ => 0.0,
        };
        targets.extend(td_lambda_targets(&rewards, &values, bootstrap, gamma, lambda)?);
    }
    Ok(targets)
}

/// Advantage-weighted regression loss: the batch's raw targets become
/// exponential weights and the (unconditioned) policy never sees them.
pub fn awr_update<T: std::borrow::Borrow<Transition>>(
    net: &PolicyNet,
    batch: &[T],
    beta: f64,
    w_max: f64,
) -> Result<PolicyGrads> {
    ensure(net.conditioning == Conditioning::None, || {
        "awr_update expects an unconditioned policy".into()
    })?;
    let weighted: Vec<Transition> = batch
        .iter()
        .map(|t| {
            let mut t = t.borrow().clone();
            t.weight = exp_weight(t.z, beta, w_max);
            t.z_norm = 0.0;
            t
        })
        .collect();
    policy_loss(net, &weighted)
}

/// Learner state for one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub spec: EnvSpec,
    pub policy: PolicyNet,
    pub value: Option<ValueNet>,
    pub buffer: RingBuffer<Transition>,
    pub target: TargetModel,
    /// Maps raw targets to the policy's conditioning input.
    pub normalizer: Normalizer,
    pub iteration: usize,
    pub last_eval: Option<EvalResult>,
    policy_opt: OptimizerState,
    value_opt: Option<OptimizerState>,
    env_rng: Rng,
    rollout_rng: Rng,
    minibatch_rng: Rng,
    target_rng: Rng,
    eval_seed: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let spec = EnvSpec::by_name(&config.env)?;
        let net = config.network();
        let mut init = stream(config.seed, Stream::PolicyInit);
        let policy = PolicyNet::new(
            spec.obs_dim,
            spec.action_space.clone(),
            config.conditioning(),
            &net,
            &mut init,
        );
        let value = config
            .algorithm
            .uses_value()
            .then(|| ValueNet::new(spec.obs_dim, &net, &mut init));
        let policy_opt = OptimizerState::new(&policy, AdamConfig::with_step_size(config.policy_step_size));
        let value_opt = value
            .as_ref()
            .map(|v| OptimizerState::new(&v.params, AdamConfig::with_step_size(config.value_step_size)));
        let target = TargetModel {
            beta: config.beta,
            temperature_rule: Scale::RangeFraction(config.target_temperature),
            floor_rule: Scale::RangeFraction(config.target_std_floor),
            mode: config.target_mode,
            ..TargetModel::default()
        };
        target.validate()?;
        let eval_seed = stream(config.seed, Stream::Eval).gen();
        Ok(Self {
            buffer: RingBuffer::new(config.buffer_capacity)?,
            env_rng: stream(config.seed, Stream::Env),
            rollout_rng: stream(config.seed, Stream::Rollout),
            minibatch_rng: stream(config.seed, Stream::Minibatch),
            target_rng: stream(config.seed, Stream::TargetSampling),
            config,
            spec,
            policy,
            value,
            target,
            normalizer: Normalizer::default(),
            iteration: 0,
            last_eval: None,
            policy_opt,
            value_opt,
            eval_seed,
        })
    }

    /// Seed that fixes the evaluation episodes of this run.
    pub fn eval_seed(&self) -> u64 {
        self.eval_seed
    }

    /// Gathers exactly `samples_per_iteration` transitions with the
    /// stochastic policy. The last rollout is cut short if needed and treated
    /// as a time-limit cutoff.
    pub fn collect(&mut self) -> Result<Vec<Trajectory>> {
        let mut remaining = self.config.samples_per_iteration;
        let per_step = self.config.algorithm == Algorithm::RcpA;
        let conditioned = self.config.algorithm.conditioned();
        let mut out = Vec::new();
        while remaining > 0 {
            let reset = self.env_rng.gen();
            let fixed = if conditioned { self.target.sample(&mut self.target_rng) } else { 0.0 };
            let target = &self.target;
            let target_rng = &mut self.target_rng;
            let mut command = || {
                if per_step {
                    target.sample(target_rng)
                } else {
                    fixed
                }
            };
            let traj = rollout(
                &self.spec,
                &self.policy,
                reset,
                remaining.min(self.spec.max_episode_length),
                ActMode::Stochastic,
                &self.normalizer,
                &mut command,
                &mut self.rollout_rng,
            )?;
            remaining -= traj.len();
            out.push(traj);
        }
        Ok(out)
    }

    /// Relabels rollouts with the algorithm's target values.
    pub fn label(&self, trajectories: Vec<Trajectory>) -> Result<Vec<Transition>> {
        let value = if self.config.algorithm.uses_value() { self.value.as_ref() } else { None };
        let mut out = Vec::new();
        for traj in trajectories {
            let labeled = label_trajectory(traj, value, self.config.gamma, self.config.lambda, self.config.bootstrap_timeouts)?;
            out.extend(to_transitions(labeled));
        }
        Ok(out)
    }

    /// Fits the value network to TD(λ) targets over the buffer. Returns the
    /// mean loss in normalized units.
    pub fn update_value(&mut self, steps: usize) -> Result<f64> {
        let (Some(value), Some(opt)) = (self.value.as_mut(), self.value_opt.as_mut()) else {
            return Ok(0.0);
        };
        if self.buffer.is_empty() || steps == 0 {
            return Ok(0.0);
        }
        let items: Vec<&Transition> = self.buffer.iter().collect();
        let targets = buffer_value_targets(&items, value, self.config.gamma, self.config.lambda, self.config.bootstrap_timeouts)?;
        value.rescale(Normalizer::fit(&targets));
        let scaled: Vec<f64> = targets.iter().map(|t| value.normalizer.normalize(*t)).collect();
        let mut total = 0.0;
        for _ in 0..steps {
            let idx = self.buffer.sample_indices(self.config.batch_size, &mut self.minibatch_rng)?;
            let obs: Vec<&Vec<f64>> = idx.iter().map(|&i| &items[i].observation).collect();
            let tgt: Vec<f64> = idx.iter().map(|&i| scaled[i]).collect();
            let grads = value_loss(value, &obs, &tgt)?;
            total += grads.loss;
            opt.apply(&mut value.params, &grads)?;
        }
        Ok(total / steps as f64)
    }

    /// Refits the target normalizer and regression weights, then takes
    /// `policy_steps` gradient steps. Returns the mean loss.
    pub fn update_policy(&mut self) -> Result<f64> {
        if self.buffer.is_empty() {
            return Ok(0.0);
        }
        if self.config.algorithm.conditioned() {
            self.normalizer = Normalizer::fit(&self.buffer.target_values());
        }
        let config = &self.config;
        let normalizer = self.normalizer;
        let conditioned = config.algorithm.conditioned();
        for t in self.buffer.iter_mut_unordered() {
            t.z_norm = if conditioned { normalizer.normalize(t.z) } else { 0.0 };
            t.weight = config.weight_for(t.z);
        }
        let mut total = 0.0;
        for _ in 0..self.config.policy_steps {
            let idx = self.buffer.sample_indices(self.config.batch_size, &mut self.minibatch_rng)?;
            let batch: Vec<&Transition> = idx
                .iter()
                .map(|&i| self.buffer.get(i).expect("sampled index in range"))
                .collect();
            let grads = policy_loss(&self.policy, &batch)?;
            total += grads.loss;
            self.policy_opt.apply(&mut self.policy, &grads)?;
            self.policy.clamp_log_std();
        }
        Ok(total / self.config.policy_steps as f64)
    }

    pub fn update_target(&mut self) -> Result<()> {
        self.target = self.target.update(&self.buffer.target_values())?;
        Ok(())
    }

    pub fn conditioner(&self) -> Conditioner<'_> {
        Conditioner {
            target: &self.target,
            normalizer: &self.normalizer,
            per_step: self.config.algorithm == Algorithm::RcpA,
            value: if self.config.algorithm.uses_value() { self.value.as_ref() } else { None },
            gamma: self.config.gamma,
            bootstrap_timeouts: self.config.bootstrap_timeouts,
        }
    }

    pub fn evaluate(&self, episodes: usize, diagnostic_episodes: usize) -> Result<EvalResult> {
        let diag = if self.config.algorithm.conditioned() { diagnostic_episodes } else { 0 };
        evaluate(&self.policy, &self.spec, &self.conditioner(), episodes, diag, self.eval_seed)
    }

    fn finish_iteration(&mut self, start: Instant, policy_loss: f64, value_loss: f64) -> Result<IterationMetrics> {
        let eval = self.evaluate(self.config.eval_episodes, self.config.diagnostic_episodes)?;
        let metrics = IterationMetrics {
            iteration: self.iteration,
            eval_mean_return: eval.mean_return,
            eval_max_return: eval.max_return,
            target_mean: self.target.mean,
            target_std: self.target.std,
            policy_loss,
            value_loss,
            buffer_size: self.buffer.len(),
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        };
        self.last_eval = Some(eval);
        self.iteration += 1;
        let finite = [
            metrics.eval_mean_return,
            metrics.target_mean,
            metrics.target_std,
            metrics.policy_loss,
            metrics.value_loss,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Diverged(format!("non-finite metrics: {metrics:?}")));
        }
        debug!("{metrics:?}");
        Ok(metrics)
    }

    /// One pass of collect, relabel, store, fit value, fit policy, update
    /// the target model, then evaluate.
    pub fn run_iteration(&mut self) -> Result<IterationMetrics> {
        let start = Instant::now();
        let trajectories = self.collect()?;
        let transitions = self.label(trajectories)?;
        self.buffer.extend(transitions);
        let value_loss = self.update_value(self.config.value_steps)?;
        let policy_loss = self.update_policy()?;
        self.update_target()?;
        let m = self.finish_iteration(start, policy_loss, value_loss)?;
        info!(
            "iter {} return {:.3} target {:.3}±{:.3}",
            m.iteration, m.eval_mean_return, m.target_mean, m.target_std
        );
        Ok(m)
    }

    /// Runs the configured number of iterations.
    pub fn train(&mut self) -> Result<Vec<IterationMetrics>> {
        (0..self.config.iterations).map(|_| self.run_iteration()).collect()
    }

    /// Replaces every buffered advantage label using the current value
    /// estimate.
    fn relabel_buffer(&mut self) -> Result<()> {
        let Some(value) = &self.value else {
            return Ok(());
        };
        let items: Vec<&Transition> = self.buffer.iter().collect();
        let mut labels = Vec::with_capacity(items.len());
        for seg in segments(&items)? {
            let part = &items[seg];
            let last = part.last().expect("segments are non-empty");
            let traj = Trajectory {
                observations: part.iter().map(|t| t.observation.clone()).collect(),
                actions: part.iter().map(|t| t.action.clone()).collect(),
                rewards: part.iter().map(|t| t.reward).collect(),
                commanded: vec![0.0; part.len()],
                end: last.end.expect("segment ends carry an end marker"),
                final_observation: last.final_observation.clone().unwrap_or_default(),
            };
            labels.extend(label_trajectory(traj, Some(value), self.config.gamma, self.config.lambda, self.config.bootstrap_timeouts)?.targets);
        }
        let mut labels = labels.into_iter();
        // Walk in buffer order; storage order only differs once the buffer
        // has wrapped, which never happens for a static dataset.
        let n = self.buffer.len();
        let mut fresh = RingBuffer::new(self.buffer.capacity())?;
        for i in 0..n {
            let mut t = self.buffer.get(i).expect("index in range").clone();
            t.z = labels.next().expect("one label per transition");
            fresh.push(t);
        }
        self.buffer = fresh;
        Ok(())
    }
}

/// Trains from a fixed set of whole trajectories without collecting data.
///
/// The trajectories are relabeled once and stored. Advantage labels use a
/// value function first fitted on the dataset for `offline_value_warmup`
/// steps. Each iteration then fits the value function, fits the policy and
/// updates the target model.
pub fn train_offline(dataset: Vec<Trajectory>, config: TrainConfig) -> Result<(Trainer, Vec<IterationMetrics>)> {
    ensure(!dataset.is_empty(), || "offline training needs at least one trajectory".into())
        .map_err(|_| Error::Format("dataset contains no trajectories".into()))?;
    let total: usize = dataset.iter().map(Trajectory::len).sum();
    let mut trainer = Trainer::new(config)?;
    for traj in &dataset {
        ensure(!traj.is_empty(), || "dataset contains an empty trajectory".into())?;
        for obs in &traj.observations {
            ensure(obs.len() == trainer.spec.obs_dim, || {
                "dataset observation width does not match the environment".into()
            })?;
        }
    }
    trainer.buffer = RingBuffer::new(trainer.config.buffer_capacity.max(total))?;
    let transitions = trainer.label(dataset)?;
    trainer.buffer.extend(transitions);
    if trainer.value.is_some() {
        let warmup = trainer.config.offline_value_warmup;
        trainer.update_value(warmup)?;
        trainer.relabel_buffer()?;
    }
    trainer.update_target()?;
    let mut metrics = Vec::with_capacity(trainer.config.iterations);
    for _ in 0..trainer.config.iterations {
        let start = Instant::now();
        let value_loss = trainer.update_value(trainer.config.value_steps)?;
        let policy_loss = trainer.update_policy()?;
        trainer.update_target()?;
        let m = trainer.finish_iteration(start, policy_loss, value_loss)?;
        info!("offline iter {} return {:.3}", m.iteration, m.eval_mean_return);
        metrics.push(m);
    }
    Ok((trainer, metrics))
}

/// Actor that picks uniformly random actions.
pub struct RandomActor {
    pub spec: EnvSpec,
}

impl Actor for RandomActor {
    fn choose(&self, _obs: &[f64], _z: f64, _mode: ActMode, rng: &mut Rng) -> Result<Action> {
        Ok(match &self.spec.action_space {
            crate::envs::ActionSpace::Continuous { low, high } => Action::Continuous(
                low.iter().zip(high).map(|(l, h)| rng.gen_range(*l..=*h)).collect(),
            ),
            crate::envs::ActionSpace::Discrete { n } => Action::Discrete(rng.gen_range(0..*n)),
        })
    }
}

/// Mean undiscounted return of the uniform-random policy over `episodes`
/// evaluation episodes.
pub fn random_policy_return(spec: &EnvSpec, episodes: usize, seed: u64) -> Result<f64> {
    let actor = RandomActor { spec: spec.clone() };
    let mut rng = seeded(seed);
    let mut total = 0.0;
    for reset in episode_seeds(seed, episodes) {
        let traj = rollout(
            spec,
            &actor,
            reset,
            spec.max_episode_length,
            ActMode::Stochastic,
            &Normalizer::default(),
            &mut || 0.0,
            &mut rng,
        )?;
        total += traj.undiscounted_return();
    }
    Ok(total / episodes as f64)
}

/// Mean optimal undiscounted return over the same start states that
/// [`evaluate`] uses for `(episodes, seed)`.
pub fn optimal_eval_return(spec: &EnvSpec, episodes: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for reset in episode_seeds(seed, episodes) {
        let (state, _) = env_reset(spec, reset)?;
        total += optimal_return_from(spec, &state, 1.0)?;
    }
    Ok(total / episodes as f64)
}

/// `(r - random) / (optimal - random)`: 0 at the random policy, 1 at the optimum.
pub fn normalized_score(r: f64, random: f64, optimal: f64) -> f64 {
    (r - random) / (optimal - random)
}

/// Actor wrapping the hand-written mediocre controller of each environment.
pub struct ScriptedActor {
    pub spec: EnvSpec,
}

impl Actor for ScriptedActor {
    fn choose(&self, obs: &[f64], _z: f64, _mode: ActMode, rng: &mut Rng) -> Result<Action> {
        Ok(crate::envs::scripted_mediocre_action(&self.spec, obs, rng))
    }
}

/// Collects whole stochastic episodes until at least `n_transitions` steps
/// have been gathered. Conditioned actors are given `command` as their
/// (already normalized) target.
pub fn collect_dataset(
    spec: &EnvSpec,
    actor: &dyn Actor,
    command: f64,
    n_transitions: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let mut env_rng = stream(seed, Stream::Env);
    let mut rng = stream(seed, Stream::Rollout);
    let mut out = Vec::new();
    let mut total = 0;
    while total < n_transitions {
        let traj = rollout(
            spec,
            actor,
            env_rng.gen(),
            spec.max_episode_length,
            ActMode::Stochastic,
            &Normalizer::default(),
            &mut || command,
            &mut rng,
        )?;
        total += traj.len();
        out.push(traj);
    }
    Ok(out)
}
