//! Target-conditioned policy network and state-value network.
//!
//! The policy trunk is a rectifier MLP. In `concat` mode the normalized
//! target is appended to the observation. In `multiply` mode a small
//! embedding network maps the target to one gate vector per hidden layer,
//! and each hidden activation is scaled elementwise by `1 + tanh(gate)`.
//! The embedding's output layer starts at zero so every gate starts at 1.

use std::borrow::Borrow;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::{Action, ActionSpace};
use crate::error::{contract, ensure, Result};
use crate::estimators::Normalizer;
use crate::numerics::{
    categorical_nll, gaussian_nll, DenseParams, ForwardCache, GradientBundle, ParamSlices,
    LOG_STD_MAX, LOG_STD_MIN,
};
use crate::replay::Transition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// Target appended to the observation.
    Concat,
    /// Target-driven multiplicative gates on every hidden layer.
    Multiply,
    /// Target ignored (baselines).
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub embed_width: usize,
    pub init_log_std: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_width: 128,
            hidden_layers: 3,
            embed_width: 32,
            init_log_std: -0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub conditioning: Conditioning,
    pub action_space: ActionSpace,
    pub trunk: DenseParams,
    /// State-independent log standard deviations (continuous actions only).
    pub log_std: Option<Vec<f64>>,
    /// Target embedding producing the gates (multiply mode only).
    pub embed: Option<DenseParams>,
}

/// Parameters of the action distribution for one state.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionDist {
    Gaussian { mean: Vec<f64>, log_std: Vec<f64> },
    Categorical { logits: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

/// Everything a backward pass through the policy needs.
#[derive(Debug, Clone)]
pub struct PolicyCache {
    trunk: ForwardCache,
    embed: Option<(ForwardCache, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrads {
    pub trunk: GradientBundle,
    pub log_std: Vec<f64>,
    pub embed: Option<GradientBundle>,
    pub loss: f64,
}

impl PolicyGrads {
    pub fn zeros_like(net: &PolicyNet) -> Self {
        Self {
            trunk: GradientBundle::zeros_like(&net.trunk),
            log_std: net.log_std.as_ref().map(|l| vec![0.0; l.len()]).unwrap_or_default(),
            embed: net.embed.as_ref().map(GradientBundle::zeros_like),
            loss: 0.0,
        }
    }

    fn scale(&mut self, c: f64) {
        self.trunk.scale(c);
        self.log_std.iter_mut().for_each(|g| *g *= c);
        if let Some(e) = &mut self.embed {
            e.scale(c);
        }
        self.loss *= c;
    }
}

impl ParamSlices for PolicyNet {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.trunk.slices();
        if let Some(l) = &self.log_std {
            out.push(l.as_slice());
        }
        if let Some(e) = &self.embed {
            out.extend(e.slices());
        }
        out
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.trunk.slices_mut();
        if let Some(l) = &mut self.log_std {
            out.push(l.as_mut_slice());
        }
        if let Some(e) = &mut self.embed {
            out.extend(e.slices_mut());
        }
        out
    }
}

impl ParamSlices for PolicyGrads {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.trunk.slices();
        if !self.log_std.is_empty() {
            out.push(self.log_std.as_slice());
        }
        if let Some(e) = &self.embed {
            out.extend(e.slices());
        }
        out
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.trunk.slices_mut();
        if !self.log_std.is_empty() {
            out.push(self.log_std.as_mut_slice());
        }
        if let Some(e) = &mut self.embed {
            out.extend(e.slices_mut());
        }
        out
    }
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_space: ActionSpace,
        conditioning: Conditioning,
        config: &NetworkConfig,
        rng: &mut R,
    ) -> Self {
        let input = obs_dim + usize::from(conditioning == Conditioning::Concat);
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(config.hidden_width, config.hidden_layers));
        sizes.push(action_space.dim());
        let trunk = DenseParams::init(&sizes, rng);
        let log_std = match &action_space {
            ActionSpace::Continuous { low, .. } => Some(vec![config.init_log_std; low.len()]),
            ActionSpace::Discrete { .. } => None,
        };
        let embed = (conditioning == Conditioning::Multiply).then(|| {
            let mut e = DenseParams::init(
                &[1, config.embed_width, config.hidden_width * config.hidden_layers],
                rng,
            );
            let last = e.layers.last_mut().expect("embedding has layers");
            last.weights.iter_mut().for_each(|w| *w = 0.0);
            e
        });
        Self {
            conditioning,
            action_space,
            trunk,
            log_std,
            embed,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.trunk.input_dim() - usize::from(self.conditioning == Conditioning::Concat)
    }

    /// Checks the structural invariants of the network.
    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        ensure(self.trunk.output_dim() == self.action_space.dim(), || {
            "trunk output does not match the action space".into()
        })?;
        match (&self.action_space, &self.log_std) {
            (ActionSpace::Continuous { low, .. }, Some(l)) => {
                ensure(l.len() == low.len(), || "log_std has the wrong length".into())?
            }
            (ActionSpace::Discrete { .. }, None) => {}
            _ => return Err(contract("log_std present iff actions are continuous")),
        }
        match (self.conditioning, &self.embed) {
            (Conditioning::Multiply, Some(e)) => {
                e.validate()?;
                let total: usize = self.trunk.hidden_widths().iter().sum();
                ensure(e.input_dim() == 1 && e.output_dim() == total, || {
                    "embedding output must cover every hidden layer".into()
                })
            }
            (Conditioning::Multiply, None) => Err(contract("multiply mode needs an embedding")),
            (_, Some(_)) => Err(contract("embedding present outside multiply mode")),
            (_, None) => Ok(()),
        }
    }

    /// Gate vectors `1 + tanh(e_l(z))` for each hidden layer, plus the raw
    /// embedding output and its cache.
    fn gates(&self, z: f64) -> Result<Option<(Vec<Vec<f64>>, ForwardCache, Vec<f64>)>> {
        let Some(embed) = &self.embed else {
            return Ok(None);
        };
        let (raw, cache) = embed.forward(&[z])?;
        let mut gates = Vec::new();
        let mut offset = 0;
        for w in self.trunk.hidden_widths() {
            gates.push(raw[offset..offset + w].iter().map(|e| 1.0 + e.tanh()).collect());
            offset += w;
        }
        Ok(Some((gates, cache, raw)))
    }

    /// Action-distribution parameters for `(obs, z)`.
    pub fn forward(&self, obs: &[f64], z: f64) -> Result<(ActionDist, PolicyCache)> {
        ensure(obs.len() == self.obs_dim(), || {
            format!("observation has {} entries, expected {}", obs.len(), self.obs_dim())
        })?;
        ensure(z.is_finite(), || "conditioning target is not finite".into())?;
        let (out, trunk, embed) = match self.conditioning {
            Conditioning::Concat => {
                let mut input = obs.to_vec();
                input.push(z);
                let (out, cache) = self.trunk.forward(&input)?;
                (out, cache, None)
            }
            Conditioning::None => {
                let (out, cache) = self.trunk.forward(obs)?;
                (out, cache, None)
            }
            Conditioning::Multiply => {
                let (gates, ecache, raw) = self.gates(z)?.ok_or_else(|| contract("missing embedding"))?;
                let (out, cache) = self.trunk.forward_gated(obs, Some(gates))?;
                (out, cache, Some((ecache, raw)))
            }
        };
        let dist = match &self.log_std {
            Some(ls) => ActionDist::Gaussian {
                mean: out,
                log_std: ls.iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect(),
            },
            None => ActionDist::Categorical { logits: out },
        };
        Ok((dist, PolicyCache { trunk, embed }))
    }

    /// Negative log-likelihood of `action` and its gradient, accumulated into
    /// `grads` with factor `weight`.
    pub fn nll_accumulate(
        &self,
        obs: &[f64],
        z: f64,
        action: &Action,
        weight: f64,
        grads: &mut PolicyGrads,
    ) -> Result<f64> {
        let (dist, cache) = self.forward(obs, z)?;
        let (loss, mut dout) = match (&dist, action) {
            (ActionDist::Gaussian { mean, log_std }, Action::Continuous(a)) => {
                let (loss, dmean, dlog_std) = gaussian_nll(mean, log_std, a)?;
                let raw = self.log_std.as_ref().expect("gaussian head has log_std");
                for (i, d) in dlog_std.iter().enumerate() {
                    // The clamp passes gradient only inside its range.
                    if raw[i] > LOG_STD_MIN && raw[i] < LOG_STD_MAX {
                        grads.log_std[i] += weight * d;
                    }
                }
                (loss, dmean)
            }
            (ActionDist::Categorical { logits }, Action::Discrete(k)) => categorical_nll(logits, *k)?,
            _ => return Err(contract("action kind does not match the policy head")),
        };
        dout.iter_mut().for_each(|d| *d *= weight);
        let back = self.trunk.backward_accumulate(&cache.trunk, &dout, &mut grads.trunk)?;
        if let (Some((ecache, raw)), Some(embed), Some(egrads)) =
            (&cache.embed, &self.embed, grads.embed.as_mut())
        {
            let dgate: Vec<f64> = back.gate_grads.concat();
            let de: Vec<f64> = dgate
                .iter()
                .zip(raw)
                .map(|(g, e)| {
                    let t = e.tanh();
                    g * (1.0 - t * t)
                })
                .collect();
            embed.backward_accumulate(ecache, &de, egrads)?;
        }
        grads.loss += weight * loss;
        Ok(loss)
    }

    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], z: f64, mode: ActMode, rng: &mut R) -> Result<Action> {
        let (dist, _) = self.forward(obs, z)?;
        let action = match dist {
            ActionDist::Gaussian { mean, log_std } => {
                let a = match mode {
                    ActMode::Deterministic => mean,
                    ActMode::Stochastic => mean
                        .iter()
                        .zip(&log_std)
                        .map(|(m, ls)| {
                            let eps: f64 = StandardNormal.sample(rng);
                            m + ls.exp() * eps
                        })
                        .collect(),
                };
                self.action_space.clip(&Action::Continuous(a))
            }
            ActionDist::Categorical { logits } => match mode {
                ActMode::Deterministic => Action::Discrete(argmax(&logits)),
                ActMode::Stochastic => Action::Discrete(sample_softmax(&logits, rng)),
            },
        };
        Ok(action)
    }

    /// Pins every log standard deviation into the allowed range.
    pub fn clamp_log_std(&mut self) {
        if let Some(ls) = &mut self.log_std {
            ls.iter_mut().for_each(|v| *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_softmax<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

pub fn policy_forward(net: &PolicyNet, obs: &[f64], z: f64) -> Result<ActionDist> {
    Ok(net.forward(obs, z)?.0)
}

pub fn act<R: Rng + ?Sized>(net: &PolicyNet, obs: &[f64], z: f64, mode: ActMode, rng: &mut R) -> Result<Action> {
    net.act(obs, z, mode, rng)
}

/// Exponential regression weight `min(exp(z/β), w_max)`.
pub fn exp_weight(z: f64, beta: f64, w_max: f64) -> f64 {
    (z / beta).exp().min(w_max)
}

/// Weighted mean negative log-likelihood over a batch, using each
/// transition's `z_norm` as the conditioning input and `weight` as its
/// regression weight.
pub fn policy_loss<T: Borrow<Transition>>(net: &PolicyNet, batch: &[T]) -> Result<PolicyGrads> {
    ensure(!batch.is_empty(), || "policy_loss needs a non-empty batch".into())?;
    let total: f64 = batch.iter().map(|t| t.borrow().weight).sum();
    ensure(total > 0.0 && total.is_finite(), || {
        format!("policy_loss: weights sum to {total}")
    })?;
    let mut grads = PolicyGrads::zeros_like(net);
    for t in batch {
        let t = t.borrow();
        ensure(t.weight >= 0.0, || "negative regression weight".into())?;
        if t.weight == 0.0 {
            continue;
        }
        net.nll_accumulate(&t.observation, t.z_norm, &t.action, t.weight, &mut grads)?;
    }
    grads.scale(1.0 / total);
    Ok(grads)
}

/// State-value approximator. The network predicts values in units of
/// `normalizer`; [`ValueNet::predict`] maps back to raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    pub params: DenseParams,
    pub normalizer: Normalizer,
}

impl ValueNet {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, config: &NetworkConfig, rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend(std::iter::repeat_n(config.hidden_width, config.hidden_layers));
        sizes.push(1);
        Self {
            params: DenseParams::init(&sizes, rng),
            normalizer: Normalizer::default(),
        }
    }

    pub fn predict(&self, obs: &[f64]) -> Result<f64> {
        let raw = self.params.forward(obs)?.0[0];
        Ok(self.normalizer.mean + self.normalizer.std * raw)
    }

    /// Switches to a new output normalizer, adjusting the output layer so
    /// that every prediction is unchanged.
    pub fn rescale(&mut self, next: Normalizer) {
        let prev = self.normalizer;
        let last = self.params.layers.last_mut().expect("value net has layers");
        let ratio = prev.std / next.std;
        last.weights.iter_mut().for_each(|w| *w *= ratio);
        last.bias[0] = (prev.std * last.bias[0] + prev.mean - next.mean) / next.std;
        self.normalizer = next;
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        ensure(self.params.output_dim() == 1, || "value network must output a scalar".into())?;
        ensure(self.normalizer.std > 0.0 && self.normalizer.mean.is_finite(), || {
            "value normalizer must have finite mean and positive scale".into()
        })
    }
}

/// Mean squared error between the network's output and `targets`, both in
/// the network's normalized units.
pub fn value_loss<O: AsRef<[f64]>>(net: &ValueNet, observations: &[O], targets: &[f64]) -> Result<GradientBundle> {
    ensure(observations.len() == targets.len(), || {
        format!(
            "value_loss: {} observations but {} targets",
            observations.len(),
            targets.len()
        )
    })?;
    ensure(!targets.is_empty(), || "value_loss needs a non-empty batch".into())?;
    let n = targets.len() as f64;
    let mut grads = GradientBundle::zeros_like(&net.params);
    let mut loss = 0.0;
    for (obs, &target) in observations.iter().zip(targets) {
        let (out, cache) = net.params.forward(obs.as_ref())?;
        let residual = out[0] - target;
        loss += residual * residual;
        net.params
            .backward_accumulate(&cache, &[2.0 * residual / n], &mut grads)?;
    }
    grads.loss = loss / n;
    Ok(grads)
}
