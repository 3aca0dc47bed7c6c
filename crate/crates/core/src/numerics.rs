//! Dense networks, distribution losses, and the Adam optimizer.
//!
//! Everything is `f64` and written against flat row-major buffers. Hidden
//! layers use a rectifier and the output layer is linear. A forward pass can
//! optionally multiply each hidden activation by a gate vector; this is how
//! the multiplicative conditioning of the policy trunk is expressed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, ensure, Result};

/// Lower clamp for Gaussian log standard deviations.
pub const LOG_STD_MIN: f64 = -5.0;
/// Upper clamp for Gaussian log standard deviations.
pub const LOG_STD_MAX: f64 = 2.0;

const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// One affine layer. `weights` is row-major with `fan_out` rows of `fan_in`
/// columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    /// Fan-in scaled uniform weights in `±1/sqrt(fan_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weights = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            fan_in,
            fan_out,
            weights,
            bias: vec![0.0; fan_out],
        }
    }

    #[inline]
    pub fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.fan_in..(o + 1) * self.fan_in]
    }

    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.bias
                .iter()
                .enumerate()
                .map(|(o, b)| b + dot(self.row(o), x)),
        );
    }

    /// Accumulates parameter gradients for upstream gradient `dout` at input
    /// `x`, and writes the input gradient into `dx` when requested.
    fn backward(&self, x: &[f64], dout: &[f64], grad: &mut LinearGrad, dx: Option<&mut Vec<f64>>) {
        for (o, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad.bias[o] += d;
            let row = &mut grad.weights[o * self.fan_in..(o + 1) * self.fan_in];
            for (g, &xi) in row.iter_mut().zip(x) {
                *g += d * xi;
            }
        }
        if let Some(dx) = dx {
            dx.clear();
            dx.resize(self.fan_in, 0.0);
            for (o, &d) in dout.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (g, &w) in dx.iter_mut().zip(self.row(o)) {
                    *g += d * w;
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Parameters of a fully connected network: rectifier on every layer but the
/// last, identity on the last.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub layers: Vec<Linear>,
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// Input fed to each layer (after gating of the previous layer).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    /// Rectified output of each hidden layer, before gating.
    hidden: Vec<Vec<f64>>,
    /// Gates applied after each hidden layer, if any.
    gates: Option<Vec<Vec<f64>>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Rectified activations of hidden layer `l`, before gating.
    pub fn hidden(&self, l: usize) -> &[f64] {
        &self.hidden[l]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients shaped like a [`DenseParams`], plus the loss they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<LinearGrad>,
    pub loss: f64,
}

impl GradientBundle {
    pub fn zeros_like(params: &DenseParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LinearGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            loss: 0.0,
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|g| *g *= c);
        }
        self.loss *= c;
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite()
            && self
                .layers
                .iter()
                .all(|l| l.weights.iter().chain(&l.bias).all(|g| g.is_finite()))
    }
}

/// Output of a backward pass through a (possibly gated) network.
#[derive(Debug, Clone)]
pub struct BackwardOutput {
    /// Gradient with respect to each hidden layer's gate vector.
    pub gate_grads: Vec<Vec<f64>>,
    /// Gradient with respect to the network input.
    pub input_grad: Vec<f64>,
}

impl DenseParams {
    /// Builds a network with the given layer sizes, e.g. `[4, 32, 32, 2]`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "a network needs at least one layer");
        Self {
            layers: sizes.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "a network needs at least one layer");
        Self {
            layers: sizes.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }

    /// Widths of the hidden layers (all layers but the last).
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.fan_out)
            .collect()
    }

    pub fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            Activation::Identity
        } else {
            Activation::Relu
        }
    }

    /// Checks that adjacent layers chain and all entries are finite.
    pub fn validate(&self) -> Result<()> {
        ensure(!self.layers.is_empty(), || "network has no layers".into())?;
        for (i, l) in self.layers.iter().enumerate() {
            ensure(
                l.weights.len() == l.fan_in * l.fan_out && l.bias.len() == l.fan_out,
                || format!("layer {i} buffers do not match {}x{}", l.fan_out, l.fan_in),
            )?;
            ensure(
                l.weights.iter().chain(&l.bias).all(|v| v.is_finite()),
                || format!("layer {i} has non-finite entries"),
            )?;
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            ensure(w[0].fan_out == w[1].fan_in, || {
                format!(
                    "layer {} fan-out {} does not match layer {} fan-in {}",
                    i,
                    w[0].fan_out,
                    i + 1,
                    w[1].fan_in
                )
            })?;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.forward_gated(input, None)
    }

    /// Forward pass where hidden layer `l`'s rectified output is multiplied
    /// elementwise by `gates[l]`.
    pub fn forward_gated(
        &self,
        input: &[f64],
        gates: Option<Vec<Vec<f64>>>,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        ensure(input.len() == self.input_dim(), || {
            format!(
                "input length {} does not match fan-in {}",
                input.len(),
                self.input_dim()
            )
        })?;
        let n_hidden = self.layers.len() - 1;
        if let Some(g) = &gates {
            ensure(g.len() == n_hidden, || {
                format!("{} gate vectors for {} hidden layers", g.len(), n_hidden)
            })?;
            for (l, gv) in g.iter().enumerate() {
                ensure(gv.len() == self.layers[l].fan_out, || {
                    format!(
                        "gate {l} has width {} but layer width is {}",
                        gv.len(),
                        self.layers[l].fan_out
                    )
                })?;
            }
        }

        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            hidden: Vec::with_capacity(n_hidden),
            gates: None,
        };
        let mut x = input.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut pre = Vec::with_capacity(layer.fan_out);
            layer.forward_into(&x, &mut pre);
            cache.inputs.push(x);
            if l < n_hidden {
                let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
                x = match &gates {
                    Some(g) => act.iter().zip(&g[l]).map(|(a, g)| a * g).collect(),
                    None => act.clone(),
                };
                cache.hidden.push(act);
            } else {
                x = pre.clone();
            }
            cache.pre.push(pre);
        }
        cache.gates = gates;
        Ok((x, cache))
    }

    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<GradientBundle> {
        let mut grads = GradientBundle::zeros_like(self);
        self.backward_accumulate(cache, output_grad, &mut grads)?;
        Ok(grads)
    }

    /// Adds the parameter gradients for `output_grad` into `grads` and returns
    /// the gate and input gradients.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
        grads: &mut GradientBundle,
    ) -> Result<BackwardOutput> {
        ensure(cache.pre.len() == self.layers.len(), || {
            "cache does not come from this network".into()
        })?;
        ensure(output_grad.len() == self.output_dim(), || {
            format!(
                "output gradient length {} does not match output dim {}",
                output_grad.len(),
                self.output_dim()
            )
        })?;
        ensure(grads.layers.len() == self.layers.len(), || {
            "gradient bundle does not match network".into()
        })?;

        let n_hidden = self.layers.len() - 1;
        let mut gate_grads = vec![Vec::new(); n_hidden];
        let mut delta = output_grad.to_vec();
        let mut dx = Vec::new();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            ensure(cache.inputs[l].len() == layer.fan_in, || {
                format!("cached input of layer {l} has the wrong length")
            })?;
            layer.backward(&cache.inputs[l], &delta, &mut grads.layers[l], Some(&mut dx));
            if l == 0 {
                break;
            }
            // dx is the gradient wrt the (gated) output of hidden layer l-1.
            let h = l - 1;
            let act = &cache.hidden[h];
            let pre = &cache.pre[h];
            let mut next = Vec::with_capacity(dx.len());
            match &cache.gates {
                Some(g) => {
                    let gate = &g[h];
                    gate_grads[h] = dx.iter().zip(act).map(|(d, a)| d * a).collect();
                    next.extend(
                        dx.iter()
                            .zip(gate)
                            .zip(pre)
                            .map(|((d, g), p)| if *p > 0.0 { d * g } else { 0.0 }),
                    );
                }
                None => {
                    gate_grads[h] = vec![0.0; dx.len()];
                    next.extend(dx.iter().zip(pre).map(|(d, p)| if *p > 0.0 { *d } else { 0.0 }));
                }
            }
            delta = next;
        }
        Ok(BackwardOutput {
            gate_grads,
            input_grad: dx,
        })
    }
}

/// Forward pass of a dense network. See [`DenseParams::forward`].
pub fn dense_forward(params: &DenseParams, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    params.forward(input)
}

/// Parameter gradients for an upstream gradient on the network output.
pub fn dense_backward(
    params: &DenseParams,
    cache: &ForwardCache,
    output_grad: &[f64],
) -> Result<GradientBundle> {
    params.backward(cache, output_grad)
}

/// Negative log-likelihood of `action` under a diagonal Gaussian.
///
/// Returns the loss and its gradients with respect to `mean` and `log_std`.
pub fn gaussian_nll(mean: &[f64], log_std: &[f64], action: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    ensure(mean.len() == log_std.len() && mean.len() == action.len(), || {
        format!(
            "gaussian_nll length mismatch: mean {}, log_std {}, action {}",
            mean.len(),
            log_std.len(),
            action.len()
        )
    })?;
    ensure(
        mean.iter().chain(log_std).chain(action).all(|v| v.is_finite()),
        || "gaussian_nll received a non-finite input".into(),
    )?;
    let mut loss = 0.0;
    let mut dmean = Vec::with_capacity(mean.len());
    let mut dlog_std = Vec::with_capacity(mean.len());
    for ((&m, &ls), &a) in mean.iter().zip(log_std).zip(action) {
        let inv_std = (-ls).exp();
        let r = (a - m) * inv_std;
        loss += 0.5 * r * r + ls + HALF_LOG_TWO_PI;
        dmean.push(-r * inv_std);
        dlog_std.push(1.0 - r * r);
    }
    Ok((loss, dmean, dlog_std))
}

/// Negative log-likelihood of class `action_index` under softmax(`logits`).
pub fn categorical_nll(logits: &[f64], action_index: usize) -> Result<(f64, Vec<f64>)> {
    ensure(action_index < logits.len(), || {
        format!(
            "action index {action_index} out of range for {} logits",
            logits.len()
        )
    })?;
    ensure(logits.iter().all(|v| v.is_finite()), || {
        "categorical_nll received a non-finite logit".into()
    })?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    let loss = lse - logits[action_index];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[action_index] -= 1.0;
    Ok((loss, grad))
}

/// Numerically stable `ln Σ exp(x_i)`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Anything whose trainable values can be viewed as a list of flat slices.
///
/// Parameter holders and their gradient bundles must list slices in the same
/// order so an optimizer can pair them up.
pub trait ParamSlices {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;
}

impl ParamSlices for DenseParams {
    fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

impl ParamSlices for GradientBundle {
    fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_step_size(step_size: f64) -> Self {
        Self {
            step_size,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            step_size: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment accumulators for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new<P: ParamSlices + ?Sized>(params: &P, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = params.slices().iter().map(|s| s.len()).collect();
        Self {
            config,
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `params` along `grads`.
    ///
    /// Nothing is modified if any gradient entry is non-finite.
    pub fn apply<P, G>(&mut self, params: &mut P, grads: &G) -> Result<()>
    where
        P: ParamSlices + ?Sized,
        G: ParamSlices + ?Sized,
    {
        let grad_slices = grads.slices();
        let mut param_slices = params.slices_mut();
        ensure(
            grad_slices.len() == param_slices.len() && grad_slices.len() == self.first_moment.len(),
            || "optimizer: parameter and gradient groups do not match".into(),
        )?;
        for (i, (g, p)) in grad_slices.iter().zip(&param_slices).enumerate() {
            ensure(g.len() == p.len() && g.len() == self.first_moment[i].len(), || {
                format!("optimizer: group {i} shape mismatch")
            })?;
        }
        if grad_slices.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(contract("optimizer: non-finite gradient"));
        }

        self.step += 1;
        let AdamConfig {
            step_size,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (g, p)) in grad_slices.iter().zip(param_slices.iter_mut()).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= step_size * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// One Adam step on a dense network.
pub fn optimizer_step(
    params: &mut DenseParams,
    grads: &GradientBundle,
    state: &mut OptimizerState,
) -> Result<()> {
    state.apply(params, grads)
}
