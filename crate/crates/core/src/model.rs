//! Feed-forward learner and the additive two-network predictor.
//!
//! Logits are `h(x; global) + f(x; cluster)`. Both networks are plain MLPs
//! with ReLU hidden layers and a linear output layer. Parameters live in a
//! flat [`ParamVector`]; per layer the layout is the row-major weight matrix
//! (`out x in`) followed by the bias vector.

use std::ops::{Deref, DerefMut};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Flat parameter vector; the unit of aggregation and transport.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl LearnerConfig {
    pub fn linear(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: Vec::new(),
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dims: &[usize], num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config("all layer widths must be at least 1"));
        }
        Ok(())
    }

    /// Same depth with every hidden layer scaled by `factor` (capacity studies).
    pub fn widened(&self, factor: usize) -> Self {
        Self {
            hidden_dims: self.hidden_dims.iter().map(|h| h * factor.max(1)).collect(),
            ..self.clone()
        }
    }

    pub fn num_params(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.num_classes);
        w
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Layer {
    fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.fan_in * self.fan_out]
    }

    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.fan_in * self.fan_out;
        &p[start..start + self.fan_out]
    }
}

/// Architecture of one network; holds no parameters.
#[derive(Debug, Clone)]
pub struct Mlp {
    config: LearnerConfig,
    layers: Vec<Layer>,
    num_params: usize,
}

impl Mlp {
    pub fn new(config: LearnerConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut offset = 0;
        for w in config.widths().windows(2) {
            layers.push(Layer {
                fan_in: w[0],
                fan_out: w[1],
                offset,
            });
            offset += w[0] * w[1] + w[1];
        }
        Ok(Self {
            config,
            layers,
            num_params: offset,
        })
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// He-normal weights, zero biases.
    pub fn init(&self, rng: &mut RngStream) -> ParamVector {
        let mut p = vec![0.0; self.num_params];
        for layer in &self.layers {
            let std = (2.0 / layer.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let n = layer.fan_in * layer.fan_out;
            for w in &mut p[layer.offset..layer.offset + n] {
                *w = normal.sample(rng);
            }
        }
        ParamVector(p)
    }

    /// Per-layer outputs (post-activation for hidden layers, raw logits last).
    fn forward_trace(&self, params: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let mut outs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let input = if li == 0 { x } else { &outs[li - 1] };
            let w = layer.weights(params);
            let b = layer.bias(params);
            let last = li + 1 == self.layers.len();
            let out: Vec<f64> = (0..layer.fan_out)
                .map(|o| {
                    let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                    let z = row.iter().zip(input).fold(b[o], |acc, (wi, xi)| acc + wi * xi);
                    if last {
                        z
                    } else {
                        z.max(0.0)
                    }
                })
                .collect();
            outs.push(out);
        }
        outs
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        self.forward_trace(params, x).pop().expect("at least one layer")
    }

    /// Accumulate `d loss / d params` into `grad` given `d loss / d logits`.
    fn backward(&self, params: &[f64], x: &[f64], trace: &[Vec<f64>], d_logits: &[f64], grad: &mut [f64]) {
        let mut delta = d_logits.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = self.layers[li];
            let input = if li == 0 { x } else { &trace[li - 1] };
            let wg_start = layer.offset;
            let bg_start = layer.offset + layer.fan_in * layer.fan_out;
            for o in 0..layer.fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grad[bg_start + o] += d;
                let row = &mut grad[wg_start + o * layer.fan_in..wg_start + (o + 1) * layer.fan_in];
                for (g, xi) in row.iter_mut().zip(input) {
                    *g += d * xi;
                }
            }
            if li == 0 {
                break;
            }
            let w = layer.weights(params);
            let mut prev = vec![0.0; layer.fan_in];
            for o in 0..layer.fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[o * layer.fan_in..(o + 1) * layer.fan_in]) {
                    *p += d * wi;
                }
            }
            // ReLU derivative; zero at the kink.
            for (p, a) in prev.iter_mut().zip(&trace[li - 1]) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
}

/// `-log softmax(logits)[label]`, stabilized by max-subtraction.
pub fn cross_entropy_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::input(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok((lse - logits[label]).max(0.0))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate().skip(1) {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SgdHyperparams {
    pub lr: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub local_epochs: usize,
    pub cluster_l2: f64,
    pub batch_size: usize,
}

impl Default for SgdHyperparams {
    fn default() -> Self {
        Self {
            lr: 0.01,
            lr_decay: 0.995,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: 1.0,
            local_epochs: 5,
            cluster_l2: 0.001,
            batch_size: 32,
        }
    }
}

impl SgdHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay must lie in (0, 1]"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be > 0"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs must be at least 1"));
        }
        if !(self.cluster_l2 >= 0.0) || !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("lr, weight_decay and cluster_l2 must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        Ok(())
    }

    /// Step size after `round` per-round decays: `lr * lr_decay^round`.
    pub fn lr_at(&self, round: usize) -> f64 {
        self.lr * self.lr_decay.powi(round as i32)
    }
}

/// Parameters of the additive predictor. `cluster` is `None` for the
/// single-network baselines, where `f` is identically zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveModel {
    pub global: ParamVector,
    pub cluster: Option<ParamVector>,
}

impl AdditiveModel {
    pub fn new(global: ParamVector, cluster: ParamVector) -> Self {
        Self {
            global,
            cluster: Some(cluster),
        }
    }

    pub fn single(global: ParamVector) -> Self {
        Self {
            global,
            cluster: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.global.is_finite() && self.cluster.as_ref().is_none_or(ParamVector::is_finite)
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.global.bits_eq(&other.global)
            && match (&self.cluster, &other.cluster) {
                (Some(a), Some(b)) => a.bits_eq(b),
                (None, None) => true,
                _ => false,
            }
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = self.global.to_vec();
        if let Some(c) = &self.cluster {
            v.extend_from_slice(c);
        }
        v
    }
}

/// The pair of architectures behind an [`AdditiveModel`].
#[derive(Debug, Clone)]
pub struct AdditiveLearner {
    global: Mlp,
    cluster: Option<Mlp>,
}

impl AdditiveLearner {
    pub fn new(global: LearnerConfig, cluster: Option<LearnerConfig>) -> Result<Self> {
        let global = Mlp::new(global)?;
        let cluster = cluster.map(Mlp::new).transpose()?;
        if let Some(c) = &cluster {
            if c.config.input_dim != global.config.input_dim
                || c.config.num_classes != global.config.num_classes
            {
                return Err(Error::config(
                    "global and cluster networks must share input_dim and num_classes",
                ));
            }
        }
        Ok(Self { global, cluster })
    }

    /// Both networks share one architecture.
    pub fn additive(config: LearnerConfig) -> Result<Self> {
        Self::new(config.clone(), Some(config))
    }

    pub fn single(config: LearnerConfig) -> Result<Self> {
        Self::new(config, None)
    }

    pub fn global_net(&self) -> &Mlp {
        &self.global
    }

    pub fn cluster_net(&self) -> Option<&Mlp> {
        self.cluster.as_ref()
    }

    pub fn is_additive(&self) -> bool {
        self.cluster.is_some()
    }

    pub fn input_dim(&self) -> usize {
        self.global.config.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.global.config.num_classes
    }

    /// Sizes `(d_g, d_k)` in parameters; `d_k` is 0 for single networks.
    pub fn sizes(&self) -> (usize, usize) {
        (self.global.num_params, self.cluster.as_ref().map_or(0, Mlp::num_params))
    }

    fn check_model(&self, model: &AdditiveModel) -> Result<()> {
        if model.global.len() != self.global.num_params {
            return Err(Error::config(format!(
                "global vector has {} params, architecture needs {}",
                model.global.len(),
                self.global.num_params
            )));
        }
        match (&self.cluster, &model.cluster) {
            (Some(net), Some(p)) if p.len() == net.num_params => Ok(()),
            (None, None) => Ok(()),
            _ => Err(Error::config("cluster parameters do not match the architecture")),
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::config(format!(
                "input has {} features, learner expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// `h(x; global) + f(x; cluster)`.
    pub fn forward(&self, model: &AdditiveModel, x: &[f64]) -> Result<Vec<f64>> {
        self.check_model(model)?;
        self.check_input(x)?;
        Ok(self.forward_unchecked(model, x))
    }

    fn forward_unchecked(&self, model: &AdditiveModel, x: &[f64]) -> Vec<f64> {
        let mut logits = self.global.forward(&model.global, x);
        if let (Some(net), Some(p)) = (&self.cluster, &model.cluster) {
            for (z, f) in logits.iter_mut().zip(net.forward(p, x)) {
                *z += f;
            }
        }
        logits
    }

    /// Training objective on a batch: mean cross-entropy plus
    /// `cluster_l2 * ||cluster||^2`. Returns the loss and its gradient laid
    /// out as `[global.., cluster..]`.
    pub fn objective_and_grad(
        &self,
        model: &AdditiveModel,
        data: &Dataset,
        batch: &[usize],
        cluster_l2: f64,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_model(model)?;
        if batch.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let dg = self.global.num_params;
        let mut grad = vec![0.0; dg + self.sizes().1];
        let (g_grad, c_grad) = grad.split_at_mut(dg);
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &i in batch {
            let x = data.features(i);
            let y = data.label(i);
            self.check_input(x)?;
            let g_trace = self.global.forward_trace(&model.global, x);
            let mut logits = g_trace.last().expect("layers").clone();
            let c_trace = match (&self.cluster, &model.cluster) {
                (Some(net), Some(p)) => {
                    let t = net.forward_trace(p, x);
                    for (z, f) in logits.iter_mut().zip(t.last().expect("layers")) {
                        *z += f;
                    }
                    Some(t)
                }
                _ => None,
            };
            loss += cross_entropy_loss(&logits, y)? * scale;
            let mut d_logits = softmax(&logits);
            d_logits[y] -= 1.0;
            for d in &mut d_logits {
                *d *= scale;
            }
            self.global.backward(&model.global, x, &g_trace, &d_logits, g_grad);
            if let (Some(net), Some(p), Some(t)) = (&self.cluster, &model.cluster, &c_trace) {
                net.backward(p, x, t, &d_logits, c_grad);
            }
        }
        if let Some(p) = &model.cluster {
            loss += cluster_l2 * p.iter().map(|v| v * v).sum::<f64>();
            for (g, v) in c_grad.iter_mut().zip(p.iter()) {
                *g += 2.0 * cluster_l2 * v;
            }
        }
        Ok((loss, grad))
    }

    fn unflatten(&self, flat: Vec<f64>) -> AdditiveModel {
        let dg = self.global.num_params;
        let mut global = flat;
        let cluster = self.cluster.as_ref().map(|_| ParamVector(global.split_off(dg)));
        AdditiveModel {
            global: ParamVector(global),
            cluster,
        }
    }

    /// `E` epochs of shuffled minibatch SGD over both networks jointly.
    ///
    /// Per step: the objective gradient is clipped to global norm
    /// `clip_norm`, weight decay is added for every parameter, then the
    /// heavy-ball momentum update is applied with step `lr * lr_decay^round`.
    /// Momentum buffers start at zero on every call.
    pub fn local_sgd(
        &self,
        model: &AdditiveModel,
        data: &Dataset,
        hp: &SgdHyperparams,
        round: usize,
        rng: &mut RngStream,
    ) -> Result<AdditiveModel> {
        self.check_model(model)?;
        if data.is_empty() {
            return Err(Error::input("local training needs at least one sample"));
        }
        let lr = hp.lr_at(round);
        let mut current = model.clone();
        let mut params = model.flatten();
        let mut velocity = vec![0.0; params.len()];
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..hp.local_epochs {
            order.shuffle(rng);
            for batch in order.chunks(hp.batch_size) {
                let (_, mut grad) = self.objective_and_grad(&current, data, batch, hp.cluster_l2)?;
                clip_to_norm(&mut grad, hp.clip_norm);
                for ((g, v), p) in grad.iter_mut().zip(&mut velocity).zip(&params) {
                    *g += hp.weight_decay * p;
                    *v = hp.momentum * *v + *g;
                }
                for (p, v) in params.iter_mut().zip(&velocity) {
                    *p -= lr * v;
                }
                current = self.unflatten(params.clone());
            }
        }
        if !current.is_finite() {
            return Err(Error::Internal("local SGD produced non-finite parameters".into()));
        }
        Ok(current)
    }

    /// Accuracy (argmax, lowest-index ties) and mean cross-entropy.
    pub fn evaluate(&self, model: &AdditiveModel, data: &Dataset) -> Result<(f64, f64)> {
        self.check_model(model)?;
        if data.is_empty() {
            return Err(Error::input("cannot evaluate on an empty dataset"));
        }
        let mut correct = 0usize;
        let mut loss = 0.0;
        for i in 0..data.len() {
            let x = data.features(i);
            self.check_input(x)?;
            let logits = self.forward_unchecked(model, x);
            if argmax(&logits) == data.label(i) {
                correct += 1;
            }
            loss += cross_entropy_loss(&logits, data.label(i))?;
        }
        let n = data.len() as f64;
        Ok((correct as f64 / n, loss / n))
    }
}

/// Scale `grad` down so its Euclidean norm is at most `max_norm`.
pub fn clip_to_norm(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grad {
            *g *= s;
        }
    }
}

/// Relative error used by the finite-difference check.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / (analytic.abs() + numeric.abs()).max(1e-7)
}

/// Compare the analytic gradient of the additive objective against central
/// finite differences (step `1e-5`) on a random batch of `batch_size`
/// samples, with random weights for both networks. Returns the largest
/// relative error over all coordinates.
pub fn gradient_check(config: &LearnerConfig, batch_size: usize, rng: &mut RngStream) -> Result<f64> {
    let learner = AdditiveLearner::additive(config.clone())?;
    let (dg, dk) = learner.sizes();
    if dg + dk > 500 {
        return Err(Error::config(format!(
            "gradient check is limited to 500 parameters, config has {}",
            dg + dk
        )));
    }
    let model = AdditiveModel::new(
        learner.global.init(&mut rng.child("global")),
        learner.cluster_net().expect("additive").init(&mut rng.child("cluster")),
    );
    // Random biases keep ReLU units away from exact zeros.
    let mut model = model;
    let noise = Normal::new(0.0, 0.1).expect("finite");
    let mut bias_rng = rng.child("bias");
    for v in model.global.iter_mut().chain(model.cluster.as_mut().expect("additive").iter_mut()) {
        *v += noise.sample(&mut bias_rng);
    }
    let mut data_rng = rng.child("batch");
    let mut data = Dataset::new(config.input_dim);
    for j in 0..batch_size {
        let x: Vec<f64> = (0..config.input_dim)
            .map(|_| rand_distr::StandardNormal.sample(&mut data_rng))
            .collect();
        data.push(&x, j % config.num_classes);
    }
    let batch: Vec<usize> = (0..batch_size).collect();
    finite_difference_error(&learner, &model, &data, &batch, 0.01)
}

/// Max relative error between analytic and central-difference gradients.
pub fn finite_difference_error(
    learner: &AdditiveLearner,
    model: &AdditiveModel,
    data: &Dataset,
    batch: &[usize],
    cluster_l2: f64,
) -> Result<f64> {
    const STEP: f64 = 1e-5;
    let (_, analytic) = learner.objective_and_grad(model, data, batch, cluster_l2)?;
    let flat = model.flatten();
    let mut worst: f64 = 0.0;
    for (j, a) in analytic.iter().enumerate() {
        let mut plus = flat.clone();
        plus[j] += STEP;
        let mut minus = flat.clone();
        minus[j] -= STEP;
        let (lp, _) = learner.objective_and_grad(&learner.unflatten(plus), data, batch, cluster_l2)?;
        let (lm, _) = learner.objective_and_grad(&learner.unflatten(minus), data, batch, cluster_l2)?;
        let numeric = (lp - lm) / (2.0 * STEP);
        worst = worst.max(relative_error(*a, numeric));
    }
    Ok(worst)
}
