use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::distribution::quantile_huber_loss;
use super::QuadredError;
use crate::nn_core::{adam_step, soft_update, AdamState, Checkpoint, Mlp, OutputActivation, Tensor};

/// Tracking reward `-(x - x_ref)' H1 (x - x_ref) - u' H2 u` with diagonal
/// weights.
pub fn reward(x: &[f64], x_ref: &[f64], u: &[f64], h1: &[f64], h2: &[f64]) -> Result<f64, QuadredError> {
    if x.len() != x_ref.len() || x.len() != h1.len() {
        return Err(QuadredError::Dimension {
            expected: x.len(),
            got: x_ref.len().min(h1.len()),
        });
    }
    if u.len() != h2.len() {
        return Err(QuadredError::Dimension {
            expected: u.len(),
            got: h2.len(),
        });
    }
    if h1.iter().chain(h2).any(|&h| !(h > 0.0 && h.is_finite())) {
        return Err(QuadredError::Invalid("reward weights must be positive"));
    }
    let state: f64 = x.iter().zip(x_ref).zip(h1).map(|((a, b), h)| h * (a - b) * (a - b)).sum();
    let input: f64 = u.iter().zip(h2).map(|(v, h)| h * v * v).sum();
    Ok(-state - input)
}

/// Quantile windows defining each option's value `Q_{j|K}`: the mean of
/// quantiles `start..start + width`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionSet {
    pub n_q: usize,
    pub windows: Vec<(usize, usize)>,
}

impl OptionSet {
    /// All quantiles, then the lowest, middle and highest halves.
    pub fn standard(n_q: usize) -> Result<Self, QuadredError> {
        if n_q < 2 {
            return Self::single(n_q);
        }
        let half = n_q / 2;
        Self::new(n_q, vec![(0, n_q), (0, half), ((n_q - half) / 2, half), (n_q - half, half)])
    }

    /// Mean of all quantiles only.
    pub fn single(n_q: usize) -> Result<Self, QuadredError> {
        Self::new(n_q, vec![(0, n_q)])
    }

    pub fn new(n_q: usize, windows: Vec<(usize, usize)>) -> Result<Self, QuadredError> {
        if n_q == 0 || windows.is_empty() {
            return Err(QuadredError::Empty("option set"));
        }
        if windows.iter().any(|&(s, w)| w == 0 || s + w > n_q) {
            return Err(QuadredError::Invalid("option window outside the quantile range"));
        }
        Ok(Self { n_q, windows })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn window_mean(&self, quantiles: &[f64], option: usize) -> f64 {
        let (s, w) = self.windows[option];
        quantiles[s..s + w].iter().sum::<f64>() / w as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: DVector<f64>,
    pub a: DVector<f64>,
    pub r: f64,
    pub s_next: DVector<f64>,
    /// True termination (no bootstrap); time-limit truncation is not terminal.
    pub terminal: bool,
    pub option: usize,
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: Vec::new(),
            next: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// `batch` draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&Transition>, QuadredError> {
        if self.items.is_empty() {
            return Err(QuadredError::Empty("replay buffer"));
        }
        Ok((0..batch)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect())
    }
}

/// Running per-coordinate mean and variance (Welford); normalized values are
/// clipped to `[-5, 5]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningNormalizer {
    pub count: f64,
    pub mean: DVector<f64>,
    pub m2: DVector<f64>,
}

impl RunningNormalizer {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: DVector::zeros(dim),
            m2: DVector::zeros(dim),
        }
    }

    pub fn update(&mut self, x: &DVector<f64>) {
        self.count += 1.0;
        let delta = x - &self.mean;
        self.mean += &delta / self.count;
        let delta2 = x - &self.mean;
        self.m2 += delta.component_mul(&delta2);
    }

    pub fn std(&self) -> DVector<f64> {
        if self.count < 2.0 {
            return DVector::from_element(self.mean.len(), 1.0);
        }
        self.m2.map(|m| (m / (self.count - 1.0)).sqrt().max(1e-3))
    }

    pub fn normalize(&self, x: &DVector<f64>) -> DVector<f64> {
        let std = self.std();
        DVector::from_fn(x.len(), |i, _| ((x[i] - self.mean[i]) / std[i]).clamp(-5.0, 5.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadredConfig {
    pub n_quantiles: usize,
    pub kappa: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub option_lr: f64,
    pub tau: f64,
    pub beta: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of training over which epsilon anneals.
    pub epsilon_anneal: f64,
    pub noise_std: f64,
    /// Per-component bound on predicted disturbances.
    pub action_bound: f64,
    pub use_options: bool,
    /// Early stop when the 100-update moving average of the option-value
    /// loss falls below this value.
    pub early_stop: Option<f64>,
    pub reward_scale: f64,
    /// Transitions collected before updates start.
    pub warmup: usize,
    pub updates_per_step: usize,
}

impl Default for QuadredConfig {
    fn default() -> Self {
        Self {
            n_quantiles: 32,
            kappa: 1.0,
            gamma: 0.998,
            batch_size: 256,
            replay_capacity: 1_000_000,
            hidden: vec![128, 128],
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            option_lr: 1e-3,
            tau: 0.005,
            beta: 0.1,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal: 0.3,
            noise_std: 0.3,
            action_bound: crate::wind::DEFAULT_RESIDUAL_BOUND,
            use_options: true,
            early_stop: Some(1e-3),
            reward_scale: 1.0,
            warmup: 1000,
            updates_per_step: 1,
        }
    }
}

impl QuadredConfig {
    pub fn validate(&self) -> Result<(), QuadredError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.n_quantiles == 0 || self.batch_size == 0 || self.replay_capacity == 0 {
            return Err(QuadredError::Invalid("n_quantiles, batch_size and replay_capacity must be positive"));
        }
        if !(unit(self.gamma) && unit(self.beta) && unit(self.epsilon_start) && unit(self.epsilon_end)) {
            return Err(QuadredError::Invalid("gamma, beta and epsilon must lie in [0, 1]"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(QuadredError::Invalid("tau must lie in (0, 1]"));
        }
        if !(self.kappa > 0.0 && self.action_bound > 0.0 && self.reward_scale > 0.0) {
            return Err(QuadredError::Invalid("kappa, action_bound and reward_scale must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.option_lr > 0.0) {
            return Err(QuadredError::Invalid("learning rates must be positive and noise nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateLosses {
    pub quantile: f64,
    pub option: f64,
}

#[derive(Debug, Clone)]
pub struct QuadredAgent {
    pub config: QuadredConfig,
    pub options: OptionSet,
    pub actor: Mlp,
    pub critic: Mlp,
    pub option_net: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    pub target_option_net: Mlp,
    pub normalizer: RunningNormalizer,
    pub epsilon: f64,
    actor_opt: AdamState,
    critic_opt: AdamState,
    option_opt: AdamState,
    state_dim: usize,
    action_dim: usize,
}

fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

impl QuadredAgent {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        config: QuadredConfig,
        rng: &mut R,
    ) -> Result<Self, QuadredError> {
        config.validate()?;
        let options = if config.use_options {
            OptionSet::standard(config.n_quantiles)?
        } else {
            OptionSet::single(config.n_quantiles)?
        };
        let actor = Mlp::new(
            &dims(state_dim, &config.hidden, action_dim),
            OutputActivation::ScaledTanh(config.action_bound),
            3e-3,
            rng,
        )?;
        let critic = Mlp::new(
            &dims(state_dim + action_dim, &config.hidden, config.n_quantiles),
            OutputActivation::Identity,
            3e-3,
            rng,
        )?;
        let option_net = Mlp::new(
            &dims(state_dim, &config.hidden, options.len()),
            OutputActivation::Identity,
            3e-3,
            rng,
        )?;
        Ok(Self {
            actor_opt: AdamState::new(&actor, config.actor_lr),
            critic_opt: AdamState::new(&critic, config.critic_lr),
            option_opt: AdamState::new(&option_net, config.option_lr),
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            target_option_net: option_net.clone(),
            actor,
            critic,
            option_net,
            normalizer: RunningNormalizer::new(state_dim),
            epsilon: config.epsilon_start,
            options,
            config,
            state_dim,
            action_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn check_state(&self, s: &DVector<f64>) -> Result<(), QuadredError> {
        if s.len() != self.state_dim {
            return Err(QuadredError::Dimension {
                expected: self.state_dim,
                got: s.len(),
            });
        }
        Ok(())
    }

    pub fn observe(&mut self, s: &DVector<f64>) {
        self.normalizer.update(s);
    }

    /// Option values `Q(s, z)` for every option.
    pub fn option_values(&self, s: &DVector<f64>) -> Result<DVector<f64>, QuadredError> {
        self.check_state(s)?;
        Ok(self.option_net.predict(&self.normalizer.normalize(s))?)
    }

    /// Keep `prev` with probability `1 - beta`; otherwise pick uniformly with
    /// probability `epsilon`, else greedily (lowest index on ties).
    pub fn select_option<R: Rng + ?Sized>(
        &self,
        s: &DVector<f64>,
        prev: usize,
        rng: &mut R,
    ) -> Result<usize, QuadredError> {
        let n = self.options.len();
        if prev >= n {
            return Err(QuadredError::Invalid("previous option out of range"));
        }
        if !rng.random_bool(self.config.beta) {
            return Ok(prev);
        }
        if rng.random_bool(self.epsilon) {
            return Ok(rng.random_range(0..n));
        }
        let values = self.option_values(s)?;
        let mut best = 0;
        for j in 1..n {
            if values[j] > values[best] {
                best = j;
            }
        }
        Ok(best)
    }

    /// Deterministic predicted disturbance sequence, bounded per component.
    pub fn act(&self, s: &DVector<f64>) -> Result<DVector<f64>, QuadredError> {
        self.check_state(s)?;
        Ok(self.actor.predict(&self.normalizer.normalize(s))?)
    }

    /// `act` plus clipped Gaussian exploration noise.
    pub fn act_explore<R: Rng + ?Sized>(
        &self,
        s: &DVector<f64>,
        noise_std: f64,
        rng: &mut R,
    ) -> Result<DVector<f64>, QuadredError> {
        let bound = self.config.action_bound;
        let mut a = self.act(s)?;
        if noise_std > 0.0 {
            for v in a.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *v = (*v + noise_std * n).clamp(-bound, bound);
            }
        }
        Ok(a)
    }

    fn state_matrix(&self, batch: &[&Transition], next: bool) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.state_dim, batch.len());
        for (c, t) in batch.iter().enumerate() {
            let s = if next { &t.s_next } else { &t.s };
            m.set_column(c, &self.normalizer.normalize(s));
        }
        m
    }

    fn critic_input(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DMatrix<f64> {
        let b = states.ncols();
        let mut input = DMatrix::zeros(self.state_dim + self.action_dim, b);
        input.view_mut((0, 0), states.shape()).copy_from(states);
        input
            .view_mut((self.state_dim, 0), actions.shape())
            .copy_from(&(actions / self.config.action_bound));
        input
    }

    /// Quantile regression on `r + gamma q'_i(s', mu'(s'))` and the option
    /// head on the beta-mixed bootstrap.
    pub fn critic_update(&mut self, batch: &[&Transition]) -> Result<UpdateLosses, QuadredError> {
        if batch.is_empty() {
            return Err(QuadredError::Empty("batch"));
        }
        let b = batch.len();
        let cfg = &self.config;
        let (gamma, beta, scale, kappa) = (cfg.gamma, cfg.beta, cfg.reward_scale, cfg.kappa);
        let states = self.state_matrix(batch, false);
        let next_states = self.state_matrix(batch, true);
        let mut actions = DMatrix::zeros(self.action_dim, b);
        for (c, t) in batch.iter().enumerate() {
            if t.a.len() != self.action_dim {
                return Err(QuadredError::Dimension {
                    expected: self.action_dim,
                    got: t.a.len(),
                });
            }
            actions.set_column(c, &t.a);
        }

        let next_actions = self.target_actor.forward_batch(&next_states)?.output().clone();
        let next_quantiles = self
            .target_critic
            .forward_batch(&self.critic_input(&next_states, &next_actions))?
            .output()
            .clone();
        let tape = self.critic.forward_batch(&self.critic_input(&states, &actions))?;
        let predicted = tape.output();
        let n_q = predicted.nrows();
        let mut out_grad = DMatrix::zeros(n_q, b);
        let mut quantile_loss = 0.0;
        for (c, t) in batch.iter().enumerate() {
            let bootstrap = if t.terminal { 0.0 } else { gamma };
            let targets: Vec<f64> = next_quantiles
                .column(c)
                .iter()
                .map(|q| scale * t.r + bootstrap * q)
                .collect();
            let pred: Vec<f64> = predicted.column(c).iter().copied().collect();
            let (loss, grad) = quantile_huber_loss(&pred, &targets, kappa)?;
            quantile_loss += loss / b as f64;
            for (i, g) in grad.iter().enumerate() {
                out_grad[(i, c)] = g / b as f64;
            }
        }
        let (grads, _) = self.critic.backward(&tape, &out_grad)?;
        adam_step(&mut self.critic, &grads, &mut self.critic_opt)?;

        let next_values = self.target_option_net.forward_batch(&next_states)?.output().clone();
        let tape = self.option_net.forward_batch(&states)?;
        let values = tape.output();
        let mut out_grad = DMatrix::zeros(values.nrows(), b);
        let mut option_loss = 0.0;
        for (c, t) in batch.iter().enumerate() {
            let z = t.option.min(values.nrows() - 1);
            let col = next_values.column(c);
            let best = col.max();
            let bootstrap = if t.terminal { 0.0 } else { gamma };
            let target = scale * t.r + bootstrap * (beta * best + (1.0 - beta) * col[z]);
            let err = values[(z, c)] - target;
            option_loss += err * err / b as f64;
            out_grad[(z, c)] = 2.0 * err / b as f64;
        }
        let (grads, _) = self.option_net.backward(&tape, &out_grad)?;
        adam_step(&mut self.option_net, &grads, &mut self.option_opt)?;

        if !(quantile_loss.is_finite() && option_loss.is_finite()) {
            return Err(QuadredError::NonFinite("critic loss"));
        }
        Ok(UpdateLosses {
            quantile: quantile_loss,
            option: option_loss,
        })
    }

    /// Gradient of the option's window mean with respect to the action, per
    /// sample, and the window mean itself.
    pub fn action_gradient(
        &self,
        states: &DMatrix<f64>,
        actions: &DMatrix<f64>,
        option: usize,
    ) -> Result<(DMatrix<f64>, f64), QuadredError> {
        if option >= self.options.len() {
            return Err(QuadredError::Invalid("option out of range"));
        }
        let b = states.ncols();
        let tape = self.critic.forward_batch(&self.critic_input(states, actions))?;
        let (start, width) = self.options.windows[option];
        let mut out_grad = DMatrix::zeros(self.config.n_quantiles, b);
        let mut value = 0.0;
        for c in 0..b {
            for i in start..start + width {
                out_grad[(i, c)] = 1.0 / width as f64;
                value += tape.output()[(i, c)] / (width * b) as f64;
            }
        }
        let (_, input_grad) = self.critic.backward(&tape, &out_grad)?;
        let grad = input_grad.rows(self.state_dim, self.action_dim) / self.config.action_bound;
        Ok((grad, value))
    }

    /// Deterministic policy gradient step on the option's window mean.
    /// Returns the actor loss `-mean Q_{j|K}(s, mu(s))`.
    pub fn actor_update(&mut self, batch: &[&Transition], option: usize) -> Result<f64, QuadredError> {
        if batch.is_empty() {
            return Err(QuadredError::Empty("batch"));
        }
        let b = batch.len();
        let states = self.state_matrix(batch, false);
        let tape = self.actor.forward_batch(&states)?;
        let (grad_a, value) = self.action_gradient(&states, tape.output(), option)?;
        let out_grad = grad_a * (-1.0 / b as f64);
        let (grads, _) = self.actor.backward(&tape, &out_grad)?;
        adam_step(&mut self.actor, &grads, &mut self.actor_opt)?;
        if !value.is_finite() {
            return Err(QuadredError::NonFinite("actor loss"));
        }
        Ok(-value)
    }

    pub fn update_targets(&mut self) -> Result<(), QuadredError> {
        let tau = self.config.tau;
        soft_update(&mut self.target_actor, &self.actor, tau)?;
        soft_update(&mut self.target_critic, &self.critic, tau)?;
        soft_update(&mut self.target_option_net, &self.option_net, tau)?;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        self.actor.write_tensors("actor", &mut ckpt);
        self.critic.write_tensors("critic", &mut ckpt);
        self.option_net.write_tensors("option", &mut ckpt);
        ckpt.meta.insert("state_dim".into(), self.state_dim.to_string());
        ckpt.meta.insert("action_dim".into(), self.action_dim.to_string());
        ckpt.meta.insert("action_bound".into(), format!("{:?}", self.config.action_bound));
        ckpt.meta.insert("n_quantiles".into(), self.config.n_quantiles.to_string());
        ckpt.meta.insert("use_options".into(), self.config.use_options.to_string());
        ckpt.meta.insert("normalizer.count".into(), format!("{:?}", self.normalizer.count));
        let col = |v: &DVector<f64>| Tensor::from_matrix(&DMatrix::from_column_slice(v.len(), 1, v.as_slice()));
        ckpt.tensors.insert("normalizer.mean".into(), col(&self.normalizer.mean));
        ckpt.tensors.insert("normalizer.m2".into(), col(&self.normalizer.m2));
        ckpt
    }

    /// Rebuild an agent for inference from a checkpoint; optimizer state
    /// starts fresh and targets equal the online networks.
    pub fn from_checkpoint(ckpt: &Checkpoint, mut config: QuadredConfig) -> Result<Self, QuadredError> {
        let meta = |k: &str| -> Result<&String, QuadredError> {
            ckpt.meta
                .get(k)
                .ok_or_else(|| QuadredError::Nn(crate::nn_core::NnError::Checkpoint(format!("missing {k}"))))
        };
        let parse_err = |k: &str| QuadredError::Nn(crate::nn_core::NnError::Checkpoint(format!("bad {k}")));
        let state_dim: usize = meta("state_dim")?.parse().map_err(|_| parse_err("state_dim"))?;
        let action_dim: usize = meta("action_dim")?.parse().map_err(|_| parse_err("action_dim"))?;
        config.action_bound = meta("action_bound")?.parse().map_err(|_| parse_err("action_bound"))?;
        config.n_quantiles = meta("n_quantiles")?.parse().map_err(|_| parse_err("n_quantiles"))?;
        config.use_options = meta("use_options")?.parse().map_err(|_| parse_err("use_options"))?;
        let actor = Mlp::read_tensors("actor", ckpt)?;
        let critic = Mlp::read_tensors("critic", ckpt)?;
        let option_net = Mlp::read_tensors("option", ckpt)?;
        if actor.input_dim() != state_dim
            || actor.output_dim() != action_dim
            || critic.input_dim() != state_dim + action_dim
            || critic.output_dim() != config.n_quantiles
        {
            return Err(parse_err("network shapes"));
        }
        let options = if config.use_options {
            OptionSet::standard(config.n_quantiles)?
        } else {
            OptionSet::single(config.n_quantiles)?
        };
        if option_net.output_dim() != options.len() {
            return Err(parse_err("option head"));
        }
        let vec = |k: &str| -> Result<DVector<f64>, QuadredError> {
            let t = ckpt.tensors.get(k).ok_or_else(|| parse_err(k))?;
            if t.rows != state_dim || t.cols != 1 {
                return Err(parse_err(k));
            }
            Ok(DVector::from_column_slice(&t.data))
        };
        let normalizer = RunningNormalizer {
            count: meta("normalizer.count")?.parse().map_err(|_| parse_err("normalizer.count"))?,
            mean: vec("normalizer.mean")?,
            m2: vec("normalizer.m2")?,
        };
        Ok(Self {
            actor_opt: AdamState::new(&actor, config.actor_lr),
            critic_opt: AdamState::new(&critic, config.critic_lr),
            option_opt: AdamState::new(&option_net, config.option_lr),
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            target_option_net: option_net.clone(),
            actor,
            critic,
            option_net,
            normalizer,
            epsilon: config.epsilon_end,
            options,
            config,
            state_dim,
            action_dim,
        })
    }
}

/// One environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub state: DVector<f64>,
    pub reward: f64,
    pub terminal: bool,
    pub truncated: bool,
}

pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<DVector<f64>, QuadredError>;
    fn step(&mut self, action: &DVector<f64>, rng: &mut ChaCha8Rng) -> Result<EnvStep, QuadredError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub episodes: usize,
    /// Safety cap on steps per episode.
    pub max_steps: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            episodes: 1000,
            max_steps: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub episode_return: f64,
    /// Mean quantile loss over the episode's updates (NaN without updates).
    pub critic_loss: f64,
    pub actor_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<EpisodeRecord>,
    pub stopped_early: bool,
    pub updates: usize,
}

impl TrainReport {
    pub fn returns(&self) -> Vec<f64> {
        self.curve.iter().map(|r| r.episode_return).collect()
    }
}

/// Interaction and update loop: explore with the current option, store
/// transitions, and after warmup update critic, option head, actor and
/// targets every step.
pub fn train<E: Environment>(
    agent: &mut QuadredAgent,
    env: &mut E,
    settings: &TrainSettings,
    rng: &mut ChaCha8Rng,
) -> Result<TrainReport, QuadredError> {
    if env.state_dim() != agent.state_dim || env.action_dim() != agent.action_dim {
        return Err(QuadredError::Dimension {
            expected: agent.state_dim + agent.action_dim,
            got: env.state_dim() + env.action_dim(),
        });
    }
    let cfg = agent.config.clone();
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity);
    let mut curve = Vec::with_capacity(settings.episodes);
    let mut option_losses: VecDeque<f64> = VecDeque::with_capacity(100);
    let mut updates = 0;
    let mut stopped_early = false;
    let anneal_episodes = (cfg.epsilon_anneal * settings.episodes as f64).max(1.0);

    for episode in 0..settings.episodes {
        let progress = episode as f64 / settings.episodes as f64;
        let frac = (episode as f64 / anneal_episodes).min(1.0);
        agent.epsilon = cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac;
        let noise = cfg.noise_std * (1.0 - progress);

        let mut s = env.reset(rng)?;
        agent.observe(&s);
        let mut option = rng.random_range(0..agent.options.len());
        let (mut ret, mut c_loss, mut a_loss, mut n_up) = (0.0, 0.0, 0.0, 0usize);
        for _ in 0..settings.max_steps {
            option = agent.select_option(&s, option, rng)?;
            let a = agent.act_explore(&s, noise, rng)?;
            let step = env.step(&a, rng)?;
            if !step.reward.is_finite() || step.state.iter().any(|v| !v.is_finite()) {
                return Err(QuadredError::Diverged {
                    episode,
                    what: "environment returned a non-finite value".into(),
                });
            }
            agent.observe(&step.state);
            ret += step.reward;
            buffer.push(Transition {
                s: s.clone(),
                a,
                r: step.reward,
                s_next: step.state.clone(),
                terminal: step.terminal,
                option,
            });
            if buffer.len() >= cfg.warmup.max(cfg.batch_size) {
                for _ in 0..cfg.updates_per_step {
                    let batch = buffer.sample(cfg.batch_size, rng)?;
                    let losses = agent.critic_update(&batch).map_err(|e| QuadredError::Diverged {
                        episode,
                        what: e.to_string(),
                    })?;
                    let al = agent.actor_update(&batch, option).map_err(|e| QuadredError::Diverged {
                        episode,
                        what: e.to_string(),
                    })?;
                    agent.update_targets()?;
                    c_loss += losses.quantile;
                    a_loss += al;
                    n_up += 1;
                    updates += 1;
                    if option_losses.len() == 100 {
                        option_losses.pop_front();
                    }
                    option_losses.push_back(losses.option);
                }
            }
            s = step.state;
            if step.terminal || step.truncated {
                break;
            }
        }
        let denom = if n_up > 0 { n_up as f64 } else { f64::NAN };
        curve.push(EpisodeRecord {
            episode,
            episode_return: ret,
            critic_loss: c_loss / denom,
            actor_loss: a_loss / denom,
        });
        if let Some(xi) = cfg.early_stop {
            if option_losses.len() == 100 && option_losses.iter().sum::<f64>() / 100.0 < xi {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainReport {
        curve,
        stopped_early,
        updates,
    })
}

/// CSV with header `episode,return,critic_loss,actor_loss`.
pub fn write_learning_curve(path: &Path, curve: &[EpisodeRecord]) -> Result<(), QuadredError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["episode", "return", "critic_loss", "actor_loss"])?;
    for r in curve {
        w.write_record([
            r.episode.to_string(),
            r.episode_return.to_string(),
            r.critic_loss.to_string(),
            r.actor_loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_config() -> QuadredConfig {
        QuadredConfig {
            n_quantiles: 8,
            hidden: vec![16, 16],
            batch_size: 16,
            warmup: 16,
            ..QuadredConfig::default()
        }
    }

    #[test]
    fn reward_examples() {
        assert_eq!(reward(&[1.0, 2.0], &[1.0, 2.0], &[0.0], &[1.0, 1.0], &[1.0]).unwrap(), 0.0);
        let mut x = vec![0.0; 13];
        x[0] = 1.0;
        let mut u = vec![0.0; 4];
        u[0] = 1.0;
        let r = reward(&x, &[0.0; 13], &u, &[1.0; 13], &[1.0; 4]).unwrap();
        assert_eq!(r, -2.0);
        assert!(reward(&x, &[0.0; 13], &u, &[0.0; 13], &[1.0; 4]).is_err());
        assert!(reward(&x, &[0.0; 12], &u, &[1.0; 13], &[1.0; 4]).is_err());
    }

    #[test]
    fn option_windows() {
        let o = OptionSet::standard(32).unwrap();
        assert_eq!(o.windows, vec![(0, 32), (0, 16), (8, 16), (16, 16)]);
        let q: Vec<f64> = (0..32).map(f64::from).collect();
        assert_eq!(o.window_mean(&q, 0), 15.5);
        assert_eq!(o.window_mean(&q, 1), 7.5);
        assert_eq!(o.window_mean(&q, 3), 23.5);
        assert!(OptionSet::new(4, vec![(3, 2)]).is_err());
    }

    #[test]
    fn replay_ring_and_sampling() {
        let mut buf = ReplayBuffer::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(buf.sample(1, &mut rng).is_err());
        for i in 0..5 {
            buf.push(Transition {
                s: DVector::zeros(1),
                a: DVector::zeros(1),
                r: i as f64,
                s_next: DVector::zeros(1),
                terminal: false,
                option: 0,
            });
        }
        assert_eq!(buf.len(), 3);
        let rewards: Vec<f64> = buf.sample(300, &mut rng).unwrap().iter().map(|t| t.r).collect();
        for r in [2.0, 3.0, 4.0] {
            assert!(rewards.contains(&r));
        }
        assert!(!rewards.contains(&0.0));
    }

    #[test]
    fn normalizer_statistics() {
        let mut n = RunningNormalizer::new(1);
        for v in [1.0, 2.0, 3.0, 4.0] {
            n.update(&DVector::from_element(1, v));
        }
        assert!((n.mean[0] - 2.5).abs() < 1e-15);
        assert!((n.std()[0] - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(n.normalize(&DVector::from_element(1, 1e9))[0], 5.0);
    }

    #[test]
    fn zero_actor_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut agent = QuadredAgent::new(3, 2, small_config(), &mut rng).unwrap();
        agent.actor = Mlp::zeros(&[3, 16, 16, 2], OutputActivation::ScaledTanh(3.0)).unwrap();
        let a = agent.act(&DVector::from_vec(vec![1.0, -2.0, 0.5])).unwrap();
        assert_eq!(a, DVector::zeros(2));
        assert!(agent.act(&DVector::zeros(4)).is_err());
    }

    #[test]
    fn beta_zero_keeps_option() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = QuadredConfig {
            beta: 0.0,
            ..small_config()
        };
        let agent = QuadredAgent::new(2, 1, cfg, &mut rng).unwrap();
        for prev in 0..4 {
            for _ in 0..50 {
                assert_eq!(agent.select_option(&DVector::zeros(2), prev, &mut rng).unwrap(), prev);
            }
        }
    }

    #[test]
    fn gamma_zero_targets_are_rewards() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = QuadredConfig {
            gamma: 0.0,
            critic_lr: 1e-2,
            ..small_config()
        };
        let mut agent = QuadredAgent::new(1, 1, cfg, &mut rng).unwrap();
        let t = Transition {
            s: DVector::from_element(1, 0.3),
            a: DVector::from_element(1, 0.1),
            r: 0.7,
            s_next: DVector::from_element(1, -0.4),
            terminal: false,
            option: 0,
        };
        let batch = vec![&t; 8];
        for _ in 0..2000 {
            agent.critic_update(&batch).unwrap();
        }
        let input = agent.critic_input(&agent.state_matrix(&batch[..1], false), &DMatrix::from_element(1, 1, 0.1));
        let q = agent.critic.forward_batch(&input).unwrap().output().clone();
        assert!(q.iter().all(|v| (v - 0.7).abs() < 1e-2), "{q}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut agent = QuadredAgent::new(3, 2, small_config(), &mut rng).unwrap();
        agent.observe(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        agent.observe(&DVector::from_vec(vec![-1.0, 0.0, 5.0]));
        let mut text = Vec::new();
        agent.to_checkpoint().write_to(&mut text).unwrap();
        let ckpt = Checkpoint::read_from(text.as_slice()).unwrap();
        let loaded = QuadredAgent::from_checkpoint(&ckpt, small_config()).unwrap();
        let s = DVector::from_vec(vec![0.2, -0.1, 4.0]);
        assert_eq!(agent.act(&s).unwrap(), loaded.act(&s).unwrap());
        assert_eq!(agent.critic, loaded.critic);
        assert_eq!(agent.normalizer, loaded.normalizer);
    }
}
