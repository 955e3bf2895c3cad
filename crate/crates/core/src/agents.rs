//! Off-policy learners that consume weighted replay batches.
//!
//! [`QAgent`] is a small DQN for discrete actions. [`AcAgent`] is a TD3-style
//! deterministic actor-critic for box actions: one critic, delayed policy
//! updates and target policy smoothing. Both minimize `mean_i w_i * delta_i^2`.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::{Action, ActionSpace, EnvSpec, Environment};
use crate::error::{Error, Result};
use crate::replay::{target_value, SampledBatch, Transition, ValueOracle};
use crate::tinynn::{Activation, AdamConfig, AdamState, Gradients, Matrix, Mlp};

pub trait Agent: ValueOracle {
    fn name(&self) -> &'static str;

    /// Discount used for bootstrapped targets; the replay buffer must share it.
    fn gamma(&self) -> f64;

    /// Greedy action when `explore` is false, otherwise the exploration policy.
    fn act(&mut self, state: &[f64], explore: bool, rng: &mut dyn RngCore) -> Result<Action>;

    /// One gradient step on the batch. Returns `|delta_i|` per row as seen by
    /// the critic update.
    fn train_step(&mut self, batch: &SampledBatch, rng: &mut dyn RngCore) -> Result<Vec<f64>>;
}

/// Weighted squared TD loss.
///
/// Returns `(mean_i w_i (y_i - q_i)^2, d loss / d q_i, y_i - q_i)`.
pub fn weighted_td_loss(
    predictions: &[f64],
    targets: &[f64],
    weights: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let m = predictions.len();
    if targets.len() != m || weights.len() != m {
        return Err(Error::Shape {
            expected: format!("{m} targets and weights"),
            got: format!("{} / {}", targets.len(), weights.len()),
        });
    }
    if m == 0 {
        return Err(Error::Domain("loss over an empty batch".into()));
    }
    let scale = 1.0 / m as f64;
    let deltas: Vec<f64> = targets.iter().zip(predictions).map(|(y, q)| y - q).collect();
    let loss = deltas
        .iter()
        .zip(weights)
        .map(|(d, w)| w * d * d)
        .sum::<f64>()
        * scale;
    let grad = deltas
        .iter()
        .zip(weights)
        .map(|(d, w)| -2.0 * w * d * scale)
        .collect();
    Ok((loss, grad, deltas))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn rows_of<'a>(transitions: &'a [&Transition], pick: impl Fn(&'a Transition) -> &'a [f64]) -> Result<Matrix> {
    Matrix::from_rows(&transitions.iter().map(|t| pick(t)).collect::<Vec<_>>())
}

fn check_state(state: &[f64], dim: usize) -> Result<()> {
    if state.len() != dim {
        return Err(Error::Shape {
            expected: format!("state of length {dim}"),
            got: format!("{}", state.len()),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Exploring steps over which epsilon falls linearly from start to end.
    pub epsilon_decay_steps: u64,
    /// `1.0` with a period > 1 gives hard target copies; smaller values give Polyak averaging.
    pub target_tau: f64,
    /// Train steps between target updates.
    pub target_period: u64,
}

impl Default for QConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            learning_rate: 1e-3,
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 2_000,
            target_tau: 1.0,
            target_period: 100,
        }
    }
}

impl QConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        if !(self.target_tau > 0.0 && self.target_tau <= 1.0) {
            return Err(Error::Config(format!("target_tau must be in (0, 1], got {}", self.target_tau)));
        }
        if self.target_period == 0 {
            return Err(Error::Config("target_period must be >= 1".into()));
        }
        for eps in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&eps) {
                return Err(Error::Config(format!("epsilon must be in [0, 1], got {eps}")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// DQN-style learner: state in, one value per discrete action out.
#[derive(Debug, Clone)]
pub struct QAgent {
    config: QConfig,
    state_dim: usize,
    actions: usize,
    q_net: Mlp,
    target_net: Mlp,
    adam: AdamState,
    explore_steps: u64,
    train_steps: u64,
}

impl QAgent {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, actions: usize, config: QConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if actions == 0 {
            return Err(Error::Config("a Q-agent needs at least one action".into()));
        }
        let mut dims = vec![state_dim];
        dims.extend(&config.hidden);
        dims.push(actions);
        let q_net = Mlp::new(&dims, Activation::Relu, Activation::Identity, rng)?;
        let adam = AdamState::new(&q_net, AdamConfig::with_lr(config.learning_rate));
        Ok(Self {
            target_net: q_net.clone(),
            config,
            state_dim,
            actions,
            q_net,
            adam,
            explore_steps: 0,
            train_steps: 0,
        })
    }

    pub fn config(&self) -> &QConfig {
        &self.config
    }

    pub fn q_net(&self) -> &Mlp {
        &self.q_net
    }

    pub fn q_net_mut(&mut self) -> &mut Mlp {
        &mut self.q_net
    }

    pub fn target_net(&self) -> &Mlp {
        &self.target_net
    }

    pub fn epsilon(&self) -> f64 {
        let c = &self.config;
        let frac = if c.epsilon_decay_steps == 0 {
            1.0
        } else {
            (self.explore_steps as f64 / c.epsilon_decay_steps as f64).min(1.0)
        };
        c.epsilon_start + (c.epsilon_end - c.epsilon_start) * frac
    }

    pub fn q_row(&self, state: &[f64]) -> Result<Vec<f64>> {
        check_state(state, self.state_dim)?;
        Ok(self.q_net.predict(&Matrix::from_rows(&[state])?)?.into_data())
    }

    /// Bootstrap targets `r + gamma * max_a Q_target(s', a)`.
    pub fn targets(&self, transitions: &[&Transition]) -> Result<Vec<f64>> {
        let next = self.next_values(transitions)?;
        Ok(transitions
            .iter()
            .zip(next)
            .map(|(t, v)| target_value(t, v, self.config.gamma))
            .collect())
    }

    /// Weighted critic loss, its parameter gradient and the per-row TD-errors.
    pub fn critic_loss_and_grad(&self, batch: &SampledBatch, targets: &[f64]) -> Result<(f64, Gradients, Vec<f64>)> {
        let refs: Vec<&Transition> = batch.transitions.iter().collect();
        let x = rows_of(&refs, |t| &t.state)?;
        let (out, cache) = self.q_net.forward(&x)?;
        let chosen = self.chosen_actions(&refs)?;
        let preds: Vec<f64> = chosen.iter().enumerate().map(|(i, &a)| out.get(i, a)).collect();
        let (loss, dpred, deltas) = weighted_td_loss(&preds, targets, &batch.weights)?;
        let mut grad_out = Matrix::zeros(out.rows(), out.cols());
        for (i, (&a, &g)) in chosen.iter().zip(&dpred).enumerate() {
            grad_out.set(i, a, g);
        }
        let (grads, _) = self.q_net.backward(&cache, &grad_out)?;
        Ok((loss, grads, deltas))
    }

    fn chosen_actions(&self, transitions: &[&Transition]) -> Result<Vec<usize>> {
        transitions
            .iter()
            .map(|t| match t.action.index() {
                Some(a) if a < self.actions => Ok(a),
                _ => Err(Error::Domain("transition action is not a valid discrete index".into())),
            })
            .collect()
    }
}

impl ValueOracle for QAgent {
    fn q_values(&self, transitions: &[&Transition]) -> Result<Vec<f64>> {
        let out = self.q_net.predict(&rows_of(transitions, |t| &t.state)?)?;
        let chosen = self.chosen_actions(transitions)?;
        Ok(chosen.iter().enumerate().map(|(i, &a)| out.get(i, a)).collect())
    }

    fn next_values(&self, transitions: &[&Transition]) -> Result<Vec<f64>> {
        let out = self.target_net.predict(&rows_of(transitions, |t| &t.next_state)?)?;
        Ok((0..out.rows())
            .map(|i| out.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect())
    }
}

impl Agent for QAgent {
    fn name(&self) -> &'static str {
        "dqn"
    }

    fn gamma(&self) -> f64 {
        self.config.gamma
    }

    fn act(&mut self, state: &[f64], explore: bool, rng: &mut dyn RngCore) -> Result<Action> {
        check_state(state, self.state_dim)?;
        if explore {
            let eps = self.epsilon();
            self.explore_steps += 1;
            if rng.random::<f64>() < eps {
                return Ok(Action::Discrete(rng.random_range(0..self.actions)));
            }
        }
        Ok(Action::Discrete(argmax(&self.q_row(state)?)))
    }

    fn train_step(&mut self, batch: &SampledBatch, _rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::Domain("cannot train on an empty batch".into()));
        }
        let refs: Vec<&Transition> = batch.transitions.iter().collect();
        let targets = self.targets(&refs)?;
        let (loss, grads, deltas) = self.critic_loss_and_grad(batch, &targets)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!("critic loss diverged ({loss})")));
        }
        self.adam.step(&mut self.q_net, &grads)?;
        self.train_steps += 1;
        if self.train_steps % self.config.target_period == 0 {
            self.target_net.soft_update_from(&self.q_net, self.config.target_tau)?;
        }
        Ok(deltas.into_iter().map(f64::abs).collect())
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Critic steps per actor (and target) update.
    pub policy_delay: u64,
    /// Exploration noise stddev, as a fraction of the half-range of each action dim.
    pub action_noise: f64,
    pub target_noise: f64,
    pub target_noise_clip: f64,
}

impl Default for AcConfig {
    fn default() -> Self {
        Self {
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            gamma: 0.99,
            tau: 5e-3,
            policy_delay: 2,
            action_noise: 0.1,
            target_noise: 0.2,
            target_noise_clip: 0.5,
        }
    }
}

impl AcConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        if self.policy_delay == 0 {
            return Err(Error::Config("policy_delay must be >= 1".into()));
        }
        if self.action_noise < 0.0 || self.target_noise < 0.0 || self.target_noise_clip < 0.0 {
            return Err(Error::Config("noise scales must be >= 0".into()));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        Ok(())
    }
}

/// Deterministic actor-critic for box action spaces.
///
/// The actor ends in `tanh` and is rescaled to the action bounds, so its
/// output always lies inside them. Target actor and critic track the online
/// nets by Polyak averaging on every policy update.
#[derive(Debug, Clone)]
pub struct AcAgent {
    config: AcConfig,
    state_dim: usize,
    low: Vec<f64>,
    high: Vec<f64>,
    actor: Mlp,
    target_actor: Mlp,
    critic: Mlp,
    target_critic: Mlp,
    actor_adam: AdamState,
    critic_adam: AdamState,
    train_steps: u64,
}

impl AcAgent {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, space: &ActionSpace, config: AcConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        space.validate()?;
        let ActionSpace::Box { low, high } = space else {
            return Err(Error::Config("the actor-critic agent needs a box action space".into()));
        };
        let action_dim = low.len();
        let mut actor_dims = vec![state_dim];
        actor_dims.extend(&config.actor_hidden);
        actor_dims.push(action_dim);
        let mut critic_dims = vec![state_dim + action_dim];
        critic_dims.extend(&config.critic_hidden);
        critic_dims.push(1);
        let actor = Mlp::new(&actor_dims, Activation::Relu, Activation::Tanh, rng)?;
        let critic = Mlp::new(&critic_dims, Activation::Relu, Activation::Identity, rng)?;
        Ok(Self {
            actor_adam: AdamState::new(&actor, AdamConfig::with_lr(config.actor_lr)),
            critic_adam: AdamState::new(&critic, AdamConfig::with_lr(config.critic_lr)),
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            config,
            state_dim,
            low: low.clone(),
            high: high.clone(),
            actor,
            critic,
            train_steps: 0,
        })
    }

    pub fn config(&self) -> &AcConfig {
        &self.config
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn critic(&self) -> &Mlp {
        &self.critic
    }

    pub fn critic_mut(&mut self) -> &mut Mlp {
        &mut self.critic
    }

    pub fn actor_mut(&mut self) -> &mut Mlp {
        &mut self.actor
    }

    pub fn target_actor(&self) -> &Mlp {
        &self.target_actor
    }

    pub fn target_critic(&self) -> &Mlp {
        &self.target_critic
    }

    fn half_range(&self, k: usize) -> f64 {
        0.5 * (self.high[k] - self.low[k])
    }

    /// Map `tanh` outputs in `[-1, 1]` onto the action bounds, in place.
    fn rescale(&self, squashed: &mut Matrix) {
        for r in 0..squashed.rows() {
            for (k, v) in squashed.row_mut(r).iter_mut().enumerate() {
                *v = self.low[k] + (*v + 1.0) * self.half_range(k);
            }
        }
    }

    fn clip_row(&self, row: &mut [f64]) {
        for (k, v) in row.iter_mut().enumerate() {
            *v = v.clamp(self.low[k], self.high[k]);
        }
    }

    /// Deterministic policy output for each state row.
    pub fn policy(&self, states: &Matrix) -> Result<Matrix> {
        let mut a = self.actor.predict(states)?;
        self.rescale(&mut a);
        Ok(a)
    }

    fn target_policy(&self, states: &Matrix) -> Result<Matrix> {
        let mut a = self.target_actor.predict(states)?;
        self.rescale(&mut a);
        Ok(a)
    }

    fn stored_actions(&self, transitions: &[&Transition]) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = transitions
            .iter()
            .map(|t| match &t.action {
                Action::Continuous(v) if v.len() == self.low.len() => Ok(v.clone()),
                _ => Err(Error::Domain("transition action does not match the box space".into())),
            })
            .collect::<Result<_>>()?;
        Matrix::from_rows(&rows)
    }

    /// Smoothed bootstrap targets: the target actor's action plus clipped noise.
    pub fn targets(&self, transitions: &[&Transition], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let next_states = rows_of(transitions, |t| &t.next_state)?;
        let mut a = self.target_policy(&next_states)?;
        let c = &self.config;
        if c.target_noise > 0.0 {
            for r in 0..a.rows() {
                for k in 0..self.low.len() {
                    let half = self.half_range(k);
                    let eps: f64 = rng.sample(StandardNormal);
                    let noise = (eps * c.target_noise * half).clamp(-c.target_noise_clip * half, c.target_noise_clip * half);
                    let v = a.get(r, k) + noise;
                    a.set(r, k, v);
                }
                self.clip_row(a.row_mut(r));
            }
        }
        let q = self.target_critic.predict(&next_states.hcat(&a)?)?;
        Ok(transitions
            .iter()
            .enumerate()
            .map(|(i, t)| target_value(t, q.get(i, 0), c.gamma))
            .collect())
    }

    pub fn critic_loss_and_grad(&self, batch: &SampledBatch, targets: &[f64]) -> Result<(f64, Gradients, Vec<f64>)> {
        let refs: Vec<&Transition> = batch.transitions.iter().collect();
        let x = rows_of(&refs, |t| &t.state)?.hcat(&self.stored_actions(&refs)?)?;
        let (out, cache) = self.critic.forward(&x)?;
        let (loss, dpred, deltas) = weighted_td_loss(&out.column(0), targets, &batch.weights)?;
        let (grads, _) = self.critic.backward(&cache, &Matrix::from_vec(dpred.len(), 1, dpred)?)?;
        Ok((loss, grads, deltas))
    }

    /// `mean_i w_i Q(s_i, pi(s_i))`, the quantity the actor ascends.
    pub fn actor_objective(&self, states: &Matrix, weights: &[f64]) -> Result<f64> {
        let q = self.critic.predict(&states.hcat(&self.policy(states)?)?)?;
        Ok(q.column(0).iter().zip(weights).map(|(q, w)| w * q).sum::<f64>() / weights.len() as f64)
    }

    /// Gradient of [`Self::actor_objective`] w.r.t. the actor parameters.
    pub fn actor_gradient(&self, states: &Matrix, weights: &[f64]) -> Result<Gradients> {
        if weights.len() != states.rows() || weights.is_empty() {
            return Err(Error::Shape {
                expected: format!("{} weights", states.rows()),
                got: format!("{}", weights.len()),
            });
        }
        let (mut squashed, actor_cache) = self.actor.forward(states)?;
        self.rescale(&mut squashed);
        let (_, critic_cache) = self.critic.forward(&states.hcat(&squashed)?)?;
        let m = weights.len() as f64;
        let dq = Matrix::from_vec(weights.len(), 1, weights.iter().map(|w| w / m).collect())?;
        let (_, dx) = self.critic.backward(&critic_cache, &dq)?;
        let (_, mut da) = dx.split_cols(self.state_dim);
        for r in 0..da.rows() {
            for (k, v) in da.row_mut(r).iter_mut().enumerate() {
                *v *= self.half_range(k);
            }
        }
        let (grads, _) = self.actor.backward(&actor_cache, &da)?;
        Ok(grads)
    }
}

impl ValueOracle for AcAgent {
    fn q_values(&self, transitions: &[&Transition]) -> Result<Vec<f64>> {
        let x = rows_of(transitions, |t| &t.state)?.hcat(&self.stored_actions(transitions)?)?;
        Ok(self.critic.predict(&x)?.into_data())
    }

    /// Target critic at the noise-free target action.
    fn next_values(&self, transitions: &[&Transition]) -> Result<Vec<f64>> {
        let next_states = rows_of(transitions, |t| &t.next_state)?;
        let a = self.target_policy(&next_states)?;
        Ok(self.target_critic.predict(&next_states.hcat(&a)?)?.into_data())
    }
}

impl Agent for AcAgent {
    fn name(&self) -> &'static str {
        "td3_lite"
    }

    fn gamma(&self) -> f64 {
        self.config.gamma
    }

    fn act(&mut self, state: &[f64], explore: bool, rng: &mut dyn RngCore) -> Result<Action> {
        check_state(state, self.state_dim)?;
        let mut a = self.policy(&Matrix::from_rows(&[state])?)?.into_data();
        if explore && self.config.action_noise > 0.0 {
            for (k, v) in a.iter_mut().enumerate() {
                let eps: f64 = rng.sample(StandardNormal);
                *v += eps * self.config.action_noise * self.half_range(k);
            }
            self.clip_row(&mut a);
        }
        Ok(Action::Continuous(a))
    }

    fn train_step(&mut self, batch: &SampledBatch, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::Domain("cannot train on an empty batch".into()));
        }
        let refs: Vec<&Transition> = batch.transitions.iter().collect();
        let targets = self.targets(&refs, rng)?;
        let (loss, grads, deltas) = self.critic_loss_and_grad(batch, &targets)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!("critic loss diverged ({loss})")));
        }
        self.critic_adam.step(&mut self.critic, &grads)?;
        self.train_steps += 1;
        if self.train_steps % self.config.policy_delay == 0 {
            let states = rows_of(&refs, |t| &t.state)?;
            let mut grads = self.actor_gradient(&states, &batch.weights)?;
            if !grads.is_finite() {
                return Err(Error::NonFinite("actor gradient diverged".into()));
            }
            grads.scale(-1.0);
            self.actor_adam.step(&mut self.actor, &grads)?;
            self.target_actor.soft_update_from(&self.actor, self.config.tau)?;
            self.target_critic.soft_update_from(&self.critic, self.config.tau)?;
        }
        Ok(deltas.into_iter().map(f64::abs).collect())
    }
}

// ---------------------------------------------------------------------------

/// Agent selection as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum AgentConfig {
    Dqn(QConfig),
    Td3Lite(AcConfig),
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig::Td3Lite(AcConfig::default())
    }
}

impl AgentConfig {
    pub fn name(&self) -> &'static str {
        match self {
            AgentConfig::Dqn(_) => "dqn",
            AgentConfig::Td3Lite(_) => "td3_lite",
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            AgentConfig::Dqn(c) => c.gamma,
            AgentConfig::Td3Lite(c) => c.gamma,
        }
    }

    pub fn build<R: Rng + ?Sized>(&self, spec: &EnvSpec, rng: &mut R) -> Result<Box<dyn Agent + Send>> {
        match (self, &spec.action_space) {
            (AgentConfig::Dqn(c), ActionSpace::Discrete(n)) => {
                Ok(Box::new(QAgent::new(spec.observation_dim, *n, c.clone(), rng)?))
            }
            (AgentConfig::Td3Lite(c), space @ ActionSpace::Box { .. }) => {
                Ok(Box::new(AcAgent::new(spec.observation_dim, space, c.clone(), rng)?))
            }
            (c, _) => Err(Error::Config(format!(
                "agent '{}' does not support this environment's action space",
                c.name()
            ))),
        }
    }
}

/// Mean undiscounted return of `episodes` greedy rollouts.
pub fn evaluate(
    agent: &mut dyn Agent,
    env: &mut dyn Environment,
    episodes: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::Domain("evaluation needs at least one episode".into()));
    }
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut state = env.reset(rng);
        loop {
            let action = agent.act(&state, false, rng)?;
            let out = env.step(&action)?;
            total += out.reward;
            if out.done() {
                break;
            }
            state = out.next_state;
        }
    }
    Ok(total / episodes as f64)
}
