//! Small control tasks behind a common reset/step interface.
//!
//! - [`SparsePendulum`]: the frictionless pendulum with a sparse upright-streak reward.
//! - [`ChainMdp`]: a discrete corridor with reward only at the far end (not from the
//!   original benchmark suite; added as a cheap discrete task).
//! - [`PointMass`]: a 2-D double integrator that must reach a goal disk (also an
//!   addition, chosen because its optimal behaviour is easy to reason about).

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    Box { low: Vec<f64>, high: Vec<f64> },
}

impl ActionSpace {
    pub fn unit_box(dim: usize) -> Self {
        ActionSpace::Box {
            low: vec![-1.0; dim],
            high: vec![1.0; dim],
        }
    }

    /// Width of the action part of a feature row (one-hot for discrete spaces).
    pub fn feature_dim(&self) -> usize {
        match self {
            ActionSpace::Discrete(n) => *n,
            ActionSpace::Box { low, .. } => low.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ActionSpace::Discrete(0) => Err(Error::Domain("discrete space needs n >= 1".into())),
            ActionSpace::Discrete(_) => Ok(()),
            ActionSpace::Box { low, high } => {
                if low.is_empty() || low.len() != high.len() {
                    return Err(Error::Domain("box bounds must be non-empty and equal length".into()));
                }
                if low.iter().zip(high).any(|(l, h)| !(l < h)) {
                    return Err(Error::Domain("box bounds need low < high elementwise".into()));
                }
                Ok(())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        match self {
            ActionSpace::Discrete(n) => Action::Discrete(rng.random_range(0..*n)),
            ActionSpace::Box { low, high } => Action::Continuous(
                low.iter()
                    .zip(high)
                    .map(|(&l, &h)| rng.random_range(l..h))
                    .collect(),
            ),
        }
    }

    /// Clip continuous actions into the box; reject actions of the wrong kind.
    pub fn clip(&self, action: &Action) -> Result<Action> {
        match (self, action) {
            (ActionSpace::Discrete(n), Action::Discrete(a)) => {
                if a < n {
                    Ok(Action::Discrete(*a))
                } else {
                    Err(Error::Domain(format!("discrete action {a} outside 0..{n}")))
                }
            }
            (ActionSpace::Box { low, high }, Action::Continuous(values)) => {
                if values.len() != low.len() {
                    return Err(Error::Domain(format!(
                        "action has {} dims, space has {}",
                        values.len(),
                        low.len()
                    )));
                }
                Ok(Action::Continuous(
                    values
                        .iter()
                        .zip(low.iter().zip(high))
                        .map(|(v, (l, h))| v.clamp(*l, *h))
                        .collect(),
                ))
            }
            _ => Err(Error::Domain("action kind does not match the action space".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    /// Real-valued encoding used in feature rows and critic inputs.
    pub fn features(&self, space: &ActionSpace) -> Vec<f64> {
        match (self, space) {
            (Action::Discrete(a), ActionSpace::Discrete(n)) => {
                let mut one_hot = vec![0.0; *n];
                if *a < *n {
                    one_hot[*a] = 1.0;
                }
                one_hot
            }
            (Action::Continuous(v), _) => v.clone(),
            (Action::Discrete(a), ActionSpace::Box { .. }) => vec![*a as f64],
        }
    }

    pub fn index(&self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(*a),
            Action::Continuous(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub observation_dim: usize,
    pub action_space: ActionSpace,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// Reached an absorbing state; no bootstrapping past it.
    pub terminated: bool,
    /// Hit the horizon.
    pub truncated: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

pub trait Environment {
    fn spec(&self) -> EnvSpec;
    fn reset(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64>;
    fn step(&mut self, action: &Action) -> Result<StepOutcome>;
    /// Steps taken since the last reset.
    fn steps(&self) -> usize;
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumConfig {
    /// Reward is paid once the upright streak is strictly longer than this.
    pub streak_threshold: usize,
    /// Half-width of the upright band, radians.
    pub upright_band: f64,
    pub horizon: usize,
    pub max_torque: f64,
    pub max_speed: f64,
    pub dt: f64,
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            streak_threshold: 20,
            upright_band: PI / 3.0,
            horizon: 200,
            max_torque: 2.0,
            max_speed: 8.0,
            dt: 0.05,
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
        }
    }
}

/// Pendulum with sparse reward: 1.0 per step once the rod has stayed within
/// the upright band for more than `streak_threshold` consecutive steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePendulum {
    config: PendulumConfig,
    theta: f64,
    theta_dot: f64,
    streak: usize,
    steps: usize,
    done: bool,
}

impl SparsePendulum {
    pub fn new(config: PendulumConfig) -> Result<Self> {
        if config.horizon == 0 {
            return Err(Error::Config("pendulum horizon must be >= 1".into()));
        }
        Ok(Self {
            config,
            theta: PI,
            theta_dot: 0.0,
            streak: 0,
            steps: 0,
            done: false,
        })
    }

    pub fn config(&self) -> &PendulumConfig {
        &self.config
    }

    /// Place the rod at an explicit angle/velocity and restart the episode.
    pub fn set_state(&mut self, theta: f64, theta_dot: f64) {
        self.theta = wrap_angle(theta);
        self.theta_dot = theta_dot;
        self.streak = 0;
        self.steps = 0;
        self.done = false;
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn theta_dot(&self) -> f64 {
        self.theta_dot
    }

    pub fn streak(&self) -> usize {
        self.streak
    }

    pub fn observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }

    /// Angular acceleration coefficient `3g / 2l`.
    pub fn gravity_term(&self) -> f64 {
        3.0 * self.config.gravity / (2.0 * self.config.length)
    }
}

/// Wrap into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let wrapped = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if wrapped <= -PI {
        wrapped + 2.0 * PI
    } else {
        wrapped
    }
}

impl Environment for SparsePendulum {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            observation_dim: 3,
            action_space: ActionSpace::unit_box(1),
            horizon: self.config.horizon,
        }
    }

    fn reset(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        // pi - U[0, 2pi) lies in (-pi, pi].
        self.theta = PI - rng.random_range(0.0..2.0 * PI);
        self.theta_dot = rng.random_range(-1.0..=1.0);
        self.streak = 0;
        self.steps = 0;
        self.done = false;
        self.observation()
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::State("step called after the episode ended".into()));
        }
        let Action::Continuous(values) = self.spec().action_space.clip(action)? else {
            unreachable!("box space clips to a continuous action")
        };
        let c = &self.config;
        let torque = values[0] * c.max_torque;
        let accel = self.gravity_term() * self.theta.sin()
            + 3.0 / (c.mass * c.length * c.length) * torque;
        // Semi-implicit Euler: velocity first, then position with the new velocity.
        self.theta_dot = (self.theta_dot + accel * c.dt).clamp(-c.max_speed, c.max_speed);
        self.theta = wrap_angle(self.theta + self.theta_dot * c.dt);
        if self.theta.abs() <= c.upright_band {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        let reward = if self.streak > c.streak_threshold { 1.0 } else { 0.0 };
        self.steps += 1;
        let truncated = self.steps >= c.horizon;
        self.done = truncated;
        Ok(StepOutcome {
            next_state: self.observation(),
            reward,
            terminated: false,
            truncated,
        })
    }

    fn steps(&self) -> usize {
        self.steps
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub states: usize,
    pub horizon: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            states: 7,
            horizon: 50,
        }
    }
}

/// Corridor `0 .. states-1`. Action 0 moves left, 1 moves right; reaching the
/// last state pays 1.0 and ends the episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainMdp {
    config: ChainConfig,
    position: usize,
    steps: usize,
    done: bool,
}

impl ChainMdp {
    pub const LEFT: usize = 0;
    pub const RIGHT: usize = 1;

    pub fn new(config: ChainConfig) -> Result<Self> {
        if config.states < 2 {
            return Err(Error::Config("chain needs at least 2 states".into()));
        }
        if config.horizon == 0 {
            return Err(Error::Config("chain horizon must be >= 1".into()));
        }
        Ok(Self {
            config,
            position: 0,
            steps: 0,
            done: false,
        })
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn states(&self) -> usize {
        self.config.states
    }

    pub fn one_hot(&self, position: usize) -> Vec<f64> {
        let mut obs = vec![0.0; self.config.states];
        obs[position] = 1.0;
        obs
    }
}

impl Environment for ChainMdp {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            observation_dim: self.config.states,
            action_space: ActionSpace::Discrete(2),
            horizon: self.config.horizon,
        }
    }

    fn reset(&mut self, _rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self.position = 0;
        self.steps = 0;
        self.done = false;
        self.one_hot(0)
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::State("step called after the episode ended".into()));
        }
        let Action::Discrete(a) = self.spec().action_space.clip(action)? else {
            unreachable!("discrete space clips to a discrete action")
        };
        self.position = if a == Self::RIGHT {
            (self.position + 1).min(self.config.states - 1)
        } else {
            self.position.saturating_sub(1)
        };
        self.steps += 1;
        let terminated = self.position == self.config.states - 1;
        let truncated = !terminated && self.steps >= self.config.horizon;
        self.done = terminated || truncated;
        Ok(StepOutcome {
            next_state: self.one_hot(self.position),
            reward: if terminated { 1.0 } else { 0.0 },
            terminated,
            truncated,
        })
    }

    fn steps(&self) -> usize {
        self.steps
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointMassConfig {
    pub horizon: usize,
    pub dt: f64,
    pub goal: [f64; 2],
    pub goal_radius: f64,
    pub max_speed: f64,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self {
            horizon: 100,
            dt: 0.1,
            goal: [0.5, 0.5],
            goal_radius: 0.15,
            max_speed: 1.0,
        }
    }
}

/// Point mass in `[-1, 1]^2`; actions are accelerations in `[-1, 1]^2`.
/// Observation is `(x, y, vx, vy)`; reward 1.0 per step inside the goal disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMass {
    config: PointMassConfig,
    position: [f64; 2],
    velocity: [f64; 2],
    steps: usize,
    done: bool,
}

impl PointMass {
    pub fn new(config: PointMassConfig) -> Result<Self> {
        if config.horizon == 0 {
            return Err(Error::Config("point-mass horizon must be >= 1".into()));
        }
        Ok(Self {
            config,
            position: [-0.5, -0.5],
            velocity: [0.0; 2],
            steps: 0,
            done: false,
        })
    }

    pub fn set_state(&mut self, position: [f64; 2], velocity: [f64; 2]) {
        self.position = position;
        self.velocity = velocity;
        self.steps = 0;
        self.done = false;
    }

    fn observation(&self) -> Vec<f64> {
        vec![
            self.position[0],
            self.position[1],
            self.velocity[0],
            self.velocity[1],
        ]
    }

    fn in_goal(&self) -> bool {
        let dx = self.position[0] - self.config.goal[0];
        let dy = self.position[1] - self.config.goal[1];
        (dx * dx + dy * dy).sqrt() <= self.config.goal_radius
    }
}

impl Environment for PointMass {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            observation_dim: 4,
            action_space: ActionSpace::unit_box(2),
            horizon: self.config.horizon,
        }
    }

    fn reset(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self.position = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        self.velocity = [0.0; 2];
        self.steps = 0;
        self.done = false;
        self.observation()
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::State("step called after the episode ended".into()));
        }
        let Action::Continuous(accel) = self.spec().action_space.clip(action)? else {
            unreachable!("box space clips to a continuous action")
        };
        let c = &self.config;
        for axis in 0..2 {
            self.velocity[axis] =
                (self.velocity[axis] + accel[axis] * c.dt).clamp(-c.max_speed, c.max_speed);
            let next = self.position[axis] + self.velocity[axis] * c.dt;
            if next.abs() > 1.0 {
                self.velocity[axis] = 0.0;
            }
            self.position[axis] = next.clamp(-1.0, 1.0);
        }
        self.steps += 1;
        let truncated = self.steps >= c.horizon;
        self.done = truncated;
        Ok(StepOutcome {
            next_state: self.observation(),
            reward: if self.in_goal() { 1.0 } else { 0.0 },
            terminated: false,
            truncated,
        })
    }

    fn steps(&self) -> usize {
        self.steps
    }
}

// ---------------------------------------------------------------------------

/// Environment selection as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum EnvConfig {
    Pendulum(PendulumConfig),
    Chain(ChainConfig),
    PointMass(PointMassConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::Pendulum(PendulumConfig::default())
    }
}

impl EnvConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Pendulum(_) => "pendulum",
            EnvConfig::Chain(_) => "chain",
            EnvConfig::PointMass(_) => "point_mass",
        }
    }

    pub fn build(&self) -> Result<Env> {
        Ok(match self {
            EnvConfig::Pendulum(c) => Env::Pendulum(SparsePendulum::new(c.clone())?),
            EnvConfig::Chain(c) => Env::Chain(ChainMdp::new(c.clone())?),
            EnvConfig::PointMass(c) => Env::PointMass(PointMass::new(c.clone())?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Env {
    Pendulum(SparsePendulum),
    Chain(ChainMdp),
    PointMass(PointMass),
}

impl Environment for Env {
    fn spec(&self) -> EnvSpec {
        match self {
            Env::Pendulum(e) => e.spec(),
            Env::Chain(e) => e.spec(),
            Env::PointMass(e) => e.spec(),
        }
    }

    fn reset(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        match self {
            Env::Pendulum(e) => e.reset(rng),
            Env::Chain(e) => e.reset(rng),
            Env::PointMass(e) => e.reset(rng),
        }
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        match self {
            Env::Pendulum(e) => e.step(action),
            Env::Chain(e) => e.step(action),
            Env::PointMass(e) => e.step(action),
        }
    }

    fn steps(&self) -> usize {
        match self {
            Env::Pendulum(e) => e.steps(),
            Env::Chain(e) => e.steps(),
            Env::PointMass(e) => e.steps(),
        }
    }
}
