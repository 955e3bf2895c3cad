//! Experience replay buffer with sum-tree priorities.
//!
//! The tree stores `score^alpha` per slot, so a proportional draw from the tree
//! realizes `p_i = score_i^alpha / sum_k score_k^alpha` directly. New
//! transitions enter with score 1.0 and are marked fresh: until they are first
//! sampled and re-scored, their TD-error and target features read 1.0.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Action, ActionSpace};
use crate::error::{Error, Result};
use crate::sumtree::{DrawScheme, SumTree};

const SNAPSHOT_MAGIC: &[u8; 4] = b"NRSB";
const SNAPSHOT_VERSION: u32 = 1;

/// Score given to every newly pushed transition.
pub const INITIAL_SCORE: f64 = 1.0;

/// Feature value used for TD-error and target-Q of never-sampled transitions.
pub const FRESH_FEATURE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Terminal flag; truncation at the horizon is not terminal.
    pub done: bool,
    /// Global environment step at which the transition was collected.
    pub timestep: u64,
}

/// Per-transition sampler input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub timestep_norm: f64,
    pub td_error_norm: f64,
    pub target_q_norm: f64,
}

/// Which fields of a [`FeatureRow`] a sampler sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSet {
    /// Everything: state, action, reward, next state, timestep, TD-error, target-Q.
    #[default]
    Full,
    /// Only reward, TD-error and timestep.
    Restricted,
}

impl FeatureSet {
    pub fn width(self, state_dim: usize, action_dim: usize) -> usize {
        match self {
            FeatureSet::Full => 2 * state_dim + action_dim + 4,
            FeatureSet::Restricted => 3,
        }
    }
}

impl FeatureRow {
    pub fn flatten(&self, set: FeatureSet) -> Vec<f64> {
        match set {
            FeatureSet::Full => {
                let mut out = Vec::with_capacity(2 * self.state.len() + self.action.len() + 4);
                out.extend_from_slice(&self.state);
                out.extend_from_slice(&self.action);
                out.push(self.reward);
                out.extend_from_slice(&self.next_state);
                out.push(self.timestep_norm);
                out.push(self.td_error_norm);
                out.push(self.target_q_norm);
                out
            }
            FeatureSet::Restricted => vec![self.reward, self.td_error_norm, self.timestep_norm],
        }
    }
}

/// Value estimates needed to compute TD-errors for a batch of transitions.
pub trait ValueOracle {
    /// `Q(s, a)` under the online critic.
    fn q_values(&self, transitions: &[&Transition]) -> Result<Vec<f64>>;
    /// `max_a Q_target(s', a)` (or the target policy's value for continuous actions).
    fn next_values(&self, transitions: &[&Transition]) -> Result<Vec<f64>>;
}

/// `r + gamma * next_value`, with the bootstrap dropped on terminal transitions.
pub fn target_value(transition: &Transition, next_value: f64, gamma: f64) -> f64 {
    if transition.done {
        transition.reward
    } else {
        transition.reward + gamma * next_value
    }
}

/// `delta = r + gamma * max_a Q_target(s', a) - Q(s, a)` from precomputed values.
pub fn td_error_from_values(transition: &Transition, q_value: f64, next_value: f64, gamma: f64) -> f64 {
    target_value(transition, next_value, gamma) - q_value
}

pub fn compute_td_error(transition: &Transition, oracle: &dyn ValueOracle, gamma: f64) -> Result<f64> {
    let q = oracle.q_values(&[transition])?[0];
    let next = oracle.next_values(&[transition])?[0];
    Ok(td_error_from_values(transition, q, next, gamma))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNorm {
    /// Divide by the largest weight in the batch.
    #[default]
    MaxNormalized,
    /// `(1 / (N p_i))^beta` as is.
    Raw,
}

/// Importance weights `(1 / (n * p_i))^beta`, optionally max-normalized.
pub fn importance_weights(probabilities: &[f64], buffer_len: usize, beta: f64, norm: WeightNorm) -> Vec<f64> {
    let n = buffer_len as f64;
    let raw: Vec<f64> = probabilities
        .iter()
        .map(|&p| (1.0 / (n * p)).powf(beta))
        .collect();
    match norm {
        WeightNorm::Raw => raw,
        WeightNorm::MaxNormalized => {
            let max = raw.iter().copied().fold(f64::MIN, f64::max);
            raw.into_iter().map(|w| w / max).collect()
        }
    }
}

/// Which way the importance-sampling exponent moves over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaRule {
    /// `beta = start * (1 - progress) + end * progress`: rises from start to end.
    #[default]
    Increasing,
    /// `beta = start * progress + end * (1 - progress)`: falls from end to start.
    Decreasing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BetaSchedule {
    pub start: f64,
    pub end: f64,
    pub rule: BetaRule,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            start: 0.4,
            end: 1.0,
            rule: BetaRule::Increasing,
        }
    }
}

impl BetaSchedule {
    /// Beta at `progress = current step / max steps`, clamped to `[0, 1]`.
    pub fn value(&self, progress: f64) -> f64 {
        let eta = progress.clamp(0.0, 1.0);
        match self.rule {
            BetaRule::Increasing => self.start * (1.0 - eta) + self.end * eta,
            BetaRule::Decreasing => self.start * eta + self.end * (1.0 - eta),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub state_dim: usize,
    pub action_space: ActionSpace,
    pub gamma: f64,
    pub alpha: f64,
    pub weight_norm: WeightNorm,
    pub draw: DrawScheme,
}

impl ReplayConfig {
    pub fn new(capacity: usize, state_dim: usize, action_space: ActionSpace) -> Self {
        Self {
            capacity,
            state_dim,
            action_space,
            gamma: 0.99,
            alpha: 0.5,
            weight_norm: WeightNorm::MaxNormalized,
            draw: DrawScheme::Iid,
        }
    }
}

/// One sampled minibatch with everything the agent and sampler need.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    pub indices: Vec<usize>,
    /// Whole-buffer draw probability of each index.
    pub probabilities: Vec<f64>,
    pub weights: Vec<f64>,
    pub features: Vec<FeatureRow>,
    pub transitions: Vec<Transition>,
    /// Raw TD-errors computed at sampling time.
    pub td_errors: Vec<f64>,
    /// Raw bootstrap targets `r + gamma * max_a Q_target(s', a)`.
    pub target_values: Vec<f64>,
    /// Raw `Q(s, a)`.
    pub q_values: Vec<f64>,
}

impl SampledBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Features and value estimates for a set of slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluated {
    pub features: Vec<FeatureRow>,
    pub transitions: Vec<Transition>,
    pub td_errors: Vec<f64>,
    pub target_values: Vec<f64>,
    pub q_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    transition: Transition,
    fresh: bool,
    td_error: f64,
    target_value: f64,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    config: ReplayConfig,
    tree: SumTree,
    slots: Vec<Slot>,
    latest_timestep: u64,
}

impl ReplayBuffer {
    pub fn new(config: ReplayConfig) -> Result<Self> {
        config.action_space.validate()?;
        if !(config.alpha > 0.0) {
            return Err(Error::Domain(format!("alpha must be > 0, got {}", config.alpha)));
        }
        if !(0.0..=1.0).contains(&config.gamma) {
            return Err(Error::Domain(format!("gamma must be in [0, 1], got {}", config.gamma)));
        }
        Ok(Self {
            tree: SumTree::new(config.capacity)?,
            slots: Vec::with_capacity(config.capacity.min(1 << 20)),
            config,
            latest_timestep: 0,
        })
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.config.capacity
    }

    pub fn latest_timestep(&self) -> u64 {
        self.latest_timestep
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    /// Stored `score^alpha` per occupied slot.
    pub fn leaves(&self) -> &[f64] {
        self.tree.leaves()
    }

    pub fn transition(&self, slot: usize) -> Result<&Transition> {
        self.slot(slot).map(|s| &s.transition)
    }

    pub fn is_fresh(&self, slot: usize) -> Result<bool> {
        self.slot(slot).map(|s| s.fresh)
    }

    /// `tanh` of the TD-error recorded at the last re-scoring (1.0 when fresh).
    pub fn cached_td_norm(&self, slot: usize) -> Result<f64> {
        self.slot(slot)
            .map(|s| if s.fresh { FRESH_FEATURE } else { s.td_error.tanh() })
    }

    pub fn timestep_norm(&self, slot: usize) -> Result<f64> {
        self.slot(slot).map(|s| self.normalize_timestep(s.transition.timestep))
    }

    pub fn probability(&self, slot: usize) -> Result<f64> {
        self.tree.probability(slot)
    }

    fn slot(&self, slot: usize) -> Result<&Slot> {
        self.slots.get(slot).ok_or(Error::Index {
            index: slot,
            size: self.slots.len(),
        })
    }

    fn normalize_timestep(&self, timestep: u64) -> f64 {
        (timestep as f64 / self.latest_timestep.max(1) as f64).clamp(0.0, 1.0)
    }

    fn check_transition(&self, t: &Transition) -> Result<()> {
        let dim = self.config.state_dim;
        if t.state.len() != dim || t.next_state.len() != dim {
            return Err(Error::Domain(format!(
                "state dims ({}, {}) do not match buffer dim {dim}",
                t.state.len(),
                t.next_state.len()
            )));
        }
        match (&self.config.action_space, &t.action) {
            (ActionSpace::Discrete(n), Action::Discrete(a)) if a < n => {}
            (ActionSpace::Box { low, .. }, Action::Continuous(v)) if v.len() == low.len() => {}
            _ => {
                return Err(Error::Domain(
                    "action does not match the buffer's action space".into(),
                ))
            }
        }
        if t.timestep < self.latest_timestep {
            return Err(Error::Domain(format!(
                "timestep {} is older than the latest stored {}",
                t.timestep, self.latest_timestep
            )));
        }
        Ok(())
    }

    /// Store a transition with the initial score, evicting the oldest when full.
    pub fn push(&mut self, transition: Transition) -> Result<usize> {
        self.check_transition(&transition)?;
        let slot = self.tree.insert(INITIAL_SCORE.powf(self.config.alpha))?;
        self.latest_timestep = transition.timestep;
        let entry = Slot {
            transition,
            fresh: true,
            td_error: 0.0,
            target_value: 0.0,
        };
        if slot == self.slots.len() {
            self.slots.push(entry);
        } else {
            self.slots[slot] = entry;
        }
        Ok(slot)
    }

    /// Recompute features and value estimates for `indices`.
    pub fn evaluate(&self, indices: &[usize], oracle: &dyn ValueOracle) -> Result<Evaluated> {
        let slots: Vec<&Slot> = indices.iter().map(|&i| self.slot(i)).collect::<Result<_>>()?;
        let transitions: Vec<&Transition> = slots.iter().map(|s| &s.transition).collect();
        let q_values = oracle.q_values(&transitions)?;
        let next_values = oracle.next_values(&transitions)?;
        if q_values.len() != indices.len() || next_values.len() != indices.len() {
            return Err(Error::Shape {
                expected: format!("{} value estimates", indices.len()),
                got: format!("{} / {}", q_values.len(), next_values.len()),
            });
        }
        let gamma = self.config.gamma;
        let mut features = Vec::with_capacity(indices.len());
        let mut td_errors = Vec::with_capacity(indices.len());
        let mut target_values = Vec::with_capacity(indices.len());
        for ((slot, &q), &next) in slots.iter().zip(&q_values).zip(&next_values) {
            let t = &slot.transition;
            let target = target_value(t, next, gamma);
            let delta = target - q;
            let (td_norm, target_norm) = if slot.fresh {
                (FRESH_FEATURE, FRESH_FEATURE)
            } else {
                (delta.tanh(), target.tanh())
            };
            features.push(FeatureRow {
                state: t.state.clone(),
                action: t.action.features(&self.config.action_space),
                reward: t.reward,
                next_state: t.next_state.clone(),
                timestep_norm: self.normalize_timestep(t.timestep),
                td_error_norm: td_norm,
                target_q_norm: target_norm,
            });
            td_errors.push(delta);
            target_values.push(target);
        }
        Ok(Evaluated {
            features,
            transitions: transitions.into_iter().cloned().collect(),
            td_errors,
            target_values,
            q_values,
        })
    }

    /// Build a batch for explicitly chosen indices.
    pub fn batch_for(
        &self,
        indices: Vec<usize>,
        probabilities: Vec<f64>,
        weights: Vec<f64>,
        oracle: &dyn ValueOracle,
    ) -> Result<SampledBatch> {
        let eval = self.evaluate(&indices, oracle)?;
        Ok(SampledBatch {
            indices,
            probabilities,
            weights,
            features: eval.features,
            transitions: eval.transitions,
            td_errors: eval.td_errors,
            target_values: eval.target_values,
            q_values: eval.q_values,
        })
    }

    /// Draw `batch_size` slots proportionally to stored priority mass.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        beta: f64,
        oracle: &dyn ValueOracle,
        rng: &mut R,
    ) -> Result<SampledBatch> {
        if self.is_empty() {
            return Err(Error::State("cannot sample from an empty replay buffer".into()));
        }
        if beta < 0.0 {
            return Err(Error::Domain(format!("beta must be >= 0, got {beta}")));
        }
        let indices = self.tree.sample_with(self.config.draw, batch_size, rng)?;
        let total = self.tree.total();
        let leaves = self.tree.leaves();
        let probabilities: Vec<f64> = indices.iter().map(|&i| leaves[i] / total).collect();
        let weights = importance_weights(&probabilities, self.len(), beta, self.config.weight_norm);
        self.batch_for(indices, probabilities, weights, oracle)
    }

    /// Set leaf masses to `score^alpha` without touching cached values.
    pub fn set_priorities(&mut self, indices: &[usize], scores: &[f64]) -> Result<()> {
        if indices.len() != scores.len() {
            return Err(Error::Shape {
                expected: format!("{} scores", indices.len()),
                got: format!("{}", scores.len()),
            });
        }
        if let Some(bad) = scores.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain(format!("scores must be finite and > 0, got {bad}")));
        }
        for (&slot, &score) in indices.iter().zip(scores) {
            self.tree.update(slot, score.powf(self.config.alpha))?;
        }
        Ok(())
    }

    /// Write new scores for a sampled batch and refresh the cached TD-error and
    /// target values from that sample; the slots stop being fresh.
    pub fn update_priorities(&mut self, batch: &SampledBatch, scores: &[f64]) -> Result<()> {
        self.set_priorities(&batch.indices, scores)?;
        for (k, &slot) in batch.indices.iter().enumerate() {
            let entry = &mut self.slots[slot];
            entry.td_error = batch.td_errors[k];
            entry.target_value = batch.target_values[k];
            entry.fresh = false;
        }
        Ok(())
    }

    /// Dump the buffer as a little-endian binary snapshot.
    pub fn save_snapshot<W: Write>(&self, mut out: W) -> Result<()> {
        let c = &self.config;
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_u32::<LittleEndian>(SNAPSHOT_VERSION)?;
        out.write_u64::<LittleEndian>(c.capacity as u64)?;
        out.write_u64::<LittleEndian>(self.len() as u64)?;
        out.write_u64::<LittleEndian>(c.state_dim as u64)?;
        match &c.action_space {
            ActionSpace::Discrete(n) => {
                out.write_u8(0)?;
                out.write_u64::<LittleEndian>(*n as u64)?;
            }
            ActionSpace::Box { low, high } => {
                out.write_u8(1)?;
                out.write_u64::<LittleEndian>(low.len() as u64)?;
                for &v in low.iter().chain(high) {
                    out.write_f64::<LittleEndian>(v)?;
                }
            }
        }
        out.write_f64::<LittleEndian>(c.gamma)?;
        out.write_f64::<LittleEndian>(c.alpha)?;
        out.write_u64::<LittleEndian>(self.latest_timestep)?;
        out.write_u64::<LittleEndian>(self.tree.write_cursor() as u64)?;
        for slot in &self.slots {
            let t = &slot.transition;
            for &v in &t.state {
                out.write_f64::<LittleEndian>(v)?;
            }
            match &t.action {
                Action::Discrete(a) => out.write_u64::<LittleEndian>(*a as u64)?,
                Action::Continuous(v) => {
                    for &x in v {
                        out.write_f64::<LittleEndian>(x)?;
                    }
                }
            }
            out.write_f64::<LittleEndian>(t.reward)?;
            for &v in &t.next_state {
                out.write_f64::<LittleEndian>(v)?;
            }
            out.write_u8(t.done as u8)?;
            out.write_u64::<LittleEndian>(t.timestep)?;
            out.write_u8(slot.fresh as u8)?;
            out.write_f64::<LittleEndian>(slot.td_error)?;
            out.write_f64::<LittleEndian>(slot.target_value)?;
        }
        for &leaf in self.tree.leaves() {
            out.write_f64::<LittleEndian>(leaf)?;
        }
        Ok(())
    }

    pub fn load_snapshot<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Domain("not a replay snapshot (bad magic)".into()));
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Domain(format!("unsupported snapshot version {version}")));
        }
        let capacity = input.read_u64::<LittleEndian>()? as usize;
        let size = input.read_u64::<LittleEndian>()? as usize;
        let state_dim = input.read_u64::<LittleEndian>()? as usize;
        if size > capacity {
            return Err(Error::Domain(format!("snapshot size {size} exceeds capacity {capacity}")));
        }
        let action_space = match input.read_u8()? {
            0 => ActionSpace::Discrete(input.read_u64::<LittleEndian>()? as usize),
            1 => {
                let dim = input.read_u64::<LittleEndian>()? as usize;
                let mut low = vec![0.0; dim];
                let mut high = vec![0.0; dim];
                input.read_f64_into::<LittleEndian>(&mut low)?;
                input.read_f64_into::<LittleEndian>(&mut high)?;
                ActionSpace::Box { low, high }
            }
            other => return Err(Error::Domain(format!("unknown action kind {other}"))),
        };
        let mut config = ReplayConfig::new(capacity, state_dim, action_space);
        config.gamma = input.read_f64::<LittleEndian>()?;
        config.alpha = input.read_f64::<LittleEndian>()?;
        let latest_timestep = input.read_u64::<LittleEndian>()?;
        let cursor = input.read_u64::<LittleEndian>()? as usize;
        let mut buffer = ReplayBuffer::new(config)?;
        let mut slots = Vec::with_capacity(size);
        for _ in 0..size {
            let mut state = vec![0.0; state_dim];
            input.read_f64_into::<LittleEndian>(&mut state)?;
            let action = match &buffer.config.action_space {
                ActionSpace::Discrete(_) => Action::Discrete(input.read_u64::<LittleEndian>()? as usize),
                ActionSpace::Box { low, .. } => {
                    let mut v = vec![0.0; low.len()];
                    input.read_f64_into::<LittleEndian>(&mut v)?;
                    Action::Continuous(v)
                }
            };
            let reward = input.read_f64::<LittleEndian>()?;
            let mut next_state = vec![0.0; state_dim];
            input.read_f64_into::<LittleEndian>(&mut next_state)?;
            let done = input.read_u8()? != 0;
            let timestep = input.read_u64::<LittleEndian>()?;
            let fresh = input.read_u8()? != 0;
            let td_error = input.read_f64::<LittleEndian>()?;
            let target_value = input.read_f64::<LittleEndian>()?;
            slots.push(Slot {
                transition: Transition {
                    state,
                    action,
                    reward,
                    next_state,
                    done,
                    timestep,
                },
                fresh,
                td_error,
                target_value,
            });
        }
        let mut leaves = vec![0.0; size];
        input.read_f64_into::<LittleEndian>(&mut leaves)?;
        buffer.tree = SumTree::restore(capacity, &leaves, cursor)?;
        buffer.slots = slots;
        buffer.latest_timestep = latest_timestep;
        Ok(buffer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Oracle with fixed `Q(s, a) = q` and `max_a Q_target(s', a) = next`.
    struct ConstOracle {
        q: f64,
        next: f64,
    }

    impl ValueOracle for ConstOracle {
        fn q_values(&self, t: &[&Transition]) -> Result<Vec<f64>> {
            Ok(vec![self.q; t.len()])
        }
        fn next_values(&self, t: &[&Transition]) -> Result<Vec<f64>> {
            Ok(vec![self.next; t.len()])
        }
    }

    /// `Q(s, a) = s[0]`, `max_a Q_target(s', a) = s'[0]`.
    struct StateOracle;

    impl ValueOracle for StateOracle {
        fn q_values(&self, t: &[&Transition]) -> Result<Vec<f64>> {
            Ok(t.iter().map(|t| t.state[0]).collect())
        }
        fn next_values(&self, t: &[&Transition]) -> Result<Vec<f64>> {
            Ok(t.iter().map(|t| t.next_state[0]).collect())
        }
    }

    fn transition(step: u64, reward: f64) -> Transition {
        Transition {
            state: vec![step as f64 * 0.1, 1.0],
            action: Action::Continuous(vec![0.5]),
            reward,
            next_state: vec![step as f64 * 0.1 + 0.05, 1.0],
            done: false,
            timestep: step,
        }
    }

    fn buffer(capacity: usize) -> ReplayBuffer {
        ReplayBuffer::new(ReplayConfig::new(capacity, 2, ActionSpace::unit_box(1))).unwrap()
    }

    fn filled(capacity: usize, count: u64) -> ReplayBuffer {
        let mut b = buffer(capacity);
        for step in 1..=count {
            b.push(transition(step, step as f64 % 3.0)).unwrap();
        }
        b
    }

    #[test]
    fn push_sets_initial_priority() {
        let mut b = buffer(4);
        let slot = b.push(transition(1, 0.0)).unwrap();
        assert_eq!(slot, 0);
        assert_eq!(b.len(), 1);
        assert_eq!(b.leaves(), &[1.0]);
        assert!(b.is_fresh(0).unwrap());
    }

    #[test]
    fn push_beyond_capacity_overwrites_oldest() {
        let mut b = filled(3, 3);
        let slot = b.push(transition(4, 0.0)).unwrap();
        assert_eq!(slot, 0);
        assert_eq!(b.len(), 3);
        assert_eq!(b.transition(0).unwrap().timestep, 4);
    }

    #[test]
    fn push_rejects_bad_dimensions_and_old_timesteps() {
        let mut b = buffer(4);
        let mut t = transition(5, 0.0);
        t.state.push(0.0);
        assert!(matches!(b.push(t), Err(Error::Domain(_))));
        let mut t = transition(5, 0.0);
        t.action = Action::Discrete(0);
        assert!(matches!(b.push(t), Err(Error::Domain(_))));
        b.push(transition(5, 0.0)).unwrap();
        assert!(matches!(b.push(transition(4, 0.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn two_pushes_are_equally_likely() {
        let b = filled(8, 2);
        assert_eq!(b.probability(0).unwrap(), 0.5);
        assert_eq!(b.probability(1).unwrap(), 0.5);
    }

    #[test]
    fn empty_buffer_cannot_sample() {
        let b = buffer(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let oracle = ConstOracle { q: 0.0, next: 0.0 };
        assert!(matches!(b.sample(2, 0.4, &oracle, &mut rng), Err(Error::State(_))));
    }

    #[test]
    fn uniform_priorities_give_unit_weights() {
        let b = filled(100, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let oracle = ConstOracle { q: 0.0, next: 0.0 };
        let batch = b.sample(16, 1.0, &oracle, &mut rng).unwrap();
        for (&p, &w) in batch.probabilities.iter().zip(&batch.weights) {
            assert!((p - 0.01).abs() < 1e-15);
            assert!((w - 1.0).abs() < 1e-12);
        }
        let raw = importance_weights(&batch.probabilities, 100, 1.0, WeightNorm::Raw);
        assert!(raw.iter().all(|w| (w - 1.0).abs() < 1e-12));
    }

    #[test]
    fn scores_four_and_one_give_two_thirds() {
        let mut b = filled(4, 2);
        b.set_priorities(&[0, 1], &[4.0, 1.0]).unwrap();
        assert_eq!(b.leaves(), &[2.0, 1.0]);
        assert!((b.probability(0).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let oracle = ConstOracle { q: 0.0, next: 0.0 };
        let batch = b.sample(100_000, 0.4, &oracle, &mut rng).unwrap();
        let freq = batch.indices.iter().filter(|&&i| i == 0).count() as f64 / 1e5;
        assert!((freq - 2.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn fresh_rows_read_one_until_rescored() {
        let mut b = filled(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let oracle = ConstOracle { q: 0.2, next: 0.5 };
        let batch = b.sample(4, 0.4, &oracle, &mut rng).unwrap();
        for row in &batch.features {
            assert_eq!(row.td_error_norm, 1.0);
            assert_eq!(row.target_q_norm, 1.0);
        }
        b.update_priorities(&batch, &vec![1.0; batch.len()]).unwrap();
        let slot = batch.indices[0];
        assert!(!b.is_fresh(slot).unwrap());
        assert_eq!(b.leaves()[slot], 1.0);
        let again = b.batch_for(vec![slot], vec![0.0], vec![1.0], &oracle).unwrap();
        let t = b.transition(slot).unwrap();
        let target = t.reward + 0.99 * 0.5;
        assert_eq!(again.features[0].td_error_norm, (target - 0.2).tanh());
        assert_eq!(again.features[0].target_q_norm, target.tanh());
        assert_eq!(b.cached_td_norm(slot).unwrap(), (target - 0.2).tanh());
    }

    #[test]
    fn update_priorities_applies_alpha_and_rejects_nonpositive() {
        let mut b = filled(8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let oracle = ConstOracle { q: 0.0, next: 0.0 };
        let batch = b.sample(1, 0.4, &oracle, &mut rng).unwrap();
        b.update_priorities(&batch, &[4.0]).unwrap();
        assert_eq!(b.leaves()[batch.indices[0]], 2.0);
        assert!(matches!(b.update_priorities(&batch, &[0.0]), Err(Error::Domain(_))));
        assert!(matches!(b.update_priorities(&batch, &[-1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn td_error_examples() {
        let oracle = ConstOracle { q: 0.0, next: 0.0 };
        let mut t = transition(1, 1.0);
        assert_eq!(compute_td_error(&t, &oracle, 0.99).unwrap(), 1.0);

        t.reward = 0.0;
        let oracle = ConstOracle { q: 9.9, next: 10.0 };
        assert!(compute_td_error(&t, &oracle, 0.99).unwrap().abs() < 1e-12);

        t.reward = 5.0;
        t.done = true;
        let oracle = ConstOracle { q: 2.0, next: 1234.0 };
        assert_eq!(compute_td_error(&t, &oracle, 0.99).unwrap(), 3.0);
    }

    /// Three-state chain `0 -> 1 -> 2 (terminal)` with reward 1 on entering 2.
    /// With exact values `V(1) = 1`, `V(0) = gamma`, every Bellman residual is
    /// zero, including the terminal one, whose bootstrap must be masked.
    #[test]
    fn terminal_masking_matches_bellman_fixed_point() {
        let gamma = 0.9;
        let values = [gamma, 1.0, 0.0];
        // Terminal state value is deliberately non-zero in the oracle to catch a
        // missing mask.
        let oracle_values = [gamma, 1.0, 7.0];
        struct ChainOracle([f64; 3]);
        impl ValueOracle for ChainOracle {
            fn q_values(&self, t: &[&Transition]) -> Result<Vec<f64>> {
                Ok(t.iter().map(|t| self.0[t.state[0] as usize]).collect())
            }
            fn next_values(&self, t: &[&Transition]) -> Result<Vec<f64>> {
                Ok(t.iter().map(|t| self.0[t.next_state[0] as usize]).collect())
            }
        }
        let oracle = ChainOracle(oracle_values);
        for (s, reward, done) in [(0usize, 0.0, false), (1, 1.0, true)] {
            let t = Transition {
                state: vec![s as f64],
                action: Action::Discrete(0),
                reward,
                next_state: vec![(s + 1) as f64],
                done,
                timestep: 0,
            };
            let bellman = reward + if done { 0.0 } else { gamma * values[s + 1] } - values[s];
            assert!(bellman.abs() < 1e-12);
            assert!(compute_td_error(&t, &oracle, gamma).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn timestep_feature_is_normalized_by_latest_step() {
        let b = filled(8, 4);
        let oracle = StateOracle;
        let batch = b.batch_for(vec![0, 3], vec![0.25, 0.25], vec![1.0, 1.0], &oracle).unwrap();
        assert_eq!(batch.features[0].timestep_norm, 0.25);
        assert_eq!(batch.features[1].timestep_norm, 1.0);
    }

    #[test]
    fn stratified_uniform_draw_covers_every_slot() {
        let mut config = ReplayConfig::new(32, 2, ActionSpace::unit_box(1));
        config.draw = DrawScheme::Stratified;
        let mut b = ReplayBuffer::new(config).unwrap();
        for step in 1..=20 {
            b.push(transition(step, 0.0)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = b.sample(20, 0.4, &StateOracle, &mut rng).unwrap();
        let mut seen = batch.indices.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 20);
    }

    #[test]
    fn beta_schedules() {
        let rising = BetaSchedule::default();
        assert_eq!(rising.value(0.0), 0.4);
        assert_eq!(rising.value(1.0), 1.0);
        assert!((rising.value(0.5) - 0.7).abs() < 1e-12);
        let falling = BetaSchedule {
            rule: BetaRule::Decreasing,
            ..BetaSchedule::default()
        };
        assert_eq!(falling.value(0.0), 1.0);
        assert_eq!(falling.value(1.0), 0.4);
    }

    #[test]
    fn feature_widths() {
        let b = filled(4, 2);
        let batch = b.batch_for(vec![0], vec![0.5], vec![1.0], &StateOracle).unwrap();
        let row = &batch.features[0];
        assert_eq!(row.flatten(FeatureSet::Full).len(), FeatureSet::Full.width(2, 1));
        assert_eq!(
            row.flatten(FeatureSet::Restricted),
            vec![row.reward, row.td_error_norm, row.timestep_norm]
        );
    }

    #[test]
    fn snapshot_round_trip() {
        let mut b = filled(6, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = b.sample(3, 0.5, &StateOracle, &mut rng).unwrap();
        b.update_priorities(&batch, &[0.3, 2.0, 5.0]).unwrap();
        let mut blob = Vec::new();
        b.save_snapshot(&mut blob).unwrap();
        assert_eq!(&blob[..4], b"NRSB");
        let loaded = ReplayBuffer::load_snapshot(blob.as_slice()).unwrap();
        assert_eq!(loaded.leaves(), b.leaves());
        assert_eq!(loaded.slots, b.slots);
        assert_eq!(loaded.tree().write_cursor(), b.tree().write_cursor());
        assert_eq!(loaded.latest_timestep(), 9);

        let mut discrete = ReplayBuffer::new(ReplayConfig::new(4, 1, ActionSpace::Discrete(3))).unwrap();
        discrete
            .push(Transition {
                state: vec![0.0],
                action: Action::Discrete(2),
                reward: 1.0,
                next_state: vec![1.0],
                done: true,
                timestep: 1,
            })
            .unwrap();
        let mut blob = Vec::new();
        discrete.save_snapshot(&mut blob).unwrap();
        let loaded = ReplayBuffer::load_snapshot(blob.as_slice()).unwrap();
        assert_eq!(loaded.slots, discrete.slots);
        assert!(ReplayBuffer::load_snapshot(&b"NOPE"[..]).is_err());
    }

    proptest! {
        #[test]
        fn weight_and_probability_contracts(
            scores in proptest::collection::vec(0.01f64..100.0, 2..64),
            beta in 0.05f64..1.0,
            seed in 0u64..1000,
        ) {
            let mut b = buffer(64);
            for step in 1..=scores.len() as u64 {
                b.push(transition(step, 0.0)).unwrap();
            }
            let idx: Vec<usize> = (0..scores.len()).collect();
            b.set_priorities(&idx, &scores).unwrap();
            let mass: f64 = scores.iter().map(|s| s.powf(0.5)).sum();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = b.sample(32, beta, &StateOracle, &mut rng).unwrap();
            for (k, &slot) in batch.indices.iter().enumerate() {
                let expect = scores[slot].powf(0.5) / mass;
                prop_assert!((batch.probabilities[k] - expect).abs() <= 1e-9 * expect.max(1e-12));
                prop_assert!(batch.weights[k] > 0.0 && batch.weights[k] <= 1.0);
                prop_assert!(batch.features[k].td_error_norm.abs() <= 1.0);
                prop_assert!(batch.features[k].target_q_norm.abs() <= 1.0);
                prop_assert!((0.0..=1.0).contains(&batch.features[k].timestep_norm));
            }
            let max_p = batch.probabilities.iter().copied().fold(0.0, f64::max);
            let min_w = batch.weights.iter().copied().fold(f64::MAX, f64::min);
            for (k, &p) in batch.probabilities.iter().enumerate() {
                if p == max_p {
                    prop_assert_eq!(batch.weights[k], min_w);
                }
            }
            let flat = importance_weights(&batch.probabilities, b.len(), 0.0, WeightNorm::Raw);
            prop_assert!(flat.iter().all(|&w| w == 1.0));
        }
    }
}
