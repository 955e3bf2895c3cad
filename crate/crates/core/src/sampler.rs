//! Replay samplers: RANDOM, PER, ERO and the learned set-based sampler (NERS).
//!
//! Every sampler draws a batch, produces a strictly positive score per batch
//! row (written back as the new priorities), remembers which slots it sampled
//! during the current episode and may update itself when an episode ends.
//!
//! NERS scores a batch with three networks: a local net applied per row, a
//! global net whose outputs are mean-pooled over the batch, and a score net
//! applied per row to `local_i ++ pooled`. The pooled vector is summed in a
//! value-sorted order, so it is bit-identical under any row permutation and
//! the scores are exactly permutation-equivariant.

use rand::seq::index;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::replay::{FeatureRow, FeatureSet, ReplayBuffer, SampledBatch, ValueOracle};
use crate::tinynn::{
    clip_global_norm, sigmoid, Activation, AdamConfig, AdamState, ForwardCache, Gradients,
    Matrix, Mlp,
};

/// Added to learned scores so priorities stay strictly positive even when the
/// softplus head underflows.
pub const SCORE_FLOOR: f64 = 1e-6;

/// PER's additive priority floor.
pub const PER_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Random,
    Per,
    Ero,
    Ners,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Random => "random",
            SamplerKind::Per => "per",
            SamplerKind::Ero => "ero",
            SamplerKind::Ners => "ners",
        }
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(SamplerKind::Random),
            "per" => Ok(SamplerKind::Per),
            "ero" => Ok(SamplerKind::Ero),
            "ners" => Ok(SamplerKind::Ners),
            other => Err(Error::Config(format!("unknown sampler '{other}'"))),
        }
    }
}

/// Summary of one sampler parameter update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub replay_reward: f64,
    pub train_size: usize,
    pub grad_norm: f64,
}

/// Replay reward: difference of mean returns between consecutive evaluations.
/// The first evaluation has no predecessor and yields 0.
pub fn compute_replay_reward(curr_eval_return: f64, prev_eval_return: Option<f64>) -> f64 {
    match prev_eval_return {
        Some(prev) => curr_eval_return - prev,
        None => 0.0,
    }
}

pub trait Sampler {
    fn kind(&self) -> SamplerKind;

    /// Draw a batch of `batch_size` transitions.
    fn sample(
        &mut self,
        buffer: &ReplayBuffer,
        batch_size: usize,
        beta: f64,
        oracle: &dyn ValueOracle,
        rng: &mut dyn RngCore,
    ) -> Result<SampledBatch> {
        buffer.sample(batch_size, beta, oracle, rng)
    }

    /// New priority score per batch row; all strictly positive.
    fn score(&mut self, batch: &SampledBatch) -> Result<Vec<f64>>;

    /// Append sampled slots to the current episode's index list.
    fn record_sampled(&mut self, indices: &[usize]);

    /// Slots sampled since the last episode-end update (with multiplicity).
    fn pending(&self) -> &[usize];

    /// Called when a training episode ends; learned samplers update here.
    fn end_of_episode(
        &mut self,
        buffer: &ReplayBuffer,
        replay_reward: f64,
        oracle: &dyn ValueOracle,
        rng: &mut dyn RngCore,
    ) -> Result<Option<UpdateReport>>;
}

// ---------------------------------------------------------------------------

/// Uniform sampling: every score is 1.0, so every occupied slot keeps equal mass.
#[derive(Debug, Clone, Default)]
pub struct RandomSampler {
    pending: Vec<usize>,
}

pub fn random_score(features: &[FeatureRow]) -> Vec<f64> {
    vec![1.0; features.len()]
}

impl Sampler for RandomSampler {
    fn kind(&self) -> SamplerKind {
        SamplerKind::Random
    }

    fn score(&mut self, batch: &SampledBatch) -> Result<Vec<f64>> {
        Ok(random_score(&batch.features))
    }

    fn record_sampled(&mut self, indices: &[usize]) {
        self.pending.extend_from_slice(indices);
    }

    fn pending(&self) -> &[usize] {
        &self.pending
    }

    fn end_of_episode(
        &mut self,
        _buffer: &ReplayBuffer,
        _replay_reward: f64,
        _oracle: &dyn ValueOracle,
        _rng: &mut dyn RngCore,
    ) -> Result<Option<UpdateReport>> {
        self.pending.clear();
        Ok(None)
    }
}

/// Proportional prioritization by `|delta| + eps`.
#[derive(Debug, Clone, Default)]
pub struct PerSampler {
    pending: Vec<usize>,
}

pub fn per_score(td_errors: &[f64]) -> Vec<f64> {
    td_errors.iter().map(|d| d.abs() + PER_EPSILON).collect()
}

impl Sampler for PerSampler {
    fn kind(&self) -> SamplerKind {
        SamplerKind::Per
    }

    fn score(&mut self, batch: &SampledBatch) -> Result<Vec<f64>> {
        Ok(per_score(&batch.td_errors))
    }

    fn record_sampled(&mut self, indices: &[usize]) {
        self.pending.extend_from_slice(indices);
    }

    fn pending(&self) -> &[usize] {
        &self.pending
    }

    fn end_of_episode(
        &mut self,
        _buffer: &ReplayBuffer,
        _replay_reward: f64,
        _oracle: &dyn ValueOracle,
        _rng: &mut dyn RngCore,
    ) -> Result<Option<UpdateReport>> {
        self.pending.clear();
        Ok(None)
    }
}

// ---------------------------------------------------------------------------

/// Over which set the sampling probabilities inside the REINFORCE gradient
/// are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `p_i = s_i^a / sum_{k in I_train} s_k^a`.
    #[default]
    TrainSubset,
    /// Adds the stored mass of every slot outside `I_train` to the denominator.
    BufferWide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NersConfig {
    /// Widths of the local net after the input layer; the last is `d_l`.
    pub local_widths: Vec<usize>,
    /// Widths of the global net after the input layer; the last is `d_g`.
    pub global_widths: Vec<usize>,
    /// Hidden widths of the score net (a single output unit follows).
    pub score_widths: Vec<usize>,
    pub learning_rate: f64,
    /// Size `n` of the subset drawn from the episode's sampled indices.
    pub train_size: usize,
    pub features: FeatureSet,
    /// Feed the pooled global context to the score net.
    pub use_global: bool,
    pub normalization: Normalization,
    pub max_grad_norm: f64,
}

impl Default for NersConfig {
    fn default() -> Self {
        Self {
            local_widths: vec![32, 64, 32, 16],
            global_widths: vec![32, 64, 32, 16],
            score_widths: vec![32, 16, 8],
            learning_rate: 1e-4,
            train_size: 128,
            features: FeatureSet::Full,
            use_global: true,
            normalization: Normalization::TrainSubset,
            max_grad_norm: 10.0,
        }
    }
}

impl NersConfig {
    /// Widths as listed in the original large-scale setup.
    pub fn full_width() -> Self {
        Self {
            local_widths: vec![256, 512, 256, 128],
            global_widths: vec![256, 512, 256, 128],
            score_widths: vec![256, 128, 64],
            ..Self::default()
        }
    }
}

/// Local, global and score networks plus their optimizers.
#[derive(Debug, Clone)]
pub struct NersNets {
    pub local: Mlp,
    pub global: Option<Mlp>,
    pub score: Mlp,
    adam_local: AdamState,
    adam_global: Option<AdamState>,
    adam_score: AdamState,
    features: FeatureSet,
}

/// Activations from one scoring pass.
#[derive(Debug, Clone)]
pub struct NersCache {
    local: ForwardCache,
    global: Option<ForwardCache>,
    score: ForwardCache,
    rows: usize,
    local_dim: usize,
}

#[derive(Debug, Clone)]
pub struct NersGradients {
    pub local: Gradients,
    pub global: Option<Gradients>,
    pub score: Gradients,
}

impl NersGradients {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.local.flat();
        if let Some(g) = &self.global {
            out.extend(g.flat());
        }
        out.extend(self.score.flat());
        out
    }

    fn scale(&mut self, factor: f64) {
        self.local.scale(factor);
        if let Some(g) = &mut self.global {
            g.scale(factor);
        }
        self.score.scale(factor);
    }
}

/// Column means summed in sorted order, so the result does not depend on row order.
fn mean_pool(m: &Matrix) -> Vec<f64> {
    let n = m.rows() as f64;
    let mut column = Vec::with_capacity(m.rows());
    (0..m.cols())
        .map(|c| {
            column.clear();
            column.extend((0..m.rows()).map(|r| m.get(r, c)));
            column.sort_unstable_by(f64::total_cmp);
            column.iter().sum::<f64>() / n
        })
        .collect()
}

impl NersNets {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, config: &NersConfig, rng: &mut R) -> Result<Self> {
        if config.local_widths.is_empty() || config.global_widths.is_empty() {
            return Err(Error::Config("local and global nets need at least one layer".into()));
        }
        let build = |widths: &[usize], rng: &mut R| -> Result<Mlp> {
            let mut dims = vec![input_dim];
            dims.extend_from_slice(widths);
            Mlp::new(&dims, Activation::Relu, Activation::Identity, rng)
        };
        let local = build(&config.local_widths, rng)?;
        let global = if config.use_global {
            Some(build(&config.global_widths, rng)?)
        } else {
            None
        };
        let d_l = local.output_dim();
        let d_g = global.as_ref().map_or(0, Mlp::output_dim);
        let mut score_dims = vec![d_l + d_g];
        score_dims.extend_from_slice(&config.score_widths);
        score_dims.push(1);
        let score = Mlp::new(&score_dims, Activation::Relu, Activation::Softplus, rng)?;
        let adam = AdamConfig::with_lr(config.learning_rate);
        Ok(Self {
            adam_local: AdamState::new(&local, adam),
            adam_global: global.as_ref().map(|g| AdamState::new(g, adam)),
            adam_score: AdamState::new(&score, adam),
            local,
            global,
            score,
            features: config.features,
        })
    }

    pub fn feature_set(&self) -> FeatureSet {
        self.features
    }

    pub fn input_dim(&self) -> usize {
        self.local.input_dim()
    }

    /// Stack flattened rows into the network input matrix.
    pub fn input_matrix(&self, features: &[FeatureRow]) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = features.iter().map(|f| f.flatten(self.features)).collect();
        let m = Matrix::from_rows(&rows)?;
        if m.cols() != self.input_dim() {
            return Err(Error::Domain(format!(
                "feature rows have width {}, sampler expects {}",
                m.cols(),
                self.input_dim()
            )));
        }
        Ok(m)
    }

    /// Scores for every row of `input`, plus the activations for backprop.
    pub fn forward(&self, input: &Matrix) -> Result<(Vec<f64>, NersCache)> {
        if input.rows() == 0 {
            return Err(Error::Domain("cannot score an empty set".into()));
        }
        let (local_out, local_cache) = self.local.forward(input)?;
        let (score_in, global_cache) = match &self.global {
            Some(global) => {
                let (global_out, cache) = global.forward(input)?;
                let pooled = mean_pool(&global_out);
                let mut broadcast = Matrix::zeros(input.rows(), pooled.len());
                for r in 0..input.rows() {
                    broadcast.row_mut(r).copy_from_slice(&pooled);
                }
                (local_out.hcat(&broadcast)?, Some(cache))
            }
            None => (local_out, None),
        };
        let (raw, score_cache) = self.score.forward(&score_in)?;
        let scores = raw.data().iter().map(|s| s + SCORE_FLOOR).collect();
        Ok((
            scores,
            NersCache {
                local: local_cache,
                global: global_cache,
                score: score_cache,
                rows: input.rows(),
                local_dim: self.local.output_dim(),
            },
        ))
    }

    /// Scores without keeping activations; bit-identical to [`Self::forward`].
    pub fn score_matrix(&self, input: &Matrix) -> Result<Vec<f64>> {
        if input.rows() == 0 {
            return Err(Error::Domain("cannot score an empty set".into()));
        }
        let local_out = self.local.predict(input)?;
        let score_in = match &self.global {
            Some(global) => {
                let pooled = mean_pool(&global.predict(input)?);
                let mut broadcast = Matrix::zeros(input.rows(), pooled.len());
                for r in 0..input.rows() {
                    broadcast.row_mut(r).copy_from_slice(&pooled);
                }
                local_out.hcat(&broadcast)?
            }
            None => local_out,
        };
        Ok(self
            .score
            .predict(&score_in)?
            .data()
            .iter()
            .map(|s| s + SCORE_FLOOR)
            .collect())
    }

    pub fn score_rows(&self, features: &[FeatureRow]) -> Result<Vec<f64>> {
        self.score_matrix(&self.input_matrix(features)?)
    }

    /// Parameter gradients of `sum_i score_gradient[i] * score_i`.
    pub fn backward(&self, cache: &NersCache, score_gradient: &[f64]) -> Result<NersGradients> {
        if score_gradient.len() != cache.rows {
            return Err(Error::Shape {
                expected: format!("{} score gradients", cache.rows),
                got: format!("{}", score_gradient.len()),
            });
        }
        let upstream = Matrix::from_vec(cache.rows, 1, score_gradient.to_vec())?;
        let (score_grads, d_in) = self.score.backward(&cache.score, &upstream)?;
        let (d_local, d_pooled_rows) = d_in.split_cols(cache.local_dim);
        let (local_grads, _) = self.local.backward(&cache.local, &d_local)?;
        let global_grads = match (&self.global, &cache.global) {
            (Some(global), Some(gcache)) => {
                // The pooled vector is a mean, so each row receives 1/n of the
                // summed gradient.
                let n = cache.rows as f64;
                let mut d_pooled = vec![0.0; d_pooled_rows.cols()];
                for r in 0..d_pooled_rows.rows() {
                    for (acc, v) in d_pooled.iter_mut().zip(d_pooled_rows.row(r)) {
                        *acc += v;
                    }
                }
                let mut d_global = Matrix::zeros(cache.rows, d_pooled.len());
                for r in 0..cache.rows {
                    for (dst, v) in d_global.row_mut(r).iter_mut().zip(&d_pooled) {
                        *dst = v / n;
                    }
                }
                Some(global.backward(gcache, &d_global)?.0)
            }
            _ => None,
        };
        Ok(NersGradients {
            local: local_grads,
            global: global_grads,
            score: score_grads,
        })
    }

    /// REINFORCE objective `r * sum_i log p_i` over the rows of `input`,
    /// with `p_i = s_i^alpha / (sum_k s_k^alpha + rest_mass)`.
    pub fn reinforce_objective(
        &self,
        input: &Matrix,
        replay_reward: f64,
        alpha: f64,
        rest_mass: f64,
    ) -> Result<f64> {
        let (scores, _) = self.forward(input)?;
        Ok(replay_reward * sum_log_probs(&scores, alpha, rest_mass))
    }

    /// Objective value and its parameter gradient (ascent direction).
    pub fn reinforce_gradients(
        &self,
        input: &Matrix,
        replay_reward: f64,
        alpha: f64,
        rest_mass: f64,
    ) -> Result<(f64, NersGradients)> {
        let (scores, cache) = self.forward(input)?;
        let objective = replay_reward * sum_log_probs(&scores, alpha, rest_mass);
        let n = scores.len() as f64;
        let z: f64 = scores.iter().map(|s| s.powf(alpha)).sum::<f64>() + rest_mass;
        // d/ds_j [sum_i (alpha ln s_i) - n ln z] = alpha / s_j - n alpha s_j^(alpha-1) / z
        let d_scores: Vec<f64> = scores
            .iter()
            .map(|&s| replay_reward * (alpha / s - n * alpha * s.powf(alpha - 1.0) / z))
            .collect();
        Ok((objective, self.backward(&cache, &d_scores)?))
    }

    /// One Adam ascent step along `grads` after clipping the joint norm.
    /// Returns the pre-clip norm.
    pub fn ascend(&mut self, mut grads: NersGradients, max_grad_norm: f64) -> Result<f64> {
        grads.scale(-1.0);
        let norm = {
            let mut group: Vec<&mut Gradients> = vec![&mut grads.local, &mut grads.score];
            if let Some(g) = grads.global.as_mut() {
                group.push(g);
            }
            clip_global_norm(&mut group, max_grad_norm)
        };
        if !norm.is_finite() {
            return Err(Error::NonFinite("sampler gradient".into()));
        }
        self.adam_local.step(&mut self.local, &grads.local)?;
        if let (Some(net), Some(adam), Some(g)) =
            (self.global.as_mut(), self.adam_global.as_mut(), grads.global.as_ref())
        {
            adam.step(net, g)?;
        }
        self.adam_score.step(&mut self.score, &grads.score)?;
        Ok(norm)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = self.local.params_flat();
        if let Some(g) = &self.global {
            out.extend(g.params_flat());
        }
        out.extend(self.score.params_flat());
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        let nl = self.local.param_count();
        let ng = self.global.as_ref().map_or(0, Mlp::param_count);
        if values.len() != nl + ng + self.score.param_count() {
            return Err(Error::Shape {
                expected: format!("{} parameters", nl + ng + self.score.param_count()),
                got: format!("{}", values.len()),
            });
        }
        self.local.set_params_flat(&values[..nl])?;
        if let Some(g) = &mut self.global {
            g.set_params_flat(&values[nl..nl + ng])?;
        }
        self.score.set_params_flat(&values[nl + ng..])
    }
}

fn sum_log_probs(scores: &[f64], alpha: f64, rest_mass: f64) -> f64 {
    let z: f64 = scores.iter().map(|s| s.powf(alpha)).sum::<f64>() + rest_mass;
    scores.iter().map(|s| alpha * s.ln() - z.ln()).sum()
}

/// The learned sampler.
#[derive(Debug, Clone)]
pub struct NersSampler {
    pub nets: NersNets,
    config: NersConfig,
    pending: Vec<usize>,
}

impl NersSampler {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        config: NersConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let input_dim = config.features.width(state_dim, action_dim);
        Ok(Self {
            nets: NersNets::new(input_dim, &config, rng)?,
            config,
            pending: Vec::new(),
        })
    }

    pub fn config(&self) -> &NersConfig {
        &self.config
    }

    pub fn score_features(&self, features: &[FeatureRow]) -> Result<Vec<f64>> {
        self.nets.score_rows(features)
    }

    /// Distinct still-occupied slots from this episode's sampled indices, in
    /// ascending order, and a uniformly drawn subset of at most `train_size`.
    pub fn draw_train_subset(&self, buffer_len: usize, rng: &mut dyn RngCore) -> Vec<usize> {
        let mut distinct: Vec<usize> = self
            .pending
            .iter()
            .copied()
            .filter(|&slot| slot < buffer_len)
            .collect();
        distinct.sort_unstable();
        distinct.dedup();
        let take = self.config.train_size.min(distinct.len());
        index::sample(rng, distinct.len(), take)
            .into_iter()
            .map(|k| distinct[k])
            .collect()
    }

    /// One REINFORCE step on a uniformly chosen subset of this episode's
    /// sampled slots, then clear the episode's index list.
    pub fn update(
        &mut self,
        buffer: &ReplayBuffer,
        replay_reward: f64,
        oracle: &dyn ValueOracle,
        rng: &mut dyn RngCore,
    ) -> Result<Option<UpdateReport>> {
        if self.pending.is_empty() {
            log::warn!("sampler update skipped: no transitions were sampled this episode");
            return Ok(None);
        }
        let train = self.draw_train_subset(buffer.len(), rng);
        self.pending.clear();
        if train.is_empty() || replay_reward == 0.0 {
            return Ok(None);
        }
        let eval = buffer.evaluate(&train, oracle)?;
        let x = self.nets.input_matrix(&eval.features)?;
        let alpha = buffer.config().alpha;
        let rest_mass = match self.config.normalization {
            Normalization::TrainSubset => 0.0,
            Normalization::BufferWide => {
                let leaves = buffer.leaves();
                let inside: f64 = train.iter().map(|&i| leaves[i]).sum();
                (buffer.tree().total() - inside).max(0.0)
            }
        };
        let (_, grads) = self.nets.reinforce_gradients(&x, replay_reward, alpha, rest_mass)?;
        let grad_norm = self.nets.ascend(grads, self.config.max_grad_norm)?;
        Ok(Some(UpdateReport {
            replay_reward,
            train_size: train.len(),
            grad_norm,
        }))
    }
}

impl Sampler for NersSampler {
    fn kind(&self) -> SamplerKind {
        SamplerKind::Ners
    }

    fn score(&mut self, batch: &SampledBatch) -> Result<Vec<f64>> {
        self.score_features(&batch.features)
    }

    fn record_sampled(&mut self, indices: &[usize]) {
        self.pending.extend_from_slice(indices);
    }

    fn pending(&self) -> &[usize] {
        &self.pending
    }

    fn end_of_episode(
        &mut self,
        buffer: &ReplayBuffer,
        replay_reward: f64,
        oracle: &dyn ValueOracle,
        rng: &mut dyn RngCore,
    ) -> Result<Option<UpdateReport>> {
        self.update(buffer, replay_reward, oracle, rng)
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EroConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    /// Transitions drawn uniformly from the buffer for each update.
    pub update_size: usize,
}

impl Default for EroConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            learning_rate: 1e-4,
            update_size: 128,
        }
    }
}

/// ERO input: `(td_error_norm, reward, timestep_norm)`.
pub fn ero_features(td_error_norm: f64, reward: f64, timestep_norm: f64) -> [f64; 3] {
    [td_error_norm, reward, timestep_norm]
}

/// Two-stage sampler: Bernoulli thinning of the whole buffer by per-transition
/// keep probabilities, then a uniform draw from the survivors.
///
/// Keep probabilities are cached per slot. A slot is re-scored when it is
/// sampled, when it has been overwritten, and for every slot after each
/// network update.
#[derive(Debug, Clone)]
pub struct EroSampler {
    pub net: Mlp,
    adam: AdamState,
    config: EroConfig,
    keep_prob: Vec<f64>,
    /// Timestep of the transition the cached probability belongs to.
    scored_timestep: Vec<u64>,
    last_keep: Vec<Option<bool>>,
    pending: Vec<usize>,
}

impl EroSampler {
    pub fn new<R: Rng + ?Sized>(config: EroConfig, rng: &mut R) -> Result<Self> {
        let mut dims = vec![3];
        dims.extend_from_slice(&config.hidden);
        dims.push(1);
        // Output is the keep logit; the sigmoid is applied outside the net.
        let net = Mlp::new(&dims, Activation::Relu, Activation::Identity, rng)?;
        Ok(Self {
            adam: AdamState::new(&net, AdamConfig::with_lr(config.learning_rate)),
            net,
            config,
            keep_prob: Vec::new(),
            scored_timestep: Vec::new(),
            last_keep: Vec::new(),
            pending: Vec::new(),
        })
    }

    pub fn config(&self) -> &EroConfig {
        &self.config
    }

    /// Keep probabilities for rows of `[td_norm, reward, timestep_norm]`.
    pub fn keep_probabilities(&self, inputs: &Matrix) -> Result<Vec<f64>> {
        Ok(self
            .net
            .predict(inputs)?
            .data()
            .iter()
            .map(|&z| sigmoid(z))
            .collect())
    }

    fn cached_inputs(buffer: &ReplayBuffer, slots: &[usize]) -> Result<Matrix> {
        let rows = slots
            .iter()
            .map(|&slot| {
                Ok(ero_features(
                    buffer.cached_td_norm(slot)?,
                    buffer.transition(slot)?.reward,
                    buffer.timestep_norm(slot)?,
                )
                .to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }

    /// Re-score every slot whose cached probability is missing or outdated.
    fn refresh(&mut self, buffer: &ReplayBuffer) -> Result<()> {
        let len = buffer.len();
        self.keep_prob.resize(len, f64::NAN);
        self.scored_timestep.resize(len, u64::MAX);
        self.last_keep.resize(len, None);
        let stale: Vec<usize> = (0..len)
            .filter(|&slot| {
                self.keep_prob[slot].is_nan()
                    || buffer.transition(slot).map(|t| t.timestep).ok() != Some(self.scored_timestep[slot])
            })
            .collect();
        if stale.is_empty() {
            return Ok(());
        }
        let probs = self.keep_probabilities(&Self::cached_inputs(buffer, &stale)?)?;
        for (&slot, p) in stale.iter().zip(probs) {
            self.keep_prob[slot] = p;
            self.scored_timestep[slot] = buffer.transition(slot)?.timestep;
            self.last_keep[slot] = None;
        }
        Ok(())
    }

    /// Stage-1 Bernoulli thinning over every occupied slot. O(|buffer|).
    pub fn thin(&mut self, buffer: &ReplayBuffer, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
        self.refresh(buffer)?;
        let mut survivors = Vec::new();
        for slot in 0..buffer.len() {
            let keep = rng.random::<f64>() < self.keep_prob[slot];
            self.last_keep[slot] = Some(keep);
            if keep {
                survivors.push(slot);
            }
        }
        Ok(survivors)
    }

    /// Objective `r * sum_i log Bernoulli(keep_i | sigmoid(z_i))`.
    pub fn reinforce_objective(&self, inputs: &Matrix, keeps: &[bool], replay_reward: f64) -> Result<f64> {
        let logits = self.net.predict(inputs)?;
        Ok(replay_reward
            * logits
                .data()
                .iter()
                .zip(keeps)
                .map(|(&z, &k)| {
                    // log sigmoid(z) = -softplus(-z); log(1 - sigmoid(z)) = -softplus(z)
                    if k {
                        -crate::tinynn::softplus(-z)
                    } else {
                        -crate::tinynn::softplus(z)
                    }
                })
                .sum::<f64>())
    }

    pub fn reinforce_gradients(
        &self,
        inputs: &Matrix,
        keeps: &[bool],
        replay_reward: f64,
    ) -> Result<(f64, Gradients)> {
        if keeps.len() != inputs.rows() {
            return Err(Error::Shape {
                expected: format!("{} keep decisions", inputs.rows()),
                got: format!("{}", keeps.len()),
            });
        }
        let (logits, cache) = self.net.forward(inputs)?;
        let objective = self.reinforce_objective(inputs, keeps, replay_reward)?;
        let d_logits: Vec<f64> = logits
            .data()
            .iter()
            .zip(keeps)
            .map(|(&z, &k)| replay_reward * ((k as u8 as f64) - sigmoid(z)))
            .collect();
        let upstream = Matrix::from_vec(inputs.rows(), 1, d_logits)?;
        Ok((objective, self.net.backward(&cache, &upstream)?.0))
    }

    /// Ascend the objective on an update batch drawn uniformly from the buffer.
    pub fn update(
        &mut self,
        buffer: &ReplayBuffer,
        replay_reward: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Option<UpdateReport>> {
        if buffer.is_empty() || replay_reward == 0.0 {
            return Ok(None);
        }
        self.refresh(buffer)?;
        let take = self.config.update_size.min(buffer.len());
        let mut slots: Vec<usize> = index::sample(rng, buffer.len(), take).into_vec();
        slots.sort_unstable();
        let keeps: Vec<bool> = slots
            .iter()
            .map(|&slot| match self.last_keep[slot] {
                Some(k) => k,
                None => rng.random::<f64>() < self.keep_prob[slot],
            })
            .collect();
        let inputs = Self::cached_inputs(buffer, &slots)?;
        let (_, mut grads) = self.reinforce_gradients(&inputs, &keeps, replay_reward)?;
        let grad_norm = grads.norm_squared().sqrt();
        grads.scale(-1.0);
        self.adam.step(&mut self.net, &grads)?;
        // Every cached probability is now out of date.
        self.keep_prob.iter_mut().for_each(|p| *p = f64::NAN);
        Ok(Some(UpdateReport {
            replay_reward,
            train_size: slots.len(),
            grad_norm,
        }))
    }
}

impl Sampler for EroSampler {
    fn kind(&self) -> SamplerKind {
        SamplerKind::Ero
    }

    fn sample(
        &mut self,
        buffer: &ReplayBuffer,
        batch_size: usize,
        _beta: f64,
        oracle: &dyn ValueOracle,
        rng: &mut dyn RngCore,
    ) -> Result<SampledBatch> {
        if buffer.is_empty() {
            return Err(Error::State("cannot sample from an empty replay buffer".into()));
        }
        if batch_size == 0 {
            return Err(Error::Domain("batch size must be at least 1".into()));
        }
        let survivors = self.thin(buffer, rng)?;
        let indices: Vec<usize> = if survivors.len() >= batch_size {
            index::sample(rng, survivors.len(), batch_size)
                .into_iter()
                .map(|k| survivors[k])
                .collect()
        } else if buffer.len() >= batch_size {
            index::sample(rng, buffer.len(), batch_size).into_vec()
        } else {
            (0..batch_size).map(|_| rng.random_range(0..buffer.len())).collect()
        };
        let uniform = 1.0 / buffer.len() as f64;
        let m = indices.len();
        buffer.batch_for(indices, vec![uniform; m], vec![1.0; m], oracle)
    }

    /// Keep probabilities of the batch rows under the post-sample TD-errors;
    /// these also refresh the per-slot cache.
    fn score(&mut self, batch: &SampledBatch) -> Result<Vec<f64>> {
        let rows: Vec<Vec<f64>> = batch
            .features
            .iter()
            .zip(&batch.td_errors)
            .map(|(f, d)| ero_features(d.tanh(), f.reward, f.timestep_norm).to_vec())
            .collect();
        let probs = self.keep_probabilities(&Matrix::from_rows(&rows)?)?;
        for ((&slot, &p), t) in batch.indices.iter().zip(&probs).zip(&batch.transitions) {
            if slot < self.keep_prob.len() {
                self.keep_prob[slot] = p;
                self.scored_timestep[slot] = t.timestep;
            }
        }
        Ok(probs.into_iter().map(|p| p.max(SCORE_FLOOR)).collect())
    }

    fn record_sampled(&mut self, indices: &[usize]) {
        self.pending.extend_from_slice(indices);
    }

    fn pending(&self) -> &[usize] {
        &self.pending
    }

    fn end_of_episode(
        &mut self,
        buffer: &ReplayBuffer,
        replay_reward: f64,
        _oracle: &dyn ValueOracle,
        rng: &mut dyn RngCore,
    ) -> Result<Option<UpdateReport>> {
        self.pending.clear();
        self.update(buffer, replay_reward, rng)
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SamplerSettings {
    pub ners: NersConfig,
    pub ero: EroConfig,
}

pub fn build_sampler<R: Rng + ?Sized>(
    kind: SamplerKind,
    settings: &SamplerSettings,
    state_dim: usize,
    action_dim: usize,
    rng: &mut R,
) -> Result<Box<dyn Sampler + Send>> {
    Ok(match kind {
        SamplerKind::Random => Box::new(RandomSampler::default()),
        SamplerKind::Per => Box::new(PerSampler::default()),
        SamplerKind::Ero => Box::new(EroSampler::new(settings.ero.clone(), rng)?),
        SamplerKind::Ners => Box::new(NersSampler::new(
            state_dim,
            action_dim,
            settings.ners.clone(),
            rng,
        )?),
    })
}
