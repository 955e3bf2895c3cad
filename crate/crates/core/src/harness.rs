//! Seeded experiments: the training loop, evaluation cadence, CSV logs and
//! cross-seed summaries.
//!
//! One environment step of [`Experiment::step`]:
//!
//! 1. act (uniformly at random during the warm-up steps) and push the
//!    transition with the initial priority;
//! 2. for each gradient step: sample a batch, score it, train the agent on it
//!    with the importance weights, append the indices to the sampler's episode
//!    list and write the scores back as priorities;
//! 3. every `eval_interval` steps: run greedy evaluation episodes and turn the
//!    change in mean return into the next replay reward;
//! 4. at the end of a training episode: hand the replay reward to the sampler
//!    (learned samplers update here) and reset the environment.
//!
//! Every source of randomness has its own ChaCha stream derived from the run
//! seed, so `(config, seed)` fixes every logged number.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{evaluate, Agent, AgentConfig};
use crate::envs::{Env, EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::replay::{
    BetaSchedule, FeatureSet, ReplayBuffer, ReplayConfig, SampledBatch, Transition, ValueOracle,
    WeightNorm,
};
use crate::sampler::{
    build_sampler, compute_replay_reward, EroConfig, NersConfig, Sampler, SamplerKind,
    SamplerSettings, UpdateReport,
};
use crate::sumtree::DrawScheme;

pub const CURVES_FILE: &str = "curves.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub name: SamplerKind,
    /// Priority exponent: the tree stores `score^alpha`.
    pub alpha: f64,
    pub beta: BetaSchedule,
    pub weight_norm: WeightNorm,
    pub draw: DrawScheme,
    /// Use consecutive training-episode returns as the replay reward instead
    /// of evaluation returns.
    pub ners_star: bool,
    pub ners: NersConfig,
    pub ero: EroConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            name: SamplerKind::Ners,
            alpha: 0.5,
            beta: BetaSchedule::default(),
            weight_norm: WeightNorm::MaxNormalized,
            draw: DrawScheme::Iid,
            ners_star: false,
            ners: NersConfig::default(),
            ero: EroConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Name used in summaries; derived from the sampler settings when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    /// Environment steps taken with uniformly random actions before the agent acts.
    pub initial_random_steps: u64,
    pub buffer_capacity: usize,
    /// Gradient steps per environment step; 0 disables learning entirely.
    pub gradient_steps: usize,
    /// Log one row of batch statistics every this many gradient steps.
    pub stats_interval: u64,
    /// Re-derive sampling probabilities from the raw leaves after every
    /// priority update and fail on any mismatch above 1e-9.
    pub audit: bool,
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub sampler: SamplerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            label: None,
            total_steps: 50_000,
            eval_interval: 200,
            eval_episodes: 3,
            seeds: vec![0, 1, 2, 3, 4],
            batch_size: 64,
            initial_random_steps: 500,
            buffer_capacity: 100_000,
            gradient_steps: 1,
            stats_interval: 100,
            audit: false,
            output_dir: PathBuf::from("runs"),
            env: EnvConfig::default(),
            agent: AgentConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.eval_interval == 0 || self.total_steps < self.eval_interval {
            return fail(format!(
                "need total_steps >= eval_interval >= 1, got {} and {}",
                self.total_steps, self.eval_interval
            ));
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        if self.eval_episodes == 0 {
            return fail("eval_episodes must be >= 1".into());
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.stats_interval == 0 {
            return fail("batch_size, buffer_capacity and stats_interval must be >= 1".into());
        }
        let s = &self.sampler;
        if !(s.alpha > 0.0) {
            return fail(format!("sampler.alpha must be > 0, got {}", s.alpha));
        }
        if s.beta.start < 0.0 || s.beta.end < 0.0 {
            return fail("beta bounds must be >= 0".into());
        }
        if s.ners.train_size == 0 || s.ero.update_size == 0 {
            return fail("sampler train sizes must be >= 1".into());
        }
        if !(s.ners.learning_rate > 0.0 && s.ero.learning_rate > 0.0) {
            return fail("sampler learning rates must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.agent.gamma()) {
            return fail(format!("agent gamma must be in [0, 1), got {}", self.agent.gamma()));
        }
        Ok(())
    }

    /// Summary label: the explicit one, else the sampler name plus ablation tags.
    pub fn label(&self) -> String {
        if let Some(label) = &self.label {
            return label.clone();
        }
        let s = &self.sampler;
        let mut label = s.name.as_str().to_string();
        if s.name == SamplerKind::Ners {
            if s.ners_star {
                label.push_str("_star");
            }
            if s.ners.features == FeatureSet::Restricted {
                label.push_str("_restricted");
            }
            if !s.ners.use_global {
                label.push_str("_noglobal");
            }
        }
        label
    }

    /// Same experiment restricted to one seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seeds: vec![seed],
            ..self.clone()
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: u64,
    #[serde(rename = "return")]
    pub mean_return: f64,
    pub replay_reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub step: u64,
    pub td_mean: f64,
    pub td_std: f64,
    pub q_mean: f64,
    pub q_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sampler: String,
    pub final_mean: f64,
    pub final_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub label: String,
    pub seed: u64,
    pub evals: Vec<EvalRow>,
    pub samples: Vec<SampleRow>,
    /// Sampler parameter updates performed.
    pub sampler_updates: usize,
}

impl RunLog {
    pub fn final_return(&self) -> Option<f64> {
        self.evals.last().map(|e| e.mean_return)
    }

    /// Area under the learning curve, as the mean of all evaluation returns
    /// (evaluations are evenly spaced).
    pub fn auc(&self) -> Option<f64> {
        if self.evals.is_empty() {
            return None;
        }
        Some(self.evals.iter().map(|e| e.mean_return).sum::<f64>() / self.evals.len() as f64)
    }

    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_rows(&dir.join(CURVES_FILE), &self.evals, &["step", "return", "replay_reward"])?;
        write_rows(
            &dir.join(SAMPLES_FILE),
            &self.samples,
            &["step", "td_mean", "td_std", "q_mean", "q_std"],
        )
    }

    pub fn read_csv(dir: &Path, label: String, seed: u64) -> Result<Self> {
        Ok(Self {
            label,
            seed,
            evals: read_rows(&dir.join(CURVES_FILE))?,
            samples: read_rows(&dir.join(SAMPLES_FILE))?,
            sampler_updates: 0,
        })
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_error)?;
    // Written by hand so an empty log still carries its schema.
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Mean/stdev of raw `|delta|` and `Q(s, a)` over a batch, from the value
/// estimates the agent produced when the batch was drawn.
pub fn stats_snapshot(step: u64, batch: &SampledBatch) -> Result<SampleRow> {
    if batch.is_empty() {
        return Err(Error::Domain("statistics of an empty batch".into()));
    }
    let abs_td: Vec<f64> = batch.td_errors.iter().map(|d| d.abs()).collect();
    let (td_mean, td_std) = mean_std(&abs_td);
    let (q_mean, q_std) = mean_std(&batch.q_values);
    Ok(SampleRow {
        step,
        td_mean,
        td_std,
        q_mean,
        q_std,
    })
}

// ---------------------------------------------------------------------------

/// What happened to one gradient step's batch. Leaf vectors are only filled
/// when tracing is on.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTrace {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub leaves_before: Vec<f64>,
    pub leaves_after: Vec<f64>,
    /// Length of the sampler's episode index list after recording this batch.
    pub pending_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub episode_return: f64,
    pub replay_reward: f64,
    pub pending_before: usize,
    pub pending_after: usize,
    pub update: Option<UpdateReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: u64,
    pub batches: Vec<BatchTrace>,
    pub eval: Option<EvalRow>,
    pub episode: Option<EpisodeTrace>,
}

/// Independent random streams of one run.
struct Streams {
    env: ChaCha8Rng,
    act: ChaCha8Rng,
    sample: ChaCha8Rng,
    train: ChaCha8Rng,
    eval: ChaCha8Rng,
    sampler: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            env: stream(seed, 1),
            act: stream(seed, 2),
            sample: stream(seed, 3),
            train: stream(seed, 4),
            eval: stream(seed, 5),
            sampler: stream(seed, 6),
        }
    }
}

/// A run in progress, advanced one environment step at a time.
pub struct Experiment {
    config: ExperimentConfig,
    env: Env,
    eval_env: Env,
    agent: Box<dyn Agent + Send>,
    sampler: Box<dyn Sampler + Send>,
    buffer: ReplayBuffer,
    rngs: Streams,
    state: Vec<f64>,
    episode_return: f64,
    step: u64,
    gradient_steps_done: u64,
    prev_eval: Option<f64>,
    prev_train_return: Option<f64>,
    pending_reward: Option<f64>,
    log: RunLog,
    tracing: bool,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut env = config.env.build()?;
        let spec = env.spec();
        let mut init = stream(seed, 0);
        let agent = config.agent.build(&spec, &mut init)?;
        let replay = ReplayConfig {
            capacity: config.buffer_capacity,
            state_dim: spec.observation_dim,
            action_space: spec.action_space.clone(),
            gamma: agent.gamma(),
            alpha: config.sampler.alpha,
            weight_norm: config.sampler.weight_norm,
            draw: config.sampler.draw,
        };
        let buffer = ReplayBuffer::new(replay)?;
        let settings = SamplerSettings {
            ners: config.sampler.ners.clone(),
            ero: config.sampler.ero.clone(),
        };
        let sampler = build_sampler(
            config.sampler.name,
            &settings,
            spec.observation_dim,
            spec.action_space.feature_dim(),
            &mut init,
        )?;
        let mut rngs = Streams::new(seed);
        let state = env.reset(&mut rngs.env);
        Ok(Self {
            eval_env: env.clone(),
            log: RunLog {
                label: config.label(),
                seed,
                ..RunLog::default()
            },
            config,
            env,
            agent,
            sampler,
            buffer,
            rngs,
            state,
            episode_return: 0.0,
            step: 0,
            gradient_steps_done: 0,
            prev_eval: None,
            prev_train_return: None,
            pending_reward: None,
            tracing: false,
        })
    }

    /// Keep full leaf snapshots in every [`BatchTrace`].
    pub fn set_tracing(&mut self, on: bool) {
        self.tracing = on;
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.total_steps
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn sampler(&self) -> &dyn Sampler {
        self.sampler.as_ref()
    }

    pub fn agent(&self) -> &dyn Agent {
        self.agent.as_ref()
    }

    pub fn agent_mut(&mut self) -> &mut dyn Agent {
        self.agent.as_mut()
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn into_log(self) -> RunLog {
        self.log
    }

    pub fn step(&mut self) -> Result<StepTrace> {
        if self.is_finished() {
            return Err(Error::State("the run already took total_steps steps".into()));
        }
        let t = self.step + 1;
        let action = if self.step < self.config.initial_random_steps {
            self.env.spec().action_space.sample(&mut self.rngs.act)
        } else {
            self.agent.act(&self.state, true, &mut self.rngs.act)?
        };
        let out = self.env.step(&action)?;
        self.episode_return += out.reward;
        self.buffer.push(Transition {
            state: std::mem::take(&mut self.state),
            action,
            reward: out.reward,
            next_state: out.next_state.clone(),
            done: out.terminated,
            timestep: t,
        })?;

        let mut batches = Vec::new();
        if self.buffer.len() >= self.config.batch_size {
            for _ in 0..self.config.gradient_steps {
                batches.push(self.gradient_step(t)?);
            }
        }
        self.step = t;

        let eval = if t % self.config.eval_interval == 0 {
            Some(self.evaluate(t)?)
        } else {
            None
        };

        let episode = if out.done() {
            let trace = self.end_episode()?;
            self.state = self.env.reset(&mut self.rngs.env);
            Some(trace)
        } else {
            self.state = out.next_state;
            None
        };
        Ok(StepTrace {
            step: t,
            batches,
            eval,
            episode,
        })
    }

    fn gradient_step(&mut self, t: u64) -> Result<BatchTrace> {
        let progress = self.step as f64 / self.config.total_steps as f64;
        let beta = self.config.sampler.beta.value(progress);
        let oracle: &dyn ValueOracle = &*self.agent;
        let batch = self.sampler.sample(
            &self.buffer,
            self.config.batch_size,
            beta,
            oracle,
            &mut self.rngs.sample,
        )?;
        let scores = self.sampler.score(&batch)?;
        let leaves_before = if self.tracing {
            self.buffer.leaves().to_vec()
        } else {
            Vec::new()
        };
        self.agent.train_step(&batch, &mut self.rngs.train)?;
        self.sampler.record_sampled(&batch.indices);
        self.buffer.update_priorities(&batch, &scores)?;
        if self.config.audit {
            self.audit(&batch.indices, &scores)?;
        }
        self.gradient_steps_done += 1;
        if self.gradient_steps_done % self.config.stats_interval == 0 {
            self.log.samples.push(stats_snapshot(t, &batch)?);
        }
        Ok(BatchTrace {
            leaves_after: if self.tracing {
                self.buffer.leaves().to_vec()
            } else {
                Vec::new()
            },
            leaves_before,
            pending_len: self.sampler.pending().len(),
            indices: batch.indices,
            scores,
        })
    }

    /// Recompute probabilities from the raw leaves and compare with the tree.
    fn audit(&self, indices: &[usize], scores: &[f64]) -> Result<()> {
        let alpha = self.buffer.config().alpha;
        let leaves = self.buffer.leaves();
        for (k, &slot) in indices.iter().enumerate() {
            // With repeated indices the last written score wins.
            if indices[k + 1..].contains(&slot) {
                continue;
            }
            let expected = scores[k].powf(alpha);
            if leaves[slot] != expected {
                return Err(Error::State(format!(
                    "audit: slot {slot} holds {} instead of {expected}",
                    leaves[slot]
                )));
            }
        }
        let brute: f64 = leaves.iter().sum();
        let total = self.buffer.tree().total();
        if (total - brute).abs() > 1e-9 * brute.abs().max(1.0) {
            return Err(Error::State(format!("audit: tree total {total} vs leaf sum {brute}")));
        }
        for slot in 0..leaves.len() {
            let p = self.buffer.probability(slot)?;
            if (p - leaves[slot] / brute).abs() > 1e-9 {
                return Err(Error::State(format!("audit: probability mismatch at slot {slot}")));
            }
        }
        Ok(())
    }

    fn evaluate(&mut self, t: u64) -> Result<EvalRow> {
        let mean_return = evaluate(
            self.agent.as_mut(),
            &mut self.eval_env,
            self.config.eval_episodes,
            &mut self.rngs.eval,
        )?;
        let replay_reward = compute_replay_reward(mean_return, self.prev_eval);
        self.prev_eval = Some(mean_return);
        if !self.config.sampler.ners_star {
            self.pending_reward = Some(replay_reward);
        }
        let row = EvalRow {
            step: t,
            mean_return,
            replay_reward,
        };
        self.log.evals.push(row);
        Ok(row)
    }

    fn end_episode(&mut self) -> Result<EpisodeTrace> {
        let episode_return = std::mem::take(&mut self.episode_return);
        let replay_reward = if self.config.sampler.ners_star {
            let r = compute_replay_reward(episode_return, self.prev_train_return);
            self.prev_train_return = Some(episode_return);
            r
        } else {
            self.pending_reward.take().unwrap_or(0.0)
        };
        let pending_before = self.sampler.pending().len();
        let oracle: &dyn ValueOracle = &*self.agent;
        let update = self.sampler.end_of_episode(
            &self.buffer,
            replay_reward,
            oracle,
            &mut self.rngs.sampler,
        )?;
        if update.is_some() {
            self.log.sampler_updates += 1;
        }
        Ok(EpisodeTrace {
            episode_return,
            replay_reward,
            pending_before,
            pending_after: self.sampler.pending().len(),
            update,
        })
    }
}

/// A run that stopped early, with everything logged up to that point.
#[derive(Debug)]
pub struct RunFailure {
    pub log: RunLog,
    pub error: Error,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "run '{}' seed {} failed after {} evaluations: {}",
            self.log.label,
            self.log.seed,
            self.log.evals.len(),
            self.error
        )
    }
}

impl std::error::Error for RunFailure {}

impl RunFailure {
    pub fn is_divergence(&self) -> bool {
        matches!(self.error, Error::NonFinite(_))
    }
}

pub fn run_experiment(config: &ExperimentConfig, seed: u64) -> std::result::Result<RunLog, RunFailure> {
    let mut exp = Experiment::new(config.clone(), seed).map_err(|error| RunFailure {
        log: RunLog {
            label: config.label(),
            seed,
            ..RunLog::default()
        },
        error,
    })?;
    while !exp.is_finished() {
        if let Err(error) = exp.step() {
            log::error!("{}: seed {seed} stopped at step {}: {error}", config.label(), exp.steps_done());
            return Err(RunFailure {
                log: exp.into_log(),
                error,
            });
        }
    }
    Ok(exp.into_log())
}

/// Write a run's CSVs plus the single-seed config that produced it.
pub fn write_run(dir: &Path, config: &ExperimentConfig, log: &RunLog) -> Result<()> {
    log.write_csv(dir)?;
    let mut resolved = config.with_seed(log.seed);
    resolved.label = Some(log.label.clone());
    fs::write(dir.join(CONFIG_FILE), resolved.to_toml()?)?;
    Ok(())
}

pub fn load_run(dir: &Path) -> Result<(ExperimentConfig, RunLog)> {
    let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let log = RunLog::read_csv(dir, config.label(), config.seeds[0])?;
    Ok((config, log))
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

/// Run every seed of `config` (in parallel) and write each run under
/// `out/seed_<n>` plus a one-row summary in `out`. Partial logs of failed runs
/// are written too; the first failure is returned.
pub fn sweep(config: &ExperimentConfig, out: &Path) -> std::result::Result<Vec<RunLog>, RunFailure> {
    let results: Vec<_> = config
        .seeds
        .par_iter()
        .map(|&seed| run_experiment(config, seed))
        .collect();
    let io_failure = |error: Error| RunFailure {
        log: RunLog::default(),
        error,
    };
    let mut logs = Vec::new();
    let mut first_failure = None;
    for result in results {
        match result {
            Ok(log) => {
                write_run(&seed_dir(out, log.seed), config, &log).map_err(io_failure)?;
                logs.push(log);
            }
            Err(failure) => {
                write_run(&seed_dir(out, failure.log.seed), config, &failure.log).map_err(io_failure)?;
                first_failure.get_or_insert(failure);
            }
        }
    }
    if let Some(failure) = first_failure {
        return Err(failure);
    }
    let row = summarize(&config.label(), &logs).map_err(io_failure)?;
    write_summary(out, &[row]).map_err(io_failure)?;
    Ok(logs)
}

/// Final return and AUC across seeds.
pub fn summarize(label: &str, logs: &[RunLog]) -> Result<SummaryRow> {
    let finals: Vec<f64> = logs.iter().filter_map(RunLog::final_return).collect();
    let aucs: Vec<f64> = logs.iter().filter_map(RunLog::auc).collect();
    if finals.is_empty() || finals.len() != logs.len() {
        return Err(Error::State(format!("'{label}': every run needs at least one evaluation")));
    }
    let (final_mean, final_std) = mean_std(&finals);
    let (auc_mean, auc_std) = mean_std(&aucs);
    Ok(SummaryRow {
        sampler: label.to_string(),
        final_mean,
        final_std,
        auc_mean,
        auc_std,
    })
}

/// Every config must share the environment and the step budget of the first.
pub fn check_comparable<'a>(configs: impl IntoIterator<Item = &'a ExperimentConfig>) -> Result<()> {
    let mut configs = configs.into_iter();
    let Some(first) = configs.next() else {
        return Err(Error::Config("nothing to compare".into()));
    };
    for config in configs {
        if config.env != first.env {
            return Err(Error::Config(format!(
                "'{}' uses a different environment than '{}'",
                config.label(),
                first.label()
            )));
        }
        if config.total_steps != first.total_steps {
            return Err(Error::Config(format!(
                "'{}' runs {} steps, '{}' runs {}",
                config.label(),
                config.total_steps,
                first.label(),
                first.total_steps
            )));
        }
    }
    Ok(())
}

/// One summary row per group of runs.
pub fn compare(groups: &[(ExperimentConfig, Vec<RunLog>)]) -> Result<Vec<SummaryRow>> {
    check_comparable(groups.iter().map(|(c, _)| c))?;
    groups
        .iter()
        .map(|(config, logs)| summarize(&config.label(), logs))
        .collect()
}

/// Run each config on `seeds` and compare. Configs are checked before any run starts.
pub fn compare_configs(
    configs: &[ExperimentConfig],
    seeds: &[u64],
) -> std::result::Result<(Vec<SummaryRow>, Vec<Vec<RunLog>>), RunFailure> {
    let as_failure = |error: Error| RunFailure {
        log: RunLog::default(),
        error,
    };
    check_comparable(configs).map_err(as_failure)?;
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(c, seed)| run_experiment(&configs[c], seed))
        .collect();
    let mut groups: Vec<(ExperimentConfig, Vec<RunLog>)> =
        configs.iter().map(|c| (c.clone(), Vec::new())).collect();
    for ((c, _), result) in jobs.into_iter().zip(results) {
        groups[c].1.push(result?);
    }
    let rows = compare(&groups).map_err(as_failure)?;
    Ok((rows, groups.into_iter().map(|(_, logs)| logs).collect()))
}

/// Load runs from directories holding either one run or `seed_*` run folders,
/// grouped by label in first-seen order.
pub fn collect_runs(dirs: &[PathBuf]) -> Result<Vec<(ExperimentConfig, Vec<RunLog>)>> {
    let mut run_dirs = Vec::new();
    for dir in dirs {
        if dir.join(CURVES_FILE).is_file() {
            run_dirs.push(dir.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.join(CURVES_FILE).is_file())
            .collect();
        if children.is_empty() {
            return Err(Error::Config(format!("no runs found under {}", dir.display())));
        }
        children.sort();
        run_dirs.extend(children);
    }
    let mut groups: Vec<(ExperimentConfig, Vec<RunLog>)> = Vec::new();
    for dir in run_dirs {
        let (config, log) = load_run(&dir)?;
        match groups.iter_mut().find(|(c, _)| c.label() == log.label) {
            Some((_, logs)) => logs.push(log),
            None => groups.push((config, vec![log])),
        }
    }
    Ok(groups)
}

pub fn write_summary(dir: &Path, rows: &[SummaryRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_rows(
        &dir.join(SUMMARY_FILE),
        rows,
        &["sampler", "final_mean", "final_std", "auc_mean", "auc_std"],
    )?;
    fs::write(dir.join("summary.txt"), format_table(rows))?;
    Ok(())
}

/// Aligned plain-text table, `mean ± std` per column.
pub fn format_table(rows: &[SummaryRow]) -> String {
    let cells: Vec<[String; 3]> = rows
        .iter()
        .map(|r| {
            [
                r.sampler.clone(),
                format!("{:.3} ± {:.3}", r.final_mean, r.final_std),
                format!("{:.3} ± {:.3}", r.auc_mean, r.auc_std),
            ]
        })
        .collect();
    let header = ["sampler", "final return", "auc"];
    let width = |k: usize| {
        cells
            .iter()
            .map(|c| c[k].chars().count())
            .chain([header[k].len()])
            .max()
            .unwrap_or(0)
    };
    let widths = [width(0), width(1), width(2)];
    let line = |c: [&str; 3]| {
        format!(
            "{:<w0$}  {:>w1$}  {:>w2$}\n",
            c[0],
            c[1],
            c[2],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2]
        )
    };
    let mut out = line(header);
    out.push_str(&line(["-".repeat(widths[0]).as_str(), &"-".repeat(widths[1]), &"-".repeat(widths[2])]));
    for c in &cells {
        out.push_str(&line([&c[0], &c[1], &c[2]]));
    }
    out
}
