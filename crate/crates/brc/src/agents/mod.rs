//! The BRC agents: a SAC-style continuous-control agent (two-critic target
//! averaging, categorical critics, auto-tuned temperature, no clipped double
//! Q-learning) and an epsilon-greedy discrete agent, sharing one multi-task
//! training loop at fixed updates-per-data.

mod train;
mod updates;

pub use train::{evaluate, train, EvalOutcome, RunRuntime, TrainParams};
pub use updates::{CriticUpdateReport, PreparedBatch, TargetValues, UpdateReport};

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributional::{mean_value, DistError, Support, ValueDistribution};
use crate::embeddings::{augment_observation, EmbeddingError, TaskEmbeddingTable};
use crate::experience::{Action, ActionSpace, EnvError, MultiTaskBuffer, TaskSpec};
use crate::nn::{HeadMode, NnError, PolicyNet, ValueNet};
use crate::optim::{AdamWState, OptimError};
use crate::retnorm::{ReturnTracker, RetNormError};
use crate::tape::{GradTape, TapeError};
use crate::tensor::{ParameterSet, Tensor, TensorError};

#[derive(Debug)]
pub enum AgentError {
    MixedActionSpaces,
    NoTasks,
    InvalidConfig(String),
    NonFiniteLoss { detail: String },
    Nn(NnError),
    Dist(DistError),
    Embedding(EmbeddingError),
    Env(EnvError),
    Optim(OptimError),
    RetNorm(RetNormError),
    Tape(TapeError),
    Tensor(TensorError),
}

impl fmt::Display for AgentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentError::MixedActionSpaces => {
                write!(f, "all tasks in a run must share one action space")
            }
            AgentError::NoTasks => write!(f, "at least one task is required"),
            AgentError::InvalidConfig(msg) => write!(f, "invalid agent config: {msg}"),
            AgentError::NonFiniteLoss { detail } => {
                write!(f, "non-finite critic loss: {detail}")
            }
            AgentError::Nn(e) => write!(f, "{e}"),
            AgentError::Dist(e) => write!(f, "{e}"),
            AgentError::Embedding(e) => write!(f, "{e}"),
            AgentError::Env(e) => write!(f, "{e}"),
            AgentError::Optim(e) => write!(f, "{e}"),
            AgentError::RetNorm(e) => write!(f, "{e}"),
            AgentError::Tape(e) => write!(f, "{e}"),
            AgentError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for AgentError {}

macro_rules! from_err {
    ($variant:ident, $ty:ty) => {
        impl From<$ty> for AgentError {
            fn from(e: $ty) -> Self {
                AgentError::$variant(e)
            }
        }
    };
}

from_err!(Nn, NnError);
from_err!(Dist, DistError);
from_err!(Embedding, EmbeddingError);
from_err!(Env, EnvError);
from_err!(Optim, OptimError);
from_err!(RetNorm, RetNormError);
from_err!(Tape, TapeError);
from_err!(Tensor, TensorError);

/// Agent hyperparameters. Defaults follow the published configuration except
/// for the desk-scale critic width, batch size, and buffer capacity; the
/// harness marks those divergences in the emitted config echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub discount: f64,
    pub utd: usize,
    pub action_repeat: usize,
    pub polyak_tau: f64,
    pub target_update_freq: usize,
    pub weight_decay: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub temperature_lr: f64,
    pub initial_temperature: f64,
    /// None resolves to -|A|/2 for the tanh-Gaussian policy.
    pub target_entropy: Option<f64>,
    pub n_atoms: usize,
    pub v_min: f64,
    pub v_max: f64,
    /// Single-task batch size; multiplied for multi-task runs.
    pub batch_size: usize,
    pub multitask_batch_multiplier: usize,
    pub buffer_capacity: usize,
    pub num_critics: usize,
    pub embedding_dim: usize,
    pub critic_width: usize,
    pub critic_blocks: usize,
    /// Width used when the scaled-Q toggle is off.
    pub sq_off_width: usize,
    pub actor_width: usize,
    pub actor_blocks: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: usize,
    /// n-step return horizon for the discrete agent; the continuous agent
    /// always uses 1-step targets.
    pub n_step: usize,
    /// Iterations during which behavior actions are uniform random
    /// (exploration seeding). Updates still run from the first iteration.
    pub random_action_steps: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            discount: 0.99,
            utd: 2,
            action_repeat: 1,
            polyak_tau: 5e-3,
            target_update_freq: 1,
            weight_decay: 1e-4,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            temperature_lr: 3e-4,
            initial_temperature: 0.1,
            target_entropy: None,
            n_atoms: 101,
            v_min: -10.0,
            v_max: 10.0,
            batch_size: 256,
            multitask_batch_multiplier: 4,
            buffer_capacity: 100_000,
            num_critics: 2,
            embedding_dim: 32,
            critic_width: 256,
            critic_blocks: 2,
            sq_off_width: 64,
            actor_width: 256,
            actor_blocks: 1,
            eps_start: 1.0,
            eps_end: 0.01,
            eps_decay_steps: 5000,
            n_step: 3,
            random_action_steps: 0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(AgentError::InvalidConfig(msg.to_string()))
            }
        };
        check(self.discount > 0.0 && self.discount < 1.0, "discount must be in (0, 1)")?;
        check(self.utd >= 1, "utd must be at least 1")?;
        check(self.action_repeat >= 1, "action_repeat must be at least 1")?;
        check(self.polyak_tau > 0.0 && self.polyak_tau <= 1.0, "polyak_tau must be in (0, 1]")?;
        check(self.n_atoms >= 2, "n_atoms must be at least 2")?;
        check(self.v_min < self.v_max, "v_min must be below v_max")?;
        check(self.batch_size >= 1, "batch_size must be positive")?;
        check(self.buffer_capacity >= 1, "buffer_capacity must be positive")?;
        check(self.num_critics == 2, "this implementation uses exactly two critics")?;
        check(self.embedding_dim >= 1, "embedding_dim must be positive")?;
        check(self.critic_width >= 1 && self.sq_off_width >= 1, "widths must be positive")?;
        check(self.initial_temperature > 0.0, "initial temperature must be positive")?;
        check(self.n_step >= 1, "n_step must be at least 1")?;
        check(
            self.eps_start >= self.eps_end && self.eps_end >= 0.0 && self.eps_start <= 1.0,
            "epsilon schedule must decay within [0, 1]",
        )?;
        Ok(())
    }
}

/// Ablation toggles: scaled Q-value model, cross-entropy via categorical RL
/// (with return normalization), and learnable task embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariantToggles {
    pub scaled_q: bool,
    pub cross_entropy: bool,
    pub task_embeddings: bool,
    /// Middle variant: MSE loss but with return normalization kept on.
    /// Only meaningful when `cross_entropy` is off.
    pub mse_with_norm: bool,
}

impl Default for VariantToggles {
    fn default() -> Self {
        VariantToggles {
            scaled_q: true,
            cross_entropy: true,
            task_embeddings: true,
            mse_with_norm: false,
        }
    }
}

/// How the critic is trained and what its head emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Cross-entropy over the categorical support, normalized rewards.
    Categorical,
    /// Squared TD error on scalar means, normalized rewards.
    MseNormalized,
    /// Squared TD error on scalar means, raw rewards.
    MseRaw,
}

impl VariantToggles {
    pub fn loss_mode(&self) -> LossMode {
        if self.cross_entropy {
            LossMode::Categorical
        } else if self.mse_with_norm {
            LossMode::MseNormalized
        } else {
            LossMode::MseRaw
        }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.scaled_q {
            parts.push("SQ");
        }
        if self.cross_entropy {
            parts.push("CE");
        }
        if self.task_embeddings {
            parts.push("TE");
        }
        if parts.is_empty() {
            "base".to_string()
        } else {
            parts.join("+")
        }
    }
}

/// Action selection mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

/// Complete learner state: networks, targets, temperature, embedding table,
/// return tracker, optimizer states, and counters.
pub struct Agent {
    pub cfg: AgentConfig,
    pub variant: VariantToggles,
    pub tasks: Vec<TaskSpec>,
    pub action_space: ActionSpace,
    pub obs_dim: usize,
    pub support: Support,
    pub critics: Vec<ValueNet>,
    pub targets: Vec<ValueNet>,
    pub actor: Option<PolicyNet>,
    /// log alpha, present for the continuous agent.
    pub temperature: Option<ParameterSet>,
    pub embeddings: Option<TaskEmbeddingTable>,
    pub tracker: ReturnTracker,
    pub critic_opts: Vec<AdamWState>,
    pub actor_opt: Option<AdamWState>,
    pub temperature_opt: Option<AdamWState>,
    pub embedding_opt: Option<AdamWState>,
    pub rng: ChaCha8Rng,
    /// Environment iterations so far (one step of every task per iteration).
    pub iterations: u64,
    /// Gradient update steps so far.
    pub updates: u64,
}

impl Agent {
    pub fn new(
        cfg: AgentConfig,
        variant: VariantToggles,
        tasks: Vec<TaskSpec>,
        seed: u64,
    ) -> Result<Self, AgentError> {
        cfg.validate()?;
        if tasks.is_empty() {
            return Err(AgentError::NoTasks);
        }
        let action_space = tasks[0].action_space();
        let obs_dim = tasks[0].obs_dim();
        if tasks.iter().any(|t| t.action_space() != action_space || t.obs_dim() != obs_dim) {
            return Err(AgentError::MixedActionSpaces);
        }
        if variant.cross_entropy && variant.mse_with_norm {
            return Err(AgentError::InvalidConfig(
                "mse_with_norm only applies when cross_entropy is off".into(),
            ));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let support = Support::new(cfg.v_min, cfg.v_max, cfg.n_atoms)?;
        let num_tasks = tasks.len();
        let width = if variant.scaled_q { cfg.critic_width } else { cfg.sq_off_width };
        let loss_mode = variant.loss_mode();

        let embeddings = if variant.task_embeddings {
            Some(TaskEmbeddingTable::new(num_tasks, cfg.embedding_dim, &mut rng))
        } else {
            None
        };
        let head_mode = if variant.task_embeddings {
            HeadMode::Shared
        } else {
            HeadMode::PerTask(num_tasks)
        };
        let cond_dim = if variant.task_embeddings { cfg.embedding_dim } else { 0 };

        let (critic_in, critic_out, actor) = match action_space {
            ActionSpace::Continuous(da) => {
                let critic_in = obs_dim + cond_dim + da;
                let critic_out = match loss_mode {
                    LossMode::Categorical => cfg.n_atoms,
                    _ => 1,
                };
                let actor = PolicyNet::new(
                    obs_dim + cond_dim,
                    cfg.actor_width,
                    cfg.actor_blocks,
                    da,
                    head_mode,
                    &mut rng,
                )?;
                (critic_in, critic_out, Some(actor))
            }
            ActionSpace::Discrete(na) => {
                let critic_in = obs_dim + cond_dim;
                let critic_out = match loss_mode {
                    LossMode::Categorical => na * cfg.n_atoms,
                    _ => na,
                };
                (critic_in, critic_out, None)
            }
        };

        let mut critics = Vec::with_capacity(cfg.num_critics);
        let mut targets = Vec::with_capacity(cfg.num_critics);
        for _ in 0..cfg.num_critics {
            let c = ValueNet::new(critic_in, width, cfg.critic_blocks, critic_out, head_mode, &mut rng)?;
            let mut t = ValueNet::new(critic_in, width, cfg.critic_blocks, critic_out, head_mode, &mut rng)?;
            crate::optim::polyak_update(&c.params, &mut t.params, 1.0);
            critics.push(c);
            targets.push(t);
        }

        let temperature = if actor.is_some() {
            let mut p = ParameterSet::new();
            p.insert("log_alpha", Tensor::scalar(cfg.initial_temperature.ln()))?;
            Some(p)
        } else {
            None
        };

        // The discrete agent has no entropy term: alpha = 0 keeps lambda = 0.
        let tracker_alpha = if actor.is_some() { cfg.initial_temperature } else { 0.0 };
        let tracker = ReturnTracker::new(num_tasks, cfg.v_max, tracker_alpha, cfg.discount);

        let critic_opts =
            critics.iter().map(|c| AdamWState::new(&c.params, cfg.critic_lr, cfg.weight_decay)).collect();
        let actor_opt =
            actor.as_ref().map(|a| AdamWState::new(&a.params, cfg.actor_lr, cfg.weight_decay));
        let temperature_opt =
            temperature.as_ref().map(|t| AdamWState::new(t, cfg.temperature_lr, 0.0));
        let embedding_opt =
            embeddings.as_ref().map(|e| AdamWState::new(&e.params, cfg.critic_lr, 0.0));

        Ok(Agent {
            cfg,
            variant,
            tasks,
            action_space,
            obs_dim,
            support,
            critics,
            targets,
            actor,
            temperature,
            embeddings,
            tracker,
            critic_opts,
            actor_opt,
            temperature_opt,
            embedding_opt,
            rng,
            iterations: 0,
            updates: 0,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Effective batch size: multiplied for multi-task runs.
    pub fn batch_size(&self) -> usize {
        if self.num_tasks() > 1 {
            self.cfg.batch_size * self.cfg.multitask_batch_multiplier
        } else {
            self.cfg.batch_size
        }
    }

    pub fn alpha(&self) -> f64 {
        self.temperature
            .as_ref()
            .map(|t| t.get("log_alpha").expect("present").data()[0].exp())
            .unwrap_or(0.0)
    }

    pub fn target_entropy(&self) -> f64 {
        self.cfg.target_entropy.unwrap_or_else(|| match self.action_space {
            ActionSpace::Continuous(da) => -(da as f64) / 2.0,
            ActionSpace::Discrete(na) => -(na as f64) / 2.0,
        })
    }

    /// Epsilon schedule for the discrete agent, by environment iteration.
    pub fn epsilon(&self) -> f64 {
        let frac = if self.cfg.eps_decay_steps == 0 {
            1.0
        } else {
            (self.iterations as f64 / self.cfg.eps_decay_steps as f64).min(1.0)
        };
        self.cfg.eps_start + (self.cfg.eps_end - self.cfg.eps_start) * frac
    }

    /// Observation augmented with the task's embedding row (identity when the
    /// separate-heads variant is active).
    pub fn augment(&self, obs: &[f64], task: usize) -> Result<Vec<f64>, AgentError> {
        match &self.embeddings {
            Some(table) => Ok(augment_observation(obs, &table.lookup(task)?)),
            None => Ok(obs.to_vec()),
        }
    }

    /// Select an action for one observation.
    pub fn act(&mut self, obs: &[f64], task: usize, mode: ActMode) -> Result<Action, AgentError> {
        if mode == ActMode::Deterministic {
            return self.act_deterministic(obs, task);
        }
        match self.action_space {
            ActionSpace::Continuous(da) => {
                let aug = self.augment(obs, task)?;
                let noise: Vec<f64> = (0..da).map(|_| standard_normal(&mut self.rng)).collect();
                let actor = self.actor.as_ref().expect("continuous agent has an actor");
                let mut tape = GradTape::new();
                let x = tape.constant(&aug, 1, aug.len());
                let (mean, logstd) = actor.forward(&mut tape, x, Some(&[task]), true)?;
                let (a, _) = PolicyNet::sample_with_log_prob(&mut tape, mean, logstd, &noise);
                Ok(Action::Continuous(tape.data(a).to_vec()))
            }
            ActionSpace::Discrete(na) => {
                let eps = self.epsilon();
                if eps > 0.0 && self.rng.random_range(0.0..1.0) < eps {
                    return Ok(Action::Discrete(self.rng.random_range(0..na)));
                }
                self.act_deterministic(obs, task)
            }
        }
    }

    /// Greedy (discrete) or tanh-mean (continuous) action; consumes no
    /// randomness, so evaluation rollouts can share an immutable agent.
    pub fn act_deterministic(&self, obs: &[f64], task: usize) -> Result<Action, AgentError> {
        match self.action_space {
            ActionSpace::Continuous(_) => {
                let aug = self.augment(obs, task)?;
                let actor = self.actor.as_ref().expect("continuous agent has an actor");
                let mut tape = GradTape::new();
                let x = tape.constant(&aug, 1, aug.len());
                let (mean, _) = actor.forward(&mut tape, x, Some(&[task]), true)?;
                let a = tape.tanh(mean);
                Ok(Action::Continuous(tape.data(a).to_vec()))
            }
            ActionSpace::Discrete(_) => {
                let values = self.action_values(obs, task)?;
                Ok(Action::Discrete(argmax_first(&values)))
            }
        }
    }

    /// Per-action scalar values from the online critics (mean of the two),
    /// for greedy selection and diagnostics.
    pub fn action_values(&self, obs: &[f64], task: usize) -> Result<Vec<f64>, AgentError> {
        let na = match self.action_space {
            ActionSpace::Discrete(na) => na,
            ActionSpace::Continuous(_) => {
                return Err(AgentError::InvalidConfig(
                    "action_values applies to discrete agents".into(),
                ))
            }
        };
        let aug = self.augment(obs, task)?;
        let mut values = vec![0.0; na];
        for critic in &self.critics {
            let mut tape = GradTape::new();
            let x = tape.constant(&aug, 1, aug.len());
            let logits = critic.forward(&mut tape, x, Some(&[task]), true)?;
            let row = tape.data(logits);
            match self.variant.loss_mode() {
                LossMode::Categorical => {
                    for a in 0..na {
                        let block = &row[a * self.cfg.n_atoms..(a + 1) * self.cfg.n_atoms];
                        let dist = ValueDistribution::from_softmax(block);
                        values[a] += mean_value(&dist, &self.support);
                    }
                }
                _ => {
                    for a in 0..na {
                        values[a] += row[a];
                    }
                }
            }
        }
        for v in &mut values {
            *v /= self.critics.len() as f64;
        }
        Ok(values)
    }

    /// Scalar state value estimate in raw-return units, used to bootstrap
    /// truncated episodes when updating the return tracker. Deterministic:
    /// consumes no randomness.
    pub fn raw_state_value(&self, obs: &[f64], task: usize) -> Result<f64, AgentError> {
        let normalized = match self.action_space {
            ActionSpace::Discrete(_) => {
                let values = self.action_values(obs, task)?;
                values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            }
            ActionSpace::Continuous(_) => {
                let aug = self.augment(obs, task)?;
                let actor = self.actor.as_ref().expect("continuous agent has an actor");
                let mut tape = GradTape::new();
                let x = tape.constant(&aug, 1, aug.len());
                let (mean, _) = actor.forward(&mut tape, x, Some(&[task]), true)?;
                let a = tape.tanh(mean);
                let act = tape.data(a).to_vec();
                let mut total = 0.0;
                for critic in &self.critics {
                    let mut tape = GradTape::new();
                    let x = tape.constant(&aug, 1, aug.len());
                    let av = tape.constant(&act, 1, act.len());
                    let input = tape.concat_cols(x, av);
                    let logits = critic.forward(&mut tape, input, Some(&[task]), true)?;
                    total += match self.variant.loss_mode() {
                        LossMode::Categorical => {
                            let dist = ValueDistribution::from_softmax(tape.data(logits));
                            mean_value(&dist, &self.support)
                        }
                        _ => tape.data(logits)[0],
                    };
                }
                total / self.critics.len() as f64
            }
        };
        match self.variant.loss_mode() {
            LossMode::MseRaw => Ok(normalized),
            _ => Ok(self.tracker.unnormalize_value(task, normalized)?),
        }
    }

    /// Fresh replay storage matching this agent's task count and capacity.
    pub fn make_buffer(&self) -> MultiTaskBuffer {
        MultiTaskBuffer::new(self.num_tasks(), self.cfg.buffer_capacity)
    }
}

use rand::SeedableRng;

/// Standard normal draw via rand_distr's ziggurat sampler.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Index of the maximum, first index on ties.
pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experience::scaled_chain_suite;

    fn chain_agent(seed: u64) -> Agent {
        let cfg = AgentConfig {
            critic_width: 16,
            critic_blocks: 1,
            embedding_dim: 4,
            n_atoms: 11,
            batch_size: 8,
            buffer_capacity: 64,
            ..AgentConfig::default()
        };
        Agent::new(cfg, VariantToggles::default(), scaled_chain_suite(), seed).unwrap()
    }

    #[test]
    fn epsilon_schedule_endpoints() {
        let mut agent = chain_agent(0);
        assert_eq!(agent.epsilon(), 1.0);
        agent.iterations = 5000;
        assert!((agent.epsilon() - 0.01).abs() < 1e-12);
        agent.iterations = 10_000;
        assert!((agent.epsilon() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn greedy_discrete_action_is_argmax() {
        let mut agent = chain_agent(1);
        agent.iterations = 1_000_000; // epsilon at floor
        let obs = vec![0.25];
        let values = agent.action_values(&obs, 2).unwrap();
        let expected = argmax_first(&values);
        // Deterministic mode ignores epsilon entirely.
        match agent.act(&obs, 2, ActMode::Deterministic).unwrap() {
            Action::Discrete(a) => assert_eq!(a, expected),
            _ => panic!("discrete agent emitted continuous action"),
        }
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut agent = chain_agent(2);
        agent.cfg.eps_decay_steps = 0;
        agent.cfg.eps_end = 1.0; // hold epsilon at 1
        let mut counts = [0usize; 2];
        for _ in 0..10_000 {
            match agent.act(&[0.0], 0, ActMode::Stochastic).unwrap() {
                Action::Discrete(a) => counts[a] += 1,
                _ => unreachable!(),
            }
        }
        // Binomial(1e4, 1/2): 4 sigma = 200.
        assert!((counts[0] as f64 - 5000.0).abs() <= 200.0, "counts {counts:?}");
    }

    #[test]
    fn continuous_actions_stay_in_bounds() {
        let cfg = AgentConfig {
            critic_width: 16,
            critic_blocks: 1,
            actor_width: 16,
            embedding_dim: 4,
            n_atoms: 11,
            ..AgentConfig::default()
        };
        let tasks = crate::experience::point_goal_suite(4, false, false);
        let mut agent = Agent::new(cfg, VariantToggles::default(), tasks, 3).unwrap();
        for mode in [ActMode::Deterministic, ActMode::Stochastic] {
            match agent.act(&[0.1, -0.2, 0.0, 0.3], 1, mode).unwrap() {
                Action::Continuous(a) => {
                    assert_eq!(a.len(), 2);
                    for v in a {
                        assert!(v > -1.0 && v < 1.0);
                    }
                }
                _ => panic!("continuous agent emitted discrete action"),
            }
        }
    }

    #[test]
    fn mixed_task_spaces_are_rejected() {
        let mut tasks = scaled_chain_suite();
        tasks.push(TaskSpec::PointGoal { angle: 0.0, reward_scale: 1.0, sparse: false });
        let err = Agent::new(AgentConfig::default(), VariantToggles::default(), tasks, 0);
        assert!(matches!(err, Err(AgentError::MixedActionSpaces)));
    }

    #[test]
    fn target_entropy_defaults_to_minus_half_dim() {
        let cfg = AgentConfig {
            critic_width: 8,
            critic_blocks: 1,
            actor_width: 8,
            embedding_dim: 2,
            n_atoms: 5,
            ..AgentConfig::default()
        };
        let tasks = crate::experience::point_goal_suite(2, false, false);
        let agent = Agent::new(cfg, VariantToggles::default(), tasks, 0).unwrap();
        assert_eq!(agent.target_entropy(), -1.0);
    }

    #[test]
    fn separate_heads_variant_builds_without_embeddings() {
        let cfg = AgentConfig {
            critic_width: 8,
            critic_blocks: 1,
            n_atoms: 5,
            ..AgentConfig::default()
        };
        let variant = VariantToggles { task_embeddings: false, ..VariantToggles::default() };
        let agent = Agent::new(cfg, variant, scaled_chain_suite(), 0).unwrap();
        assert!(agent.embeddings.is_none());
        assert!(agent.critics[0].params.contains("head0.w"));
        assert!(agent.critics[0].params.contains("head4.w"));
    }
}
