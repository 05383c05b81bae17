//! Toy multi-task environments and replay machinery: a reward-scaled chain
//! (discrete) and a point-mass goal-reaching suite (continuous), per-task
//! ring buffers with n-step views, and uniform multi-task batch sampling.

use std::collections::VecDeque;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const CHAIN_LENGTH: usize = 9;
pub const CHAIN_HORIZON: usize = 50;
pub const POINT_GOAL_HORIZON: usize = 100;
pub const POINT_GOAL_RADIUS: f64 = 0.1;

/// Reward scales of the canonical 5-task chain suite.
pub const CHAIN_SCALES: [f64; 5] = [1.0, 10.0, 100.0, 1000.0, 0.1];

#[derive(Debug, Clone, PartialEq)]
pub enum EnvError {
    InvalidAction { expected: String, got: String },
    UnknownTask { task: usize, num_tasks: usize },
    EmptyBuffer { task: usize },
}

impl fmt::Display for EnvError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvError::InvalidAction { expected, got } => {
                write!(f, "invalid action: expected {expected}, got {got}")
            }
            EnvError::UnknownTask { task, num_tasks } => {
                write!(f, "task id {task} out of range for {num_tasks} tasks")
            }
            EnvError::EmptyBuffer { task } => {
                write!(f, "replay buffer for task {task} is empty")
            }
        }
    }
}

impl std::error::Error for EnvError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    fn kind(&self) -> &'static str {
        match self {
            Action::Discrete(_) => "discrete",
            Action::Continuous(_) => "continuous",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

impl ActionSpace {
    pub fn dim(&self) -> usize {
        match self {
            ActionSpace::Discrete(_) => 1,
            ActionSpace::Continuous(d) => *d,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

pub trait Environment: Send {
    fn obs_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    /// Deterministic start state. The seed parameter exists for interface
    /// uniformity; both toy suites have fixed initial states.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvError>;
}

/// Specification of a single task, serializable into run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Chain { scale: f64 },
    PointGoal { angle: f64, reward_scale: f64, sparse: bool },
}

impl TaskSpec {
    pub fn name(&self) -> String {
        match self {
            TaskSpec::Chain { scale } => format!("chain_{scale}"),
            TaskSpec::PointGoal { angle, reward_scale, sparse } => {
                let deg = (angle.to_degrees() * 10.0).round() / 10.0;
                let mode = if *sparse { "sp" } else { "dn" };
                format!("goal_{deg}deg_s{reward_scale}_{mode}")
            }
        }
    }

    pub fn build(&self) -> Box<dyn Environment> {
        match self {
            TaskSpec::Chain { scale } => Box::new(ScaledChainTask::new(*scale)),
            TaskSpec::PointGoal { angle, reward_scale, sparse } => {
                Box::new(PointGoalTask::new(*angle, *reward_scale, *sparse))
            }
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self {
            TaskSpec::Chain { .. } => ActionSpace::Discrete(2),
            TaskSpec::PointGoal { .. } => ActionSpace::Continuous(2),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            TaskSpec::Chain { .. } => 1,
            TaskSpec::PointGoal { .. } => 4,
        }
    }
}

/// The canonical 5-task chain suite with heterogeneous reward scales.
pub fn scaled_chain_suite() -> Vec<TaskSpec> {
    CHAIN_SCALES.iter().map(|&scale| TaskSpec::Chain { scale }).collect()
}

/// K point-goal tasks with goals at angles 2 pi k / K on the unit circle
/// (offset by pi / K for the held-out transfer set). Reward scale alternates
/// 10 for odd k, 1 for even k, injecting scale heterogeneity.
pub fn point_goal_suite(num_goals: usize, sparse: bool, held_out: bool) -> Vec<TaskSpec> {
    let offset = if held_out { std::f64::consts::PI / num_goals as f64 } else { 0.0 };
    (0..num_goals)
        .map(|k| TaskSpec::PointGoal {
            angle: 2.0 * std::f64::consts::PI * k as f64 / num_goals as f64 + offset,
            reward_scale: if k % 2 == 1 { 10.0 } else { 1.0 },
            sparse,
        })
        .collect()
}

/// Line of `CHAIN_LENGTH` cells; actions move left/right, reaching the last
/// cell pays the task's scale and terminates, 50-step truncation.
#[derive(Debug, Clone)]
pub struct ScaledChainTask {
    pub scale: f64,
    pos: usize,
    steps: usize,
}

impl ScaledChainTask {
    pub fn new(scale: f64) -> Self {
        ScaledChainTask { scale, pos: 0, steps: 0 }
    }

    fn obs(&self) -> Vec<f64> {
        vec![self.pos as f64 / (CHAIN_LENGTH - 1) as f64]
    }

    pub fn state(&self) -> (usize, usize) {
        (self.pos, self.steps)
    }

    pub fn restore(&mut self, pos: usize, steps: usize) {
        self.pos = pos;
        self.steps = steps;
    }
}

impl Environment for ScaledChainTask {
    fn obs_dim(&self) -> usize {
        1
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(2)
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.pos = 0;
        self.steps = 0;
        self.obs()
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvError> {
        let a = match action {
            Action::Discrete(a) if *a < 2 => *a,
            other => {
                return Err(EnvError::InvalidAction {
                    expected: "discrete in {0, 1}".into(),
                    got: other.kind().into(),
                })
            }
        };
        self.steps += 1;
        if a == 0 {
            self.pos = self.pos.saturating_sub(1);
        } else {
            self.pos += 1;
        }
        let terminated = self.pos == CHAIN_LENGTH - 1;
        let reward = if terminated { self.scale } else { 0.0 };
        let truncated = !terminated && self.steps >= CHAIN_HORIZON;
        Ok(StepOutcome { obs: self.obs(), reward, terminated, truncated })
    }
}

/// Point mass with damped velocity dynamics chasing a goal on the unit
/// circle. Dense reward is -scale * distance, sparse pays scale inside a
/// 0.1 radius. 100-step horizon, truncation only.
#[derive(Debug, Clone)]
pub struct PointGoalTask {
    pub goal: [f64; 2],
    pub reward_scale: f64,
    pub sparse: bool,
    pos: [f64; 2],
    vel: [f64; 2],
    steps: usize,
}

impl PointGoalTask {
    pub fn new(angle: f64, reward_scale: f64, sparse: bool) -> Self {
        PointGoalTask {
            goal: [angle.cos(), angle.sin()],
            reward_scale,
            sparse,
            pos: [0.0, 0.0],
            vel: [0.0, 0.0],
            steps: 0,
        }
    }

    fn obs(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    pub fn state(&self) -> ([f64; 2], [f64; 2], usize) {
        (self.pos, self.vel, self.steps)
    }

    pub fn restore(&mut self, pos: [f64; 2], vel: [f64; 2], steps: usize) {
        self.pos = pos;
        self.vel = vel;
        self.steps = steps;
    }
}

impl Environment for PointGoalTask {
    fn obs_dim(&self) -> usize {
        4
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(2)
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.pos = [0.0, 0.0];
        self.vel = [0.0, 0.0];
        self.steps = 0;
        self.obs()
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvError> {
        let a = match action {
            Action::Continuous(a) if a.len() == 2 => [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)],
            other => {
                return Err(EnvError::InvalidAction {
                    expected: "continuous of dimension 2".into(),
                    got: other.kind().into(),
                })
            }
        };
        self.steps += 1;
        for i in 0..2 {
            self.vel[i] = 0.95 * self.vel[i] + 0.1 * a[i];
            self.pos[i] += 0.1 * self.vel[i];
        }
        let dist =
            ((self.pos[0] - self.goal[0]).powi(2) + (self.pos[1] - self.goal[1]).powi(2)).sqrt();
        let reward = if self.sparse {
            if dist < POINT_GOAL_RADIUS {
                self.reward_scale
            } else {
                0.0
            }
        } else {
            -self.reward_scale * dist
        };
        let truncated = self.steps >= POINT_GOAL_HORIZON;
        Ok(StepOutcome { obs: self.obs(), reward, terminated: false, truncated })
    }
}

/// Concrete environment instance with a serializable state snapshot, so
/// checkpoints can capture mid-episode progress exactly.
#[derive(Debug, Clone)]
pub enum EnvInstance {
    Chain(ScaledChainTask),
    Point(PointGoalTask),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EnvSnapshot {
    Chain { pos: usize, steps: usize },
    Point { pos: [f64; 2], vel: [f64; 2], steps: usize },
}

impl EnvInstance {
    pub fn from_spec(spec: &TaskSpec) -> Self {
        match spec {
            TaskSpec::Chain { scale } => EnvInstance::Chain(ScaledChainTask::new(*scale)),
            TaskSpec::PointGoal { angle, reward_scale, sparse } => {
                EnvInstance::Point(PointGoalTask::new(*angle, *reward_scale, *sparse))
            }
        }
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        match self {
            EnvInstance::Chain(e) => {
                let (pos, steps) = e.state();
                EnvSnapshot::Chain { pos, steps }
            }
            EnvInstance::Point(e) => {
                let (pos, vel, steps) = e.state();
                EnvSnapshot::Point { pos, vel, steps }
            }
        }
    }

    pub fn restore(&mut self, snap: &EnvSnapshot) {
        match (self, snap) {
            (EnvInstance::Chain(e), EnvSnapshot::Chain { pos, steps }) => e.restore(*pos, *steps),
            (EnvInstance::Point(e), EnvSnapshot::Point { pos, vel, steps }) => {
                e.restore(*pos, *vel, *steps)
            }
            _ => panic!("environment snapshot kind mismatch"),
        }
    }
}

impl Environment for EnvInstance {
    fn obs_dim(&self) -> usize {
        match self {
            EnvInstance::Chain(e) => e.obs_dim(),
            EnvInstance::Point(e) => e.obs_dim(),
        }
    }

    fn action_space(&self) -> ActionSpace {
        match self {
            EnvInstance::Chain(e) => e.action_space(),
            EnvInstance::Point(e) => e.action_space(),
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        match self {
            EnvInstance::Chain(e) => e.reset(seed),
            EnvInstance::Point(e) => e.reset(seed),
        }
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvError> {
        match self {
            EnvInstance::Chain(e) => e.step(action),
            EnvInstance::Point(e) => e.step(action),
        }
    }
}

// -- scoring anchors ------------------------------------------------------

/// Random and near-optimal undiscounted episode returns for a task, used as
/// score-normalization anchors. Deterministic: the random policy runs on a
/// fixed seed derived from the task description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreAnchors {
    pub random: f64,
    pub optimal: f64,
}

pub fn score_anchors(spec: &TaskSpec) -> ScoreAnchors {
    match spec {
        TaskSpec::Chain { scale } => {
            let mut env = ScaledChainTask::new(*scale);
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ spec.name().len() as u64);
            let random = mean_return(&mut env, 100, |rng| Action::Discrete(rng.random_range(0..2)), &mut rng);
            ScoreAnchors { random, optimal: *scale }
        }
        TaskSpec::PointGoal { .. } => {
            let mut env = spec.build();
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ 0x900d);
            let random = mean_return(
                env.as_mut(),
                20,
                |rng| Action::Continuous(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]),
                &mut rng,
            );
            let optimal = scripted_point_goal_return(spec);
            ScoreAnchors { random, optimal }
        }
    }
}

use rand::SeedableRng;

fn mean_return(
    env: &mut dyn Environment,
    episodes: usize,
    mut policy: impl FnMut(&mut ChaCha8Rng) -> Action,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut total = 0.0;
    for _ in 0..episodes {
        env.reset(0);
        loop {
            let out = env.step(&policy(rng)).expect("valid action");
            total += out.reward;
            if out.terminated || out.truncated {
                break;
            }
        }
    }
    total / episodes as f64
}

/// PD controller toward the goal; a strong baseline for the anchors.
fn scripted_point_goal_return(spec: &TaskSpec) -> f64 {
    let (goal, scale, sparse) = match spec {
        TaskSpec::PointGoal { angle, reward_scale, sparse } => {
            ([angle.cos(), angle.sin()], *reward_scale, *sparse)
        }
        _ => unreachable!("scripted controller is for point-goal tasks"),
    };
    let mut env = PointGoalTask::new(0.0, scale, sparse);
    env.goal = goal;
    env.reset(0);
    let mut total = 0.0;
    loop {
        let (pos, vel, _) = env.state();
        let a = Action::Continuous(vec![
            (8.0 * (goal[0] - pos[0]) - 2.5 * vel[0]).clamp(-1.0, 1.0),
            (8.0 * (goal[1] - pos[1]) - 2.5 * vel[1]).clamp(-1.0, 1.0),
        ]);
        let out = env.step(&a).expect("valid action");
        total += out.reward;
        if out.terminated || out.truncated {
            break;
        }
    }
    total
}

// -- replay ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub terminated: bool,
    pub truncated: bool,
}

/// FIFO ring buffer of immutable transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        ReplayBuffer { data: VecDeque::with_capacity(capacity.min(1 << 20)), capacity }
    }

    pub fn push(&mut self, t: Transition) {
        debug_assert!(
            !(t.terminated && t.truncated),
            "terminated and truncated are mutually exclusive"
        );
        if self.data.len() == self.capacity {
            self.data.pop_front();
        }
        self.data.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, index: usize) -> &Transition {
        &self.data[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.data.iter()
    }

    /// n-step window starting at `index`, cut at episode boundaries and at
    /// the newest stored transition. Returns the raw (unnormalized) n-step
    /// return; `steps` is the realized window length m <= n, and bootstrap
    /// applies from `next_obs` unless `terminated`.
    pub fn n_step_view(&self, index: usize, n: usize, discount: f64) -> NStepView {
        assert!(n >= 1, "n-step window must be at least 1");
        let first = self.get(index);
        let mut ret = 0.0;
        let mut factor = 1.0;
        let mut last = first;
        let mut steps = 0;
        for k in 0..n {
            match self.data.get(index + k) {
                Some(t) => {
                    ret += factor * t.reward;
                    factor *= discount;
                    steps += 1;
                    last = t;
                    if t.terminated || t.truncated {
                        break;
                    }
                }
                None => break,
            }
        }
        NStepView {
            obs: first.obs.clone(),
            action: first.action.clone(),
            ret,
            next_obs: last.next_obs.clone(),
            steps,
            terminated: last.terminated,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NStepView {
    pub obs: Vec<f64>,
    pub action: Action,
    /// Raw discounted sum over the realized window.
    pub ret: f64,
    pub next_obs: Vec<f64>,
    /// Realized window length m; the bootstrap coefficient is gamma^m.
    pub steps: usize,
    pub terminated: bool,
}

/// One ring buffer per task, with uniform-over-tasks batch sampling.
#[derive(Debug, Clone)]
pub struct MultiTaskBuffer {
    buffers: Vec<ReplayBuffer>,
}

impl MultiTaskBuffer {
    pub fn new(num_tasks: usize, capacity_per_task: usize) -> Self {
        MultiTaskBuffer {
            buffers: (0..num_tasks).map(|_| ReplayBuffer::new(capacity_per_task)).collect(),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.buffers.len()
    }

    pub fn buffer(&self, task: usize) -> Result<&ReplayBuffer, EnvError> {
        self.buffers
            .get(task)
            .ok_or(EnvError::UnknownTask { task, num_tasks: self.buffers.len() })
    }

    pub fn push(&mut self, task: usize, t: Transition) -> Result<(), EnvError> {
        let n = self.buffers.len();
        self.buffers
            .get_mut(task)
            .ok_or(EnvError::UnknownTask { task, num_tasks: n })?
            .push(t);
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.buffers.iter().map(|b| b.len()).sum()
    }

    /// Uniform task marginal, uniform transition within task. Returns
    /// (task, index) pairs; fails if any task's buffer is empty.
    pub fn sample_multitask(
        &self,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<(usize, usize)>, EnvError> {
        for (task, b) in self.buffers.iter().enumerate() {
            if b.is_empty() {
                return Err(EnvError::EmptyBuffer { task });
            }
        }
        Ok((0..batch_size)
            .map(|_| {
                let task = rng.random_range(0..self.buffers.len());
                let idx = rng.random_range(0..self.buffers[task].len());
                (task, idx)
            })
            .collect())
    }
}
