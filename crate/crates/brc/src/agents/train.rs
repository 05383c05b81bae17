//! Multi-task training loop at fixed updates-per-data: every iteration steps
//! each task's environment once, then performs exactly UTD gradient updates
//! on multi-task batches. With K tasks this performs K times fewer updates
//! per environment-step-per-task than K single-task runs.

use rand::Rng;

use super::{ActMode, Agent, AgentError};
use crate::diagnostics::{grad_conflict_rate, normalized_score, MetricRecord, MetricsSink};
use crate::experience::{
    score_anchors, Action, ActionSpace, EnvInstance, Environment, MultiTaskBuffer, ScoreAnchors,
    Transition,
};
use crate::retnorm::episode_returns;

/// Loop controls that are not part of the agent's hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainParams {
    /// Environment steps per task (= iterations of the round-robin loop).
    pub total_env_steps_per_task: usize,
    /// Iterations between evaluation passes; 0 evaluates only at the end.
    pub eval_interval: usize,
    /// Deterministic policy on deterministic envs makes repeats identical;
    /// kept as a knob for interface completeness.
    pub eval_episodes: usize,
    /// Seed stamped into every metric record.
    pub seed: u64,
    /// Updates between per-task gradient measurements; 0 disables them.
    pub grad_metric_every: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            total_env_steps_per_task: 1000,
            eval_interval: 250,
            eval_episodes: 1,
            seed: 0,
            grad_metric_every: 25,
        }
    }
}

/// Mutable environment-side state of a run: env instances, in-flight episode
/// reward histories, current observations, and the replay storage. Along with
/// the [`Agent`] this is everything a checkpoint must capture to resume.
pub struct RunRuntime {
    pub envs: Vec<EnvInstance>,
    pub obs: Vec<Vec<f64>>,
    pub episode_rewards: Vec<Vec<f64>>,
    pub buffer: MultiTaskBuffer,
    pub episodes_completed: Vec<u64>,
}

impl RunRuntime {
    pub fn fresh(agent: &Agent) -> Self {
        let mut envs: Vec<EnvInstance> =
            agent.tasks.iter().map(EnvInstance::from_spec).collect();
        let obs = envs.iter_mut().map(|e| e.reset(0)).collect();
        RunRuntime {
            envs,
            obs,
            episode_rewards: vec![Vec::new(); agent.num_tasks()],
            buffer: agent.make_buffer(),
            episodes_completed: vec![0; agent.num_tasks()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub task: usize,
    pub mean_return: f64,
    pub score: f64,
}

/// Deterministic evaluation: greedy/mean actions on fresh env instances.
pub fn evaluate(
    agent: &Agent,
    episodes: usize,
    anchors: &[ScoreAnchors],
) -> Result<Vec<EvalOutcome>, AgentError> {
    let mut out = Vec::with_capacity(agent.num_tasks());
    for (task, spec) in agent.tasks.iter().enumerate() {
        let mut env = EnvInstance::from_spec(spec);
        let mut total = 0.0;
        for _ in 0..episodes.max(1) {
            let mut obs = env.reset(0);
            loop {
                let action = agent.act_deterministic(&obs, task)?;
                let step = env.step(&action)?;
                total += step.reward;
                obs = step.obs;
                if step.terminated || step.truncated {
                    break;
                }
            }
        }
        let mean_return = total / episodes.max(1) as f64;
        let a = anchors[task];
        let score = normalized_score(mean_return, a.random, a.optimal)
            .expect("anchors are non-degenerate by construction");
        out.push(EvalOutcome { task, mean_return, score });
    }
    Ok(out)
}

fn random_action(space: ActionSpace, rng: &mut rand_chacha::ChaCha8Rng) -> Action {
    match space {
        ActionSpace::Discrete(n) => Action::Discrete(rng.random_range(0..n)),
        ActionSpace::Continuous(d) => {
            Action::Continuous((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        }
    }
}

/// Run the loop until `total_env_steps_per_task` iterations have happened
/// (counting any already on the agent, so resumed runs continue seamlessly).
pub fn train(
    agent: &mut Agent,
    runtime: &mut RunRuntime,
    params: &TrainParams,
    sink: &mut dyn MetricsSink,
) -> Result<(), AgentError> {
    let anchors: Vec<ScoreAnchors> = agent.tasks.iter().map(score_anchors).collect();
    let num_tasks = agent.num_tasks();
    // Per-task TD-loss accumulators since the last evaluation.
    let mut td_sum = vec![0.0; num_tasks];
    let mut td_count = vec![0usize; num_tasks];
    let total = params.total_env_steps_per_task as u64;

    while agent.iterations < total {
        let step_stamp = agent.iterations + 1;
        for task in 0..num_tasks {
            let action = if agent.iterations < agent.cfg.random_action_steps as u64 {
                random_action(agent.action_space, &mut agent.rng)
            } else {
                let obs = runtime.obs[task].clone();
                agent.act(&obs, task, ActMode::Stochastic)?
            };
            let mut reward = 0.0;
            let mut outcome = None;
            for _ in 0..agent.cfg.action_repeat {
                let out = runtime.envs[task].step(&action)?;
                reward += out.reward;
                let done = out.terminated || out.truncated;
                outcome = Some(out);
                if done {
                    break;
                }
            }
            let outcome = outcome.expect("action_repeat >= 1");
            runtime.buffer.push(
                task,
                Transition {
                    obs: runtime.obs[task].clone(),
                    action,
                    reward,
                    next_obs: outcome.obs.clone(),
                    terminated: outcome.terminated,
                    truncated: outcome.truncated,
                },
            )?;
            runtime.episode_rewards[task].push(reward);
            if outcome.terminated || outcome.truncated {
                let bootstrap = if outcome.truncated {
                    agent.raw_state_value(&outcome.obs, task)?
                } else {
                    0.0
                };
                let returns = episode_returns(
                    &runtime.episode_rewards[task],
                    agent.cfg.discount,
                    outcome.truncated,
                    bootstrap,
                );
                agent.tracker.update_gbar(task, &returns)?;
                let undiscounted: f64 = runtime.episode_rewards[task].iter().sum();
                sink.record(MetricRecord {
                    step: step_stamp,
                    task: Some(task),
                    name: "episode_return".into(),
                    value: undiscounted,
                    seed: params.seed,
                });
                runtime.episodes_completed[task] += 1;
                runtime.episode_rewards[task].clear();
                runtime.obs[task] = runtime.envs[task].reset(0);
            } else {
                runtime.obs[task] = outcome.obs;
            }
        }
        agent.iterations += 1;

        for _ in 0..agent.cfg.utd {
            let report = agent.update(&runtime.buffer)?;
            for (task, loss) in &report.critic.per_task_loss {
                td_sum[*task] += loss;
                td_count[*task] += 1;
            }
            if params.grad_metric_every > 0
                && agent.updates % params.grad_metric_every as u64 == 0
            {
                let indices =
                    runtime.buffer.sample_multitask(agent.batch_size(), &mut agent.rng)?;
                let batch = agent.prepare_batch(&runtime.buffer, &indices)?;
                let (targets, _) = agent.critic_target(&batch)?;
                let grads = agent.measure_task_gradients(&batch, &targets)?;
                let mut flat: Vec<Vec<f64>> = Vec::with_capacity(grads.len());
                for (task, g) in &grads {
                    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                    sink.record(MetricRecord {
                        step: agent.iterations,
                        task: Some(*task),
                        name: "critic_grad_norm".into(),
                        value: norm,
                        seed: params.seed,
                    });
                    flat.push(g.clone());
                }
                if flat.len() >= 2 {
                    let report = grad_conflict_rate(&flat).expect("two or more tasks");
                    sink.record(MetricRecord {
                        step: agent.iterations,
                        task: None,
                        name: "grad_conflict_rate".into(),
                        value: report.rate,
                        seed: params.seed,
                    });
                }
            }
        }

        let due = params.eval_interval > 0 && agent.iterations % params.eval_interval as u64 == 0;
        if due || agent.iterations == total {
            emit_eval(agent, params, &anchors, &mut td_sum, &mut td_count, sink)?;
        }
    }
    Ok(())
}

fn emit_eval(
    agent: &Agent,
    params: &TrainParams,
    anchors: &[ScoreAnchors],
    td_sum: &mut [f64],
    td_count: &mut [usize],
    sink: &mut dyn MetricsSink,
) -> Result<(), AgentError> {
    let step = agent.iterations;
    let outcomes = evaluate(agent, params.eval_episodes, anchors)?;
    for o in &outcomes {
        sink.record(MetricRecord {
            step,
            task: Some(o.task),
            name: "eval_return".into(),
            value: o.mean_return,
            seed: params.seed,
        });
        sink.record(MetricRecord {
            step,
            task: Some(o.task),
            name: "eval_score".into(),
            value: o.score,
            seed: params.seed,
        });
    }
    for task in 0..agent.num_tasks() {
        sink.record(MetricRecord {
            step,
            task: Some(task),
            name: "gbar".into(),
            value: agent.tracker.gbar(task)?,
            seed: params.seed,
        });
        sink.record(MetricRecord {
            step,
            task: Some(task),
            name: "lambda".into(),
            value: agent.tracker.entropy_correction(task)?,
            seed: params.seed,
        });
        if td_count[task] > 0 {
            sink.record(MetricRecord {
                step,
                task: Some(task),
                name: "td_loss".into(),
                value: td_sum[task] / td_count[task] as f64,
                seed: params.seed,
            });
            td_sum[task] = 0.0;
            td_count[task] = 0;
        }
        if agent.actor.is_some() {
            sink.record(MetricRecord {
                step,
                task: Some(task),
                name: "policy_entropy".into(),
                value: agent.tracker.entropy(task)?,
                seed: params.seed,
            });
        }
    }
    if agent.temperature.is_some() {
        sink.record(MetricRecord {
            step,
            task: None,
            name: "alpha".into(),
            value: agent.alpha(),
            seed: params.seed,
        });
    }
    sink.record(MetricRecord {
        step,
        task: None,
        name: "updates".into(),
        value: agent.updates as f64,
        seed: params.seed,
    });
    Ok(())
}
