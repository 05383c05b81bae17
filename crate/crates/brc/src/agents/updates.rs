//! Gradient-update machinery: soft distributional TD targets with two-critic
//! averaging, cross-entropy (or MSE) critic updates with embedding gradients,
//! the reparameterized actor update, temperature auto-tuning, and the
//! per-task gradient measurements used by the diagnostics.

use super::{Agent, AgentError, LossMode};
use crate::distributional::{bellman_shift, project, ValueDistribution};
use crate::experience::{Action, ActionSpace, MultiTaskBuffer};
use crate::nn::PolicyNet;
use crate::optim::{adamw_step, polyak_update};
use crate::tape::GradTape;

/// Materialized multi-task batch. Rewards are already normalized (unless the
/// raw-MSE variant is active) and n-step aggregated for the discrete agent;
/// `gamma_eff` carries gamma^m with the terminal mask folded in.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub m: usize,
    pub task_ids: Vec<usize>,
    pub obs_flat: Vec<f64>,
    pub next_obs_flat: Vec<f64>,
    pub cont_actions: Vec<f64>,
    pub disc_actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub gamma_eff: Vec<f64>,
}

impl PreparedBatch {
    pub fn subset(&self, rows: &[usize], obs_dim: usize, act_dim: usize) -> PreparedBatch {
        let pick_flat = |flat: &[f64], width: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(rows.len() * width);
            for &r in rows {
                out.extend_from_slice(&flat[r * width..(r + 1) * width]);
            }
            out
        };
        PreparedBatch {
            m: rows.len(),
            task_ids: rows.iter().map(|&r| self.task_ids[r]).collect(),
            obs_flat: pick_flat(&self.obs_flat, obs_dim),
            next_obs_flat: pick_flat(&self.next_obs_flat, obs_dim),
            cont_actions: if act_dim == 0 {
                Vec::new()
            } else {
                pick_flat(&self.cont_actions, act_dim)
            },
            disc_actions: rows.iter().map(|&r| self.disc_actions.get(r).copied().unwrap_or(0)).collect(),
            rewards: rows.iter().map(|&r| self.rewards[r]).collect(),
            gamma_eff: rows.iter().map(|&r| self.gamma_eff[r]).collect(),
        }
    }
}

/// Per-sample training targets.
#[derive(Debug, Clone)]
pub enum TargetValues {
    /// Projected distributions, m x n_atoms row-major.
    Categorical { probs_flat: Vec<f64> },
    /// Scalar TD targets.
    Scalar { values: Vec<f64> },
}

/// Next-action byproducts of target computation (continuous agent only).
#[derive(Debug, Clone, Default)]
pub struct TargetAux {
    /// Mean -log pi(a'|s') per task present in the batch.
    pub per_task_neg_logp: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct CriticUpdateReport {
    pub total_loss: f64,
    /// Mean per-sample loss for each task present in the batch, averaged
    /// over the critic ensemble. Length = number of distinct tasks in batch.
    pub per_task_loss: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct UpdateReport {
    pub critic: CriticUpdateReport,
    pub actor_loss: Option<f64>,
    pub alpha: f64,
}

impl Agent {
    /// Build a training batch from sampled (task, index) pairs. The discrete
    /// agent uses n-step windows; the continuous agent single transitions.
    pub fn prepare_batch(
        &self,
        buffer: &MultiTaskBuffer,
        indices: &[(usize, usize)],
    ) -> Result<PreparedBatch, AgentError> {
        let n = match self.action_space {
            ActionSpace::Discrete(_) => self.cfg.n_step,
            ActionSpace::Continuous(_) => 1,
        };
        let raw_rewards = matches!(self.variant.loss_mode(), LossMode::MseRaw);
        let mut scales = vec![1.0; self.num_tasks()];
        if !raw_rewards {
            for (t, s) in scales.iter_mut().enumerate() {
                *s = self.tracker.scale(t)?;
            }
        }
        let m = indices.len();
        let mut batch = PreparedBatch {
            m,
            task_ids: Vec::with_capacity(m),
            obs_flat: Vec::with_capacity(m * self.obs_dim),
            next_obs_flat: Vec::with_capacity(m * self.obs_dim),
            cont_actions: Vec::new(),
            disc_actions: Vec::new(),
            rewards: Vec::with_capacity(m),
            gamma_eff: Vec::with_capacity(m),
        };
        for &(task, idx) in indices {
            let view = buffer.buffer(task)?.n_step_view(idx, n, self.cfg.discount);
            batch.task_ids.push(task);
            batch.obs_flat.extend_from_slice(&view.obs);
            batch.next_obs_flat.extend_from_slice(&view.next_obs);
            match &view.action {
                Action::Continuous(a) => batch.cont_actions.extend_from_slice(a),
                Action::Discrete(a) => batch.disc_actions.push(*a),
            }
            batch.rewards.push(view.ret * scales[task]);
            let mask = if view.terminated { 0.0 } else { 1.0 };
            batch.gamma_eff.push(self.cfg.discount.powi(view.steps as i32) * mask);
        }
        Ok(batch)
    }

    /// Soft TD targets: sample a' from the policy (continuous) or pick the
    /// greedy action (discrete), mix the two target critics equally, shift by
    /// reward/discount/entropy-bonus, and project back onto the support.
    /// Truncated transitions bootstrap; only termination zeroes the discount.
    pub fn critic_target(
        &mut self,
        batch: &PreparedBatch,
    ) -> Result<(TargetValues, TargetAux), AgentError> {
        match self.action_space {
            ActionSpace::Continuous(da) => self.continuous_target(batch, da),
            ActionSpace::Discrete(na) => self.discrete_target(batch, na),
        }
    }

    fn continuous_target(
        &mut self,
        batch: &PreparedBatch,
        da: usize,
    ) -> Result<(TargetValues, TargetAux), AgentError> {
        let m = batch.m;
        let alpha = self.alpha();
        let noise: Vec<f64> =
            (0..m * da).map(|_| super::standard_normal(&mut self.rng)).collect();
        let actor = self.actor.as_ref().expect("continuous agent has an actor");
        let n_atoms = self.cfg.n_atoms;
        let categorical = matches!(self.variant.loss_mode(), LossMode::Categorical);

        let mut tape = GradTape::new();
        let ids = &batch.task_ids;
        let obs = tape.constant(&batch.next_obs_flat, m, self.obs_dim);
        let aug = match &self.embeddings {
            Some(table) => {
                let emb = table.lookup_on_tape(&mut tape, ids, true)?;
                tape.concat_cols(obs, emb)
            }
            None => obs,
        };
        let (mean, logstd) = actor.forward(&mut tape, aug, Some(ids), true)?;
        let (a2, logp) = PolicyNet::sample_with_log_prob(&mut tape, mean, logstd, &noise);
        let input = tape.concat_cols(aug, a2);

        let mut mixed = vec![0.0; if categorical { m * n_atoms } else { m }];
        for target in &self.targets {
            let logits = target.forward(&mut tape, input, Some(ids), true)?;
            let rows = tape.data(logits);
            if categorical {
                for r in 0..m {
                    let dist =
                        ValueDistribution::from_softmax(&rows[r * n_atoms..(r + 1) * n_atoms]);
                    for (acc, p) in
                        mixed[r * n_atoms..(r + 1) * n_atoms].iter_mut().zip(dist.probs())
                    {
                        *acc += p;
                    }
                }
            } else {
                for r in 0..m {
                    mixed[r] += rows[r];
                }
            }
        }
        let k = self.targets.len() as f64;
        for v in &mut mixed {
            *v /= k;
        }
        let logp_rows = tape.data(logp).to_vec();
        drop(tape);

        let aux = TargetAux { per_task_neg_logp: per_task_means(&batch.task_ids, logp_rows.iter().map(|&v| -v)) };

        if categorical {
            let mut probs_flat = Vec::with_capacity(m * n_atoms);
            for r in 0..m {
                let bonus = -alpha * logp_rows[r];
                let atoms = bellman_shift(batch.rewards[r], batch.gamma_eff[r], bonus, &self.support);
                let row = ValueDistribution::new(mixed[r * n_atoms..(r + 1) * n_atoms].to_vec())?;
                let projected = project(&atoms, &row, &self.support);
                probs_flat.extend_from_slice(projected.probs());
            }
            Ok((TargetValues::Categorical { probs_flat }, aux))
        } else {
            let values = (0..m)
                .map(|r| {
                    batch.rewards[r]
                        + batch.gamma_eff[r] * (mixed[r] - alpha * logp_rows[r])
                })
                .collect();
            Ok((TargetValues::Scalar { values }, aux))
        }
    }

    fn discrete_target(
        &mut self,
        batch: &PreparedBatch,
        na: usize,
    ) -> Result<(TargetValues, TargetAux), AgentError> {
        let m = batch.m;
        let n_atoms = self.cfg.n_atoms;
        let categorical = matches!(self.variant.loss_mode(), LossMode::Categorical);

        let mut tape = GradTape::new();
        let ids = &batch.task_ids;
        let obs = tape.constant(&batch.next_obs_flat, m, self.obs_dim);
        let aug = match &self.embeddings {
            Some(table) => {
                let emb = table.lookup_on_tape(&mut tape, ids, true)?;
                tape.concat_cols(obs, emb)
            }
            None => obs,
        };
        let width = if categorical { na * n_atoms } else { na };
        let mut mixed = vec![0.0; m * width];
        for target in &self.targets {
            let logits = target.forward(&mut tape, aug, Some(ids), true)?;
            let rows = tape.data(logits);
            if categorical {
                for r in 0..m {
                    for a in 0..na {
                        let block = &rows[r * width + a * n_atoms..r * width + (a + 1) * n_atoms];
                        let dist = ValueDistribution::from_softmax(block);
                        for (acc, p) in mixed
                            [r * width + a * n_atoms..r * width + (a + 1) * n_atoms]
                            .iter_mut()
                            .zip(dist.probs())
                        {
                            *acc += p;
                        }
                    }
                }
            } else {
                for (acc, v) in mixed.iter_mut().zip(rows) {
                    *acc += v;
                }
            }
        }
        let k = self.targets.len() as f64;
        for v in &mut mixed {
            *v /= k;
        }
        drop(tape);

        if categorical {
            let mut probs_flat = Vec::with_capacity(m * n_atoms);
            for r in 0..m {
                // Greedy action under the mixed target distributions.
                let means: Vec<f64> = (0..na)
                    .map(|a| {
                        let block =
                            &mixed[r * width + a * n_atoms..r * width + (a + 1) * n_atoms];
                        block.iter().zip(self.support.atoms()).map(|(&p, &z)| p * z).sum::<f64>()
                    })
                    .collect();
                let best = super::argmax_first(&means);
                let block =
                    mixed[r * width + best * n_atoms..r * width + (best + 1) * n_atoms].to_vec();
                let atoms = bellman_shift(batch.rewards[r], batch.gamma_eff[r], 0.0, &self.support);
                let projected = project(&atoms, &ValueDistribution::new(block)?, &self.support);
                probs_flat.extend_from_slice(projected.probs());
            }
            Ok((TargetValues::Categorical { probs_flat }, TargetAux::default()))
        } else {
            let values = (0..m)
                .map(|r| {
                    let best = mixed[r * width..(r + 1) * width]
                        .iter()
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max);
                    batch.rewards[r] + batch.gamma_eff[r] * best
                })
                .collect();
            Ok((TargetValues::Scalar { values }, TargetAux::default()))
        }
    }

    /// Cross-entropy (or squared-error) update of both online critics; one
    /// optimizer step each, with embedding-table gradients and L1 projection.
    pub fn critic_update(
        &mut self,
        batch: &PreparedBatch,
        targets: &TargetValues,
    ) -> Result<CriticUpdateReport, AgentError> {
        let m = batch.m;
        let ids = batch.task_ids.clone();
        let mut per_row_acc = vec![0.0; m];
        let total_value;
        {
            let mut tape = GradTape::new();
            let obs = tape.constant(&batch.obs_flat, m, self.obs_dim);
            let aug = match &self.embeddings {
                Some(table) => {
                    let emb = table.lookup_on_tape(&mut tape, &ids, false)?;
                    tape.concat_cols(obs, emb)
                }
                None => obs,
            };
            let input = match self.action_space {
                ActionSpace::Continuous(da) => {
                    let act = tape.constant(&batch.cont_actions, m, da);
                    tape.concat_cols(aug, act)
                }
                ActionSpace::Discrete(_) => aug,
            };
            let mut total = None;
            for critic in &self.critics {
                let logits = critic.forward(&mut tape, input, Some(&ids), false)?;
                let per_row = match targets {
                    TargetValues::Categorical { probs_flat } => {
                        tape.cross_entropy_probs(logits, probs_flat)
                    }
                    TargetValues::Scalar { values } => {
                        let pred = match self.action_space {
                            ActionSpace::Discrete(_) => {
                                tape.gather_col_blocks(logits, &batch.disc_actions, 1)
                            }
                            ActionSpace::Continuous(_) => logits,
                        };
                        let y = tape.constant(values, m, 1);
                        let d = tape.sub(pred, y);
                        tape.mul(d, d)
                    }
                };
                for (acc, v) in per_row_acc.iter_mut().zip(tape.data(per_row)) {
                    *acc += v / self.critics.len() as f64;
                }
                let loss = tape.mean_all(per_row);
                total = Some(match total {
                    Some(acc) => tape.add(acc, loss),
                    None => loss,
                });
            }
            let total = total.expect("at least one critic");
            total_value = tape.value(total);
            if !total_value.is_finite() {
                let tasks: Vec<usize> = dedup_sorted(&ids);
                let (rmin, rmax) = batch
                    .rewards
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                        (lo.min(r), hi.max(r))
                    });
                return Err(AgentError::NonFiniteLoss {
                    detail: format!(
                        "loss {total_value} on batch of {m} (tasks {tasks:?}, normalized rewards in [{rmin}, {rmax}])"
                    ),
                });
            }
            tape.backward(total)?;
        }
        for (critic, opt) in self.critics.iter_mut().zip(&mut self.critic_opts) {
            adamw_step(&mut critic.params, opt)?;
        }
        if let (Some(table), Some(opt)) = (&mut self.embeddings, &mut self.embedding_opt) {
            adamw_step(&mut table.params, opt)?;
            table.l1_project()?;
        }
        let per_task_loss = per_task_means(&ids, per_row_acc.iter().cloned());
        Ok(CriticUpdateReport { total_loss: total_value, per_task_loss })
    }

    /// Reparameterized policy-gradient step minimizing
    /// E[alpha * log pi(a|s,e) - mean-critic Q(s,a,e)]. Critic parameters and
    /// embeddings are constants on this tape: only the actor moves.
    /// Returns (loss, batch mean log pi, per-task mean -log pi).
    pub fn actor_update(
        &mut self,
        batch: &PreparedBatch,
    ) -> Result<(f64, f64, Vec<(usize, f64)>), AgentError> {
        let da = match self.action_space {
            ActionSpace::Continuous(da) => da,
            ActionSpace::Discrete(_) => {
                return Err(AgentError::InvalidConfig(
                    "actor_update applies to the continuous agent".into(),
                ))
            }
        };
        let m = batch.m;
        let alpha = self.alpha();
        let noise: Vec<f64> =
            (0..m * da).map(|_| super::standard_normal(&mut self.rng)).collect();
        let ids = batch.task_ids.clone();
        let actor = self.actor.as_ref().expect("continuous agent has an actor");
        let loss_value;
        let mean_logp;
        let per_task;
        {
            let mut tape = GradTape::new();
            let obs = tape.constant(&batch.obs_flat, m, self.obs_dim);
            let aug = match &self.embeddings {
                Some(table) => {
                    let emb = table.lookup_on_tape(&mut tape, &ids, true)?;
                    tape.concat_cols(obs, emb)
                }
                None => obs,
            };
            let (mean, logstd) = actor.forward(&mut tape, aug, Some(&ids), false)?;
            let (action, logp) = PolicyNet::sample_with_log_prob(&mut tape, mean, logstd, &noise);
            let input = tape.concat_cols(aug, action);
            let mut qsum = None;
            for critic in &self.critics {
                let logits = critic.forward(&mut tape, input, Some(&ids), true)?;
                let q = match self.variant.loss_mode() {
                    LossMode::Categorical => tape.softmax_dot(logits, self.support.atoms()),
                    _ => logits,
                };
                qsum = Some(match qsum {
                    Some(acc) => tape.add(acc, q),
                    None => q,
                });
            }
            let q_mean = tape.scale(qsum.expect("at least one critic"), 1.0 / self.critics.len() as f64);
            let weighted = tape.scale(logp, alpha);
            let obj = tape.sub(weighted, q_mean);
            let loss = tape.mean_all(obj);
            loss_value = tape.value(loss);
            let logp_rows = tape.data(logp).to_vec();
            mean_logp = logp_rows.iter().sum::<f64>() / m as f64;
            per_task = per_task_means(&ids, logp_rows.iter().map(|&v| -v));
            tape.backward(loss)?;
        }
        let opt = self.actor_opt.as_mut().expect("continuous agent has an actor optimizer");
        adamw_step(&mut self.actor.as_mut().expect("actor").params, opt)?;
        Ok((loss_value, mean_logp, per_task))
    }

    /// Auto-tuning step on log alpha toward the target entropy; keeps the
    /// tracker's live temperature in sync. Returns the new alpha.
    pub fn temperature_update(&mut self, batch_mean_logp: f64) -> Result<f64, AgentError> {
        let h_target = self.target_entropy();
        let (temp, opt) = match (&mut self.temperature, &mut self.temperature_opt) {
            (Some(t), Some(o)) => (t, o),
            _ => {
                return Err(AgentError::InvalidConfig(
                    "temperature_update applies to the continuous agent".into(),
                ))
            }
        };
        let grad = -(batch_mean_logp + h_target);
        temp.get("log_alpha")?.set_grad(&[grad]);
        adamw_step(temp, opt)?;
        let alpha = temp.get("log_alpha")?.data()[0].exp();
        self.tracker.alpha = alpha;
        Ok(alpha)
    }

    /// Polyak-average every online critic into its target.
    pub fn polyak_targets(&mut self) {
        for (critic, target) in self.critics.iter().zip(&mut self.targets) {
            polyak_update(&critic.params, &mut target.params, self.cfg.polyak_tau);
        }
    }

    /// One full gradient update: sample, target, critic step, actor and
    /// temperature steps (continuous), Polyak target update.
    pub fn update(&mut self, buffer: &MultiTaskBuffer) -> Result<UpdateReport, AgentError> {
        let indices = buffer.sample_multitask(self.batch_size(), &mut self.rng)?;
        let batch = self.prepare_batch(buffer, &indices)?;
        let (targets, _aux) = self.critic_target(&batch)?;
        let critic = self.critic_update(&batch, &targets)?;
        let mut actor_loss = None;
        if matches!(self.action_space, ActionSpace::Continuous(_)) {
            let (aloss, mean_logp, per_task_neg_logp) = self.actor_update(&batch)?;
            actor_loss = Some(aloss);
            for (task, neg_logp) in per_task_neg_logp {
                self.tracker.update_entropy(task, neg_logp)?;
            }
            self.temperature_update(mean_logp)?;
        }
        self.updates += 1;
        if self.cfg.target_update_freq > 0 && self.updates % self.cfg.target_update_freq as u64 == 0
        {
            self.polyak_targets();
        }
        Ok(UpdateReport { critic, actor_loss, alpha: self.alpha() })
    }

    /// Per-task critic gradients over the shared parameters, as flat vectors
    /// aligned across tasks. Embedding rows are excluded by construction;
    /// per-task heads are excluded in the separate-heads variant.
    pub fn measure_task_gradients(
        &mut self,
        batch: &PreparedBatch,
        targets: &TargetValues,
    ) -> Result<Vec<(usize, Vec<f64>)>, AgentError> {
        let act_dim = match self.action_space {
            ActionSpace::Continuous(da) => da,
            ActionSpace::Discrete(_) => 0,
        };
        let shared_only = self.embeddings.is_none();
        let tasks = dedup_sorted(&batch.task_ids);
        let mut out = Vec::with_capacity(tasks.len());
        for &task in &tasks {
            let rows: Vec<usize> = batch
                .task_ids
                .iter()
                .enumerate()
                .filter(|(_, &t)| t == task)
                .map(|(i, _)| i)
                .collect();
            let sub = batch.subset(&rows, self.obs_dim, act_dim);
            let sub_targets = match targets {
                TargetValues::Categorical { probs_flat } => {
                    let n = self.cfg.n_atoms;
                    let mut flat = Vec::with_capacity(rows.len() * n);
                    for &r in &rows {
                        flat.extend_from_slice(&probs_flat[r * n..(r + 1) * n]);
                    }
                    TargetValues::Categorical { probs_flat: flat }
                }
                TargetValues::Scalar { values } => {
                    TargetValues::Scalar { values: rows.iter().map(|&r| values[r]).collect() }
                }
            };
            for c in &self.critics {
                c.params.clear_grads();
            }
            {
                let mut tape = GradTape::new();
                let obs = tape.constant(&sub.obs_flat, sub.m, self.obs_dim);
                let aug = match &self.embeddings {
                    Some(table) => {
                        let emb = table.lookup_on_tape(&mut tape, &sub.task_ids, true)?;
                        tape.concat_cols(obs, emb)
                    }
                    None => obs,
                };
                let input = match self.action_space {
                    ActionSpace::Continuous(da) => {
                        let act = tape.constant(&sub.cont_actions, sub.m, da);
                        tape.concat_cols(aug, act)
                    }
                    ActionSpace::Discrete(_) => aug,
                };
                let mut total = None;
                for critic in &self.critics {
                    let logits = critic.forward(&mut tape, input, Some(&sub.task_ids), false)?;
                    let per_row = match &sub_targets {
                        TargetValues::Categorical { probs_flat } => {
                            tape.cross_entropy_probs(logits, probs_flat)
                        }
                        TargetValues::Scalar { values } => {
                            let pred = match self.action_space {
                                ActionSpace::Discrete(_) => {
                                    tape.gather_col_blocks(logits, &sub.disc_actions, 1)
                                }
                                ActionSpace::Continuous(_) => logits,
                            };
                            let y = tape.constant(values, sub.m, 1);
                            let d = tape.sub(pred, y);
                            tape.mul(d, d)
                        }
                    };
                    let loss = tape.mean_all(per_row);
                    total = Some(match total {
                        Some(acc) => tape.add(acc, loss),
                        None => loss,
                    });
                }
                tape.backward(total.expect("at least one critic"))?;
            }
            let mut flat = Vec::new();
            for critic in &self.critics {
                for (name, tensor) in critic.params.iter() {
                    if shared_only && name.starts_with("head") {
                        continue;
                    }
                    flat.extend_from_slice(&tensor.grad());
                }
            }
            for c in &self.critics {
                c.params.clear_grads();
            }
            out.push((task, flat));
        }
        Ok(out)
    }
}

fn dedup_sorted(ids: &[usize]) -> Vec<usize> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Group values by task id and average within each group (sorted by task).
fn per_task_means(ids: &[usize], values: impl Iterator<Item = f64>) -> Vec<(usize, f64)> {
    let vals: Vec<f64> = values.collect();
    let tasks = dedup_sorted(ids);
    tasks
        .into_iter()
        .map(|task| {
            let (sum, count) = ids
                .iter()
                .zip(&vals)
                .filter(|(&t, _)| t == task)
                .fold((0.0, 0usize), |(s, c), (_, &v)| (s + v, c + 1));
            (task, sum / count as f64)
        })
        .collect()
}
