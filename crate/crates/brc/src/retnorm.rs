//! Per-task return normalization: running maximum absolute Monte-Carlo
//! return, entropy correction, and sampling-time reward scaling.
//!
//! Stored replay rewards are never mutated; normalization is a view applied
//! when a batch is drawn, so later growth of the running maximum rescales old
//! transitions consistently.

use std::fmt;

/// Floor on Gbar + lambda so scaling stays finite before the first episode.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Decay of the per-task entropy EMA.
pub const ENTROPY_EMA_DECAY: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub enum RetNormError {
    UnknownTask { task: usize, num_tasks: usize },
    UndiscountedCorrection,
}

impl fmt::Display for RetNormError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RetNormError::UnknownTask { task, num_tasks } => {
                write!(f, "task id {task} out of range for {num_tasks} tasks")
            }
            RetNormError::UndiscountedCorrection => {
                write!(f, "entropy correction is unbounded at gamma = 1")
            }
        }
    }
}

impl std::error::Error for RetNormError {}

/// Per-task running maximum |Monte-Carlo return| plus the entropy state
/// feeding the correction term.
#[derive(Debug, Clone)]
pub struct ReturnTracker {
    gbar: Vec<f64>,
    entropy: Vec<f64>,
    pub v_max: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl ReturnTracker {
    pub fn new(num_tasks: usize, v_max: f64, alpha: f64, gamma: f64) -> Self {
        ReturnTracker {
            gbar: vec![0.0; num_tasks],
            entropy: vec![0.0; num_tasks],
            v_max,
            alpha,
            gamma,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.gbar.len()
    }

    fn check(&self, task: usize) -> Result<(), RetNormError> {
        if task < self.gbar.len() {
            Ok(())
        } else {
            Err(RetNormError::UnknownTask { task, num_tasks: self.gbar.len() })
        }
    }

    pub fn gbar(&self, task: usize) -> Result<f64, RetNormError> {
        self.check(task)?;
        Ok(self.gbar[task])
    }

    pub fn entropy(&self, task: usize) -> Result<f64, RetNormError> {
        self.check(task)?;
        Ok(self.entropy[task])
    }

    /// Fold an episode's Monte-Carlo returns into the running maximum:
    /// Gbar_i <- max(max_t |G_t|, Gbar_i).
    pub fn update_gbar(&mut self, task: usize, returns: &[f64]) -> Result<(), RetNormError> {
        self.check(task)?;
        let peak = returns.iter().fold(0.0f64, |acc, &g| acc.max(g.abs()));
        if peak > self.gbar[task] {
            self.gbar[task] = peak;
        }
        Ok(())
    }

    /// EMA update of the per-task policy entropy estimate from a batch-mean
    /// -log pi(a|s) sample.
    pub fn update_entropy(&mut self, task: usize, batch_mean_neg_logp: f64) -> Result<(), RetNormError> {
        self.check(task)?;
        self.entropy[task] =
            ENTROPY_EMA_DECAY * self.entropy[task] + (1.0 - ENTROPY_EMA_DECAY) * batch_mean_neg_logp;
        Ok(())
    }

    /// lambda_i = alpha * H_i / (1 - gamma).
    pub fn entropy_correction(&self, task: usize) -> Result<f64, RetNormError> {
        self.check(task)?;
        if self.gamma >= 1.0 {
            return Err(RetNormError::UndiscountedCorrection);
        }
        Ok(self.alpha * self.entropy[task] / (1.0 - self.gamma))
    }

    /// Multiplier v_max / (Gbar_i + lambda_i), floored away from division blowup.
    pub fn scale(&self, task: usize) -> Result<f64, RetNormError> {
        let denom = (self.gbar(task)? + self.entropy_correction(task)?).max(SCALE_FLOOR);
        Ok(self.v_max / denom)
    }

    /// Scale rewards into the categorical support: r * v_max / (Gbar + lambda).
    /// Applied at batch-sampling time; the stored buffer is untouched.
    pub fn normalize_rewards(&self, task: usize, rewards: &[f64]) -> Result<Vec<f64>, RetNormError> {
        let s = self.scale(task)?;
        Ok(rewards.iter().map(|&r| r * s).collect())
    }

    /// Inverse of the scaling, for converting normalized critic readouts back
    /// to raw-return units (used to bootstrap truncated episodes).
    pub fn unnormalize_value(&self, task: usize, value: f64) -> Result<f64, RetNormError> {
        Ok(value / self.scale(task)?)
    }
}

/// Discounted Monte-Carlo returns for every state of an episode:
/// G_t = sum_{k>=t} gamma^{k-t} r_k, with gamma^{T-t} * bootstrap_value added
/// when the episode was truncated rather than terminated.
pub fn episode_returns(
    rewards: &[f64],
    discount: f64,
    truncated: bool,
    bootstrap_value: f64,
) -> Vec<f64> {
    assert!(!rewards.is_empty(), "episode must contain at least one reward");
    let mut returns = vec![0.0; rewards.len()];
    let mut acc = if truncated { bootstrap_value } else { 0.0 };
    for (t, &r) in rewards.iter().enumerate().rev() {
        acc = r + discount * acc;
        returns[t] = acc;
    }
    returns
}
