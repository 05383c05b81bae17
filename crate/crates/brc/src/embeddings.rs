//! Learnable per-task embedding table, L1-normalized, concatenated to
//! observations. Trained only by the critic's TD gradient; the actor sees the
//! rows as constants. Includes the top-2 PCA export used for structure plots.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::HasParams;
use crate::tape::{GradTape, Var};
use crate::tensor::{ParameterSet, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingError {
    TaskOutOfRange { task: usize, num_tasks: usize },
    ZeroRow { row: usize },
    TooFewTasks { num_tasks: usize },
}

impl fmt::Display for EmbeddingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbeddingError::TaskOutOfRange { task, num_tasks } => {
                write!(f, "task id {task} out of range for {num_tasks} tasks")
            }
            EmbeddingError::ZeroRow { row } => {
                write!(f, "embedding row {row} is all zero and cannot be L1-normalized")
            }
            EmbeddingError::TooFewTasks { num_tasks } => {
                write!(f, "PCA needs at least 2 tasks, got {num_tasks}")
            }
        }
    }
}

impl std::error::Error for EmbeddingError {}

const TABLE: &str = "table";

#[derive(Debug, Clone)]
pub struct TaskEmbeddingTable {
    pub params: ParameterSet,
    num_tasks: usize,
    dim: usize,
}

impl TaskEmbeddingTable {
    /// Rows sampled uniform in [-1, 1]^d, then L1-projected.
    pub fn new(num_tasks: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let data: Vec<f64> =
            (0..num_tasks * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut table = Self::from_rows_unchecked(num_tasks, dim, data);
        table.l1_project().expect("uniform init rows are nonzero almost surely");
        table
    }

    pub fn from_matrix(num_tasks: usize, dim: usize, data: Vec<f64>) -> Result<Self, EmbeddingError> {
        assert_eq!(data.len(), num_tasks * dim, "matrix size mismatch");
        let mut table = Self::from_rows_unchecked(num_tasks, dim, data);
        table.l1_project()?;
        Ok(table)
    }

    fn from_rows_unchecked(num_tasks: usize, dim: usize, data: Vec<f64>) -> Self {
        let mut params = ParameterSet::new();
        params
            .insert(TABLE, Tensor::from_vec(&[num_tasks, dim], data).expect("table shape"))
            .expect("fresh set");
        TaskEmbeddingTable { params, num_tasks, dim }
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        self.params.get(TABLE).expect("table present").data()
    }

    /// Current row for a task.
    pub fn lookup(&self, task: usize) -> Result<Vec<f64>, EmbeddingError> {
        if task >= self.num_tasks {
            return Err(EmbeddingError::TaskOutOfRange { task, num_tasks: self.num_tasks });
        }
        Ok(self.matrix()[task * self.dim..(task + 1) * self.dim].to_vec())
    }

    /// Differentiable batched lookup; gradients scatter into the table unless
    /// `frozen` (the actor and temperature paths treat rows as constants).
    pub fn lookup_on_tape<'p>(
        &'p self,
        tape: &mut GradTape<'p>,
        task_ids: &[usize],
        frozen: bool,
    ) -> Result<Var, EmbeddingError> {
        for &t in task_ids {
            if t >= self.num_tasks {
                return Err(EmbeddingError::TaskOutOfRange { task: t, num_tasks: self.num_tasks });
            }
        }
        let tensor = self.params.get(TABLE).expect("table present");
        let node = if frozen {
            tape.constant(tensor.data(), self.num_tasks, self.dim)
        } else {
            tape.param(tensor)
        };
        Ok(tape.gather_rows(node, task_ids))
    }

    /// Divide each row by its L1 norm. Applied after every optimizer step
    /// that touches the table.
    pub fn l1_project(&mut self) -> Result<(), EmbeddingError> {
        let dim = self.dim;
        let data = self.params.get_mut(TABLE).expect("table present").data_mut();
        for row in 0..data.len() / dim {
            let slice = &mut data[row * dim..(row + 1) * dim];
            let norm: f64 = slice.iter().map(|v| v.abs()).sum();
            if norm == 0.0 {
                return Err(EmbeddingError::ZeroRow { row });
            }
            for v in slice.iter_mut() {
                *v /= norm;
            }
        }
        Ok(())
    }

    /// Append a row for a new task (transfer protocols), L1-projected.
    pub fn append_row(&mut self, row: Vec<f64>) -> Result<usize, EmbeddingError> {
        assert_eq!(row.len(), self.dim, "appended row has wrong dimension");
        let norm: f64 = row.iter().map(|v| v.abs()).sum();
        if norm == 0.0 {
            return Err(EmbeddingError::ZeroRow { row: self.num_tasks });
        }
        let mut data = self.matrix().to_vec();
        data.extend(row.iter().map(|v| v / norm));
        self.num_tasks += 1;
        let mut params = ParameterSet::new();
        params
            .insert(TABLE, Tensor::from_vec(&[self.num_tasks, self.dim], data).expect("shape"))
            .expect("fresh set");
        params.set_step(self.params.step());
        self.params = params;
        Ok(self.num_tasks - 1)
    }

    /// Mean of all rows (the new-task prior used by model transfer).
    pub fn mean_row(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for t in 0..self.num_tasks {
            for j in 0..self.dim {
                out[j] += self.matrix()[t * self.dim + j];
            }
        }
        for v in &mut out {
            *v /= self.num_tasks as f64;
        }
        out
    }

    /// Project rows onto the top-2 principal components of the row covariance.
    /// Sign convention: each component's largest-magnitude entry is positive.
    pub fn pca_top2(&self) -> Result<Vec<[f64; 2]>, EmbeddingError> {
        if self.num_tasks < 2 {
            return Err(EmbeddingError::TooFewTasks { num_tasks: self.num_tasks });
        }
        let (n, d) = (self.num_tasks, self.dim);
        let data = self.matrix();
        let mut mean = vec![0.0; d];
        for t in 0..n {
            for j in 0..d {
                mean[j] += data[t * d + j];
            }
        }
        for v in &mut mean {
            *v /= n as f64;
        }
        let centered: Vec<f64> = (0..n * d).map(|i| data[i] - mean[i % d]).collect();
        // Sample covariance (divisor n-1); the projection coordinates do not
        // depend on the divisor.
        let mut cov = vec![0.0; d * d];
        for t in 0..n {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += centered[t * d + i] * centered[t * d + j];
                }
            }
        }
        for v in &mut cov {
            *v /= (n - 1) as f64;
        }
        let (eigvals, eigvecs) = jacobi_eigen(&cov, d);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).expect("finite eigenvalues"));
        let mut components = [vec![0.0; d], vec![0.0; d]];
        for (c, comp) in components.iter_mut().enumerate() {
            if c < order.len() {
                let col = order[c];
                for j in 0..d {
                    comp[j] = eigvecs[j * d + col];
                }
                // Fix the sign so the largest-magnitude entry is positive.
                let lead = comp
                    .iter()
                    .cloned()
                    .max_by(|a, b| a.abs().partial_cmp(&b.abs()).expect("finite"))
                    .unwrap_or(0.0);
                if lead < 0.0 {
                    for v in comp.iter_mut() {
                        *v = -*v;
                    }
                }
            }
        }
        let coords = (0..n)
            .map(|t| {
                let row = &centered[t * d..(t + 1) * d];
                [
                    row.iter().zip(&components[0]).map(|(&x, &v)| x * v).sum(),
                    row.iter().zip(&components[1]).map(|(&x, &v)| x * v).sum(),
                ]
            })
            .collect();
        Ok(coords)
    }
}

impl HasParams for TaskEmbeddingTable {
    fn params(&self) -> &ParameterSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }
}

/// Concatenation [obs || embedding], used identically for actor and critic
/// inputs in proprioceptive mode.
pub fn augment_observation(obs: &[f64], embedding: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(obs.len() + embedding.len());
    out.extend_from_slice(obs);
    out.extend_from_slice(embedding);
    out
}

/// Cyclic Jacobi eigendecomposition of a symmetric d x d matrix (row-major).
/// Returns eigenvalues and the eigenvector matrix with eigenvectors as columns.
fn jacobi_eigen(matrix: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigvals = (0..d).map(|i| a[i * d + i]).collect();
    (eigvals, v)
}
