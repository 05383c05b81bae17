//! Reverse-mode automatic differentiation on a recorded operation tape.
//!
//! The tape owns an arena of 2-D buffers (scalars are 1x1, vectors 1xN).
//! Forward calls append nodes; `backward` replays them in reverse and
//! pushes vector-Jacobian products toward the leaves. Parameters are
//! registered from borrowed [`Tensor`]s and receive their accumulated
//! gradients when the backward pass finishes.

use std::fmt;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum TapeError {
    /// A `Var` did not come from this tape (or no forward pass was run).
    ForeignVar,
    /// Backward was seeded from a non-scalar node.
    NonScalarLoss { numel: usize },
}

impl fmt::Display for TapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapeError::ForeignVar => write!(f, "variable was not produced under this tape"),
            TapeError::NonScalarLoss { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
        }
    }
}

impl std::error::Error for TapeError {}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    /// Row-broadcast add: [m,n] + [1,n].
    AddRow { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddConst { a: Var },
    Relu { a: Var },
    Tanh { a: Var },
    Exp { a: Var },
    Softplus { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    SumAll { a: Var },
    MeanAll { a: Var },
    RowSum { a: Var },
    ConcatCols { a: Var, b: Var },
    GatherRows { table: Var, ids: Vec<usize> },
    SelectRows { a: Var, ids: Vec<usize> },
    ScatterRows { a: Var, ids: Vec<usize> },
    /// Per-row block selection out of [m, blocks*block]: row r keeps block `ids[r]`.
    GatherColBlocks { a: Var, ids: Vec<usize>, block: usize },
    LayerNorm { x: Var, scale: Var, shift: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    /// Per-row -sum(target * log softmax(logits)); softmax saved for backward.
    CrossEntropyProbs { logits: Var, target: Vec<f64>, softmax: Vec<f64> },
    /// Per-row sum_j softmax(logits)_j * w_j; softmax saved for backward.
    SoftmaxDot { logits: Var, weights: Vec<f64>, softmax: Vec<f64> },
}

struct Node {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Recording tape. Borrows every registered parameter tensor for its
/// lifetime; `backward` writes accumulated gradients back through those
/// borrows when it completes.
pub struct GradTape<'p> {
    nodes: Vec<Node>,
    params: Vec<(usize, &'p Tensor)>,
}

impl<'p> Default for GradTape<'p> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> GradTape<'p> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new(), params: Vec::new() }
    }

    fn push(&mut self, data: Vec<f64>, rows: usize, cols: usize, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node { data, rows, cols, needs_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    /// Register a parameter. Its gradient is written back on `backward`.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        let (r, c) = t.rows_cols();
        let v = self.push(t.data().to_vec(), r, c, true, Op::Leaf);
        self.params.push((v.0, t));
        v
    }

    /// Register a constant leaf; no gradient flows into it.
    pub fn constant(&mut self, data: &[f64], rows: usize, cols: usize) -> Var {
        assert_eq!(data.len(), rows * cols, "constant shape mismatch");
        self.push(data.to_vec(), rows, cols, false, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.push(vec![v], 1, 1, false, Op::Leaf)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient accumulated at a node, if any flowed there.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    // -- ops ------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul inner dimensions differ: {ka} vs {kb}");
        let mut out = vec![0.0; m * n];
        dgemm_rowmajor(
            m, ka, n,
            self.data(a), false,
            self.data(b), false,
            &mut out, 0.0,
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(out, m, n, ng, Op::Matmul { a, b })
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.shape(a);
        let (rb, nb) = self.shape(b);
        assert_eq!((rb, nb), (1, n), "bias must be a single row of width {n}");
        let mut out = self.data(a).to_vec();
        let bias = self.data(b).to_vec();
        for r in 0..m {
            for j in 0..n {
                out[r * n + j] += bias[j];
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, m, n, ng, Op::AddRow { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!((m, n), self.shape(b), "elementwise shape mismatch");
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(out, m, n, ng, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.data(a).iter().map(|&x| x * c).collect();
        let ng = self.needs(a);
        self.push(out, m, n, ng, Op::Scale { a, c })
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.data(a).iter().map(|&x| x + c).collect();
        let ng = self.needs(a);
        self.push(out, m, n, ng, Op::AddConst { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(out, m, n, ng, Op::Relu { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.tanh()).collect();
        let ng = self.needs(a);
        self.push(out, m, n, ng, Op::Tanh { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.exp()).collect();
        let ng = self.needs(a);
        self.push(out, m, n, ng, Op::Exp { a })
    }

    /// Numerically stable log(1 + exp(x)).
    pub fn softplus(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
            .collect();
        let ng = self.needs(a);
        self.push(out, m, n, ng, Op::Softplus { a })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.clamp(lo, hi)).collect();
        let ng = self.needs(a);
        self.push(out, m, n, ng, Op::Clamp { a, lo, hi })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let ng = self.needs(a);
        self.push(vec![s], 1, 1, ng, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len();
        let s: f64 = self.data(a).iter().sum::<f64>() / n as f64;
        let ng = self.needs(a);
        self.push(vec![s], 1, 1, ng, Op::MeanAll { a })
    }

    /// Sum over columns: [m,n] -> [m,1].
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let data = self.data(a);
        let out: Vec<f64> = (0..m).map(|r| data[r * n..(r + 1) * n].iter().sum()).collect();
        let ng = self.needs(a);
        self.push(out, m, 1, ng, Op::RowSum { a })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (m, na) = self.shape(a);
        let (mb, nb) = self.shape(b);
        assert_eq!(m, mb, "concat_cols row mismatch");
        let mut out = Vec::with_capacity(m * (na + nb));
        let (da, db) = (self.data(a).to_vec(), self.data(b).to_vec());
        for r in 0..m {
            out.extend_from_slice(&da[r * na..(r + 1) * na]);
            out.extend_from_slice(&db[r * nb..(r + 1) * nb]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, m, na + nb, ng, Op::ConcatCols { a, b })
    }

    /// Row lookup: out[r] = table[ids[r]]. Gradients scatter-add into the table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let (k, d) = self.shape(table);
        let data = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < k, "row index {id} out of range for table with {k} rows");
            out.extend_from_slice(&data[id * d..(id + 1) * d]);
        }
        let ng = self.needs(table);
        self.push(out, ids.len(), d, ng, Op::GatherRows { table, ids: ids.to_vec() })
    }

    pub fn select_rows(&mut self, a: Var, ids: &[usize]) -> Var {
        let (m, n) = self.shape(a);
        let data = self.data(a);
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            assert!(id < m, "row index {id} out of range for {m} rows");
            out.extend_from_slice(&data[id * n..(id + 1) * n]);
        }
        let ng = self.needs(a);
        self.push(out, ids.len(), n, ng, Op::SelectRows { a, ids: ids.to_vec() })
    }

    /// Place row j of `a` at row `ids[j]` of an otherwise-zero [rows, n] output.
    /// Indices must be unique.
    pub fn scatter_rows(&mut self, a: Var, ids: &[usize], rows: usize) -> Var {
        let (k, n) = self.shape(a);
        assert_eq!(k, ids.len(), "scatter_rows index count mismatch");
        let data = self.data(a);
        let mut out = vec![0.0; rows * n];
        for (j, &id) in ids.iter().enumerate() {
            assert!(id < rows, "row index {id} out of range for {rows} rows");
            out[id * n..(id + 1) * n].copy_from_slice(&data[j * n..(j + 1) * n]);
        }
        let ng = self.needs(a);
        self.push(out, rows, n, ng, Op::ScatterRows { a, ids: ids.to_vec() })
    }

    /// Per-row block selection: out[r] = a[r, ids[r]*block .. (ids[r]+1)*block].
    pub fn gather_col_blocks(&mut self, a: Var, ids: &[usize], block: usize) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(m, ids.len(), "one block index per row required");
        assert_eq!(n % block, 0, "width {n} not divisible by block {block}");
        let data = self.data(a);
        let mut out = Vec::with_capacity(m * block);
        for (r, &id) in ids.iter().enumerate() {
            let start = r * n + id * block;
            assert!((id + 1) * block <= n, "block index {id} out of range");
            out.extend_from_slice(&data[start..start + block]);
        }
        let ng = self.needs(a);
        self.push(out, m, block, ng, Op::GatherColBlocks { a, ids: ids.to_vec(), block })
    }

    /// Per-row layer normalization with affine parameters, biased variance.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(scale), (1, n), "layer_norm scale width mismatch");
        assert_eq!(self.shape(shift), (1, n), "layer_norm shift width mismatch");
        let data = self.data(x).to_vec();
        let sc = self.data(scale).to_vec();
        let sh = self.data(shift).to_vec();
        let mut out = vec![0.0; m * n];
        let mut means = vec![0.0; m];
        let mut inv_stds = vec![0.0; m];
        for r in 0..m {
            let row = &data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            inv_stds[r] = inv_std;
            for j in 0..n {
                out[r * n + j] = (row[j] - mean) * inv_std * sc[j] + sh[j];
            }
        }
        let ng = self.needs(x) || self.needs(scale) || self.needs(shift);
        self.push(out, m, n, ng, Op::LayerNorm { x, scale, shift, mean: means, inv_std: inv_stds })
    }

    /// Per-row cross-entropy against fixed target probabilities: [m,1] losses.
    pub fn cross_entropy_probs(&mut self, logits: Var, target: &[f64]) -> Var {
        let (m, n) = self.shape(logits);
        assert_eq!(target.len(), m * n, "target length mismatch");
        let data = self.data(logits);
        let mut softmax = vec![0.0; m * n];
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let row = &data[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                softmax[r * n + j] = e;
                z += e;
            }
            let log_z = z.ln() + max;
            let mut loss = 0.0;
            for j in 0..n {
                softmax[r * n + j] /= z;
                let t = target[r * n + j];
                if t != 0.0 {
                    loss -= t * (row[j] - log_z);
                }
            }
            out.push(loss);
        }
        let ng = self.needs(logits);
        self.push(out, m, 1, ng, Op::CrossEntropyProbs { logits, target: target.to_vec(), softmax })
    }

    /// Per-row expected value under softmax(logits): out[r] = sum_j p_rj * w_j.
    pub fn softmax_dot(&mut self, logits: Var, weights: &[f64]) -> Var {
        let (m, n) = self.shape(logits);
        assert_eq!(weights.len(), n, "weight length mismatch");
        let data = self.data(logits);
        let mut softmax = vec![0.0; m * n];
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let row = &data[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                softmax[r * n + j] = e;
                z += e;
            }
            let mut dot = 0.0;
            for j in 0..n {
                softmax[r * n + j] /= z;
                dot += softmax[r * n + j] * weights[j];
            }
            out.push(dot);
        }
        let ng = self.needs(logits);
        self.push(out, m, 1, ng, Op::SoftmaxDot { logits, weights: weights.to_vec(), softmax })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // -- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Parameter gradients accumulate
    /// into the registered tensors; repeated backward calls keep adding
    /// until the grads are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<(), TapeError> {
        if loss.0 >= self.nodes.len() {
            return Err(TapeError::ForeignVar);
        }
        let numel = self.nodes[loss.0].data.len();
        if numel != 1 {
            return Err(TapeError::NonScalarLoss { numel });
        }
        self.add_grad(loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let dout = self.nodes[i].grad.clone().unwrap();
            self.backward_op(&op, &dout);
        }
        for (node, tensor) in &self.params {
            if let Some(g) = &self.nodes[*node].grad {
                tensor.accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, contribution: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => node.grad = Some(contribution.to_vec()),
        }
    }

    fn add_grad_owned(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contribution) {
                    *gi += ci;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    fn backward_op(&mut self, op: &Op, dout: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.shape(*a);
                let (_, n) = self.shape(*b);
                if self.needs(*a) {
                    // dA = dOut . B^T
                    let mut da = vec![0.0; m * k];
                    dgemm_rowmajor(m, n, k, dout, false, self.data(*b), true, &mut da, 0.0);
                    self.add_grad_owned(*a, da);
                }
                if self.needs(*b) {
                    // dB = A^T . dOut
                    let mut db = vec![0.0; k * n];
                    dgemm_rowmajor(k, m, n, self.data(*a), true, dout, false, &mut db, 0.0);
                    self.add_grad_owned(*b, db);
                }
            }
            Op::AddRow { a, b } => {
                let (m, n) = self.shape(*a);
                self.add_grad(*a, dout);
                if self.needs(*b) {
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            db[j] += dout[r * n + j];
                        }
                    }
                    self.add_grad_owned(*b, db);
                }
            }
            Op::Add { a, b } => {
                self.add_grad(*a, dout);
                self.add_grad(*b, dout);
            }
            Op::Sub { a, b } => {
                self.add_grad(*a, dout);
                if self.needs(*b) {
                    let neg: Vec<f64> = dout.iter().map(|&g| -g).collect();
                    self.add_grad_owned(*b, neg);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<f64> =
                        dout.iter().zip(self.data(*b)).map(|(&g, &y)| g * y).collect();
                    self.add_grad_owned(*a, da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> =
                        dout.iter().zip(self.data(*a)).map(|(&g, &x)| g * x).collect();
                    self.add_grad_owned(*b, db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = dout.iter().map(|&g| g * c).collect();
                self.add_grad_owned(*a, da);
            }
            Op::AddConst { a } => self.add_grad(*a, dout),
            Op::Relu { a } => {
                let da: Vec<f64> = dout
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.add_grad_owned(*a, da);
            }
            Op::Tanh { a } => {
                let da: Vec<f64> = dout
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&g, &x)| {
                        let y = x.tanh();
                        g * (1.0 - y * y)
                    })
                    .collect();
                self.add_grad_owned(*a, da);
            }
            Op::Exp { a } => {
                let da: Vec<f64> = dout
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&g, &x)| g * x.exp())
                    .collect();
                self.add_grad_owned(*a, da);
            }
            Op::Softplus { a } => {
                let da: Vec<f64> = dout
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&g, &x)| g / (1.0 + (-x).exp()))
                    .collect();
                self.add_grad_owned(*a, da);
            }
            Op::Clamp { a, lo, hi } => {
                let da: Vec<f64> = dout
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&g, &x)| if x > *lo && x < *hi { g } else { 0.0 })
                    .collect();
                self.add_grad_owned(*a, da);
            }
            Op::SumAll { a } => {
                let n = self.nodes[a.0].data.len();
                self.add_grad_owned(*a, vec![dout[0]; n]);
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].data.len();
                self.add_grad_owned(*a, vec![dout[0] / n as f64; n]);
            }
            Op::RowSum { a } => {
                let (m, n) = self.shape(*a);
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    for j in 0..n {
                        da[r * n + j] = dout[r];
                    }
                }
                self.add_grad_owned(*a, da);
            }
            Op::ConcatCols { a, b } => {
                let (m, na) = self.shape(*a);
                let (_, nb) = self.shape(*b);
                let n = na + nb;
                if self.needs(*a) {
                    let mut da = vec![0.0; m * na];
                    for r in 0..m {
                        da[r * na..(r + 1) * na].copy_from_slice(&dout[r * n..r * n + na]);
                    }
                    self.add_grad_owned(*a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; m * nb];
                    for r in 0..m {
                        db[r * nb..(r + 1) * nb]
                            .copy_from_slice(&dout[r * n + na..(r + 1) * n]);
                    }
                    self.add_grad_owned(*b, db);
                }
            }
            Op::GatherRows { table, ids } => {
                let (k, d) = self.shape(*table);
                let mut dt = vec![0.0; k * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += dout[r * d + j];
                    }
                }
                self.add_grad_owned(*table, dt);
            }
            Op::SelectRows { a, ids } => {
                let (m, n) = self.shape(*a);
                let mut da = vec![0.0; m * n];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..n {
                        da[id * n + j] += dout[r * n + j];
                    }
                }
                self.add_grad_owned(*a, da);
            }
            Op::ScatterRows { a, ids } => {
                let (k, n) = self.shape(*a);
                let mut da = vec![0.0; k * n];
                for (j, &id) in ids.iter().enumerate() {
                    da[j * n..(j + 1) * n].copy_from_slice(&dout[id * n..(id + 1) * n]);
                }
                self.add_grad_owned(*a, da);
            }
            Op::GatherColBlocks { a, ids, block } => {
                let (m, n) = self.shape(*a);
                let mut da = vec![0.0; m * n];
                for (r, &id) in ids.iter().enumerate() {
                    let start = r * n + id * block;
                    da[start..start + block]
                        .copy_from_slice(&dout[r * block..(r + 1) * block]);
                }
                self.add_grad_owned(*a, da);
            }
            Op::LayerNorm { x, scale, shift, mean, inv_std } => {
                let (m, n) = self.shape(*x);
                let data = self.data(*x).to_vec();
                let sc = self.data(*scale).to_vec();
                let mut dx = vec![0.0; m * n];
                let mut dscale = vec![0.0; n];
                let mut dshift = vec![0.0; n];
                for r in 0..m {
                    let row = &data[r * n..(r + 1) * n];
                    let g = &dout[r * n..(r + 1) * n];
                    let istd = inv_std[r];
                    let mu = mean[r];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..n {
                        let xhat = (row[j] - mu) * istd;
                        let dxhat = g[j] * sc[j];
                        dscale[j] += g[j] * xhat;
                        dshift[j] += g[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let inv_n = 1.0 / n as f64;
                    for j in 0..n {
                        let xhat = (row[j] - mu) * istd;
                        let dxhat = g[j] * sc[j];
                        dx[r * n + j] =
                            istd * (dxhat - sum_dxhat * inv_n - xhat * sum_dxhat_xhat * inv_n);
                    }
                }
                if self.needs(*x) {
                    self.add_grad_owned(*x, dx);
                }
                if self.needs(*scale) {
                    self.add_grad_owned(*scale, dscale);
                }
                if self.needs(*shift) {
                    self.add_grad_owned(*shift, dshift);
                }
            }
            Op::CrossEntropyProbs { logits, target, softmax } => {
                let (m, n) = self.shape(*logits);
                let mut dl = vec![0.0; m * n];
                for r in 0..m {
                    for j in 0..n {
                        dl[r * n + j] = dout[r] * (softmax[r * n + j] - target[r * n + j]);
                    }
                }
                self.add_grad_owned(*logits, dl);
            }
            Op::SoftmaxDot { logits, weights, softmax } => {
                let (m, n) = self.shape(*logits);
                let mut dl = vec![0.0; m * n];
                for r in 0..m {
                    let p = &softmax[r * n..(r + 1) * n];
                    let dot: f64 = p.iter().zip(weights).map(|(&pi, &wi)| pi * wi).sum();
                    for j in 0..n {
                        dl[r * n + j] = dout[r] * p[j] * (weights[j] - dot);
                    }
                }
                self.add_grad_owned(*logits, dl);
            }
        }
    }
}

/// Row-major GEMM: C = alpha*op(A)*op(B) + beta*C with alpha = 1.
/// Transposition is expressed through strides, so no data is copied.
fn dgemm_rowmajor(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(c.len(), m * n);
    // Strides of an [m,k] operand: row-major (k,1); when the buffer actually
    // holds the transpose [k,m], reading it as [m,k] uses strides (1,m).
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(),
            n as isize, 1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_forward_and_backward() {
        // loss = sum(W.x) with x = (1, 2): dW rows are (1, 2).
        let w = Tensor::from_vec(&[2, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let mut tape = GradTape::new();
        let wv = tape.param(&w);
        let xv = tape.constant(&[1.0, 2.0], 2, 1);
        let y = tape.matmul(wv, xv);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(*w.grad(), vec![1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn disconnected_parameter_gets_zero_grad() {
        let used = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let unused = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let mut tape = GradTape::new();
        let uv = tape.param(&used);
        let _nv = tape.param(&unused);
        let loss = tape.sum_all(uv);
        tape.backward(loss).unwrap();
        assert_eq!(*used.grad(), vec![1.0, 1.0]);
        assert_eq!(*unused.grad(), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_accumulates_until_cleared() {
        let t = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        for _ in 0..2 {
            let mut tape = GradTape::new();
            let v = tape.param(&t);
            let loss = tape.sum_all(v);
            tape.backward(loss).unwrap();
        }
        assert_eq!(*t.grad(), vec![2.0, 2.0]);
        t.clear_grad();
        assert_eq!(*t.grad(), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let t = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let mut tape = GradTape::new();
        let v = tape.param(&t);
        assert_eq!(tape.backward(v), Err(TapeError::NonScalarLoss { numel: 2 }));
    }

    #[test]
    fn backward_rejects_foreign_var() {
        let mut empty = GradTape::new();
        assert_eq!(empty.backward(Var(0)), Err(TapeError::ForeignVar));
    }

    #[test]
    fn cross_entropy_matches_hand_computation() {
        // Uniform prediction over 4 atoms, one-hot target: loss = ln 4.
        let logits = Tensor::from_vec(&[4], vec![0.0; 4]).unwrap();
        let mut tape = GradTape::new();
        let lv = tape.param(&logits);
        let loss_row = tape.cross_entropy_probs(lv, &[0.0, 1.0, 0.0, 0.0]);
        let loss = tape.sum_all(loss_row);
        assert!((tape.value(loss) - 4.0f64.ln()).abs() < 1e-12);
        tape.backward(loss).unwrap();
        // gradient = softmax - target
        let g = logits.grad_vec();
        assert!((g[0] - 0.25).abs() < 1e-12);
        assert!((g[1] + 0.75).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 3.0]).unwrap();
        let scale = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let shift = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let mut tape = GradTape::new();
        let xv = tape.param(&x);
        let sc = tape.param(&scale);
        let sh = tape.param(&shift);
        let y = tape.layer_norm(xv, sc, sh, 1e-5);
        let out = tape.data(y);
        assert!((out[0] + 1.0).abs() < 1e-4);
        assert!((out[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn softmax_dot_is_expected_value() {
        let logits = Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let mut tape = GradTape::new();
        let lv = tape.param(&logits);
        let v = tape.softmax_dot(lv, &[-1.0, 0.0, 1.0]);
        assert!(tape.value(v).abs() < 1e-12);
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let table = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut tape = GradTape::new();
        let tv = tape.param(&table);
        let rows = tape.gather_rows(tv, &[2, 0, 2]);
        let loss = tape.sum_all(rows);
        tape.backward(loss).unwrap();
        assert_eq!(*table.grad(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
