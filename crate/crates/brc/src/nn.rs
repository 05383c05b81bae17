//! Network building blocks: dense layers, layer normalization, the residual
//! critic body, and the tanh-Gaussian policy head.
//!
//! Parameters live in each network's [`ParameterSet`]; the layer structs hold
//! names and dimensions and fetch their tensors at forward time. A `frozen`
//! forward registers parameters as tape constants, so no gradient flows into
//! them (used for target networks and for the critic inside the actor loss).

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{GradTape, Var};
use crate::tensor::{ParameterSet, Tensor, TensorError};

const LN_2PI: f64 = 1.8378770664093453;
const LN_2: f64 = std::f64::consts::LN_2;

/// Default epsilon for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub enum NnError {
    ShapeMismatch { layer: String, expected: usize, got: usize },
    MissingTaskIds { layer: String },
    Param(TensorError),
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::ShapeMismatch { layer, expected, got } => {
                write!(f, "layer '{layer}' expected input width {expected}, got {got}")
            }
            NnError::MissingTaskIds { layer } => {
                write!(f, "layer '{layer}' has per-task heads and needs task ids")
            }
            NnError::Param(e) => write!(f, "parameter error: {e}"),
        }
    }
}

impl std::error::Error for NnError {}

impl From<TensorError> for NnError {
    fn from(e: TensorError) -> Self {
        NnError::Param(e)
    }
}

/// Fan-in scaled uniform init: U(-1/sqrt(in), 1/sqrt(in)).
fn fan_in_uniform(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Tensor {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let data: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(&[in_dim, out_dim], data).expect("init shape")
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new(name: &str, in_dim: usize, out_dim: usize) -> Self {
        DenseLayer { name: name.to_string(), in_dim, out_dim }
    }

    fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn register(
        &self,
        params: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        zero_init: bool,
    ) -> Result<(), TensorError> {
        let w = if zero_init {
            Tensor::zeros(&[self.in_dim, self.out_dim])
        } else {
            fan_in_uniform(rng, self.in_dim, self.out_dim)
        };
        params.insert(&self.weight_name(), w)?;
        params.insert(&self.bias_name(), Tensor::zeros(&[self.out_dim]))
    }

    pub fn forward<'p>(
        &self,
        params: &'p ParameterSet,
        tape: &mut GradTape<'p>,
        x: Var,
        frozen: bool,
    ) -> Result<Var, NnError> {
        let (_, cols) = tape.shape(x);
        if cols != self.in_dim {
            return Err(NnError::ShapeMismatch {
                layer: self.name.clone(),
                expected: self.in_dim,
                got: cols,
            });
        }
        let wt = params.get(&self.weight_name())?;
        let bt = params.get(&self.bias_name())?;
        let (w, b) = if frozen {
            let (wr, wc) = wt.rows_cols();
            let (br, bc) = bt.rows_cols();
            (tape.constant(wt.data(), wr, wc), tape.constant(bt.data(), br, bc))
        } else {
            (tape.param(wt), tape.param(bt))
        };
        let y = tape.matmul(x, w);
        Ok(tape.add_row(y, b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNormLayer {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNormLayer { name: name.to_string(), dim, eps: LAYER_NORM_EPS }
    }

    fn scale_name(&self) -> String {
        format!("{}.g", self.name)
    }

    fn shift_name(&self) -> String {
        format!("{}.s", self.name)
    }

    pub fn register(&self, params: &mut ParameterSet) -> Result<(), TensorError> {
        params.insert(&self.scale_name(), Tensor::from_vec(&[self.dim], vec![1.0; self.dim])?)?;
        params.insert(&self.shift_name(), Tensor::zeros(&[self.dim]))
    }

    pub fn forward<'p>(
        &self,
        params: &'p ParameterSet,
        tape: &mut GradTape<'p>,
        x: Var,
        frozen: bool,
    ) -> Result<Var, NnError> {
        let (_, cols) = tape.shape(x);
        if cols != self.dim {
            return Err(NnError::ShapeMismatch {
                layer: self.name.clone(),
                expected: self.dim,
                got: cols,
            });
        }
        let gt = params.get(&self.scale_name())?;
        let st = params.get(&self.shift_name())?;
        let (g, s) = if frozen {
            (tape.constant(gt.data(), 1, self.dim), tape.constant(st.data(), 1, self.dim))
        } else {
            (tape.param(gt), tape.param(st))
        };
        Ok(tape.layer_norm(x, g, s, self.eps))
    }
}

/// Residual MLP body: Dense + LayerNorm + ReLU input layer, then
/// `blocks` residual blocks of (Dense, LayerNorm, ReLU, Dense, LayerNorm)
/// with an additive skip connection.
#[derive(Debug, Clone)]
pub struct BroBody {
    pub input: DenseLayer,
    pub input_ln: LayerNormLayer,
    pub blocks: Vec<ResidualBlock>,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub fc1: DenseLayer,
    pub ln1: LayerNormLayer,
    pub fc2: DenseLayer,
    pub ln2: LayerNormLayer,
}

impl BroBody {
    pub fn new(input_dim: usize, width: usize, blocks: usize) -> Self {
        let block_layers = (0..blocks)
            .map(|i| ResidualBlock {
                fc1: DenseLayer::new(&format!("blk{i}_fc1"), width, width),
                ln1: LayerNormLayer::new(&format!("blk{i}_ln1"), width),
                fc2: DenseLayer::new(&format!("blk{i}_fc2"), width, width),
                ln2: LayerNormLayer::new(&format!("blk{i}_ln2"), width),
            })
            .collect();
        BroBody {
            input: DenseLayer::new("in", input_dim, width),
            input_ln: LayerNormLayer::new("in_ln", width),
            blocks: block_layers,
            width,
        }
    }

    pub fn register(
        &self,
        params: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), TensorError> {
        self.input.register(params, rng, false)?;
        self.input_ln.register(params)?;
        for b in &self.blocks {
            b.fc1.register(params, rng, false)?;
            b.ln1.register(params)?;
            b.fc2.register(params, rng, false)?;
            b.ln2.register(params)?;
        }
        Ok(())
    }

    pub fn forward<'p>(
        &self,
        params: &'p ParameterSet,
        tape: &mut GradTape<'p>,
        x: Var,
        frozen: bool,
    ) -> Result<Var, NnError> {
        let mut h = self.input.forward(params, tape, x, frozen)?;
        h = self.input_ln.forward(params, tape, h, frozen)?;
        h = tape.relu(h);
        for b in &self.blocks {
            let mut t = b.fc1.forward(params, tape, h, frozen)?;
            t = b.ln1.forward(params, tape, t, frozen)?;
            t = tape.relu(t);
            t = b.fc2.forward(params, tape, t, frozen)?;
            t = b.ln2.forward(params, tape, t, frozen)?;
            h = tape.add(h, t);
        }
        Ok(h)
    }
}

/// Head layout: one shared output head, or one head per task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Shared,
    PerTask(usize),
}

/// Residual critic: BroBody plus one or more linear output heads.
///
/// `out_dim` is the number of logits per head: N_atoms for a continuous
/// categorical critic, |A| * N_atoms for a discrete one, 1 or |A| for the
/// scalar (MSE) variants.
#[derive(Debug)]
pub struct ValueNet {
    pub body: BroBody,
    pub heads: Vec<DenseLayer>,
    pub head_mode: HeadMode,
    pub input_dim: usize,
    pub out_dim: usize,
    pub params: ParameterSet,
}

impl ValueNet {
    pub fn new(
        input_dim: usize,
        width: usize,
        blocks: usize,
        out_dim: usize,
        head_mode: HeadMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TensorError> {
        Self::with_head_init(input_dim, width, blocks, out_dim, head_mode, rng, true)
    }

    /// `zero_head` = true gives a uniform initial value distribution.
    pub fn with_head_init(
        input_dim: usize,
        width: usize,
        blocks: usize,
        out_dim: usize,
        head_mode: HeadMode,
        rng: &mut ChaCha8Rng,
        zero_head: bool,
    ) -> Result<Self, TensorError> {
        let body = BroBody::new(input_dim, width, blocks);
        let mut params = ParameterSet::new();
        body.register(&mut params, rng)?;
        let heads: Vec<DenseLayer> = match head_mode {
            HeadMode::Shared => vec![DenseLayer::new("head", width, out_dim)],
            HeadMode::PerTask(k) => (0..k)
                .map(|t| DenseLayer::new(&format!("head{t}"), width, out_dim))
                .collect(),
        };
        for h in &heads {
            h.register(&mut params, rng, zero_head)?;
        }
        Ok(ValueNet { body, heads, head_mode, input_dim, out_dim, params })
    }

    /// Forward to per-sample logits [batch, out_dim]. `task_ids` is required
    /// in per-task head mode and ignored otherwise.
    pub fn forward<'p>(
        &'p self,
        tape: &mut GradTape<'p>,
        x: Var,
        task_ids: Option<&[usize]>,
        frozen: bool,
    ) -> Result<Var, NnError> {
        let h = self.body.forward(&self.params, tape, x, frozen)?;
        match self.head_mode {
            HeadMode::Shared => self.heads[0].forward(&self.params, tape, h, frozen),
            HeadMode::PerTask(_) => {
                let ids = task_ids
                    .ok_or_else(|| NnError::MissingTaskIds { layer: "head".to_string() })?;
                let (rows, _) = tape.shape(h);
                assert_eq!(ids.len(), rows, "one task id per batch row");
                let mut distinct: Vec<usize> = ids.to_vec();
                distinct.sort_unstable();
                distinct.dedup();
                let mut out: Option<Var> = None;
                for t in distinct {
                    let rows_t: Vec<usize> =
                        ids.iter().enumerate().filter(|(_, &id)| id == t).map(|(i, _)| i).collect();
                    let sub = tape.select_rows(h, &rows_t);
                    let logits = self.heads[t].forward(&self.params, tape, sub, frozen)?;
                    let placed = tape.scatter_rows(logits, &rows_t, rows);
                    out = Some(match out {
                        Some(acc) => tape.add(acc, placed),
                        None => placed,
                    });
                }
                Ok(out.expect("non-empty batch"))
            }
        }
    }
}

/// Tanh-Gaussian policy: BroBody trunk with mean and log-std heads.
/// Sampled actions are componentwise in (-1, 1).
#[derive(Debug)]
pub struct PolicyNet {
    pub body: BroBody,
    pub mean_heads: Vec<DenseLayer>,
    pub logstd_heads: Vec<DenseLayer>,
    pub head_mode: HeadMode,
    pub input_dim: usize,
    pub action_dim: usize,
    pub logstd_min: f64,
    pub logstd_max: f64,
    pub params: ParameterSet,
}

impl PolicyNet {
    pub fn new(
        input_dim: usize,
        width: usize,
        blocks: usize,
        action_dim: usize,
        head_mode: HeadMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TensorError> {
        Self::with_head_init(input_dim, width, blocks, action_dim, head_mode, rng, true)
    }

    pub fn with_head_init(
        input_dim: usize,
        width: usize,
        blocks: usize,
        action_dim: usize,
        head_mode: HeadMode,
        rng: &mut ChaCha8Rng,
        zero_head: bool,
    ) -> Result<Self, TensorError> {
        let body = BroBody::new(input_dim, width, blocks);
        let mut params = ParameterSet::new();
        body.register(&mut params, rng)?;
        let make = |prefix: &str| -> Vec<DenseLayer> {
            match head_mode {
                HeadMode::Shared => vec![DenseLayer::new(prefix, width, action_dim)],
                HeadMode::PerTask(k) => (0..k)
                    .map(|t| DenseLayer::new(&format!("{prefix}{t}"), width, action_dim))
                    .collect(),
            }
        };
        let mean_heads = make("mu");
        let logstd_heads = make("ls");
        for h in mean_heads.iter().chain(&logstd_heads) {
            h.register(&mut params, rng, zero_head)?;
        }
        Ok(PolicyNet {
            body,
            mean_heads,
            logstd_heads,
            head_mode,
            input_dim,
            action_dim,
            logstd_min: -5.0,
            logstd_max: 2.0,
            params,
        })
    }

    /// Forward to (mean, clamped log-std), each [batch, action_dim].
    pub fn forward<'p>(
        &'p self,
        tape: &mut GradTape<'p>,
        x: Var,
        task_ids: Option<&[usize]>,
        frozen: bool,
    ) -> Result<(Var, Var), NnError> {
        let h = self.body.forward(&self.params, tape, x, frozen)?;
        let (mean, logstd) = match self.head_mode {
            HeadMode::Shared => (
                self.mean_heads[0].forward(&self.params, tape, h, frozen)?,
                self.logstd_heads[0].forward(&self.params, tape, h, frozen)?,
            ),
            HeadMode::PerTask(_) => {
                let ids = task_ids
                    .ok_or_else(|| NnError::MissingTaskIds { layer: "mu".to_string() })?;
                let (rows, _) = tape.shape(h);
                assert_eq!(ids.len(), rows, "one task id per batch row");
                let mut distinct: Vec<usize> = ids.to_vec();
                distinct.sort_unstable();
                distinct.dedup();
                let mut mean_acc: Option<Var> = None;
                let mut ls_acc: Option<Var> = None;
                for t in distinct {
                    let rows_t: Vec<usize> =
                        ids.iter().enumerate().filter(|(_, &id)| id == t).map(|(i, _)| i).collect();
                    let sub = tape.select_rows(h, &rows_t);
                    let m = self.mean_heads[t].forward(&self.params, tape, sub, frozen)?;
                    let l = self.logstd_heads[t].forward(&self.params, tape, sub, frozen)?;
                    let m = tape.scatter_rows(m, &rows_t, rows);
                    let l = tape.scatter_rows(l, &rows_t, rows);
                    mean_acc = Some(match mean_acc {
                        Some(acc) => tape.add(acc, m),
                        None => m,
                    });
                    ls_acc = Some(match ls_acc {
                        Some(acc) => tape.add(acc, l),
                        None => l,
                    });
                }
                (mean_acc.expect("non-empty batch"), ls_acc.expect("non-empty batch"))
            }
        };
        let logstd = tape.clamp(logstd, self.logstd_min, self.logstd_max);
        Ok((mean, logstd))
    }

    /// Reparameterized sample: action = tanh(mean + sigma * noise), with the
    /// per-sample log-density of the squashed Gaussian. `noise` is a standard
    /// normal draw of shape [batch, action_dim] supplied by the caller.
    pub fn sample_with_log_prob(
        tape: &mut GradTape<'_>,
        mean: Var,
        logstd: Var,
        noise: &[f64],
    ) -> (Var, Var) {
        let (m, n) = tape.shape(mean);
        assert_eq!(noise.len(), m * n, "noise shape mismatch");
        let eps = tape.constant(noise, m, n);
        let sigma = tape.exp(logstd);
        let scaled = tape.mul(sigma, eps);
        let u = tape.add(mean, scaled);
        let action = tape.tanh(u);

        // log N(u; mean, sigma) per element
        let diff = tape.sub(u, mean);
        let neg_logstd = tape.scale(logstd, -1.0);
        let inv_sigma = tape.exp(neg_logstd);
        let z = tape.mul(diff, inv_sigma);
        let z2 = tape.mul(z, z);
        let g = tape.scale(z2, -0.5);
        let g = tape.add(g, neg_logstd);
        let g = tape.add_const(g, -0.5 * LN_2PI);

        // -log(1 - tanh(u)^2) = 2 (u + softplus(-2u) - ln 2) per element
        let minus_two_u = tape.scale(u, -2.0);
        let sp = tape.softplus(minus_two_u);
        let c = tape.add(u, sp);
        let c = tape.add_const(c, -LN_2);
        let c = tape.scale(c, 2.0);

        let per_dim = tape.add(g, c);
        let log_prob = tape.row_sum(per_dim);
        (action, log_prob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn dense_identity_passes_input_through() {
        let mut params = ParameterSet::new();
        let layer = DenseLayer::new("in", 2, 2);
        let mut r = rng(0);
        layer.register(&mut params, &mut r, true).unwrap();
        params.get_mut("in.w").unwrap().data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let mut tape = GradTape::new();
        let x = tape.constant(&[2.0, 3.0], 1, 2);
        let y = layer.forward(&params, &mut tape, x, false).unwrap();
        assert_eq!(tape.data(y), &[2.0, 3.0]);
    }

    #[test]
    fn dense_rejects_wrong_width() {
        let mut params = ParameterSet::new();
        let layer = DenseLayer::new("in", 3, 2);
        let mut r = rng(0);
        layer.register(&mut params, &mut r, false).unwrap();
        let mut tape = GradTape::new();
        let x = tape.constant(&[1.0, 2.0], 1, 2);
        let err = layer.forward(&params, &mut tape, x, false).unwrap_err();
        assert_eq!(err, NnError::ShapeMismatch { layer: "in".into(), expected: 3, got: 2 });
    }

    #[test]
    fn layer_norm_example() {
        let mut params = ParameterSet::new();
        let ln = LayerNormLayer::new("ln", 2);
        ln.register(&mut params).unwrap();
        let mut tape = GradTape::new();
        let x = tape.constant(&[1.0, 3.0], 1, 2);
        let y = ln.forward(&params, &mut tape, x, false).unwrap();
        let out = tape.data(y);
        assert!((out[0] - (-1.0)).abs() <= 1e-4);
        assert!((out[1] - 1.0).abs() <= 1e-4);
    }

    #[test]
    fn zeroed_residual_blocks_are_identity() {
        let mut r = rng(7);
        let net = ValueNet::new(4, 8, 2, 5, HeadMode::Shared, &mut r).unwrap();
        // Zero every residual-block weight and bias; LN affines stay (1, 0).
        let mut net = net;
        for i in 0..2 {
            for part in ["fc1", "fc2"] {
                for suffix in ["w", "b"] {
                    let name = format!("blk{i}_{part}.{suffix}");
                    for v in net.params.get_mut(&name).unwrap().data_mut() {
                        *v = 0.0;
                    }
                }
            }
        }
        let input = vec![0.3, -0.7, 1.2, 0.05, 0.9, 0.1, -0.4, 0.8];
        let mut tape = GradTape::new();
        let x = tape.constant(&input, 2, 4);
        let h_in = {
            let h = net.body.input.forward(&net.params, &mut tape, x, false).unwrap();
            let h = net.body.input_ln.forward(&net.params, &mut tape, h, false).unwrap();
            tape.relu(h)
        };
        let h_out = {
            let mut h = h_in;
            for b in &net.body.blocks {
                let mut t = b.fc1.forward(&net.params, &mut tape, h, false).unwrap();
                t = b.ln1.forward(&net.params, &mut tape, t, false).unwrap();
                t = tape.relu(t);
                t = b.fc2.forward(&net.params, &mut tape, t, false).unwrap();
                t = b.ln2.forward(&net.params, &mut tape, t, false).unwrap();
                h = tape.add(h, t);
            }
            h
        };
        let a = tape.data(h_in).to_vec();
        let b = tape.data(h_out).to_vec();
        assert_eq!(a, b, "zeroed residual branch must be the identity");
    }

    #[test]
    fn zero_head_gives_uniform_distribution() {
        let mut r = rng(3);
        let net = ValueNet::new(3, 8, 1, 11, HeadMode::Shared, &mut r).unwrap();
        let mut tape = GradTape::new();
        let x = tape.constant(&[0.1, 0.2, 0.3], 1, 3);
        let logits = net.forward(&mut tape, x, None, false).unwrap();
        for &v in tape.data(logits) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn per_task_heads_route_rows() {
        let mut r = rng(5);
        let mut net = ValueNet::new(2, 4, 1, 1, HeadMode::PerTask(2), &mut r).unwrap();
        // Give head0 bias 1 and head1 bias 2 so routing is observable.
        net.params.get_mut("head0.b").unwrap().data_mut()[0] = 1.0;
        net.params.get_mut("head1.b").unwrap().data_mut()[0] = 2.0;
        // Zero the head weights so output is exactly the bias.
        for name in ["head0.w", "head1.w"] {
            for v in net.params.get_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = GradTape::new();
        let x = tape.constant(&[0.5, 0.5, -0.5, 0.25, 0.0, 1.0], 3, 2);
        let out = net.forward(&mut tape, x, Some(&[1, 0, 1]), false).unwrap();
        assert_eq!(tape.data(out), &[2.0, 1.0, 2.0]);
    }

    #[test]
    fn tanh_gaussian_actions_bounded_and_log_prob_finite() {
        let mut r = rng(11);
        let net = PolicyNet::with_head_init(3, 8, 1, 2, HeadMode::Shared, &mut r, false).unwrap();
        let mut tape = GradTape::new();
        let x = tape.constant(&[0.4, -0.2, 0.9, 0.0, 0.0, 0.0], 2, 3);
        let (mean, logstd) = net.forward(&mut tape, x, None, false).unwrap();
        let noise = [0.3, -1.7, 2.5, 0.0];
        let (action, logp) = PolicyNet::sample_with_log_prob(&mut tape, mean, logstd, &noise);
        for &a in tape.data(action) {
            assert!(a > -1.0 && a < 1.0);
        }
        for &lp in tape.data(logp) {
            assert!(lp.is_finite());
        }
    }
}
