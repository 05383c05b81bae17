//! Central finite-difference verification of analytic gradients.

use crate::tape::{GradTape, Var};
use crate::tensor::ParameterSet;

/// Anything that owns a parameter set and can be perturbed for checking.
pub trait HasParams {
    fn params(&self) -> &ParameterSet;
    fn params_mut(&mut self) -> &mut ParameterSet;
}

impl HasParams for ParameterSet {
    fn params(&self) -> &ParameterSet {
        self
    }
    fn params_mut(&mut self) -> &mut ParameterSet {
        self
    }
}

impl HasParams for crate::nn::ValueNet {
    fn params(&self) -> &ParameterSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }
}

impl HasParams for crate::nn::PolicyNet {
    fn params(&self) -> &ParameterSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }
}

/// Compare the tape's gradients against central finite differences over every
/// parameter element and return the worst relative error.
///
/// The relative error is |analytic - fd| / max(|analytic|, |fd|, 1e-3);
/// the 1e-3 guard keeps finite-difference noise on near-zero gradients from
/// dominating the comparison.
pub fn grad_check<N, F>(net: &mut N, build_loss: F, h: f64) -> f64
where
    N: HasParams,
    F: for<'p> Fn(&'p N, &mut GradTape<'p>) -> Var,
{
    net.params().clear_grads();
    {
        let mut tape = GradTape::new();
        let loss = build_loss(net, &mut tape);
        tape.backward(loss).expect("grad_check loss must be scalar");
    }
    let analytic = net.params().flat_grad();
    net.params().clear_grads();

    let mut max_rel: f64 = 0.0;
    let mut flat = 0;
    let entries = net.params().len();
    for e in 0..entries {
        let numel = net.params().entry(e).1.numel();
        for i in 0..numel {
            let orig = net.params().entry(e).1.data()[i];
            net.params_mut().entry_mut(e).1.data_mut()[i] = orig + h;
            let f_plus = eval_loss(net, &build_loss);
            net.params_mut().entry_mut(e).1.data_mut()[i] = orig - h;
            let f_minus = eval_loss(net, &build_loss);
            net.params_mut().entry_mut(e).1.data_mut()[i] = orig;
            let fd = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[flat];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            if rel > max_rel {
                max_rel = rel;
            }
            flat += 1;
        }
    }
    max_rel
}

fn eval_loss<N, F>(net: &N, build_loss: &F) -> f64
where
    N: HasParams,
    F: for<'p> Fn(&'p N, &mut GradTape<'p>) -> Var,
{
    let mut tape = GradTape::new();
    let loss = build_loss(net, &mut tape);
    tape.value(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{HeadMode, PolicyNet, ValueNet};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_net_quadratic_loss_is_near_exact() {
        let mut params = ParameterSet::new();
        params
            .insert("w", Tensor::from_vec(&[3, 2], vec![0.3, -0.4, 0.7, 0.1, -0.2, 0.5]).unwrap())
            .unwrap();
        let x = vec![0.9, -1.2, 0.4];
        let err = grad_check(
            &mut params,
            |p, tape| {
                let w = tape.param(p.get("w").unwrap());
                let xv = tape.constant(&x, 1, 3);
                let y = tape.matmul(xv, w);
                let sq = tape.mul(y, y);
                tape.sum_all(sq)
            },
            1e-5,
        );
        assert!(err <= 1e-7, "linear/quadratic grad check failed: {err}");
    }

    #[test]
    fn bronet_critic_matches_finite_differences() {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net =
                ValueNet::with_head_init(4, 8, 2, 6, HeadMode::Shared, &mut rng, false).unwrap();
            let input: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let target = vec![0.1, 0.2, 0.05, 0.3, 0.15, 0.2, 0.3, 0.1, 0.25, 0.2, 0.05, 0.1];
            let err = grad_check(
                &mut net,
                |n, tape| {
                    let x = tape.constant(&input, 2, 4);
                    let logits = n.forward(tape, x, None, false).unwrap();
                    let losses = tape.cross_entropy_probs(logits, &target);
                    tape.mean_all(losses)
                },
                1e-5,
            );
            assert!(err <= 1e-4, "seed {seed}: BroNet grad check failed: {err}");
        }
    }

    #[test]
    fn tanh_gaussian_log_prob_matches_finite_differences() {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut net =
                PolicyNet::with_head_init(3, 8, 1, 2, HeadMode::Shared, &mut rng, false).unwrap();
            let input: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let noise: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
            let err = grad_check(
                &mut net,
                |n, tape| {
                    let x = tape.constant(&input, 2, 3);
                    let (mean, logstd) = n.forward(tape, x, None, false).unwrap();
                    let (_, logp) = PolicyNet::sample_with_log_prob(tape, mean, logstd, &noise);
                    tape.mean_all(logp)
                },
                1e-5,
            );
            assert!(err <= 1e-4, "seed {seed}: policy grad check failed: {err}");
        }
    }

    #[test]
    fn per_task_head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut net =
            ValueNet::with_head_init(3, 6, 1, 4, HeadMode::PerTask(3), &mut rng, false).unwrap();
        let input: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ids = [2usize, 0, 1, 2];
        let target: Vec<f64> = (0..16).map(|i| if i % 4 == 0 { 0.7 } else { 0.1 }).collect();
        let err = grad_check(
            &mut net,
            |n, tape| {
                let x = tape.constant(&input, 4, 3);
                let logits = n.forward(tape, x, Some(&ids), false).unwrap();
                let losses = tape.cross_entropy_probs(logits, &target);
                tape.mean_all(losses)
            },
            1e-5,
        );
        assert!(err <= 1e-4, "per-task head grad check failed: {err}");
    }
}
