//! Fixed-support categorical value distributions: support construction, the
//! distributional Bellman projection, cross-entropy TD loss, and the scalar
//! readout used for action selection.

use std::fmt;

use crate::tape::{GradTape, Var};

#[derive(Debug, Clone, PartialEq)]
pub enum DistError {
    InvalidBounds { v_min: f64, v_max: f64 },
    TooFewAtoms { n_atoms: usize },
    InvalidProbs { reason: String },
}

impl fmt::Display for DistError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistError::InvalidBounds { v_min, v_max } => {
                write!(f, "support requires v_min < v_max, got [{v_min}, {v_max}]")
            }
            DistError::TooFewAtoms { n_atoms } => {
                write!(f, "support requires at least 2 atoms, got {n_atoms}")
            }
            DistError::InvalidProbs { reason } => write!(f, "invalid distribution: {reason}"),
        }
    }
}

impl std::error::Error for DistError {}

/// Uniformly spaced atom grid z_i = v_min + (i-1) (v_max - v_min)/(N-1).
#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    pub v_min: f64,
    pub v_max: f64,
    pub n_atoms: usize,
    atoms: Vec<f64>,
    spacing: f64,
}

impl Support {
    pub fn new(v_min: f64, v_max: f64, n_atoms: usize) -> Result<Self, DistError> {
        if !(v_min < v_max) {
            return Err(DistError::InvalidBounds { v_min, v_max });
        }
        if n_atoms < 2 {
            return Err(DistError::TooFewAtoms { n_atoms });
        }
        let spacing = (v_max - v_min) / (n_atoms - 1) as f64;
        let atoms: Vec<f64> = (0..n_atoms).map(|i| v_min + i as f64 * spacing).collect();
        Ok(Support { v_min, v_max, n_atoms, atoms, spacing })
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Uniform distribution over the atoms.
    pub fn uniform(&self) -> ValueDistribution {
        ValueDistribution { probs: vec![1.0 / self.n_atoms as f64; self.n_atoms] }
    }
}

/// Probability vector over a support's atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueDistribution {
    probs: Vec<f64>,
}

impl ValueDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, DistError> {
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(DistError::InvalidProbs { reason: "negative or non-finite mass".into() });
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DistError::InvalidProbs { reason: format!("mass sums to {total}") });
        }
        Ok(ValueDistribution { probs })
    }

    /// Point mass on atom index k.
    pub fn one_hot(n_atoms: usize, k: usize) -> Self {
        let mut probs = vec![0.0; n_atoms];
        probs[k] = 1.0;
        ValueDistribution { probs }
    }

    pub fn from_softmax(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= z;
        }
        ValueDistribution { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Equal-weight mixture of two distributions, the two-target-critic
    /// combination (average of target outputs, never the minimum).
    pub fn mix(a: &ValueDistribution, b: &ValueDistribution) -> ValueDistribution {
        assert_eq!(a.len(), b.len(), "mixture components differ in length");
        let probs = a.probs.iter().zip(&b.probs).map(|(&x, &y)| 0.5 * (x + y)).collect();
        ValueDistribution { probs }
    }

    pub fn entropy(&self) -> f64 {
        self.probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }
}

/// Project mass sitting on arbitrary atom positions back onto the support.
///
/// Each target atom is clamped to [v_min, v_max] and its mass split between
/// the two neighboring support atoms by linear interpolation; an atom exactly
/// on a support point contributes all of its mass to that point.
pub fn project(
    target_atoms: &[f64],
    target_probs: &ValueDistribution,
    support: &Support,
) -> ValueDistribution {
    assert_eq!(
        target_atoms.len(),
        target_probs.len(),
        "atom and probability counts differ"
    );
    let n = support.n_atoms;
    let mut out = vec![0.0; n];
    for (&atom, &p) in target_atoms.iter().zip(target_probs.probs()) {
        if p == 0.0 {
            continue;
        }
        let g = atom.clamp(support.v_min, support.v_max);
        let b = ((g - support.v_min) / support.spacing).clamp(0.0, (n - 1) as f64);
        let lower = b.floor() as usize;
        let upper = b.ceil() as usize;
        if lower == upper {
            out[lower] += p;
        } else {
            out[lower] += p * (upper as f64 - b);
            out[upper] += p * (b - lower as f64);
        }
    }
    ValueDistribution { probs: out }
}

/// Shifted atoms r + gamma * (z_i + entropy_bonus) for the soft TD target.
/// The entropy bonus is -alpha * log pi(a'|s') for the sampled next action
/// (zero for the discrete epsilon-greedy agent).
pub fn bellman_shift(
    reward: f64,
    discount: f64,
    entropy_bonus: f64,
    support: &Support,
) -> Vec<f64> {
    support.atoms().iter().map(|&z| reward + discount * (z + entropy_bonus)).collect()
}

/// Differentiable cross-entropy between predicted logits and a fixed target
/// distribution: -sum_i target_i log softmax(logits)_i. Returns the scalar
/// loss node (mean over the batch when logits have multiple rows).
pub fn cross_entropy_loss(
    tape: &mut GradTape<'_>,
    pred_logits: Var,
    target: &ValueDistribution,
) -> Var {
    let (rows, cols) = tape.shape(pred_logits);
    assert_eq!(cols, target.len(), "logit and target lengths differ");
    let tiled: Vec<f64> = target.probs().iter().cycle().take(rows * cols).cloned().collect();
    let per_row = tape.cross_entropy_probs(pred_logits, &tiled);
    tape.mean_all(per_row)
}

/// Batched cross-entropy: one target distribution per logit row.
pub fn cross_entropy_loss_batch(
    tape: &mut GradTape<'_>,
    pred_logits: Var,
    targets_flat: &[f64],
) -> Var {
    let per_row = tape.cross_entropy_probs(pred_logits, targets_flat);
    tape.mean_all(per_row)
}

/// Expected value sum_i p_i z_i.
pub fn mean_value(dist: &ValueDistribution, support: &Support) -> f64 {
    dist.probs().iter().zip(support.atoms()).map(|(&p, &z)| p * z).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    /// Independent projection oracle: evaluate the interpolation tent of every
    /// support atom at every (clamped) target atom and sum the splits.
    fn project_oracle(
        target_atoms: &[f64],
        target_probs: &[f64],
        support: &Support,
    ) -> Vec<f64> {
        let mut out = vec![0.0; support.n_atoms];
        for (i, &z) in support.atoms().iter().enumerate() {
            for (&atom, &p) in target_atoms.iter().zip(target_probs) {
                let g = atom.clamp(support.v_min, support.v_max);
                let w = 1.0 - (g - z).abs() / support.spacing();
                if w > 0.0 {
                    out[i] += p * w;
                }
            }
        }
        out
    }

    #[test]
    fn support_matches_paper_grid() {
        let s = Support::new(-10.0, 10.0, 101).unwrap();
        assert_eq!(s.atoms()[0], -10.0);
        assert_eq!(s.atoms()[100], 10.0);
        assert!((s.spacing() - 0.2).abs() < 1e-12);
        assert!((s.atoms()[1] - (-9.8)).abs() < 1e-12);
        let two = Support::new(0.0, 1.0, 2).unwrap();
        assert_eq!(two.atoms(), &[0.0, 1.0]);
    }

    #[test]
    fn support_rejects_bad_arguments() {
        assert!(Support::new(1.0, 1.0, 5).is_err());
        assert!(Support::new(2.0, 1.0, 5).is_err());
        assert!(Support::new(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn projection_midpoint_and_clamp() {
        let s = Support::new(-1.0, 1.0, 3).unwrap();
        let mid = project(&[0.5], &ValueDistribution::new(vec![1.0]).unwrap(), &s);
        assert_eq!(mid.probs(), &[0.0, 0.5, 0.5]);
        let clamped = project(&[2.0], &ValueDistribution::new(vec![1.0]).unwrap(), &s);
        assert_eq!(clamped.probs(), &[0.0, 0.0, 1.0]);
        let exact = project(&[0.0], &ValueDistribution::new(vec![1.0]).unwrap(), &s);
        assert_eq!(exact.probs(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn projection_uniform_example() {
        let s = Support::new(-1.0, 1.0, 3).unwrap();
        let third = 1.0 / 3.0;
        let probs = ValueDistribution::new(vec![third, third, third]).unwrap();
        let out = project(&[0.0, 0.5, 1.0], &probs, &s);
        assert!((out.probs()[0] - 0.0).abs() < 1e-12);
        assert!((out.probs()[1] - 0.5).abs() < 1e-12);
        assert!((out.probs()[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bellman_shift_examples() {
        let s = Support::new(-1.0, 1.0, 3).unwrap();
        assert_eq!(bellman_shift(1.0, 0.0, 0.0, &s), vec![1.0, 1.0, 1.0]);
        assert_eq!(bellman_shift(0.0, 1.0, 0.0, &s), vec![-1.0, 0.0, 1.0]);
        assert_eq!(bellman_shift(0.5, 0.5, 0.0, &s), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn cross_entropy_at_optimum_is_entropy() {
        let target = ValueDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        let logits = Tensor::from_vec(&[1, 3], target.probs().iter().map(|p| p.ln()).collect())
            .unwrap();
        let mut tape = GradTape::new();
        let lv = tape.param(&logits);
        let loss = cross_entropy_loss(&mut tape, lv, &target);
        assert!((tape.value(loss) - target.entropy()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_prediction_one_hot_target() {
        let n = 101;
        let target = ValueDistribution::one_hot(n, 17);
        let logits = Tensor::from_vec(&[1, n], vec![0.0; n]).unwrap();
        let mut tape = GradTape::new();
        let lv = tape.param(&logits);
        let loss = cross_entropy_loss(&mut tape, lv, &target);
        assert!((tape.value(loss) - (n as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_target() {
        let target = ValueDistribution::new(vec![0.1, 0.6, 0.3]).unwrap();
        let mut logits = crate::tensor::ParameterSet::new();
        logits
            .insert("l", Tensor::from_vec(&[1, 3], vec![0.4, -0.3, 0.8]).unwrap())
            .unwrap();
        let err = crate::gradcheck::grad_check(
            &mut logits,
            |p, tape| {
                let lv = tape.param(p.get("l").unwrap());
                cross_entropy_loss(tape, lv, &target)
            },
            1e-6,
        );
        assert!(err <= 1e-6, "CE gradient check failed: {err}");
        // And the closed form itself.
        let l = [0.4, -0.3, 0.8];
        let p = ValueDistribution::from_softmax(&l);
        let t = Tensor::from_vec(&[1, 3], l.to_vec()).unwrap();
        let mut tape = GradTape::new();
        let lv = tape.param(&t);
        let loss = cross_entropy_loss(&mut tape, lv, &target);
        tape.backward(loss).unwrap();
        for ((g, pi), ti) in t.grad().iter().zip(p.probs()).zip(target.probs()) {
            assert!((g - (pi - ti)).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_value_examples() {
        let sym = Support::new(-10.0, 10.0, 101).unwrap();
        assert!(mean_value(&sym.uniform(), &sym).abs() < 1e-12);
        let s = Support::new(0.0, 4.0, 2).unwrap();
        let d = ValueDistribution::new(vec![0.25, 0.75]).unwrap();
        assert!((mean_value(&d, &s) - 3.0).abs() < 1e-12);
        let onehot = ValueDistribution::one_hot(101, 42);
        assert!((mean_value(&onehot, &sym) - sym.atoms()[42]).abs() < 1e-12);
    }

    #[test]
    fn mixture_of_identical_distributions_is_identity() {
        let d = ValueDistribution::new(vec![0.25, 0.25, 0.5]).unwrap();
        assert_eq!(ValueDistribution::mix(&d, &d), d);
    }

    proptest! {
        #[test]
        fn projection_conserves_mass_and_matches_oracle(
            n_atoms in 2usize..=11,
            v_min in -5.0f64..0.0,
            width in 0.5f64..10.0,
            raw in prop::collection::vec((0.01f64..1.0, -20.0f64..20.0), 1..12),
        ) {
            let support = Support::new(v_min, v_min + width, n_atoms).unwrap();
            let total: f64 = raw.iter().map(|(p, _)| p).sum();
            let probs: Vec<f64> = raw.iter().map(|(p, _)| p / total).collect();
            let atoms: Vec<f64> = raw.iter().map(|(_, a)| *a).collect();
            let dist = ValueDistribution::new(probs.clone()).unwrap();
            let projected = project(&atoms, &dist, &support);

            let mass: f64 = projected.probs().iter().sum();
            prop_assert!((mass - 1.0).abs() <= 1e-9, "mass {mass}");

            let oracle = project_oracle(&atoms, &probs, &support);
            for (a, b) in projected.probs().iter().zip(&oracle) {
                prop_assert!((a - b).abs() <= 1e-12, "projection {a} vs oracle {b}");
            }
        }

        #[test]
        fn projection_preserves_mean_in_range(
            n_atoms in 2usize..=11,
            raw in prop::collection::vec((0.01f64..1.0, -0.99f64..0.99), 1..12),
        ) {
            let support = Support::new(-1.0, 1.0, n_atoms).unwrap();
            let total: f64 = raw.iter().map(|(p, _)| p).sum();
            let probs: Vec<f64> = raw.iter().map(|(p, _)| p / total).collect();
            let atoms: Vec<f64> = raw.iter().map(|(_, a)| *a).collect();
            let dist = ValueDistribution::new(probs.clone()).unwrap();
            let projected = project(&atoms, &dist, &support);
            let before: f64 = probs.iter().zip(&atoms).map(|(p, a)| p * a).sum();
            let after = mean_value(&projected, &support);
            prop_assert!((before - after).abs() <= 1e-9, "{before} vs {after}");
        }

        #[test]
        fn raising_atoms_never_lowers_projected_mean(
            shift in 0.0f64..5.0,
            raw in prop::collection::vec((0.01f64..1.0, -15.0f64..15.0), 1..10),
        ) {
            let support = Support::new(-10.0, 10.0, 11).unwrap();
            let total: f64 = raw.iter().map(|(p, _)| p).sum();
            let probs: Vec<f64> = raw.iter().map(|(p, _)| p / total).collect();
            let atoms: Vec<f64> = raw.iter().map(|(_, a)| *a).collect();
            let raised: Vec<f64> = atoms.iter().map(|a| a + shift).collect();
            let dist = ValueDistribution::new(probs).unwrap();
            let lo = mean_value(&project(&atoms, &dist, &support), &support);
            let hi = mean_value(&project(&raised, &dist, &support), &support);
            prop_assert!(hi >= lo - 1e-12, "raised mean {hi} below original {lo}");
        }
    }
}
