//! Measure-valued dynamics: the push-forward flow of one empirical measure,
//! its ensemble version under a shared action, and the terminal cost.

use rayon::prelude::*;

use crate::dynamics::{attach_encodings, AttentionContext, ParticleState, SequenceSample, SystemConfig, WeightAction};
use crate::linalg::sq_dist;
use crate::transport::{wasserstein2_sq, DiscreteMeasure};
use crate::{Error, Result};

/// Ordered tuple of `K` measures, one per training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub measures: Vec<DiscreteMeasure>,
}

impl EnsembleState {
    pub fn new(measures: Vec<DiscreteMeasure>) -> Self {
        Self { measures }
    }

    /// Empirical measures of the encoded input sequences.
    pub fn from_inputs(samples: &[SequenceSample], sys: &SystemConfig) -> Result<Self> {
        samples
            .iter()
            .map(|s| Ok(DiscreteMeasure::empirical(&attach_encodings(&s.inputs, sys)?)))
            .collect::<Result<_>>()
            .map(Self::new)
    }

    /// Empirical measures of the encoded label sequences.
    pub fn from_labels(samples: &[SequenceSample], sys: &SystemConfig) -> Result<Self> {
        samples
            .iter()
            .map(|s| Ok(DiscreteMeasure::empirical(&attach_encodings(&s.labels, sys)?)))
            .collect::<Result<_>>()
            .map(Self::new)
    }

    pub fn len(&self) -> usize {
        self.measures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measures.is_empty()
    }
}

/// Fixed weights for every layer, i.e. the trained transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSequence {
    pub actions: Vec<WeightAction>,
}

impl ActionSequence {
    pub fn new(actions: Vec<WeightAction>) -> Self {
        Self { actions }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn concat(&self, other: &ActionSequence) -> ActionSequence {
        let mut actions = self.actions.clone();
        actions.extend(other.actions.iter().cloned());
        Self { actions }
    }

    /// Root of the summed squared Frobenius distances between layers.
    pub fn distance(&self, other: &ActionSequence) -> f64 {
        self.actions
            .iter()
            .zip(&other.actions)
            .map(|(a, b)| {
                let d = a.distance(b);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// One layer of the measure flow: every atom moves by the single-particle
/// map against `mu` itself and keeps its mass.
pub fn push_forward(mu: &DiscreteMeasure, u: &WeightAction, sys: &SystemConfig) -> DiscreteMeasure {
    let ctx = AttentionContext::new(u, mu, sys);
    mu.map_atoms(|x| ParticleState::new(x.pe, ctx.step_feature(&x.feature)))
}

/// Applies the same action to every member of the ensemble.
pub fn ensemble_step(e: &EnsembleState, u: &WeightAction, sys: &SystemConfig) -> EnsembleState {
    EnsembleState::new(e.measures.par_iter().map(|mu| push_forward(mu, u, sys)).collect())
}

pub fn rollout(e0: &EnsembleState, seq: &ActionSequence, sys: &SystemConfig) -> EnsembleState {
    seq.actions
        .iter()
        .fold(e0.clone(), |e, u| ensemble_step(&e, u, sys))
}

/// Mean squared position-sensitive Wasserstein distance to the targets.
pub fn terminal_cost(terminal: &EnsembleState, targets: &EnsembleState, lambda: f64) -> Result<f64> {
    if terminal.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} terminal measures but {} targets",
            terminal.len(),
            targets.len()
        )));
    }
    if terminal.is_empty() {
        return Err(Error::Dimension("empty ensemble".into()));
    }
    let costs = terminal
        .measures
        .par_iter()
        .zip(&targets.measures)
        .map(|(m, t)| wasserstein2_sq(m, t, lambda).map(|(v, _)| v))
        .collect::<Result<Vec<f64>>>()?;
    Ok(costs.iter().sum::<f64>() / costs.len() as f64)
}

/// The particle-level training objective `(1/NK) Σ_k Σ_i ‖x_T^{i,k} − y^{i,k}‖²`.
pub fn particle_loss(outputs: &[Vec<ParticleState>], samples: &[SequenceSample]) -> Result<f64> {
    if outputs.len() != samples.len() || samples.is_empty() {
        return Err(Error::Dimension("outputs and samples differ in count".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (out, s) in outputs.iter().zip(samples) {
        if out.len() != s.labels.len() {
            return Err(Error::Dimension("sequence length mismatch".into()));
        }
        for (x, y) in out.iter().zip(&s.labels) {
            total += sq_dist(&x.feature, y);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{forward_sequence, forward_trajectory, step_particle};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_action(rng: &mut impl Rng, sys: &SystemConfig) -> WeightAction {
        let flat: Vec<f64> = (0..sys.dims.num_entries()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        WeightAction::from_flat(sys.dims, &flat).unwrap()
    }

    fn random_sample(rng: &mut impl Rng, sys: &SystemConfig) -> SequenceSample {
        let mut v = || -> Vec<Vec<f64>> {
            (0..sys.n_particles)
                .map(|_| (0..sys.dims.d).map(|_| rng.gen_range(-1.0..=1.0)).collect())
                .collect()
        };
        SequenceSample { inputs: v(), labels: v() }
    }

    #[test]
    fn zero_action_collapses_per_encoding() {
        let sys = SystemConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_sample(&mut rng, &sys);
        let mu = DiscreteMeasure::empirical(&attach_encodings(&s.inputs, &sys).unwrap());
        let out = push_forward(&mu, &WeightAction::zeros(sys.dims), &sys);
        assert_eq!(out.len(), 4);
        for (i, a) in out.atoms().iter().enumerate() {
            assert_eq!(a.pe, sys.encoding(i + 1));
            assert_eq!(a.feature, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn dirac_follows_single_particle_map() {
        let sys = SystemConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_action(&mut rng, &sys);
        let x = ParticleState::new(sys.encoding(3), vec![0.2, -0.9]);
        let mu = DiscreteMeasure::dirac(x.clone());
        let image = step_particle(&x, &u, &mu, &sys);
        assert_eq!(push_forward(&mu, &u, &sys), DiscreteMeasure::dirac(image));
    }

    #[test]
    fn lifting_commutes_with_particle_flow() {
        let sys = SystemConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = random_sample(&mut rng, &sys);
            let actions: Vec<_> = (0..3).map(|_| random_action(&mut rng, &sys)).collect();
            let traj = forward_trajectory(&s.inputs, &actions, &sys).unwrap();
            let mut mu = DiscreteMeasure::empirical(&traj[0]);
            for (t, u) in actions.iter().enumerate() {
                mu = push_forward(&mu, u, &sys);
                assert_eq!(mu, DiscreteMeasure::empirical(&traj[t + 1]));
            }
        }
    }

    #[test]
    fn ensemble_step_is_componentwise() {
        let sys = SystemConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<_> = (0..3).map(|_| random_sample(&mut rng, &sys)).collect();
        let u = random_action(&mut rng, &sys);
        let e = EnsembleState::from_inputs(&samples, &sys).unwrap();
        let next = ensemble_step(&e, &u, &sys);
        for (k, s) in samples.iter().enumerate() {
            let out = forward_sequence(&s.inputs, std::slice::from_ref(&u), &sys).unwrap();
            assert_eq!(next.measures[k], DiscreteMeasure::empirical(&out));
            assert_eq!(next.measures[k], push_forward(&e.measures[k], &u, &sys));
        }
        let dup = EnsembleState::new(vec![e.measures[0].clone(), e.measures[0].clone()]);
        let stepped = ensemble_step(&dup, &u, &sys);
        assert_eq!(stepped.measures[0], stepped.measures[1]);
    }

    #[test]
    fn rollout_composes() {
        let sys = SystemConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<_> = (0..2).map(|_| random_sample(&mut rng, &sys)).collect();
        let e = EnsembleState::from_inputs(&samples, &sys).unwrap();
        let s1 = ActionSequence::new(vec![random_action(&mut rng, &sys)]);
        let s2 = ActionSequence::new(vec![random_action(&mut rng, &sys), random_action(&mut rng, &sys)]);
        assert_eq!(rollout(&e, &ActionSequence::new(vec![]), &sys), e);
        assert_eq!(rollout(&e, &s1.concat(&s2), &sys), rollout(&rollout(&e, &s1, &sys), &s2, &sys));
    }

    #[test]
    fn terminal_cost_matches_particle_loss_above_threshold() {
        let sys = SystemConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let samples: Vec<_> = (0..5).map(|_| random_sample(&mut rng, &sys)).collect();
            let seq = ActionSequence::new((0..2).map(|_| random_action(&mut rng, &sys)).collect());
            let e = EnsembleState::from_inputs(&samples, &sys).unwrap();
            let targets = EnsembleState::from_labels(&samples, &sys).unwrap();
            let lifted = terminal_cost(&rollout(&e, &seq, &sys), &targets, sys.lambda).unwrap();
            let outputs: Vec<_> = samples
                .iter()
                .map(|s| forward_sequence(&s.inputs, &seq.actions, &sys).unwrap())
                .collect();
            assert_abs_diff_eq!(lifted, particle_loss(&outputs, &samples).unwrap(), epsilon = 1e-9);
        }
    }

    #[test]
    fn terminal_cost_examples() {
        let sys = SystemConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<_> = (0..3).map(|_| random_sample(&mut rng, &sys)).collect();
        let t = EnsembleState::from_labels(&samples, &sys).unwrap();
        assert_eq!(terminal_cost(&t, &t, 32.0).unwrap(), 0.0);
        let short = EnsembleState::new(t.measures[..2].to_vec());
        assert!(matches!(terminal_cost(&short, &t, 32.0), Err(Error::Dimension(_))));

        let pe = |i| crate::dynamics::PositionalEncoding::new(i, 2);
        let p = DiscreteMeasure::empirical(&[
            ParticleState::new(pe(1), vec![0.0, 0.0]),
            ParticleState::new(pe(2), vec![1.0, 1.0]),
        ]);
        let q = DiscreteMeasure::empirical(&[
            ParticleState::new(pe(1), vec![1.0, 1.0]),
            ParticleState::new(pe(2), vec![0.0, 0.0]),
        ]);
        let v = terminal_cost(&EnsembleState::new(vec![p]), &EnsembleState::new(vec![q]), 32.0).unwrap();
        assert_abs_diff_eq!(v, 2.0, epsilon = 1e-15);
    }
}
