//! The toy attention-approximation experiment, action-level sweeps and the
//! sample-size robustness study.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{quantize_ensemble, train, OpenLoopPolicy};
use crate::dynamics::{weighted_softmax, SequenceSample, SystemConfig};
use crate::lifting::{rollout, terminal_cost, ActionSequence, EnsembleState};
use crate::linalg::dot;
use crate::quantization::{build_state_grid, ActionNet, StateGrid};
use crate::transport::{wasserstein2_sq, DiscreteMeasure};
use crate::{Error, Result};

/// Self-attention with identity query, key and value maps:
/// `y^i = Σ_j softmax_j(β⟨x^i, x^j⟩) x^j`.
pub fn target_map(inputs: &[Vec<f64>], beta: f64) -> Vec<Vec<f64>> {
    let ones = vec![1.0; inputs.len()];
    inputs
        .iter()
        .map(|x| {
            let logits: Vec<f64> = inputs.iter().map(|z| beta * dot(x, z)).collect();
            let w = weighted_softmax(&logits, &ones);
            let mut y = vec![0.0; x.len()];
            for (wj, z) in w.iter().zip(inputs) {
                for (yc, zc) in y.iter_mut().zip(z) {
                    *yc += wj * zc;
                }
            }
            y
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_particles: usize,
    pub dim: usize,
    pub k_train: usize,
    pub k_test: usize,
    pub seed: u64,
    pub beta_target: f64,
    pub state_box: Vec<(f64, f64)>,
}

impl DatasetSpec {
    pub fn toy() -> Self {
        Self {
            n_particles: 4,
            dim: 2,
            k_train: 35,
            k_test: 15,
            seed: 0,
            beta_target: 0.3,
            state_box: vec![(-1.0, 1.0); 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_train == 0 || self.k_test == 0 {
            return Err(Error::Config("k_train and k_test must be at least 1".into()));
        }
        if self.n_particles == 0 || self.dim == 0 {
            return Err(Error::Config("sequence length and dimension must be positive".into()));
        }
        if self.state_box.len() != self.dim {
            return Err(Error::Config(format!(
                "state box has {} axes, expected {}",
                self.state_box.len(),
                self.dim
            )));
        }
        if self.state_box.iter().any(|&(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
            return Err(Error::Config("state box bounds must satisfy lo <= hi".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub seed: u64,
    pub beta_target: f64,
    pub train: Vec<SequenceSample>,
    pub test: Vec<SequenceSample>,
}

/// Draws `count` sequences uniformly from the box and labels them with the
/// target map.
pub fn draw_samples(rng: &mut impl Rng, count: usize, spec: &DatasetSpec) -> Vec<SequenceSample> {
    (0..count)
        .map(|_| {
            let inputs: Vec<Vec<f64>> = (0..spec.n_particles)
                .map(|_| spec.state_box.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect())
                .collect();
            let labels = target_map(&inputs, spec.beta_target);
            SequenceSample { inputs, labels }
        })
        .collect()
}

/// Training samples first, then test samples, from one seeded stream.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = draw_samples(&mut rng, spec.k_train, spec);
    let test = draw_samples(&mut rng, spec.k_test, spec);
    Ok(Dataset {
        seed: spec.seed,
        beta_target: spec.beta_target,
        train,
        test,
    })
}

/// `ℓ(n) = c·n^(d+1)`, the measure level tied to the state level.
pub fn auto_measure_level(n: usize, d: usize, scale: f64) -> Result<u32> {
    let v = (scale * (n as f64).powi(d as i32 + 1)).round();
    if !(1.0..=f64::from(u32::MAX)).contains(&v) {
        return Err(Error::Config(format!("auto-scaled measure level {v} is out of range")));
    }
    Ok(v as u32)
}

/// Quantization settings shared by the sweep and the robustness study.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSetup {
    pub sys: SystemConfig,
    pub state_level: usize,
    pub measure_level: u32,
    pub net_seed: u64,
    pub budget: Option<usize>,
    /// Adds the input features of the training data to the state grid.
    pub include_data_points: bool,
}

impl TrainingSetup {
    pub fn toy() -> Self {
        Self {
            sys: SystemConfig::toy(),
            state_level: 10,
            measure_level: 20,
            net_seed: 0,
            budget: None,
            include_data_points: false,
        }
    }

    pub fn grid(&self) -> Result<StateGrid> {
        build_state_grid(&self.sys.state_box, self.state_level, self.sys.n_particles)
    }

    /// The grid, extended by the inputs of `samples` when requested.
    pub fn grid_for(&self, samples: &[SequenceSample]) -> Result<StateGrid> {
        let grid = self.grid()?;
        if !self.include_data_points {
            return Ok(grid);
        }
        let extra: Vec<Vec<f64>> = samples.iter().flat_map(|s| s.inputs.iter().cloned()).collect();
        grid.with_extra_points(&extra)
    }

    /// Trains on `samples` with the same net at every layer.
    pub fn fit(&self, samples: &[SequenceSample], net: &ActionNet, grid: &StateGrid) -> Result<(OpenLoopPolicy, usize)> {
        for s in samples {
            s.check(&self.sys)?;
        }
        let inputs = EnsembleState::from_inputs(samples, &self.sys)?;
        let labels = EnsembleState::from_labels(samples, &self.sys)?;
        let initial = quantize_ensemble(&inputs, grid, self.measure_level)?;
        let targets = quantize_ensemble(&labels, grid, self.measure_level)?;
        let nets = vec![net.clone(); self.sys.horizon];
        let (reach, _, open) = train(&initial, &targets, &nets, grid, &self.sys, self.budget)?;
        Ok((open, reach.total_states()))
    }
}

/// Mean squared particle error of fixed weights on `samples`, exact flow.
pub fn exact_error(samples: &[SequenceSample], seq: &ActionSequence, sys: &SystemConfig) -> Result<f64> {
    let e = EnsembleState::from_inputs(samples, sys)?;
    let t = EnsembleState::from_labels(samples, sys)?;
    terminal_cost(&rollout(&e, seq, sys), &t, sys.lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub level: usize,
    pub train_error: f64,
    pub test_error: f64,
    pub wall_seconds: f64,
    pub state_count: usize,
}

/// One training run per action level with nested sampled nets: level `M`
/// uses the first `M` draws of the seeded stream.
///
/// The train error is the quantized value reached by the solver; the test
/// error is the exact-flow error of the extracted weights on unseen data.
pub fn run_training_sweep(
    setup: &TrainingSetup,
    dataset: &Dataset,
    levels: &[usize],
) -> Result<(Vec<SweepRow>, Vec<OpenLoopPolicy>)> {
    if levels.is_empty() {
        return Err(Error::Config("no action levels given".into()));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) || levels[0] == 0 {
        return Err(Error::Config("action levels must be positive and strictly increasing".into()));
    }
    let grid = setup.grid_for(&dataset.train)?;
    let full = ActionNet::sampled(&setup.sys, setup.net_seed, *levels.last().expect("non-empty"));
    let mut rows = Vec::with_capacity(levels.len());
    let mut policies = Vec::with_capacity(levels.len());
    for &m in levels {
        let start = Instant::now();
        let (open, states) = setup
            .fit(&dataset.train, &full.prefix(m), &grid)
            .map_err(|e| Error::AtLevel {
                level: m,
                source: Box::new(e),
            })?;
        let test_error = exact_error(&dataset.test, &open.actions, &setup.sys)?;
        let wall_seconds = start.elapsed().as_secs_f64();
        rows.push(SweepRow {
            level: m,
            train_error: open.value,
            test_error,
            wall_seconds,
            state_count: states,
        });
        policies.push(open);
    }
    Ok((rows, policies))
}

/// Least-squares `y ≈ a·x² + b·x + c` and its coefficient of determination.
pub fn quadratic_fit(xs: &[f64], ys: &[f64]) -> Result<([f64; 3], f64)> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::Dimension("a quadratic fit needs at least three points".into()));
    }
    // normal equations in the basis (x², x, 1)
    let mut m = [[0.0f64; 4]; 3];
    for (&x, &y) in xs.iter().zip(ys) {
        let basis = [x * x, x, 1.0];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] += basis[r] * basis[c];
            }
            m[r][3] += basis[r] * y;
        }
    }
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .expect("non-empty range");
        if m[pivot][col].abs() < 1e-300 {
            return Err(Error::Dimension("degenerate abscissae for a quadratic fit".into()));
        }
        m.swap(col, pivot);
        let pivot_row = m[col];
        for (r, row) in m.iter_mut().enumerate() {
            if r != col {
                let f = row[col] / pivot_row[col];
                for (v, p) in row.iter_mut().zip(pivot_row).skip(col) {
                    *v -= f * p;
                }
            }
        }
    }
    let coef = [m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]];
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean) * (y - mean)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let r = y - (coef[0] * x * x + coef[1] * x + coef[2]);
            r * r
        })
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok((coef, r2))
}

/// Finitely supported law over (input measure, target measure) pairs with
/// exact rational weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleLiftedDistribution {
    pairs: Vec<(DiscreteMeasure, DiscreteMeasure)>,
    weights: Vec<u64>,
    denominator: u64,
}

impl DoubleLiftedDistribution {
    pub fn new(pairs: Vec<(DiscreteMeasure, DiscreteMeasure)>, weights: Vec<u64>) -> Result<Self> {
        if pairs.is_empty() || pairs.len() != weights.len() {
            return Err(Error::InvalidMeasure("need one positive weight per pair".into()));
        }
        if weights.contains(&0) {
            return Err(Error::InvalidMeasure("weights must be positive".into()));
        }
        let denominator = weights.iter().sum();
        Ok(Self {
            pairs,
            weights,
            denominator,
        })
    }

    /// Uniform weights over the lifted samples.
    pub fn empirical(samples: &[SequenceSample], sys: &SystemConfig) -> Result<Self> {
        let inputs = EnsembleState::from_inputs(samples, sys)?;
        let labels = EnsembleState::from_labels(samples, sys)?;
        let n = inputs.len();
        Self::new(inputs.measures.into_iter().zip(labels.measures).collect(), vec![1; n])
    }

    pub fn pairs(&self) -> &[(DiscreteMeasure, DiscreteMeasure)] {
        &self.pairs
    }

    pub fn weights(&self) -> &[u64] {
        &self.weights
    }

    pub fn denominator(&self) -> u64 {
        self.denominator
    }
}

/// `Σ_k w_k W²(Φ_T(μ^k, U), ν^k)` with the exact flow.
pub fn evaluate_double_lifted(p: &DoubleLiftedDistribution, seq: &ActionSequence, sys: &SystemConfig) -> Result<f64> {
    let costs = p
        .pairs
        .par_iter()
        .map(|(mu, nu)| {
            let e = rollout(&EnsembleState::new(vec![mu.clone()]), seq, sys);
            wasserstein2_sq(&e.measures[0], nu, sys.lambda).map(|(v, _)| v)
        })
        .collect::<Result<Vec<f64>>>()?;
    let total: f64 = costs.iter().zip(&p.weights).map(|(c, &w)| c * w as f64).sum();
    Ok(total / p.denominator as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessSpec {
    pub dataset: DatasetSpec,
    /// Samples in the held-out proxy for the true distribution.
    pub truth_size: usize,
    pub truth_seed: u64,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Matches the largest sweep net. Much smaller nets tend to contain one
    /// action that wins at every sample size, which flattens the table.
    pub net_size: usize,
}

impl RobustnessSpec {
    pub fn toy() -> Self {
        Self {
            dataset: DatasetSpec::toy(),
            truth_size: 200,
            truth_seed: 9_999,
            sizes: vec![5, 15, 35],
            seeds: vec![0, 1, 2, 3, 4],
            net_size: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub k_r: usize,
    pub seed: u64,
    pub value: f64,
    pub gap: f64,
    /// Distance to the weights selected at the previous size for the same seed.
    pub action_distance: Option<f64>,
}

/// Trains on nested empirical samples of growing size and scores each
/// optimum on the held-out proxy. Gaps are measured against the best value
/// observed over the whole table.
pub fn robustness_study(setup: &TrainingSetup, spec: &RobustnessSpec) -> Result<Vec<RobustnessRow>> {
    if spec.sizes.is_empty() || spec.sizes.windows(2).any(|w| w[0] >= w[1]) || spec.sizes[0] == 0 {
        return Err(Error::Config("sample sizes must be positive and strictly increasing".into()));
    }
    if spec.seeds.is_empty() || spec.truth_size == 0 || spec.net_size == 0 {
        return Err(Error::Config("robustness study needs seeds, a truth sample and a net".into()));
    }
    spec.dataset.validate()?;
    let net = ActionNet::sampled(&setup.sys, setup.net_seed, spec.net_size);
    let truth_samples = draw_samples(&mut ChaCha8Rng::seed_from_u64(spec.truth_seed), spec.truth_size, &spec.dataset);
    let truth = DoubleLiftedDistribution::empirical(&truth_samples, &setup.sys)?;
    let largest = *spec.sizes.last().expect("non-empty");

    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let pool = draw_samples(&mut ChaCha8Rng::seed_from_u64(seed), largest, &spec.dataset);
        let grid = setup.grid_for(&pool)?;
        let mut previous: Option<ActionSequence> = None;
        for &k in &spec.sizes {
            let (open, _) = setup.fit(&pool[..k], &net, &grid)?;
            let value = evaluate_double_lifted(&truth, &open.actions, &setup.sys)?;
            rows.push(RobustnessRow {
                k_r: k,
                seed,
                value,
                gap: 0.0,
                action_distance: previous.as_ref().map(|p| p.distance(&open.actions)),
            });
            previous = Some(open.actions);
        }
    }
    let best = rows.iter().map(|r| r.value).fold(f64::INFINITY, f64::min);
    for r in &mut rows {
        r.gap = r.value - best;
    }
    Ok(rows)
}

/// Mean gap per sample size, in the order of `sizes`.
pub fn mean_gaps(rows: &[RobustnessRow], sizes: &[usize]) -> Vec<f64> {
    sizes
        .iter()
        .map(|&k| {
            let g: Vec<f64> = rows.iter().filter(|r| r.k_r == k).map(|r| r.gap).collect();
            g.iter().sum::<f64>() / g.len().max(1) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn target_map_examples() {
        let x = vec![vec![0.3, -0.2]];
        assert_eq!(target_map(&x, 0.3), x);
        let same = vec![vec![0.5, 0.5]; 3];
        for y in target_map(&same, 0.3) {
            assert_abs_diff_eq!(y[0], 0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(y[1], 0.5, epsilon = 1e-15);
        }
        let y = target_map(&[vec![1.0, 0.0], vec![-1.0, 0.0]], 0.3);
        // softmax(0.3, -0.3) = (1/(1+e^-0.6), e^-0.6/(1+e^-0.6))
        let w = 1.0 / (1.0 + (-0.6f64).exp());
        assert_abs_diff_eq!(y[0][0], w - (1.0 - w), epsilon = 1e-15);
        assert_abs_diff_eq!(y[1][0], (1.0 - w) - w, epsilon = 1e-15);
        assert_eq!(y[0][1], 0.0);
    }

    #[test]
    fn target_map_is_equivariant() {
        let x = vec![vec![0.1, 0.9], vec![-0.4, 0.2], vec![0.7, -0.7]];
        let y = target_map(&x, 0.3);
        let perm = [2, 0, 1];
        let xp: Vec<_> = perm.iter().map(|&i| x[i].clone()).collect();
        let yp = target_map(&xp, 0.3);
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..2 {
                assert_abs_diff_eq!(yp[k][c], y[i][c], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn dataset_is_seeded_and_bounded() {
        let spec = DatasetSpec::toy();
        let a = generate_dataset(&spec).unwrap();
        assert_eq!(a, generate_dataset(&spec).unwrap());
        assert_eq!((a.train.len(), a.test.len()), (35, 15));
        let other = generate_dataset(&DatasetSpec { seed: 1, ..spec.clone() }).unwrap();
        assert_ne!(a.train, other.train);
        for s in a.train.iter().chain(&a.test) {
            for y in &s.labels {
                assert!(y.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
            assert_eq!(s.labels, target_map(&s.inputs, 0.3));
        }
        assert!(generate_dataset(&DatasetSpec { k_test: 0, ..spec }).is_err());
    }

    #[test]
    fn measure_level_scaling() {
        assert_eq!(auto_measure_level(2, 2, 1.0).unwrap(), 8);
        assert_eq!(auto_measure_level(10, 2, 0.02).unwrap(), 20);
        assert!(auto_measure_level(10, 2, 0.0).is_err());
    }

    #[test]
    fn quadratic_fit_recovers_coefficients() {
        let xs: Vec<f64> = (1..=10).map(|m| 10.0 * m as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.0437611 * x * x - 0.420042 * x + 7.318885).collect();
        let (c, r2) = quadratic_fit(&xs, &ys).unwrap();
        assert_abs_diff_eq!(c[0], 0.0437611, epsilon = 1e-9);
        assert_abs_diff_eq!(c[1], -0.420042, epsilon = 1e-7);
        assert_abs_diff_eq!(c[2], 7.318885, epsilon = 1e-5);
        assert_abs_diff_eq!(r2, 1.0, epsilon = 1e-12);
        // the published runtimes against the published fit
        let secs = [5.81, 16.75, 34.53, 62.64, 99.69, 137.05, 188.71, 251.66, 326.67, 403.46];
        let (c, r2) = quadratic_fit(&xs, &secs).unwrap();
        assert_abs_diff_eq!(c[0], 0.0437611, epsilon = 1e-4);
        assert!(r2 > 0.999);
    }

    #[test]
    fn double_lifted_reduces_to_terminal_cost() {
        let sys = SystemConfig::toy();
        let data = generate_dataset(&DatasetSpec { k_train: 6, ..DatasetSpec::toy() }).unwrap();
        let net = ActionNet::sampled(&sys, 4, 2);
        let seq = ActionSequence::new(net.actions().to_vec());
        let p = DoubleLiftedDistribution::empirical(&data.train, &sys).unwrap();
        let v = evaluate_double_lifted(&p, &seq, &sys).unwrap();
        assert_abs_diff_eq!(v, exact_error(&data.train, &seq, &sys).unwrap(), epsilon = 1e-12);

        let single = DoubleLiftedDistribution::empirical(&data.train[..1], &sys).unwrap();
        assert_abs_diff_eq!(
            evaluate_double_lifted(&single, &seq, &sys).unwrap(),
            exact_error(&data.train[..1], &seq, &sys).unwrap(),
            epsilon = 1e-15
        );

        let mut reversed: Vec<_> = p.pairs().to_vec();
        reversed.reverse();
        let q = DoubleLiftedDistribution::new(reversed, vec![1; 6]).unwrap();
        assert_abs_diff_eq!(evaluate_double_lifted(&q, &seq, &sys).unwrap(), v, epsilon = 1e-12);

        // weight 2 on one pair equals listing it twice
        let w = DoubleLiftedDistribution::new(p.pairs()[..2].to_vec(), vec![2, 1]).unwrap();
        let dup = DoubleLiftedDistribution::new(
            vec![p.pairs()[0].clone(), p.pairs()[0].clone(), p.pairs()[1].clone()],
            vec![1, 1, 1],
        )
        .unwrap();
        assert_abs_diff_eq!(
            evaluate_double_lifted(&w, &seq, &sys).unwrap(),
            evaluate_double_lifted(&dup, &seq, &sys).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn small_sweep_is_monotone() {
        let setup = TrainingSetup::toy();
        let data = generate_dataset(&DatasetSpec { k_train: 8, k_test: 4, ..DatasetSpec::toy() }).unwrap();
        let (rows, policies) = run_training_sweep(&setup, &data, &[2, 4, 6]).unwrap();
        assert_eq!(rows.len(), 3);
        for w in rows.windows(2) {
            assert!(w[1].train_error <= w[0].train_error);
        }
        for (row, p) in rows.iter().zip(&policies) {
            assert_eq!(p.actions.len(), 2);
            let again = exact_error(&data.test, &p.actions, &setup.sys).unwrap();
            assert_eq!(again, row.test_error);
        }
        assert!(run_training_sweep(&setup, &data, &[4, 2]).is_err());
        let tight = TrainingSetup { budget: Some(5), ..setup };
        let err = run_training_sweep(&tight, &data, &[2, 4]).unwrap_err();
        assert!(matches!(err, Error::AtLevel { level: 4, .. }) && err.is_budget(), "{err}");
    }

    #[test]
    fn robustness_rows_are_complete() {
        let setup = TrainingSetup::toy();
        let spec = RobustnessSpec {
            truth_size: 20,
            sizes: vec![2, 4],
            seeds: vec![0, 1],
            net_size: 3,
            ..RobustnessSpec::toy()
        };
        let rows = robustness_study(&setup, &spec).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().any(|r| r.gap == 0.0));
        assert!(rows.iter().all(|r| r.gap >= 0.0));
        assert!(rows[0].action_distance.is_none() && rows[1].action_distance.is_some());
        assert_eq!(rows, robustness_study(&setup, &spec).unwrap());
        assert_eq!(mean_gaps(&rows, &[2, 4]).len(), 2);
    }
}
