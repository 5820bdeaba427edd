//! The controlled interacting-particle system of a single-head transformer
//! block with a feed-forward layer.
//!
//! Particle `i` carries a positional encoding `i/N` next to its feature
//! vector. One layer maps the feature `x` to
//!
//! ```text
//! W·σ(A·x + b) + Σ_j softmax_j(β⟨Qx, K z_j⟩) · V z_j
//! ```
//!
//! where the `z_j` range over the atoms of the current empirical measure.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::linalg::{dot, Matrix};
use crate::transport::DiscreteMeasure;
use crate::{Error, Result};

/// Positional encoding `index / count` with `1 <= index <= count`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PositionalEncoding {
    pub index: u32,
    pub count: u32,
}

impl PositionalEncoding {
    pub fn new(index: u32, count: u32) -> Self {
        assert!(index >= 1 && index <= count, "positional encoding {index}/{count} out of range");
        Self { index, count }
    }

    pub fn value(self) -> f64 {
        f64::from(self.index) / f64::from(self.count)
    }
}

/// A point `(i/N, x)` of the superstate space.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    pub pe: PositionalEncoding,
    pub feature: Vec<f64>,
}

impl ParticleState {
    pub fn new(pe: PositionalEncoding, feature: Vec<f64>) -> Self {
        Self { pe, feature }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
    HardTanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
            Activation::HardTanh => "hard_tanh",
        }
    }

    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
            Activation::HardTanh => v.clamp(-1.0, 1.0),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            "hard_tanh" => Ok(Activation::HardTanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Feature dimension `d`, feed-forward width `d1` and attention width `d2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockDims {
    pub d: usize,
    pub d1: usize,
    pub d2: usize,
}

impl BlockDims {
    /// Total number of scalar weights in one layer.
    pub fn num_entries(self) -> usize {
        let BlockDims { d, d1, d2 } = self;
        d * d1 + d1 * d + d1 + 2 * d2 * d + d * d
    }
}

/// The weights `(W, A, b, Q, K, V)` shared by every particle at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightAction {
    pub w: Matrix,
    pub a: Matrix,
    pub b: Vec<f64>,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl WeightAction {
    pub fn zeros(dims: BlockDims) -> Self {
        let BlockDims { d, d1, d2 } = dims;
        Self {
            w: Matrix::zeros(d, d1),
            a: Matrix::zeros(d1, d),
            b: vec![0.0; d1],
            q: Matrix::zeros(d2, d),
            k: Matrix::zeros(d2, d),
            v: Matrix::zeros(d, d),
        }
    }

    /// Rebuilds an action from the flat layout produced by [`Self::flat`].
    pub fn from_flat(dims: BlockDims, flat: &[f64]) -> Result<Self> {
        if flat.len() != dims.num_entries() {
            return Err(Error::Dimension(format!(
                "expected {} weight entries, got {}",
                dims.num_entries(),
                flat.len()
            )));
        }
        let BlockDims { d, d1, d2 } = dims;
        let mut rest = flat;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        Ok(Self {
            w: Matrix::from_row_major(d, d1, take(d * d1)),
            a: Matrix::from_row_major(d1, d, take(d1 * d)),
            b: take(d1),
            q: Matrix::from_row_major(d2, d, take(d2 * d)),
            k: Matrix::from_row_major(d2, d, take(d2 * d)),
            v: Matrix::from_row_major(d, d, take(d * d)),
        })
    }

    /// All entries in the order W, A, b, Q, K, V (matrices row-major).
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims().num_entries());
        out.extend_from_slice(self.w.as_slice());
        out.extend_from_slice(self.a.as_slice());
        out.extend_from_slice(&self.b);
        out.extend_from_slice(self.q.as_slice());
        out.extend_from_slice(self.k.as_slice());
        out.extend_from_slice(self.v.as_slice());
        out
    }

    pub fn dims(&self) -> BlockDims {
        BlockDims {
            d: self.w.rows(),
            d1: self.w.cols(),
            d2: self.q.rows(),
        }
    }

    pub fn check_dims(&self, dims: BlockDims) -> Result<()> {
        let BlockDims { d, d1, d2 } = dims;
        let ok = self.w.shape() == (d, d1)
            && self.a.shape() == (d1, d)
            && self.b.len() == d1
            && self.q.shape() == (d2, d)
            && self.k.shape() == (d2, d)
            && self.v.shape() == (d, d);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "weight action shapes do not match d={d}, d1={d1}, d2={d2}"
            )))
        }
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Frobenius distance on the product of all weight arrays.
    pub fn distance(&self, other: &Self) -> f64 {
        crate::linalg::sq_dist(&self.flat(), &other.flat()).sqrt()
    }
}

/// Static description of the controlled system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub n_particles: usize,
    pub dims: BlockDims,
    pub beta: f64,
    pub horizon: usize,
    pub activation: Activation,
    /// Per-coordinate `(lo, hi)` bounds of the feature box.
    pub state_box: Vec<(f64, f64)>,
    /// Every weight entry lies in `[-action_bound, action_bound]`.
    pub action_bound: f64,
    pub lambda: f64,
}

impl SystemConfig {
    /// The toy configuration: four particles in `[-1, 1]^2`, two layers.
    pub fn toy() -> Self {
        Self {
            n_particles: 4,
            dims: BlockDims { d: 2, d1: 2, d2: 2 },
            beta: 0.5,
            horizon: 2,
            activation: Activation::Relu,
            state_box: vec![(-1.0, 1.0); 2],
            action_bound: 1.0,
            lambda: 32.0,
        }
    }

    /// Checks every structural invariant and returns the config unchanged.
    pub fn validated(self) -> Result<Self> {
        if self.n_particles == 0 {
            return Err(Error::Config("particle count must be at least 1".into()));
        }
        if self.n_particles > u32::MAX as usize {
            return Err(Error::Config("particle count too large".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        let BlockDims { d, d1, d2 } = self.dims;
        if d == 0 || d1 == 0 || d2 == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.state_box.len() != d {
            return Err(Error::Config(format!(
                "state box has {} axes but d = {d}",
                self.state_box.len()
            )));
        }
        if self
            .state_box
            .iter()
            .any(|&(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi))
        {
            return Err(Error::Config("state box bounds must satisfy lo <= hi".into()));
        }
        if !(self.action_bound > 0.0 && self.action_bound.is_finite()) {
            return Err(Error::Config("action bound must be positive".into()));
        }
        let threshold = self.lambda_threshold();
        if !(self.lambda > threshold && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda = {} must exceed (N/2)·diam(S)^2 = {threshold}",
                self.lambda
            )));
        }
        Ok(self)
    }

    pub fn state_diameter(&self) -> f64 {
        self.state_box
            .iter()
            .map(|&(lo, hi)| (hi - lo) * (hi - lo))
            .sum::<f64>()
            .sqrt()
    }

    /// `(N/2)·diam(S)^2`, the lower bound enforced on `λ`.
    pub fn lambda_threshold(&self) -> f64 {
        let diam_sq: f64 = self.state_box.iter().map(|&(lo, hi)| (hi - lo) * (hi - lo)).sum();
        self.n_particles as f64 / 2.0 * diam_sq
    }

    pub fn encoding(&self, i: usize) -> PositionalEncoding {
        PositionalEncoding::new(i as u32, self.n_particles as u32)
    }

    pub fn in_state_box(&self, x: &[f64]) -> bool {
        x.len() == self.state_box.len()
            && x.iter().zip(&self.state_box).all(|(v, &(lo, hi))| *v >= lo && *v <= hi)
    }

    pub fn check_action(&self, u: &WeightAction) -> Result<()> {
        u.check_dims(self.dims)?;
        if u.max_abs_entry() > self.action_bound {
            return Err(Error::Config(format!(
                "weight entry exceeds action bound {}",
                self.action_bound
            )));
        }
        Ok(())
    }
}

/// One training pair: an input sequence and its label sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
}

impl SequenceSample {
    pub fn check(&self, sys: &SystemConfig) -> Result<()> {
        let n = sys.n_particles;
        if self.inputs.len() != n || self.labels.len() != n {
            return Err(Error::Dimension(format!(
                "sample has {} inputs and {} labels, expected {n}",
                self.inputs.len(),
                self.labels.len()
            )));
        }
        let d = sys.dims.d;
        if self.inputs.iter().chain(&self.labels).any(|v| v.len() != d) {
            return Err(Error::Dimension(format!("feature vectors must have length {d}")));
        }
        Ok(())
    }
}

/// Softmax of `logits` with per-atom multiplicities `masses`.
///
/// The maximum logit is subtracted first, so the result is unchanged by a
/// constant shift and never overflows.
pub fn weighted_softmax(logits: &[f64], masses: &[f64]) -> Vec<f64> {
    debug_assert_eq!(logits.len(), masses.len());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits
        .iter()
        .zip(masses)
        .map(|(l, m)| m * (l - max).exp())
        .collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Attention of the query feature `x` over weighted atoms `(mass, z_j)`.
pub fn attention_weights(x: &[f64], atoms: &[(f64, &[f64])], u: &WeightAction, beta: f64) -> Vec<f64> {
    assert!(!atoms.is_empty(), "attention over an empty measure");
    let qx = u.q.mul_vec(x);
    let logits: Vec<f64> = atoms
        .iter()
        .map(|(_, z)| beta * dot(&qx, &u.k.mul_vec(z)))
        .collect();
    let masses: Vec<f64> = atoms.iter().map(|(m, _)| *m).collect();
    weighted_softmax(&logits, &masses)
}

/// Keys, values and masses of one measure under one action, shared by every
/// query particle of a push-forward.
pub(crate) struct AttentionContext<'a> {
    u: &'a WeightAction,
    beta: f64,
    activation: Activation,
    masses: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl<'a> AttentionContext<'a> {
    pub(crate) fn new(u: &'a WeightAction, mu: &DiscreteMeasure, sys: &SystemConfig) -> Self {
        Self::from_atoms(u, mu.masses_f64(), mu.atoms().iter().map(|z| z.feature.as_slice()), sys)
    }

    pub(crate) fn from_atoms<'z>(
        u: &'a WeightAction,
        masses: Vec<f64>,
        features: impl Iterator<Item = &'z [f64]>,
        sys: &SystemConfig,
    ) -> Self {
        let (keys, values) = features.map(|z| (u.k.mul_vec(z), u.v.mul_vec(z))).unzip();
        Self {
            u,
            beta: sys.beta,
            activation: sys.activation,
            masses,
            keys,
            values,
        }
    }

    pub(crate) fn step_feature(&self, x: &[f64]) -> Vec<f64> {
        let u = self.u;
        let mut pre = u.a.mul_vec(x);
        for (p, b) in pre.iter_mut().zip(&u.b) {
            *p = self.activation.apply(*p + b);
        }
        let mut out = u.w.mul_vec(&pre);

        let qx = u.q.mul_vec(x);
        let logits: Vec<f64> = self.keys.iter().map(|kz| self.beta * dot(&qx, kz)).collect();
        let weights = weighted_softmax(&logits, &self.masses);
        for (a, vz) in weights.iter().zip(&self.values) {
            for (o, v) in out.iter_mut().zip(vz) {
                *o += a * v;
            }
        }
        out
    }
}

/// The single-particle McKean–Vlasov map: moves `x` one layer forward against
/// the measure `mu`, keeping its positional encoding.
pub fn step_particle(
    x: &ParticleState,
    u: &WeightAction,
    mu: &DiscreteMeasure,
    sys: &SystemConfig,
) -> ParticleState {
    let ctx = AttentionContext::new(u, mu, sys);
    ParticleState::new(x.pe, ctx.step_feature(&x.feature))
}

/// Attaches positional encodings `1/N, ..., N/N` to a feature sequence.
pub fn attach_encodings(inputs: &[Vec<f64>], sys: &SystemConfig) -> Result<Vec<ParticleState>> {
    if inputs.len() != sys.n_particles {
        return Err(Error::Dimension(format!(
            "expected {} input vectors, got {}",
            sys.n_particles,
            inputs.len()
        )));
    }
    if let Some(bad) = inputs.iter().find(|x| x.len() != sys.dims.d) {
        return Err(Error::Dimension(format!(
            "feature of length {} does not match d = {}",
            bad.len(),
            sys.dims.d
        )));
    }
    Ok(inputs
        .iter()
        .enumerate()
        .map(|(i, x)| ParticleState::new(sys.encoding(i + 1), x.clone()))
        .collect())
}

/// Every intermediate superstate configuration, `actions.len() + 1` entries.
pub fn forward_trajectory(
    inputs: &[Vec<f64>],
    actions: &[WeightAction],
    sys: &SystemConfig,
) -> Result<Vec<Vec<ParticleState>>> {
    for u in actions {
        u.check_dims(sys.dims)?;
    }
    let mut states = attach_encodings(inputs, sys)?;
    let mut out = Vec::with_capacity(actions.len() + 1);
    out.push(states.clone());
    for u in actions {
        let mu = DiscreteMeasure::empirical(&states);
        let ctx = AttentionContext::new(u, &mu, sys);
        states = states
            .iter()
            .map(|x| ParticleState::new(x.pe, ctx.step_feature(&x.feature)))
            .collect();
        out.push(states.clone());
    }
    Ok(out)
}

/// Runs the particle system through every layer and returns the terminal superstates.
pub fn forward_sequence(
    inputs: &[Vec<f64>],
    actions: &[WeightAction],
    sys: &SystemConfig,
) -> Result<Vec<ParticleState>> {
    Ok(forward_trajectory(inputs, actions, sys)?
        .pop()
        .expect("trajectory is never empty"))
}
