//! The three quantizers of the finite model and the quantized flows.
//!
//! * [`StateGrid`]: an axis-aligned lattice covering the feature box with
//!   radius `1/n`, crossed with the positional encodings.
//! * [`quantize_measure`]: nearest type with denominator `ℓ` on the simplex.
//! * [`ActionNet`]: a finite set of weight tuples, either a lattice or a
//!   nested seeded sample.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{AttentionContext, ParticleState, PositionalEncoding, SystemConfig, WeightAction};
use crate::linalg::sq_dist;
use crate::transport::{pair_cost, solve_transport, DiscreteMeasure};
use crate::{Error, Result};

/// Finite covering of the feature box, paired with the positional encodings.
///
/// Atoms of the quantized superstate space are indexed `0..N·|S_n|`
/// position-major: atom `a` is position `a / |S_n|`, state `a % |S_n|`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrid {
    level: usize,
    n_positions: usize,
    axes: Vec<Vec<f64>>,
    points: Vec<Vec<f64>>,
    /// Points appended after the lattice; switches lookup to a linear scan.
    extra_points: usize,
}

/// Builds the lattice for level `n`: per-axis spacing at most `2/(n·√d)`,
/// so every point of the box is within `1/n` of a grid point.
pub fn build_state_grid(state_box: &[(f64, f64)], n: usize, n_positions: usize) -> Result<StateGrid> {
    if n == 0 {
        return Err(Error::Config("state quantization level must be at least 1".into()));
    }
    if n_positions == 0 || state_box.is_empty() {
        return Err(Error::Config("grid needs at least one position and one axis".into()));
    }
    let d = state_box.len() as f64;
    let max_spacing = 2.0 / (n as f64 * d.sqrt());
    let axes: Vec<Vec<f64>> = state_box
        .iter()
        .map(|&(lo, hi)| {
            let len = hi - lo;
            let intervals = if len > 0.0 { (len / max_spacing).ceil() as usize } else { 0 };
            if intervals == 0 {
                return vec![lo];
            }
            (0..=intervals)
                .map(|i| lo + len * i as f64 / intervals as f64)
                .collect()
        })
        .collect();

    let mut points: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
    }
    Ok(StateGrid {
        level: n,
        n_positions,
        axes,
        points,
        extra_points: 0,
    })
}

impl StateGrid {
    /// Appends extra feature points (for instance the initial data) that are
    /// not already on the grid.
    pub fn with_extra_points(mut self, extra: &[Vec<f64>]) -> Result<Self> {
        let d = self.axes.len();
        for p in extra {
            if p.len() != d {
                return Err(Error::Dimension(format!("extra grid point has {} coordinates, expected {d}", p.len())));
            }
            if !self.points.contains(p) {
                self.points.push(p.clone());
                self.extra_points += 1;
            }
        }
        Ok(self)
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn n_positions(&self) -> usize {
        self.n_positions
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// `|S_n|`.
    pub fn num_states(&self) -> usize {
        self.points.len()
    }

    /// `|X_n| = N·|S_n|`.
    pub fn num_atoms(&self) -> usize {
        self.n_positions * self.points.len()
    }

    /// Maps a 1-based index `a` of `X_n` to 1-based `(position, state)`.
    pub fn enumerate_index(&self, a: usize) -> Result<(usize, usize)> {
        let max = self.num_atoms();
        if a == 0 || a > max {
            return Err(Error::IndexOutOfRange { index: a, max });
        }
        let s = self.num_states();
        Ok(((a - 1) / s + 1, (a - 1) % s + 1))
    }

    /// Inverse of [`Self::enumerate_index`].
    pub fn index_of(&self, position: usize, state: usize) -> Result<usize> {
        let s = self.num_states();
        if position == 0 || position > self.n_positions {
            return Err(Error::IndexOutOfRange { index: position, max: self.n_positions });
        }
        if state == 0 || state > s {
            return Err(Error::IndexOutOfRange { index: state, max: s });
        }
        Ok((position - 1) * s + state)
    }

    /// The superstate with 0-based atom index `a`.
    pub fn atom(&self, a: usize) -> ParticleState {
        let s = self.num_states();
        ParticleState::new(
            PositionalEncoding::new((a / s + 1) as u32, self.n_positions as u32),
            self.points[a % s].clone(),
        )
    }

    pub(crate) fn atom_feature(&self, a: usize) -> &[f64] {
        &self.points[a % self.num_states()]
    }

    pub(crate) fn atom_position(&self, a: usize) -> PositionalEncoding {
        PositionalEncoding::new((a / self.num_states() + 1) as u32, self.n_positions as u32)
    }

    /// 0-based atom index of a superstate whose feature is already a grid point.
    pub(crate) fn atom_index(&self, pe: PositionalEncoding, state: usize) -> usize {
        (pe.index as usize - 1) * self.num_states() + state
    }

    /// 0-based index of the grid point nearest to `x`, lowest index on ties.
    pub fn nearest_state(&self, x: &[f64]) -> usize {
        if self.extra_points > 0 {
            return self.nearest_state_scan(x);
        }
        let mut index = 0usize;
        for (axis, &v) in self.axes.iter().zip(x) {
            index = index * axis.len() + nearest_on_axis(axis, v);
        }
        index
    }

    /// Linear scan over every grid point.
    pub fn nearest_state_scan(&self, x: &[f64]) -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (j, p) in self.points.iter().enumerate() {
            let d = sq_dist(p, x);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        best
    }

    /// Position-sensitive nearest-neighbour quantizer; defined on all of
    /// `R^d`, points outside the box snap to the closest boundary point.
    pub fn quantize_state(&self, x: &ParticleState) -> ParticleState {
        ParticleState::new(x.pe, self.points[self.nearest_state(&x.feature)].clone())
    }

    /// 0-based atom index of the quantized image of `x`.
    pub fn quantize_index(&self, x: &ParticleState) -> usize {
        self.atom_index(x.pe, self.nearest_state(&x.feature))
    }

    /// Push-forward of `mu` under the state quantizer.
    pub fn quantize_discrete(&self, mu: &DiscreteMeasure) -> DiscreteMeasure {
        mu.map_atoms(|x| self.quantize_state(x))
    }
}

fn nearest_on_axis(axis: &[f64], v: f64) -> usize {
    let m = axis.len() - 1;
    if m == 0 {
        return 0;
    }
    let (lo, hi) = (axis[0], axis[m]);
    let t = ((v - lo) / (hi - lo) * m as f64).floor();
    let guess = if t.is_nan() { 0 } else { t.clamp(0.0, m as f64) as usize };
    let from = guess.saturating_sub(1);
    let to = (guess + 2).min(m);
    let mut best = from;
    let mut best_d = (axis[from] - v).abs();
    for (i, c) in axis.iter().enumerate().take(to + 1).skip(from + 1) {
        let d = (c - v).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Probability measure on `X_n` whose masses are integer multiples of `1/ℓ`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QuantizedMeasure {
    level: u32,
    /// `(atom index, count)` sorted by atom index, counts positive.
    entries: Vec<(u32, u32)>,
}

impl QuantizedMeasure {
    pub fn from_sparse(level: u32, mut entries: Vec<(u32, u32)>) -> Result<Self> {
        if level == 0 {
            return Err(Error::Config("measure quantization level must be at least 1".into()));
        }
        entries.retain(|&(_, c)| c > 0);
        entries.sort_unstable();
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidMeasure("duplicate atom index".into()));
        }
        let total: u64 = entries.iter().map(|&(_, c)| u64::from(c)).sum();
        if total != u64::from(level) {
            return Err(Error::InvalidMeasure(format!("counts sum to {total}, expected {level}")));
        }
        Ok(Self { level, entries })
    }

    pub fn from_dense(level: u32, counts: &[u32]) -> Result<Self> {
        Self::from_sparse(
            level,
            counts.iter().enumerate().map(|(a, &c)| (a as u32, c)).collect(),
        )
    }

    /// `R_ℓ` applied to the state-quantized image of `mu`.
    pub fn from_measure(mu: &DiscreteMeasure, grid: &StateGrid, level: u32) -> Result<Self> {
        let mut p = vec![0.0; grid.num_atoms()];
        for (x, m) in mu.atoms().iter().zip(mu.masses_f64()) {
            p[grid.quantize_index(x)] += m;
        }
        quantize_measure(&p, level)
    }

    /// Exact conversion of a measure supported on grid atoms whose masses
    /// are multiples of `1/level`.
    pub fn from_grid_measure(mu: &DiscreteMeasure, grid: &StateGrid, level: u32) -> Result<Self> {
        let den = mu.denominator();
        let mut entries = Vec::with_capacity(mu.len());
        for (x, &num) in mu.atoms().iter().zip(mu.numerators()) {
            let state = grid.nearest_state(&x.feature);
            if grid.points[state] != x.feature {
                return Err(Error::InvalidMeasure("atom is not a grid point".into()));
            }
            let scaled = num * u64::from(level);
            if scaled % den != 0 {
                return Err(Error::InvalidMeasure(format!("mass {num}/{den} is not a multiple of 1/{level}")));
            }
            entries.push((grid.atom_index(x.pe, state) as u32, (scaled / den) as u32));
        }
        Self::from_sparse(level, entries)
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }

    pub fn dense(&self, num_atoms: usize) -> Vec<u32> {
        let mut out = vec![0; num_atoms];
        for &(a, c) in &self.entries {
            out[a as usize] = c;
        }
        out
    }

    pub fn weights(&self, num_atoms: usize) -> Vec<f64> {
        let l = f64::from(self.level);
        self.dense(num_atoms).into_iter().map(|c| f64::from(c) / l).collect()
    }

    pub fn to_discrete(&self, grid: &StateGrid) -> DiscreteMeasure {
        let atoms = self.entries.iter().map(|&(a, _)| grid.atom(a as usize)).collect();
        let nums = self.entries.iter().map(|&(_, c)| u64::from(c)).collect();
        DiscreteMeasure::from_parts(atoms, nums, u64::from(self.level))
            .expect("quantized measures always carry total mass 1")
    }
}

/// Nearest type with denominator `ℓ` to the probability vector `p` in
/// Euclidean distance.
///
/// Rounds `ℓ·p_a` to the nearest integer and repairs the total. When the
/// rounded counts overshoot, the coordinates rounded up the most lose one
/// unit each; when they undershoot, the coordinates rounded down the most
/// gain one. Among equal rounding errors lower indices keep or receive mass
/// first.
pub fn quantize_measure(p: &[f64], level: u32) -> Result<QuantizedMeasure> {
    if level == 0 {
        return Err(Error::Config("measure quantization level must be at least 1".into()));
    }
    if p.is_empty() {
        return Err(Error::InvalidProbability("empty vector".into()));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidProbability("entries must be finite and non-negative".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidProbability(format!("entries sum to {total}")));
    }
    let l = f64::from(level);
    let mut counts: Vec<i64> = p.iter().map(|v| (l * v + 0.5).floor() as i64).collect();
    let excess: i64 = counts.iter().sum::<i64>() - i64::from(level);
    if excess != 0 {
        // rounding error δ_a = count_a − ℓ·p_a
        let delta: Vec<f64> = counts.iter().zip(p).map(|(&c, v)| c as f64 - l * v).collect();
        let mut order: Vec<usize> = (0..p.len()).collect();
        if excess > 0 {
            // largest δ first; on ties the highest index gives up mass
            order.sort_by(|&i, &j| delta[j].total_cmp(&delta[i]).then(j.cmp(&i)));
            for &i in order.iter().take(excess as usize) {
                counts[i] -= 1;
            }
        } else {
            // smallest δ first; on ties the lowest index gains mass
            order.sort_by(|&i, &j| delta[i].total_cmp(&delta[j]).then(i.cmp(&j)));
            for &i in order.iter().take((-excess) as usize) {
                counts[i] += 1;
            }
        }
    }
    debug_assert!(counts.iter().all(|&c| c >= 0));
    QuantizedMeasure::from_sparse(
        level,
        counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(a, &c)| (a as u32, c as u32))
            .collect(),
    )
}

/// Euclidean distance between `p` and its type `q`.
pub fn simplex_distance(p: &[f64], q: &QuantizedMeasure) -> f64 {
    sq_dist(p, &q.weights(p.len())).sqrt()
}

/// Worst-case Euclidean error of the type quantizer on a simplex of
/// dimension `size`: `(1/ℓ)·√(⌊s/2⌋·(s − ⌊s/2⌋)/s)`.
pub fn quantizer_error_bound(size: usize, level: u32) -> f64 {
    let s = size as f64;
    let half = (size / 2) as f64;
    (half * (s - half) / s).sqrt() / f64::from(level)
}

/// How an [`ActionNet`] was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NetMode {
    /// Per-entry lattice with spacing at most `1/resolution`.
    Grid { resolution: u32 },
    /// Uniform draws over the action box from a ChaCha8 stream.
    Sampled { seed: u64 },
}

/// Grid mode refuses layouts with more scalar weights than this.
pub const GRID_ENTRY_LIMIT: usize = 12;

/// Finite set of candidate weight tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionNet {
    actions: Vec<WeightAction>,
    mode: NetMode,
}

/// Lattice `{-B, -B + h, ..., B}` with spacing `h <= 1/m`.
pub fn lattice_1d(bound: f64, resolution: u32) -> Vec<f64> {
    let intervals = (2.0 * bound * f64::from(resolution)).ceil().max(1.0) as usize;
    (0..=intervals)
        .map(|i| -bound + 2.0 * bound * i as f64 / intervals as f64)
        .collect()
}

impl ActionNet {
    pub fn build(sys: &SystemConfig, mode: NetMode, size: usize) -> Result<Self> {
        match mode {
            NetMode::Grid { resolution } => Self::grid(sys, resolution),
            NetMode::Sampled { seed } => Ok(Self::sampled(sys, seed, size)),
        }
    }

    /// The first `size` distinct draws of the seeded stream; nets of growing
    /// size for one seed are nested prefixes of each other.
    pub fn sampled(sys: &SystemConfig, seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = sys.action_bound;
        let entries = sys.dims.num_entries();
        let mut actions: Vec<WeightAction> = Vec::with_capacity(size);
        while actions.len() < size {
            let flat: Vec<f64> = (0..entries).map(|_| rng.gen_range(-b..=b)).collect();
            let u = WeightAction::from_flat(sys.dims, &flat).expect("flat length matches dims");
            if !actions.contains(&u) {
                actions.push(u);
            }
        }
        Self {
            actions,
            mode: NetMode::Sampled { seed },
        }
    }

    pub fn grid(sys: &SystemConfig, resolution: u32) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::Config("grid resolution must be at least 1".into()));
        }
        let entries = sys.dims.num_entries();
        if entries > GRID_ENTRY_LIMIT {
            return Err(Error::TooLarge {
                what: "grid action net (use sampled mode)",
                size: entries,
                limit: GRID_ENTRY_LIMIT,
            });
        }
        let axis = lattice_1d(sys.action_bound, resolution);
        let total = axis.len().pow(entries as u32);
        let actions = (0..total)
            .map(|mut code| {
                let mut flat = vec![0.0; entries];
                for slot in flat.iter_mut().rev() {
                    *slot = axis[code % axis.len()];
                    code /= axis.len();
                }
                WeightAction::from_flat(sys.dims, &flat).expect("flat length matches dims")
            })
            .collect();
        Ok(Self {
            actions,
            mode: NetMode::Grid { resolution },
        })
    }

    /// Net made of explicitly given actions; used for fixtures.
    pub fn from_actions(actions: Vec<WeightAction>, mode: NetMode) -> Self {
        let mut out: Vec<WeightAction> = Vec::with_capacity(actions.len());
        for u in actions {
            if !out.contains(&u) {
                out.push(u);
            }
        }
        Self { actions: out, mode }
    }

    /// Net of the first `size` actions, preserving order.
    pub fn prefix(&self, size: usize) -> Self {
        Self {
            actions: self.actions[..size.min(self.actions.len())].to_vec(),
            mode: self.mode,
        }
    }

    pub fn actions(&self) -> &[WeightAction] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn mode(&self) -> NetMode {
        self.mode
    }
}

/// `Φ⁽ⁿ⁾`: push-forward followed by state quantization of every image atom.
pub fn state_quantized_push_forward(
    mu: &DiscreteMeasure,
    u: &WeightAction,
    grid: &StateGrid,
    sys: &SystemConfig,
) -> DiscreteMeasure {
    let ctx = AttentionContext::new(u, mu, sys);
    mu.map_atoms(|x| {
        let image = ParticleState::new(x.pe, ctx.step_feature(&x.feature));
        grid.quantize_state(&image)
    })
}

/// `Φ^(ℓ,n,m)` on a quantized measure: every support atom moves by the
/// single-particle map against the measure itself and snaps back to the
/// grid. Input counts are integers over `ℓ`, so the image is already a type
/// and the measure quantizer leaves it unchanged.
pub fn quantized_step(
    mu: &QuantizedMeasure,
    u: &WeightAction,
    grid: &StateGrid,
    sys: &SystemConfig,
) -> QuantizedMeasure {
    let l = f64::from(mu.level);
    let masses: Vec<f64> = mu.entries.iter().map(|&(_, c)| f64::from(c) / l).collect();
    let ctx = AttentionContext::from_atoms(
        u,
        masses,
        mu.entries.iter().map(|&(a, _)| grid.atom_feature(a as usize)),
        sys,
    );
    let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
    for &(a, c) in &mu.entries {
        let y = ctx.step_feature(grid.atom_feature(a as usize));
        let b = grid.atom_index(grid.atom_position(a as usize), grid.nearest_state(&y));
        *counts.entry(b as u32).or_insert(0) += c;
    }
    QuantizedMeasure {
        level: mu.level,
        entries: counts.into_iter().collect(),
    }
}

/// Full `|X_n| × |X_n|` matrix of squared ground costs, row-major.
pub fn quantized_cost_matrix(grid: &StateGrid, lambda: f64) -> Vec<f64> {
    let n = grid.num_atoms();
    let atoms: Vec<ParticleState> = (0..n).map(|a| grid.atom(a)).collect();
    let mut out = Vec::with_capacity(n * n);
    for x in &atoms {
        for y in &atoms {
            out.push(pair_cost(x, y, lambda));
        }
    }
    out
}

/// Squared position-sensitive Wasserstein distance between quantized
/// measures, solved exactly on their supports.
pub fn quantized_w2(mu: &QuantizedMeasure, nu: &QuantizedMeasure, grid: &StateGrid, lambda: f64) -> Result<f64> {
    if mu.level != nu.level {
        return Err(Error::InvalidMeasure(format!(
            "measure levels differ: {} vs {}",
            mu.level, nu.level
        )));
    }
    let supply: Vec<u64> = mu.entries.iter().map(|&(_, c)| u64::from(c)).collect();
    let demand: Vec<u64> = nu.entries.iter().map(|&(_, c)| u64::from(c)).collect();
    let xs: Vec<ParticleState> = mu.entries.iter().map(|&(a, _)| grid.atom(a as usize)).collect();
    let ys: Vec<ParticleState> = nu.entries.iter().map(|&(a, _)| grid.atom(a as usize)).collect();
    let cost: Vec<f64> = xs
        .iter()
        .flat_map(|x| ys.iter().map(move |y| pair_cost(x, y, lambda)))
        .collect();
    Ok(solve_transport(&supply, &demand, &cost)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::wasserstein2_sq;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn square() -> Vec<(f64, f64)> {
        vec![(-1.0, 1.0); 2]
    }

    fn random_action(rng: &mut impl Rng, sys: &SystemConfig) -> WeightAction {
        let flat: Vec<f64> = (0..sys.dims.num_entries()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        WeightAction::from_flat(sys.dims, &flat).unwrap()
    }

    fn covering_radius_by_sampling(grid: &StateGrid, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..samples)
            .map(|_| {
                let x = vec![rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
                sq_dist(&x, &grid.points()[grid.nearest_state(&x)]).sqrt()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn level_one_grid_covers_within_one() {
        let g = build_state_grid(&square(), 1, 1).unwrap();
        // spacing 2/√2 forces two intervals per axis
        assert_eq!(g.num_states(), 9);
        assert!(covering_radius_by_sampling(&g, 20_000, 1) <= 1.0);
    }

    #[test]
    fn toy_grid_shape() {
        let g = build_state_grid(&square(), 10, 4).unwrap();
        assert_eq!(g.num_states(), 256);
        assert_eq!(g.num_atoms(), 1024);
        assert!(covering_radius_by_sampling(&g, 20_000, 2) <= 0.1);
        // worst case: centre of a lattice cell
        let h = 2.0 / 15.0;
        let c = vec![-1.0 + h / 2.0, -1.0 + h / 2.0];
        assert!(sq_dist(&c, &g.points()[g.nearest_state(&c)]).sqrt() <= 0.1 + 1e-15);
    }

    #[test]
    fn grid_size_grows_like_n_to_the_d() {
        let fit = |levels: &[usize]| {
            let pts: Vec<(f64, f64)> = levels
                .iter()
                .map(|&n| {
                    let g = build_state_grid(&square(), n, 1).unwrap();
                    ((n as f64).ln(), (g.num_states() as f64).ln())
                })
                .collect();
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
            sxy / sxx
        };
        let coarse = fit(&[2, 4, 8]);
        assert!((1.5..=2.5).contains(&coarse), "exponent {coarse}");
        let fine = fit(&[16, 32, 64]);
        assert!((1.8..=2.2).contains(&fine), "exponent {fine}");
    }

    #[test]
    fn grid_points_are_fixed_points() {
        let g = build_state_grid(&square(), 7, 3).unwrap();
        for (j, p) in g.points().iter().enumerate() {
            assert_eq!(g.nearest_state(p), j);
        }
    }

    #[test]
    fn midpoint_goes_to_lower_index() {
        // level 11 on [-1, 1]: 16 intervals, so coordinates are multiples of 1/8
        let g = build_state_grid(&square(), 11, 1).unwrap();
        assert_eq!(g.axes[0].len(), 17);
        let x = vec![0.0625, 0.5];
        let j = g.nearest_state(&x);
        assert_eq!(g.points()[j], vec![0.0, 0.5]);
        assert_eq!(j, g.nearest_state_scan(&x));
        let corner = vec![0.0625, -0.9375];
        assert_eq!(g.points()[g.nearest_state(&corner)], vec![0.0, -1.0]);
    }

    #[test]
    fn outside_points_clamp_to_boundary() {
        let g = build_state_grid(&square(), 10, 2).unwrap();
        let x = ParticleState::new(PositionalEncoding::new(2, 2), vec![3.0, -7.5]);
        let q = g.quantize_state(&x);
        assert_eq!(q.pe, x.pe);
        assert_eq!(q.feature, vec![1.0, -1.0]);
    }

    #[test]
    fn enumeration_is_a_bijection() {
        let g = build_state_grid(&[(0.0, 1.0)], 4, 2).unwrap();
        assert_eq!(g.num_states(), 3);
        let all: Vec<_> = (1..=6).map(|a| g.enumerate_index(a).unwrap()).collect();
        assert_eq!(all, vec![(1, 1), (1, 2), (1, 3), (2, 1), (2, 2), (2, 3)]);
        for (a, &(i, j)) in (1..=6).zip(&all) {
            assert_eq!(g.index_of(i, j).unwrap(), a);
        }
        assert!(matches!(g.enumerate_index(0), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(g.enumerate_index(7), Err(Error::IndexOutOfRange { index: 7, max: 6 })));
        let toy = build_state_grid(&square(), 10, 4).unwrap();
        assert_eq!(toy.enumerate_index(1).unwrap(), (1, 1));
        assert_eq!(toy.enumerate_index(256).unwrap(), (1, 256));
    }

    #[test]
    fn extra_points_use_the_scan() {
        let g = build_state_grid(&square(), 2, 1)
            .unwrap()
            .with_extra_points(&[vec![0.1, 0.1]])
            .unwrap();
        assert_eq!(g.num_states(), 17);
        assert_eq!(g.nearest_state(&[0.12, 0.09]), 16);
    }

    #[test]
    fn type_quantizer_examples() {
        let q = quantize_measure(&[0.7, 0.2, 0.1], 10).unwrap();
        assert_eq!(q.dense(3), vec![7, 2, 1]);
        let q = quantize_measure(&[0.25, 0.25, 0.5, 0.0], 20).unwrap();
        assert_eq!(q.dense(4), vec![5, 5, 10, 0]);
        let third = 1.0 / 3.0;
        let q = quantize_measure(&[third, third, third], 2).unwrap();
        assert_eq!(q.dense(3), vec![1, 1, 0]);
    }

    #[test]
    fn type_quantizer_tie_matches_enumeration() {
        // every type with denominator 2 on three atoms, in lexicographically
        // decreasing order of counts
        let types = [[2, 0, 0], [1, 1, 0], [1, 0, 1], [0, 2, 0], [0, 1, 1], [0, 0, 2]];
        let p = [1.0 / 3.0; 3];
        let dist = |t: &[u32; 3]| {
            t.iter()
                .zip(&p)
                .map(|(&c, v)| (f64::from(c) / 2.0 - v).powi(2))
                .sum::<f64>()
        };
        let best = types.iter().map(dist).fold(f64::INFINITY, f64::min);
        let first = types.iter().find(|t| (dist(t) - best).abs() < 1e-15).unwrap();
        let q = quantize_measure(&p, 2).unwrap();
        assert_eq!(q.dense(3), first.to_vec());
    }

    #[test]
    fn type_quantizer_rejects_bad_input() {
        assert!(matches!(quantize_measure(&[0.5, 0.6], 10), Err(Error::InvalidProbability(_))));
        assert!(quantize_measure(&[1.2, -0.2], 10).is_err());
        assert!(quantize_measure(&[], 10).is_err());
        assert!(quantize_measure(&[1.0], 0).is_err());
    }

    #[test]
    fn error_bound_values() {
        assert_abs_diff_eq!(quantizer_error_bound(4, 20), 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(quantizer_error_bound(2, 1), 0.5f64.sqrt(), epsilon = 1e-15);
        // attained by the barycentre of two atoms at level 1
        let q = quantize_measure(&[0.5, 0.5], 1).unwrap();
        assert_abs_diff_eq!(simplex_distance(&[0.5, 0.5], &q), quantizer_error_bound(2, 1), epsilon = 1e-15);
        assert!(quantizer_error_bound(10, 1000) < quantizer_error_bound(10, 10));
    }

    #[test]
    fn sampled_nets_are_nested_and_seeded() {
        let sys = SystemConfig::toy();
        let a = ActionNet::sampled(&sys, 7, 10);
        assert_eq!(a, ActionNet::sampled(&sys, 7, 10));
        let b = ActionNet::sampled(&sys, 7, 20);
        assert_eq!(&b.actions()[..10], a.actions());
        assert_eq!(b.prefix(10), a);
        assert_ne!(ActionNet::sampled(&sys, 8, 10), a);
        assert!(b.actions().iter().all(|u| u.max_abs_entry() <= 1.0));
    }

    #[test]
    fn scalar_lattice_and_grid_net() {
        assert_eq!(lattice_1d(1.0, 1), vec![-1.0, 0.0, 1.0]);
        assert_eq!(lattice_1d(1.0, 2), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        let tiny = SystemConfig {
            n_particles: 1,
            dims: crate::dynamics::BlockDims { d: 1, d1: 1, d2: 1 },
            state_box: vec![(-1.0, 1.0)],
            lambda: 3.0,
            ..SystemConfig::toy()
        }
        .validated()
        .unwrap();
        let net = ActionNet::grid(&tiny, 1).unwrap();
        assert_eq!(net.len(), 3usize.pow(6));
        assert_eq!(net.actions()[0].flat(), vec![-1.0; 6]);
        assert!(matches!(
            ActionNet::grid(&SystemConfig::toy(), 1),
            Err(Error::TooLarge { size: 22, .. })
        ));
    }

    #[test]
    fn zero_action_moves_mass_to_origin() {
        let sys = SystemConfig::toy();
        let g = build_state_grid(&square(), 10, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let entries: Vec<(u32, u32)> = (0..4u32)
            .map(|i| (i * 256 + rng.gen_range(0..256), 5))
            .collect();
        let mu = QuantizedMeasure::from_sparse(20, entries).unwrap();
        let out = quantized_step(&mu, &WeightAction::zeros(sys.dims), &g, &sys);
        let origin = g.nearest_state(&[0.0, 0.0]);
        let expected: Vec<(u32, u32)> = (0..4u32).map(|i| (i * 256 + origin as u32, 5)).collect();
        assert_eq!(out.entries(), expected.as_slice());
    }

    #[test]
    fn quantized_step_agrees_with_measure_path() {
        let sys = SystemConfig::toy();
        let g = build_state_grid(&square(), 10, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let entries: Vec<(u32, u32)> = (0..4u32)
                .map(|i| (i * 256 + rng.gen_range(0..256), 5))
                .collect();
            let mu = QuantizedMeasure::from_sparse(20, entries).unwrap();
            let u = random_action(&mut rng, &sys);
            let out = quantized_step(&mu, &u, &g, &sys);
            let via = state_quantized_push_forward(&mu.to_discrete(&g), &u, &g, &sys);
            assert_eq!(QuantizedMeasure::from_grid_measure(&via, &g, 20).unwrap(), out);
            // the measure quantizer is the identity on the image
            let again = quantize_measure(&out.weights(g.num_atoms()), 20).unwrap();
            assert_eq!(again, out);
        }
    }

    #[test]
    fn single_atom_tracks_quantized_orbit() {
        let sys = SystemConfig::toy();
        let g = build_state_grid(&square(), 10, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_action(&mut rng, &sys);
        let mut mu = QuantizedMeasure::from_sparse(20, vec![(2 * 256 + 77, 20)]).unwrap();
        let mut x = g.atom(2 * 256 + 77);
        for _ in 0..3 {
            mu = quantized_step(&mu, &u, &g, &sys);
            let dirac = DiscreteMeasure::dirac(x.clone());
            x = g.quantize_state(&crate::dynamics::step_particle(&x, &u, &dirac, &sys));
            assert_eq!(mu.to_discrete(&g), DiscreteMeasure::dirac(x.clone()));
        }
    }

    #[test]
    fn cost_matrix_entries() {
        let g = build_state_grid(&square(), 2, 2).unwrap();
        let c = quantized_cost_matrix(&g, 32.0);
        let n = g.num_atoms();
        for a in 0..n {
            assert_eq!(c[a * n + a], 0.0);
            for b in 0..n {
                assert_eq!(c[a * n + b], c[b * n + a]);
            }
        }
        for &(a, b) in &[(0usize, 5usize), (3, 20), (17, 30)] {
            assert_eq!(c[a * n + b], pair_cost(&g.atom(a), &g.atom(b), 32.0));
        }
    }

    #[test]
    fn quantized_w2_matches_general_transport() {
        let g = build_state_grid(&square(), 3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..30 {
            let mk = |rng: &mut ChaCha8Rng| {
                let mut counts = vec![0u32; g.num_atoms()];
                for _ in 0..12 {
                    counts[rng.gen_range(0..g.num_atoms())] += 1;
                }
                QuantizedMeasure::from_dense(12, &counts).unwrap()
            };
            let (a, b) = (mk(&mut rng), mk(&mut rng));
            let direct = quantized_w2(&a, &b, &g, 5.0).unwrap();
            let general = wasserstein2_sq(&a.to_discrete(&g), &b.to_discrete(&g), 5.0).unwrap().0;
            assert_abs_diff_eq!(direct, general, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn quantizer_respects_error_bound(seed in 0u64..100_000, size in 2usize..12, level in 1u32..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<f64> = (0..size).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let q = quantize_measure(&p, level).unwrap();
            prop_assert_eq!(q.entries().iter().map(|e| e.1).sum::<u32>(), level);
            prop_assert!(simplex_distance(&p, &q) <= quantizer_error_bound(size, level) + 1e-12);
            // idempotent on its own image
            let again = quantize_measure(&q.weights(size), level).unwrap();
            prop_assert_eq!(again, q);
        }

        #[test]
        fn lattice_lookup_matches_scan(seed in 0u64..100_000, n in 1usize..25) {
            let g = build_state_grid(&square(), n, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = vec![rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            let a = g.nearest_state(&x);
            let b = g.nearest_state_scan(&x);
            prop_assert!((sq_dist(&x, &g.points()[a]) - sq_dist(&x, &g.points()[b])).abs() < 1e-15);
            if (-1.0..=1.0).contains(&x[0]) && (-1.0..=1.0).contains(&x[1]) {
                prop_assert!(sq_dist(&x, &g.points()[a]).sqrt() <= 1.0 / n as f64 + 1e-12);
            }
        }
    }
}
