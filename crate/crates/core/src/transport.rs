//! Exact position-sensitive 2-Wasserstein distances between finitely
//! supported measures on the superstate space.
//!
//! Masses are exact rationals (integer numerators over a common
//! denominator), so transport plans satisfy their marginals exactly. The
//! ground cost `‖x − y‖² + λ|p − q|²` stays in floating point.

use std::cmp::Ordering;

use num_integer::Integer;

use crate::dynamics::ParticleState;
use crate::linalg::sq_dist;
use crate::{Error, Result};

/// Finitely supported probability measure with rational masses.
///
/// Measures built through the public constructors are canonical: atoms are
/// sorted by encoding then feature, bitwise-equal atoms are merged, and the
/// mass fraction is fully reduced.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Vec<ParticleState>,
    numerators: Vec<u64>,
    denominator: u64,
}

fn feature_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => {}
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

pub(crate) fn atom_cmp(a: &ParticleState, b: &ParticleState) -> Ordering {
    a.pe.cmp(&b.pe).then_with(|| feature_cmp(&a.feature, &b.feature))
}

impl DiscreteMeasure {
    /// Uniform empirical measure of a particle configuration.
    pub fn empirical(particles: &[ParticleState]) -> Self {
        assert!(!particles.is_empty(), "empirical measure of no particles");
        Self::canonical(
            particles.to_vec(),
            vec![1; particles.len()],
            particles.len() as u64,
        )
    }

    pub fn dirac(x: ParticleState) -> Self {
        Self::empirical(&[x])
    }

    /// Builds a measure from atoms and mass numerators over `denominator`.
    pub fn from_parts(atoms: Vec<ParticleState>, numerators: Vec<u64>, denominator: u64) -> Result<Self> {
        if atoms.len() != numerators.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} atoms but {} masses",
                atoms.len(),
                numerators.len()
            )));
        }
        if denominator == 0 {
            return Err(Error::InvalidMeasure("zero denominator".into()));
        }
        let total: u64 = numerators.iter().sum();
        if total != denominator {
            return Err(Error::InvalidMeasure(format!(
                "masses sum to {total}/{denominator}, not 1"
            )));
        }
        Ok(Self::canonical(atoms, numerators, denominator))
    }

    fn canonical(atoms: Vec<ParticleState>, numerators: Vec<u64>, denominator: u64) -> Self {
        let mut pairs: Vec<(ParticleState, u64)> =
            atoms.into_iter().zip(numerators).filter(|(_, m)| *m > 0).collect();
        pairs.sort_by(|a, b| atom_cmp(&a.0, &b.0));
        let mut atoms: Vec<ParticleState> = Vec::with_capacity(pairs.len());
        let mut numerators: Vec<u64> = Vec::with_capacity(pairs.len());
        for (x, m) in pairs {
            match atoms.last() {
                Some(last) if atom_cmp(last, &x) == Ordering::Equal => {
                    *numerators.last_mut().unwrap() += m;
                }
                _ => {
                    atoms.push(x);
                    numerators.push(m);
                }
            }
        }
        let g = numerators.iter().fold(denominator, |g, m| g.gcd(m));
        Self {
            atoms,
            numerators: numerators.into_iter().map(|m| m / g).collect(),
            denominator: denominator / g,
        }
    }

    pub fn atoms(&self) -> &[ParticleState] {
        &self.atoms
    }

    pub fn numerators(&self) -> &[u64] {
        &self.numerators
    }

    pub fn denominator(&self) -> u64 {
        self.denominator
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn masses_f64(&self) -> Vec<f64> {
        let den = self.denominator as f64;
        self.numerators.iter().map(|&m| m as f64 / den).collect()
    }

    /// True when every atom carries the same mass.
    pub fn is_uniform(&self) -> bool {
        self.numerators.windows(2).all(|w| w[0] == w[1])
    }

    /// Maps every atom through `f`, keeping masses, and re-canonicalizes.
    pub fn map_atoms(&self, mut f: impl FnMut(&ParticleState) -> ParticleState) -> Self {
        Self::canonical(
            self.atoms.iter().map(&mut f).collect(),
            self.numerators.clone(),
            self.denominator,
        )
    }

    /// Numerators rescaled to denominator `den`, which must be a multiple.
    pub(crate) fn scaled_numerators(&self, den: u64) -> Vec<u64> {
        let f = den / self.denominator;
        debug_assert_eq!(f * self.denominator, den);
        self.numerators.iter().map(|m| m * f).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.denominator == 0 || self.numerators.iter().sum::<u64>() != self.denominator {
            return Err(Error::InvalidMeasure("masses do not sum to 1".into()));
        }
        Ok(())
    }
}

/// Transport plan between two discrete measures with exact rational flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coupling {
    /// Row-major `sources × targets` numerators over `denominator`.
    pub flow: Vec<Vec<u64>>,
    pub denominator: u64,
}

impl Coupling {
    /// Checks both marginal equalities exactly.
    pub fn has_marginals(&self, p: &DiscreteMeasure, q: &DiscreteMeasure) -> bool {
        let den = self.denominator;
        if !den.is_multiple_of(p.denominator()) || !den.is_multiple_of(q.denominator()) {
            return false;
        }
        if self.flow.len() != p.len() || self.flow.iter().any(|r| r.len() != q.len()) {
            return false;
        }
        let rows_ok = self
            .flow
            .iter()
            .zip(p.scaled_numerators(den))
            .all(|(row, m)| row.iter().sum::<u64>() == m);
        let cols_ok = q
            .scaled_numerators(den)
            .iter()
            .enumerate()
            .all(|(j, &m)| self.flow.iter().map(|r| r[j]).sum::<u64>() == m);
        rows_ok && cols_ok
    }
}

/// Squared ground cost `‖x − y‖² + λ|p − q|²`.
pub fn pair_cost(x: &ParticleState, y: &ParticleState, lambda: f64) -> f64 {
    let dp = x.pe.value() - y.pe.value();
    sq_dist(&x.feature, &y.feature) + lambda * dp * dp
}

/// Optimal flow and its cost for an integer transportation instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportSolution {
    /// Row-major `supply.len() × demand.len()` integer flow.
    pub flow: Vec<u64>,
    /// `Σ flow·cost / total mass`.
    pub value: f64,
}

/// Solves `min Σ cost_ab·π_ab` over integer flows with the given margins.
///
/// Equal-mass instances with as many sources as targets go through the
/// Hungarian method; everything else through successive shortest paths.
pub fn solve_transport(supply: &[u64], demand: &[u64], cost: &[f64]) -> Result<TransportSolution> {
    let (m, n) = (supply.len(), demand.len());
    if cost.len() != m * n {
        return Err(Error::Dimension(format!("cost matrix has {} entries, expected {}", cost.len(), m * n)));
    }
    let total: u64 = supply.iter().sum();
    if total == 0 || total != demand.iter().sum::<u64>() {
        return Err(Error::InvalidMeasure("supply and demand totals differ or vanish".into()));
    }
    let uniform = m == n
        && supply.iter().chain(demand).all(|&s| s == supply[0]);
    let flow = if uniform {
        let assignment = hungarian(cost, n);
        let mut flow = vec![0u64; m * n];
        for (i, j) in assignment.into_iter().enumerate() {
            flow[i * n + j] = supply[0];
        }
        flow
    } else {
        successive_shortest_paths(supply, demand, cost)
    };
    let value = flow
        .iter()
        .zip(cost)
        .filter(|(f, _)| **f > 0)
        .map(|(&f, &c)| f as f64 * c)
        .sum::<f64>()
        / total as f64;
    Ok(TransportSolution { flow, value })
}

/// Minimum-cost perfect matching on a square row-major cost matrix;
/// returns the column assigned to every row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // Potentials over 1-based rows/columns; column 0 is the virtual root.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        col_of[row_of[j] - 1] = j - 1;
    }
    col_of
}

struct Edge {
    to: usize,
    cap: u64,
    cost: f64,
}

/// Min-cost flow on the bipartite transportation network, augmenting along
/// Bellman–Ford shortest paths of the residual graph.
fn successive_shortest_paths(supply: &[u64], demand: &[u64], cost: &[f64]) -> Vec<u64> {
    let (m, n) = (supply.len(), demand.len());
    let source = m + n;
    let sink = source + 1;
    let nodes = sink + 1;
    let mut edges: Vec<Edge> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    let add = |edges: &mut Vec<Edge>, adj: &mut Vec<Vec<usize>>, a: usize, b: usize, cap: u64, c: f64| {
        adj[a].push(edges.len());
        edges.push(Edge { to: b, cap, cost: c });
        adj[b].push(edges.len());
        edges.push(Edge { to: a, cap: 0, cost: -c });
        edges.len() - 2
    };
    let total: u64 = supply.iter().sum();
    for (i, &s) in supply.iter().enumerate() {
        add(&mut edges, &mut adj, source, i, s, 0.0);
    }
    let mut arc = vec![usize::MAX; m * n];
    for i in 0..m {
        for j in 0..n {
            if supply[i] > 0 && demand[j] > 0 {
                arc[i * n + j] = add(&mut edges, &mut adj, i, m + j, total, cost[i * n + j]);
            }
        }
    }
    for (j, &d) in demand.iter().enumerate() {
        add(&mut edges, &mut adj, m + j, sink, d, 0.0);
    }

    let scale = cost.iter().fold(1.0f64, |a, c| a.max(c.abs()));
    let eps = 1e-12 * scale;
    let mut sent = 0u64;
    while sent < total {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev_edge = vec![usize::MAX; nodes];
        dist[source] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for a in 0..nodes {
                if !dist[a].is_finite() {
                    continue;
                }
                for &e in &adj[a] {
                    let edge = &edges[e];
                    if edge.cap > 0 && dist[a] + edge.cost < dist[edge.to] - eps {
                        dist[edge.to] = dist[a] + edge.cost;
                        prev_edge[edge.to] = e;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        assert!(dist[sink].is_finite(), "transport network disconnected");
        let mut bottleneck = u64::MAX;
        let mut v = sink;
        while v != source {
            let e = prev_edge[v];
            bottleneck = bottleneck.min(edges[e].cap);
            v = edges[e ^ 1].to;
        }
        let mut v = sink;
        while v != source {
            let e = prev_edge[v];
            edges[e].cap -= bottleneck;
            edges[e ^ 1].cap += bottleneck;
            v = edges[e ^ 1].to;
        }
        sent += bottleneck;
    }
    arc.iter()
        .map(|&e| if e == usize::MAX { 0 } else { edges[e ^ 1].cap })
        .collect()
}

fn cost_matrix(p: &DiscreteMeasure, q: &DiscreteMeasure, lambda: f64) -> Vec<f64> {
    p.atoms()
        .iter()
        .flat_map(|x| q.atoms().iter().map(move |y| pair_cost(x, y, lambda)))
        .collect()
}

/// Squared position-sensitive 2-Wasserstein distance and an optimal plan.
pub fn wasserstein2_sq(p: &DiscreteMeasure, q: &DiscreteMeasure, lambda: f64) -> Result<(f64, Coupling)> {
    p.validate()?;
    q.validate()?;
    let den = p.denominator().lcm(&q.denominator());
    let supply = p.scaled_numerators(den);
    let demand = q.scaled_numerators(den);
    let cost = cost_matrix(p, q, lambda);
    let sol = solve_transport(&supply, &demand, &cost)?;
    let n = q.len();
    let flow = sol.flow.chunks(n).map(<[u64]>::to_vec).collect();
    Ok((sol.value, Coupling { flow, denominator: den }))
}

/// Largest atom count [`wasserstein_bruteforce`] accepts.
pub const BRUTEFORCE_LIMIT: usize = 8;

/// Exhaustive minimum over all matchings of two uniform measures with equal
/// atom counts. Test oracle for [`wasserstein2_sq`].
pub fn wasserstein_bruteforce(p: &DiscreteMeasure, q: &DiscreteMeasure, lambda: f64) -> Result<f64> {
    let n = p.len();
    if q.len() != n || !p.is_uniform() || !q.is_uniform() {
        return Err(Error::InvalidMeasure(
            "brute force needs uniform measures with equal atom counts".into(),
        ));
    }
    if n > BRUTEFORCE_LIMIT {
        return Err(Error::TooLarge {
            what: "permutation enumeration",
            size: n,
            limit: BRUTEFORCE_LIMIT,
        });
    }
    let cost = cost_matrix(p, q, lambda);
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |perm: &[usize]| perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>();
    let mut best = eval(&perm);
    // Heap's algorithm.
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(best / n as f64)
}
