//! Backward dynamic programming over the ensembles reachable from the
//! quantized training data, and open-loop extraction of the optimum.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{SystemConfig, WeightAction};
use crate::lifting::{rollout, terminal_cost, ActionSequence, EnsembleState};
use crate::quantization::{quantized_step, quantized_w2, state_quantized_push_forward, ActionNet, QuantizedMeasure, StateGrid};
use crate::transport::wasserstein2_sq;
use crate::{Error, Result};

/// Hashable encoding of an ensemble of quantized measures.
///
/// Each measure contributes its support size followed by its
/// `(atom, count)` pairs, i.e. the sparse form of its count vector, in
/// sample order. All measures share the level stored up front.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EnsembleKey(Vec<u32>);

impl EnsembleKey {
    pub fn encode(measures: &[QuantizedMeasure]) -> Self {
        let level = measures.first().map_or(0, QuantizedMeasure::level);
        let mut out = Vec::with_capacity(1 + measures.iter().map(|m| 1 + 2 * m.entries().len()).sum::<usize>());
        out.push(level);
        for m in measures {
            debug_assert_eq!(m.level(), level);
            out.push(m.entries().len() as u32);
            for &(a, c) in m.entries() {
                out.push(a);
                out.push(c);
            }
        }
        Self(out)
    }

    pub fn decode(&self) -> Vec<QuantizedMeasure> {
        let level = self.0[0];
        let mut out = Vec::new();
        let mut rest = &self.0[1..];
        while let Some((&len, tail)) = rest.split_first() {
            let (pairs, next) = tail.split_at(2 * len as usize);
            let entries = pairs.chunks_exact(2).map(|p| (p[0], p[1])).collect();
            out.push(
                QuantizedMeasure::from_sparse(level, entries).expect("keys are built from valid measures"),
            );
            rest = next;
        }
        out
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

/// Ensembles reachable stage by stage, with the transition table.
#[derive(Debug, Clone)]
pub struct ReachableSets {
    /// `stages[t]` lists the keys in discovery order; `stages[0]` is the
    /// initial ensemble alone.
    stages: Vec<Vec<EnsembleKey>>,
    /// `transitions[t][i][a]` is the index in `stages[t + 1]` reached from
    /// key `i` of stage `t` under action `a` of that stage's net.
    transitions: Vec<Vec<Vec<u32>>>,
    nets: Vec<ActionNet>,
}

impl ReachableSets {
    pub fn horizon(&self) -> usize {
        self.nets.len()
    }

    pub fn stage(&self, t: usize) -> &[EnsembleKey] {
        &self.stages[t]
    }

    pub fn state_counts(&self) -> Vec<usize> {
        self.stages.iter().map(Vec::len).collect()
    }

    pub fn total_states(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    pub fn transition(&self, t: usize, key: usize, action: usize) -> usize {
        self.transitions[t][key][action] as usize
    }

    pub fn net(&self, t: usize) -> &ActionNet {
        &self.nets[t]
    }

    pub fn initial(&self) -> &EnsembleKey {
        &self.stages[0][0]
    }

    /// Linear search; meant for tests and tooling, not for the solver.
    pub fn index_of(&self, t: usize, key: &EnsembleKey) -> Option<usize> {
        self.stages[t].iter().position(|k| k == key)
    }
}

fn step_ensemble(
    measures: &[QuantizedMeasure],
    u: &WeightAction,
    grid: &StateGrid,
    sys: &SystemConfig,
) -> Vec<QuantizedMeasure> {
    measures.iter().map(|m| quantized_step(m, u, grid, sys)).collect()
}

/// Breadth-first enumeration of every ensemble reachable from `initial`
/// when stage `t` uses `nets[t]`. The horizon is `nets.len()`.
pub fn expand_reachable(
    initial: &[QuantizedMeasure],
    nets: &[ActionNet],
    grid: &StateGrid,
    sys: &SystemConfig,
    budget: Option<usize>,
) -> Result<ReachableSets> {
    if initial.is_empty() {
        return Err(Error::Dimension("empty initial ensemble".into()));
    }
    if let Some(net) = nets.iter().find(|n| n.is_empty()) {
        return Err(Error::Config(format!("empty action net ({:?})", net.mode())));
    }
    let mut stages = vec![vec![EnsembleKey::encode(initial)]];
    let mut transitions = Vec::with_capacity(nets.len());
    for (t, net) in nets.iter().enumerate() {
        let current = &stages[t];
        let images: Vec<Vec<EnsembleKey>> = current
            .par_iter()
            .map(|key| {
                let measures = key.decode();
                net.actions()
                    .iter()
                    .map(|u| EnsembleKey::encode(&step_ensemble(&measures, u, grid, sys)))
                    .collect()
            })
            .collect();
        let mut index: HashMap<EnsembleKey, u32> = HashMap::new();
        let mut next = Vec::new();
        let mut table = Vec::with_capacity(images.len());
        for row in images {
            let mut out = Vec::with_capacity(row.len());
            for key in row {
                let id = match index.get(&key) {
                    Some(&id) => id,
                    None => {
                        let id = next.len() as u32;
                        index.insert(key.clone(), id);
                        next.push(key);
                        if let Some(b) = budget {
                            if next.len() > b {
                                return Err(Error::Budget {
                                    stage: t + 1,
                                    count: next.len(),
                                    budget: b,
                                });
                            }
                        }
                        id
                    }
                };
                out.push(id);
            }
            table.push(out);
        }
        transitions.push(table);
        stages.push(next);
    }
    Ok(ReachableSets {
        stages,
        transitions,
        nets: nets.to_vec(),
    })
}

/// `(1/K) Σ_k W²(μ̂^k, ν̂^k)` on the quantized space, summed in sample order.
pub fn quantized_terminal_cost(
    measures: &[QuantizedMeasure],
    targets: &[QuantizedMeasure],
    grid: &StateGrid,
    lambda: f64,
) -> Result<f64> {
    if measures.len() != targets.len() || measures.is_empty() {
        return Err(Error::Dimension(format!(
            "{} measures but {} targets",
            measures.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (m, t) in measures.iter().zip(targets) {
        total += quantized_w2(m, t, grid, lambda)?;
    }
    Ok(total / measures.len() as f64)
}

/// Greedy action table and cost-to-go for every reachable key.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopPolicy {
    /// `values[t][i]` for key `i` of stage `t`, `t = 0..=T`.
    pub values: Vec<Vec<f64>>,
    /// `actions[t][i]` for `t < T`.
    pub actions: Vec<Vec<u32>>,
}

impl ClosedLoopPolicy {
    pub fn initial_value(&self) -> f64 {
        self.values[0][0]
    }
}

pub fn backward_induction(
    reach: &ReachableSets,
    targets: &[QuantizedMeasure],
    grid: &StateGrid,
    lambda: f64,
) -> Result<ClosedLoopPolicy> {
    let horizon = reach.horizon();
    let terminal = reach.stages[horizon]
        .par_iter()
        .map(|key| quantized_terminal_cost(&key.decode(), targets, grid, lambda))
        .collect::<Result<Vec<f64>>>()?;
    let mut values = vec![Vec::new(); horizon + 1];
    let mut actions = vec![Vec::new(); horizon];
    values[horizon] = terminal;
    for t in (0..horizon).rev() {
        let next = &values[t + 1];
        let rows = reach.transitions[t]
            .par_iter()
            .map(|row| {
                let mut best = (f64::INFINITY, u32::MAX);
                for (a, &j) in row.iter().enumerate() {
                    let v = *next
                        .get(j as usize)
                        .ok_or_else(|| Error::Internal(format!("transition to missing key {j} at stage {}", t + 1)))?;
                    if v < best.0 {
                        best = (v, a as u32);
                    }
                }
                if best.1 == u32::MAX {
                    return Err(Error::Internal(format!("no finite value at stage {t}")));
                }
                Ok(best)
            })
            .collect::<Result<Vec<(f64, u32)>>>()?;
        let (v, a): (Vec<f64>, Vec<u32>) = rows.into_iter().unzip();
        values[t] = v;
        actions[t] = a;
    }
    Ok(ClosedLoopPolicy { values, actions })
}

/// Fixed weights obtained by replaying the closed-loop policy from the
/// initial ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopPolicy {
    pub actions: ActionSequence,
    /// Index of each chosen action within its stage net.
    pub action_indices: Vec<usize>,
    pub initial: EnsembleKey,
    pub value: f64,
}

pub fn extract_open_loop(policy: &ClosedLoopPolicy, reach: &ReachableSets) -> OpenLoopPolicy {
    let mut key = 0usize;
    let mut indices = Vec::with_capacity(reach.horizon());
    let mut actions = Vec::with_capacity(reach.horizon());
    for t in 0..reach.horizon() {
        let a = policy.actions[t][key] as usize;
        indices.push(a);
        actions.push(reach.nets[t].actions()[a].clone());
        key = reach.transition(t, key, a);
    }
    OpenLoopPolicy {
        actions: ActionSequence::new(actions),
        action_indices: indices,
        initial: reach.initial().clone(),
        value: policy.initial_value(),
    }
}

/// Expand, solve and extract in one go.
pub fn train(
    initial: &[QuantizedMeasure],
    targets: &[QuantizedMeasure],
    nets: &[ActionNet],
    grid: &StateGrid,
    sys: &SystemConfig,
    budget: Option<usize>,
) -> Result<(ReachableSets, ClosedLoopPolicy, OpenLoopPolicy)> {
    let reach = expand_reachable(initial, nets, grid, sys, budget)?;
    let policy = backward_induction(&reach, targets, grid, sys.lambda)?;
    let open = extract_open_loop(&policy, &reach);
    Ok((reach, policy, open))
}

/// Which flow and cost an action sequence is scored with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostModel {
    /// Unquantized particle flow.
    Exact,
    /// States snapped to the grid after every layer.
    StateQuantized,
    /// Grid states and masses in multiples of `1/ℓ`.
    TriplyQuantized,
}

impl CostModel {
    pub fn name(self) -> &'static str {
        match self {
            CostModel::Exact => "exact",
            CostModel::StateQuantized => "state-quantized",
            CostModel::TriplyQuantized => "triply-quantized",
        }
    }
}

impl fmt::Display for CostModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(CostModel::Exact),
            "state-quantized" | "state_quantized" => Ok(CostModel::StateQuantized),
            "triply-quantized" | "triply_quantized" | "quantized" => Ok(CostModel::TriplyQuantized),
            other => Err(Error::UnknownModel(other.to_string())),
        }
    }
}

/// Terminal cost of `seq` started from `initial` under the chosen model.
///
/// The quantized models quantize both the inputs and the targets; the
/// measure level is only used by the triply quantized one.
pub fn evaluate_sequence(
    initial: &EnsembleState,
    targets: &EnsembleState,
    seq: &ActionSequence,
    model: CostModel,
    grid: &StateGrid,
    level: u32,
    sys: &SystemConfig,
) -> Result<f64> {
    if initial.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} initial measures but {} targets",
            initial.len(),
            targets.len()
        )));
    }
    for u in &seq.actions {
        sys.check_action(u)?;
    }
    match model {
        CostModel::Exact => terminal_cost(&rollout(initial, seq, sys), targets, sys.lambda),
        CostModel::StateQuantized => {
            let costs = initial
                .measures
                .par_iter()
                .zip(&targets.measures)
                .map(|(mu, nu)| {
                    let mut m = grid.quantize_discrete(mu);
                    for u in &seq.actions {
                        m = state_quantized_push_forward(&m, u, grid, sys);
                    }
                    wasserstein2_sq(&m, &grid.quantize_discrete(nu), sys.lambda).map(|(v, _)| v)
                })
                .collect::<Result<Vec<f64>>>()?;
            if costs.is_empty() {
                return Err(Error::Dimension("empty ensemble".into()));
            }
            Ok(costs.iter().sum::<f64>() / costs.len() as f64)
        }
        CostModel::TriplyQuantized => {
            let start = quantize_ensemble(initial, grid, level)?;
            let goal = quantize_ensemble(targets, grid, level)?;
            let end = seq
                .actions
                .iter()
                .fold(start, |ms, u| step_ensemble(&ms, u, grid, sys));
            quantized_terminal_cost(&end, &goal, grid, sys.lambda)
        }
    }
}

/// `R_ℓ ∘ Q⁽ⁿ⁾` applied to every member.
pub fn quantize_ensemble(e: &EnsembleState, grid: &StateGrid, level: u32) -> Result<Vec<QuantizedMeasure>> {
    e.measures
        .iter()
        .map(|m| QuantizedMeasure::from_measure(m, grid, level))
        .collect()
}

/// Rolls quantized measures forward under fixed actions.
pub fn quantized_rollout(
    initial: &[QuantizedMeasure],
    seq: &ActionSequence,
    grid: &StateGrid,
    sys: &SystemConfig,
) -> Vec<QuantizedMeasure> {
    seq.actions
        .iter()
        .fold(initial.to_vec(), |ms, u| step_ensemble(&ms, u, grid, sys))
}
