//! Exact solvers used as references: flat value iteration over the full
//! model, and bottom-up SMDP dynamic programming over a task hierarchy that
//! yields the unique recursively optimal (ordered) policy.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::audit::AuditError;
use crate::graph::{CompiledGraph, NodeRef};
use crate::learner::format_value;
use crate::mdp::TabularModel;

pub const BELLMAN_TOLERANCE: f64 = 1e-10;
const MAX_SWEEPS: usize = 1_000_000;
/// Q values within this distance of the best are ties, resolved by order.
const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct FlatSolution {
    pub gamma: f64,
    pub values: Vec<f64>,
    /// Greedy action per state; `None` on terminal states.
    pub policy: Vec<Option<usize>>,
    pub residual: f64,
    pub sweeps: usize,
}

impl FlatSolution {
    pub fn q(&self, model: &TabularModel, state: usize, action: usize) -> f64 {
        backup(model, &self.values, self.gamma, state, action)
    }

    /// Mean optimal value over the model's start states.
    pub fn mean_start_value(&self, model: &TabularModel) -> f64 {
        let starts = model.initial_states();
        starts.iter().map(|&s| self.values[s]).sum::<f64>() / starts.len() as f64
    }

    pub fn to_text(&self, model: &TabularModel) -> String {
        let mut out = String::new();
        for (s, v) in self.values.iter().enumerate() {
            let action = self.policy[s].map_or("-", |a| model.action_names()[a].as_str());
            let _ = writeln!(out, "{}\t{}\t{}", model.space().decode(s), action, format_value(*v));
        }
        out
    }
}

fn backup(model: &TabularModel, values: &[f64], gamma: f64, state: usize, action: usize) -> f64 {
    model
        .outcomes(state, action)
        .iter()
        .map(|t| {
            let future = if model.is_terminal(t.next) { 0.0 } else { values[t.next] };
            t.probability * (t.reward + gamma * future)
        })
        .sum()
}

/// Value iteration with terminal states pinned to 0. Runs until the
/// Bellman residual is at most [`BELLMAN_TOLERANCE`].
pub fn flat_value_iteration(model: &TabularModel, gamma: f64) -> Result<FlatSolution, AuditError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(AuditError::InvalidArgument(format!("gamma = {gamma}")));
    }
    let n = model.num_states();
    let mut values = vec![0.0; n];
    let mut residual = f64::INFINITY;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        residual = 0.0;
        let mut next = values.clone();
        for s in 0..n {
            if model.is_terminal(s) {
                continue;
            }
            let best = (0..model.num_actions())
                .map(|a| backup(model, &values, gamma, s, a))
                .fold(f64::NEG_INFINITY, f64::max);
            residual = f64::max(residual, (best - values[s]).abs());
            next[s] = best;
        }
        values = next;
        if !residual.is_finite() {
            break;
        }
        if residual <= BELLMAN_TOLERANCE * 1e-2 {
            break;
        }
    }
    if !(residual <= BELLMAN_TOLERANCE) {
        return Err(AuditError::Divergence {
            what: "flat value iteration".into(),
            residual,
        });
    }
    let policy = (0..n)
        .map(|s| {
            if model.is_terminal(s) {
                return None;
            }
            let qs: Vec<f64> = (0..model.num_actions())
                .map(|a| backup(model, &values, gamma, s, a))
                .collect();
            Some(ordered_argmax(&qs))
        })
        .collect();
    Ok(FlatSolution {
        gamma,
        values,
        policy,
        residual,
        sweeps,
    })
}

fn ordered_argmax(qs: &[f64]) -> usize {
    let best = qs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    qs.iter()
        .position(|q| *q >= best - TIE_TOLERANCE)
        .unwrap_or(0)
}

/// Sparse row of discounted exit weights: `(exit state, sum_N P(s', N) gamma^N)`.
pub type ExitRow = Vec<(usize, f64)>;

/// Recursively optimal solution of a hierarchy.
#[derive(Debug, Clone)]
pub struct HierarchicalSolution {
    pub gamma: f64,
    /// V(i, s) for every subtask; `None` where `i` is terminated.
    pub subtask_values: Vec<Vec<Option<f64>>>,
    /// V(a, s): expected one-step reward.
    pub leaf_values: Vec<Vec<f64>>,
    /// C(i, s, slot); `None` where the slot's child is unavailable or `i` is
    /// terminated.
    pub completion: Vec<Vec<Vec<Option<f64>>>>,
    /// Greedy slot per subtask and state.
    pub policy: Vec<Vec<Option<usize>>>,
    exits: Vec<Vec<ExitRow>>,
}

impl HierarchicalSolution {
    pub fn value(&self, node: NodeRef, state: usize) -> Option<f64> {
        match node {
            NodeRef::Primitive(a) => Some(self.leaf_values[a][state]),
            NodeRef::Subtask(i) => self.subtask_values[i][state],
        }
    }

    /// Root value, 0 on states where the root is terminated.
    pub fn root_value(&self, g: &CompiledGraph, state: usize) -> f64 {
        self.subtask_values[g.root()][state].unwrap_or(0.0)
    }

    /// Discounted exit distribution of subtask `i` started in `state`.
    pub fn exits(&self, i: usize, state: usize) -> &[(usize, f64)] {
        &self.exits[i][state]
    }

    /// Snapshot-format rendering of the recursively optimal tables, keyed by
    /// full states.
    pub fn to_text(&self, g: &CompiledGraph) -> String {
        let mut lines = Vec::new();
        let space = g.space();
        for i in 0..g.n_subtasks() {
            let name = g.name(NodeRef::Subtask(i));
            for (slot, spec) in g.slots(i).iter().enumerate() {
                for s in 0..g.n_states() {
                    if let Some(c) = self.completion[i][slot][s] {
                        lines.push(format!(
                            "{name}\t{}\t{}\t{}",
                            space.decode(s),
                            spec.label,
                            format_value(c)
                        ));
                    }
                }
            }
        }
        for (a, row) in self.leaf_values.iter().enumerate() {
            let name = g.name(NodeRef::Primitive(a));
            for (s, v) in row.iter().enumerate() {
                lines.push(format!("{name}\t{}\t-\t{}", space.decode(s), format_value(*v)));
            }
        }
        lines.sort();
        let mut out = String::new();
        for l in lines {
            let _ = writeln!(out, "{l}");
        }
        out
    }
}

/// Solves every subtask bottom-up: exact SMDP value iteration over the
/// children's already-computed exit distributions, with ties broken by child
/// order so the solution is unique.
pub fn hierarchical_dp_oracle(
    model: &TabularModel,
    g: &CompiledGraph,
    gamma: f64,
) -> Result<HierarchicalSolution, AuditError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(AuditError::InvalidArgument(format!("gamma = {gamma}")));
    }
    let n = g.n_states();
    let leaf_values: Vec<Vec<f64>> = (0..g.n_primitives())
        .map(|a| (0..n).map(|s| model.expected_reward(s, a)).collect())
        .collect();
    let leaf_exits: Vec<Vec<ExitRow>> = (0..g.n_primitives())
        .map(|a| {
            (0..n)
                .map(|s| {
                    model
                        .outcomes(s, a)
                        .iter()
                        .map(|t| (t.next, gamma * t.probability))
                        .collect()
                })
                .collect()
        })
        .collect();

    let k = g.n_subtasks();
    let mut subtask_values = vec![vec![None; n]; k];
    let mut completion = vec![Vec::new(); k];
    let mut policy = vec![vec![None; n]; k];
    let mut exits: Vec<Vec<ExitRow>> = vec![Vec::new(); k];

    for &i in g.bottom_up() {
        let me = NodeRef::Subtask(i);
        let slots = g.slots(i).len();
        let active: Vec<usize> = (0..n).filter(|&s| !g.is_terminated(me, s)).collect();

        // value of continuing in i after reaching s'
        let mut v = vec![0.0; n];
        let child_value = |node: NodeRef, s: usize, values: &Vec<Vec<Option<f64>>>| -> f64 {
            match node {
                NodeRef::Primitive(a) => leaf_values[a][s],
                NodeRef::Subtask(j) => values[j][s].expect("child solved before parent"),
            }
        };
        let child_exits = |node: NodeRef, s: usize, ex: &Vec<Vec<ExitRow>>| -> ExitRow {
            match node {
                NodeRef::Primitive(a) => leaf_exits[a][s].clone(),
                NodeRef::Subtask(j) => ex[j][s].clone(),
            }
        };
        // Cache each available child's (value, exit row) per state.
        let mut options: Vec<Vec<(usize, f64, ExitRow)>> = vec![Vec::new(); n];
        for &s in &active {
            for slot in 0..slots {
                if let Some(child) = g.available(i, slot, s) {
                    options[s].push((
                        slot,
                        child_value(child, s, &subtask_values),
                        child_exits(child, s, &exits),
                    ));
                }
            }
            if options[s].is_empty() {
                return Err(AuditError::NoAvailableChild {
                    subtask: g.name(me).to_string(),
                    state: s,
                });
            }
        }
        let continuation = |v: &[f64], row: &ExitRow| -> f64 {
            row.iter()
                .map(|&(s2, w)| if g.is_terminated(me, s2) { 0.0 } else { w * v[s2] })
                .sum()
        };

        let mut sweeps = 0;
        loop {
            sweeps += 1;
            let mut delta: f64 = 0.0;
            for &s in &active {
                let best = options[s]
                    .iter()
                    .map(|(_, cv, row)| cv + continuation(&v, row))
                    .fold(f64::NEG_INFINITY, f64::max);
                delta = delta.max((best - v[s]).abs());
                v[s] = best;
            }
            if delta <= 1e-13 {
                break;
            }
            if sweeps >= MAX_SWEEPS || !delta.is_finite() {
                return Err(AuditError::Divergence {
                    what: format!("SMDP value iteration for {}", g.name(me)),
                    residual: delta,
                });
            }
        }

        let mut c_i = vec![vec![None; n]; slots];
        for &s in &active {
            let qs: Vec<f64> = options[s]
                .iter()
                .map(|(slot, cv, row)| {
                    let c = continuation(&v, row);
                    c_i[*slot][s] = Some(c);
                    cv + c
                })
                .collect();
            let pick = ordered_argmax(&qs);
            policy[i][s] = Some(options[s][pick].0);
            subtask_values[i][s] = Some(v[s]);
        }
        completion[i] = c_i;

        // Exit distribution of i under its greedy policy.
        let mut rows: Vec<ExitRow> = vec![Vec::new(); n];
        let mut iterations = 0;
        loop {
            iterations += 1;
            let mut change: f64 = 0.0;
            for &s in &active {
                let slot = policy[i][s].expect("policy set on active states");
                let row = &options[s].iter().find(|o| o.0 == slot).expect("chosen option").2;
                let mut acc: HashMap<usize, f64> = HashMap::new();
                for &(s2, w) in row {
                    if g.is_terminated(me, s2) {
                        *acc.entry(s2).or_default() += w;
                    } else {
                        for &(s3, w2) in &rows[s2] {
                            *acc.entry(s3).or_default() += w * w2;
                        }
                    }
                }
                let mut new_row: ExitRow = acc.into_iter().filter(|(_, w)| *w > 0.0).collect();
                new_row.sort_by_key(|(s2, _)| *s2);
                let old: f64 = rows[s].iter().map(|(_, w)| w).sum();
                let new: f64 = new_row.iter().map(|(_, w)| w).sum();
                change = change.max((old - new).abs());
                rows[s] = new_row;
            }
            if change <= 1e-15 && iterations > 1 {
                break;
            }
            if iterations >= MAX_SWEEPS {
                return Err(AuditError::Divergence {
                    what: format!("exit distribution of {}", g.name(me)),
                    residual: change,
                });
            }
        }
        if gamma == 1.0 {
            for &s in &active {
                let mass: f64 = rows[s].iter().map(|(_, w)| w).sum();
                if mass < 1.0 - 1e-9 {
                    return Err(AuditError::HorizonTooSmall {
                        subject: format!("{} from state {s}", g.name(me)),
                        mass,
                    });
                }
            }
        }
        exits[i] = rows;
    }

    Ok(HierarchicalSolution {
        gamma,
        subtask_values,
        leaf_values,
        completion,
        policy,
        exits,
    })
}
