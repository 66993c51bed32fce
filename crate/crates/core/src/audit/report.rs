use std::fmt::Write as _;

use crate::audit::conditions::{
    check_leaf_irrelevance, check_result_distribution, check_shielding, check_subtask_irrelevance,
    check_termination, declared_result_irrelevant, Condition, ConditionResult,
};
use crate::audit::oracle::hierarchical_dp_oracle;
use crate::audit::policy::{HierarchicalPolicy, OraclePolicy, RandomAbstractPolicy};
use crate::audit::AuditError;
use crate::graph::{CompiledGraph, NodeRef};
use crate::learner::{
    EnvSession, ExplorationSchedule, LearningSchedule, MaxqLearner, MaxqSettings, StepSize,
    TraceHooks, DEFAULT_STEP_CAP,
};
use crate::mdp::TabularModel;

#[derive(Debug, Clone, PartialEq)]
pub struct AuditOptions {
    /// Random abstract policies checked in addition to the recursively
    /// optimal one.
    pub random_policies: usize,
    pub policy_seed: u64,
    /// Learning episodes whose invocation trace is checked for shielding.
    pub trace_episodes: u64,
    pub trace_seed: u64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            random_policies: 20,
            policy_seed: 1,
            trace_episodes: 200,
            trace_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub results: Vec<ConditionResult>,
    pub policies: Vec<String>,
    pub trace_invocations: usize,
}

fn discrepancy_text(d: f64) -> String {
    if d.is_infinite() {
        "inf".into()
    } else {
        format!("{d:.3e}")
    }
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn condition_passed(&self, c: Condition) -> bool {
        self.results.iter().filter(|r| r.condition == c).all(|r| r.passed)
    }

    pub fn for_condition(&self, c: Condition) -> impl Iterator<Item = &ConditionResult> {
        self.results.iter().filter(move |r| r.condition == c)
    }

    /// One line per condition.
    pub fn summary_lines(&self) -> Vec<String> {
        Condition::ALL
            .iter()
            .map(|&c| {
                let rs: Vec<&ConditionResult> = self.for_condition(c).collect();
                let worst = rs.iter().map(|r| r.discrepancy).fold(0.0, f64::max);
                format!(
                    "{} {c} subjects={} max_discrepancy={}",
                    if rs.iter().all(|r| r.passed) { "PASS" } else { "FAIL" },
                    rs.len(),
                    discrepancy_text(worst)
                )
            })
            .collect()
    }

    /// Tab-separated: condition, subject, PASS|FAIL, counterexample, discrepancy.
    pub fn machine_lines(&self) -> Vec<String> {
        self.results
            .iter()
            .map(|r| {
                format!(
                    "{}\t{}\t{}\t{}\t{}",
                    r.condition.number(),
                    r.subject,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.counterexample
                        .as_ref()
                        .map_or_else(|| "-".to_string(), |c| c.to_string()),
                    discrepancy_text(r.discrepancy)
                )
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in self.summary_lines() {
            let _ = writeln!(out, "{l}");
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "policies: {}", self.policies.join("; "));
        let _ = writeln!(out, "trace invocations checked: {}", self.trace_invocations);
        let _ = writeln!(out);
        for l in self.machine_lines() {
            let _ = writeln!(out, "{l}");
        }
        out
    }
}

/// Invocation trace of a short MAXQ-Q learning run.
pub fn learning_trace(
    model: &TabularModel,
    g: &CompiledGraph,
    episodes: u64,
    seed: u64,
) -> Result<Vec<(NodeRef, usize)>, AuditError> {
    let settings = MaxqSettings {
        learning: LearningSchedule::uniform(StepSize::Constant(0.3)),
        exploration: ExplorationSchedule {
            initial: 50.0,
            decay: 0.98,
            minimum: 0.5,
        },
        gamma: 1.0,
        step_cap: DEFAULT_STEP_CAP,
    };
    let mut learner = MaxqLearner::new(g, settings, seed)
        .map_err(|e| AuditError::InvalidArgument(e.to_string()))?;
    let mut hooks = TraceHooks::default();
    let mut env = EnvSession::new(model, DEFAULT_STEP_CAP);
    for _ in 0..episodes {
        learner
            .run_episode(&mut env, &mut hooks)
            .map_err(|e| AuditError::InvalidArgument(e.to_string()))?;
    }
    Ok(hooks.invocations)
}

/// Checks every declared abstraction of `g` against `model`.
pub fn audit_graph(
    model: &TabularModel,
    g: &CompiledGraph,
    options: &AuditOptions,
) -> Result<AuditReport, AuditError> {
    let oracle = hierarchical_dp_oracle(model, g, 1.0)?;
    let oracle_policy = OraclePolicy { solution: &oracle };
    let randoms: Vec<RandomAbstractPolicy> = (0..options.random_policies as u64)
        .map(|k| RandomAbstractPolicy {
            seed: options.policy_seed + k,
        })
        .collect();
    let mut policies: Vec<&dyn HierarchicalPolicy> = vec![&oracle_policy];
    policies.extend(randoms.iter().map(|p| p as &dyn HierarchicalPolicy));

    let mut results = Vec::new();
    for i in 0..g.n_subtasks() {
        results.push(check_subtask_irrelevance(model, g, i, &policies)?);
    }
    for a in 0..g.n_primitives() {
        results.push(check_leaf_irrelevance(model, a, g.graph().leaf(a)));
    }
    for i in 0..g.n_subtasks() {
        for slot in 0..g.slots(i).len() {
            if let Some(y) = declared_result_irrelevant(g, i, slot) {
                results.push(check_result_distribution(model, g, i, slot, &y, &policies, false)?);
            }
        }
    }
    for i in 0..g.n_subtasks() {
        let id = &g.graph().subtasks()[i].id;
        for slot in 0..g.slots(i).len() {
            if g.graph().edge(id, &g.slots(i)[slot].label).completion_eliminated {
                results.push(check_termination(model, g, i, slot));
            }
        }
    }
    let trace = learning_trace(model, g, options.trace_episodes, options.trace_seed)?;
    for i in 0..g.n_subtasks() {
        results.push(check_shielding(g, i, &trace).result);
    }
    Ok(AuditReport {
        results,
        policies: policies.iter().map(|p| p.describe()).collect(),
        trace_invocations: trace.len(),
    })
}
