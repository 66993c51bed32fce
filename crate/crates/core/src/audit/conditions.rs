//! Exhaustive checks of the five abstraction conditions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::rc::Rc;

use crate::audit::chain::{AllStarts, ExitAnalyzer};
use crate::audit::policy::HierarchicalPolicy;
use crate::audit::AuditError;
use crate::graph::{CompiledGraph, LeafAbstraction, NodeRef, Projection};
use crate::mdp::{StateVector, TabularModel};

pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;
pub const VALUE_TOLERANCE: f64 = 1e-9;
pub const LEAF_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    SubtaskIrrelevance,
    LeafIrrelevance,
    ResultDistribution,
    Termination,
    Shielding,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::SubtaskIrrelevance,
        Condition::LeafIrrelevance,
        Condition::ResultDistribution,
        Condition::Termination,
        Condition::Shielding,
    ];

    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Condition::SubtaskIrrelevance => "subtask-irrelevance",
            Condition::LeafIrrelevance => "leaf-irrelevance",
            Condition::ResultDistribution => "result-distribution-irrelevance",
            Condition::Termination => "termination",
            Condition::Shielding => "shielding",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "condition-{} {}", self.number(), self.name())
    }
}

/// A concrete witness that a condition fails.
#[derive(Debug, Clone, PartialEq)]
pub struct Counterexample {
    pub what: String,
    pub first: StateVector,
    pub second: Option<StateVector>,
    pub left: f64,
    pub right: f64,
}

impl fmt::Display for Counterexample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at s={}", self.what, self.first)?;
        if let Some(s2) = &self.second {
            write!(f, " vs s={s2}")?;
        }
        write!(f, ": {} vs {}", self.left, self.right)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionResult {
    pub condition: Condition,
    pub subject: String,
    pub passed: bool,
    /// Largest observed discrepancy (0 when everything matched exactly).
    pub discrepancy: f64,
    pub counterexample: Option<Counterexample>,
    /// Number of individual comparisons made.
    pub comparisons: usize,
    pub policies: usize,
}

struct Tracker {
    tolerance: f64,
    worst: f64,
    counterexample: Option<Counterexample>,
    comparisons: usize,
}

impl Tracker {
    fn new(tolerance: f64) -> Self {
        Self {
            tolerance,
            worst: 0.0,
            counterexample: None,
            comparisons: 0,
        }
    }

    fn observe(&mut self, discrepancy: f64, witness: impl FnOnce() -> Counterexample) {
        self.comparisons += 1;
        let d = if discrepancy.is_nan() { f64::INFINITY } else { discrepancy };
        if d > self.worst {
            self.worst = d;
            if d > self.tolerance {
                self.counterexample = Some(witness());
            }
        }
    }

    fn fail(&mut self, witness: Counterexample) {
        self.comparisons += 1;
        self.worst = f64::INFINITY;
        if self.counterexample.is_none() {
            self.counterexample = Some(witness);
        }
    }

    fn finish(self, condition: Condition, subject: String, policies: usize) -> ConditionResult {
        ConditionResult {
            condition,
            subject,
            passed: self.worst <= self.tolerance,
            discrepancy: self.worst,
            counterexample: self.counterexample,
            comparisons: self.comparisons,
            policies,
        }
    }
}

/// Total-variation distance between two sorted, merged sparse distributions.
fn sorted_tv<K: Ord + Copy>(a: &[(K, f64)], b: &[(K, f64)]) -> f64 {
    let (mut i, mut j, mut sum) = (0, 0, 0.0);
    while i < a.len() || j < b.len() {
        match (a.get(i), b.get(j)) {
            (Some(x), Some(y)) if x.0 == y.0 => {
                sum += (x.1 - y.1).abs();
                i += 1;
                j += 1;
            }
            (Some(x), Some(y)) if x.0 < y.0 => {
                sum += x.1.abs();
                i += 1;
            }
            (Some(_), Some(y)) => {
                sum += y.1.abs();
                j += 1;
            }
            (Some(x), None) => {
                sum += x.1.abs();
                i += 1;
            }
            (None, Some(y)) => {
                sum += y.1.abs();
                j += 1;
            }
            (None, None) => break,
        }
    }
    0.5 * sum
}

fn complement(n_vars: usize, vars: &[usize]) -> Vec<usize> {
    (0..n_vars).filter(|v| !vars.contains(v)).collect()
}

fn var_names(g: &CompiledGraph, vars: &[usize]) -> String {
    let names: Vec<&str> = vars
        .iter()
        .map(|&v| g.space().schemas()[v].name.as_str())
        .collect();
    format!("{{{}}}", names.join(","))
}

/// Per-policy cache of exit analyzers and their all-starts results, one per
/// analysed node.
struct Analyzers<'a> {
    model: &'a TabularModel,
    g: &'a CompiledGraph,
    policy: &'a dyn HierarchicalPolicy,
    by_node: HashMap<NodeRef, (ExitAnalyzer<'a>, Option<Rc<AllStarts>>)>,
}

impl<'a> Analyzers<'a> {
    fn new(model: &'a TabularModel, g: &'a CompiledGraph, policy: &'a dyn HierarchicalPolicy) -> Self {
        Self {
            model,
            g,
            policy,
            by_node: HashMap::new(),
        }
    }

    fn entry(&mut self, node: NodeRef) -> &mut (ExitAnalyzer<'a>, Option<Rc<AllStarts>>) {
        let (model, g, policy) = (self.model, self.g, self.policy);
        self.by_node
            .entry(node)
            .or_insert_with(|| (ExitAnalyzer::new(model, g, policy, node, 1.0), None))
    }

    /// Exit-state distributions and values from every start.
    fn all(&mut self, node: NodeRef) -> Result<Rc<AllStarts>, AuditError> {
        let e = self.entry(node);
        if e.1.is_none() {
            e.1 = Some(Rc::new(e.0.solve()?));
        }
        Ok(e.1.clone().expect("cached"))
    }

    /// Streams the per-step exit distributions of `node`.
    fn per_step(&mut self, node: NodeRef, on_step: impl FnMut(u32, &[Vec<(usize, f64)>])) -> Result<(), AuditError> {
        let e = self.entry(node);
        let all = e.0.sweep(on_step)?;
        e.1.get_or_insert_with(|| Rc::new(all));
        Ok(())
    }
}

/// Projects a sparse state distribution through `keys` into `out`.
fn project_into(out: &mut Vec<(usize, f64)>, dist: &[(usize, f64)], keys: &[usize]) {
    out.clear();
    out.extend(dist.iter().map(|&(s2, p)| (keys[s2], p)));
    out.sort_unstable_by_key(|e| e.0);
    out.dedup_by(|b, a| {
        let same = a.0 == b.0;
        if same {
            a.1 += b.1;
        }
        same
    });
}

/// Condition 1 for subtask `i` with its declared relevant variables X and
/// the remaining variables Y. For every supplied policy and every child:
/// (a) P(s', N | s, j) factors as P(x', N | x, j) P(y' | y, j);
/// (b) the x' marginal depends only on x and the y' marginal only on y;
/// (c) V(j, s) depends only on x.
pub fn check_subtask_irrelevance(
    model: &TabularModel,
    g: &CompiledGraph,
    i: usize,
    policies: &[&dyn HierarchicalPolicy],
) -> Result<ConditionResult, AuditError> {
    let def = &g.graph().subtasks()[i];
    let n_vars = g.space().schemas().len();
    let mut x_vars = g.graph().var_indices(&def.relevant_vars);
    x_vars.sort_unstable();
    let y_vars = complement(n_vars, &x_vars);
    let subject = format!("{} X={} Y={}", def.id, var_names(g, &x_vars), var_names(g, &y_vars));
    let mut tr = Tracker::new(DISTRIBUTION_TOLERANCE.max(VALUE_TOLERANCE));
    if y_vars.is_empty() {
        return Ok(tr.finish(Condition::SubtaskIrrelevance, subject, policies.len()));
    }
    let space = g.space();
    let px = Projection::new(space, &x_vars, None);
    let py = Projection::new(space, &y_vars, None);
    let me = NodeRef::Subtask(i);
    let n = g.n_states();
    let active: Vec<usize> = (0..n).filter(|&s| !g.is_terminated(me, s)).collect();
    let states: Vec<StateVector> = space.states().collect();
    let xkeys: Vec<usize> = states.iter().map(|s| px.key(s)).collect();
    let ykeys: Vec<usize> = states.iter().map(|s| py.key(s)).collect();
    let xykeys: Vec<usize> = (0..n).map(|s| xkeys[s] * n + ykeys[s]).collect();

    for policy in policies {
        let mut analyzers = Analyzers::new(model, g, *policy);
        for slot in 0..g.slots(i).len() {
            let label = &g.slots(i)[slot].label;
            // Representatives: the first state of each x group and of each
            // (y, child) group.
            let mut rep_x: HashMap<usize, (usize, Option<NodeRef>)> = HashMap::new();
            let mut rep_y: HashMap<(usize, NodeRef), usize> = HashMap::new();
            let mut x_of: Vec<Option<usize>> = vec![None; n];
            let mut y_of: Vec<Option<usize>> = vec![None; n];
            let mut groups: BTreeMap<NodeRef, Vec<usize>> = BTreeMap::new();
            for &s in &active {
                let child = g.available(i, slot, s);
                let (s0, c0) = *rep_x.entry(xkeys[s]).or_insert((s, child));
                if c0 != child {
                    tr.fail(Counterexample {
                        what: format!("{label} child or availability differs within an abstract state"),
                        first: states[s0].clone(),
                        second: Some(states[s].clone()),
                        left: c0.is_some() as u8 as f64,
                        right: child.is_some() as u8 as f64,
                    });
                    continue;
                }
                let Some(child) = child else { continue };
                if s0 != s {
                    x_of[s] = Some(s0);
                }
                let y0 = *rep_y.entry((ykeys[s], child)).or_insert(s);
                if y0 != s {
                    y_of[s] = Some(y0);
                }
                groups.entry(child).or_default().push(s);
            }
            for (child, members) in groups {
                let all = analyzers.all(child)?;
                let mut yy: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
                for &s in &members {
                    project_into(&mut yy[s], &all.exits[s], &ykeys);
                }
                for &s in &members {
                    if let Some(s0) = x_of[s] {
                        let dv = (all.values[s0] - all.values[s]).abs();
                        tr.observe(dv, || Counterexample {
                            what: format!("V({label}, s) depends on y"),
                            first: states[s0].clone(),
                            second: Some(states[s].clone()),
                            left: all.values[s0],
                            right: all.values[s],
                        });
                    }
                    if let Some(s0) = y_of[s] {
                        let tvy = sorted_tv(&yy[s0], &yy[s]);
                        tr.observe(tvy, || Counterexample {
                            what: format!("{label} P(y' | s) depends on x (TV)"),
                            first: states[s0].clone(),
                            second: Some(states[s].clone()),
                            left: tvy,
                            right: 0.0,
                        });
                    }
                }
                // (a) and the x'N part of (b), accumulated one step count at a time
                let mut xn: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
                let mut joint: Vec<(usize, f64)> = Vec::new();
                let mut product: Vec<(usize, f64)> = Vec::new();
                let mut tv_x = vec![0.0; n];
                let mut tv_factor = vec![0.0; n];
                analyzers.per_step(child, |_, f| {
                    for &s in &members {
                        project_into(&mut xn[s], &f[s], &xkeys);
                    }
                    for &s in &members {
                        if f[s].is_empty() {
                            if let Some(s0) = x_of[s] {
                                tv_x[s] += sorted_tv(&xn[s0], &[]);
                            }
                            continue;
                        }
                        if let Some(s0) = x_of[s] {
                            tv_x[s] += sorted_tv(&xn[s0], &xn[s]);
                        }
                        project_into(&mut joint, &f[s], &xykeys);
                        product.clear();
                        for &(x2, a) in &xn[s] {
                            product.extend(yy[s].iter().map(|&(y2, b)| (x2 * n + y2, a * b)));
                        }
                        product.sort_unstable_by_key(|e| e.0);
                        tv_factor[s] += sorted_tv(&joint, &product);
                    }
                })?;
                for &s in &members {
                    tr.observe(tv_factor[s], || Counterexample {
                        what: format!("{label} result does not factor into (x', N) and y' parts (TV)"),
                        first: states[s].clone(),
                        second: None,
                        left: tv_factor[s],
                        right: 0.0,
                    });
                    if let Some(s0) = x_of[s] {
                        tr.observe(tv_x[s], || Counterexample {
                            what: format!("{label} P(x', N | s) depends on y (TV)"),
                            first: states[s0].clone(),
                            second: Some(states[s].clone()),
                            left: tv_x[s],
                            right: 0.0,
                        });
                    }
                }
            }
        }
    }
    Ok(tr.finish(Condition::SubtaskIrrelevance, subject, policies.len()))
}

/// Condition 2: states that share a leaf key have equal expected one-step
/// reward under `action`.
pub fn check_leaf_irrelevance(
    model: &TabularModel,
    action: usize,
    abstraction: &LeafAbstraction,
) -> ConditionResult {
    let space = model.space();
    let key_of: Box<dyn Fn(&StateVector) -> usize> = match abstraction {
        LeafAbstraction::Vars(names) => {
            let vars: Vec<usize> = names.iter().filter_map(|n| space.var_index(n)).collect();
            let p = Projection::new(space, &vars, None);
            Box::new(move |s| p.key(s))
        }
        LeafAbstraction::Feature { feature, .. } => {
            let f = feature.clone();
            Box::new(move |s| f(s))
        }
    };
    let subject = format!("{} {}", model.action_names()[action], abstraction.describe());
    let mut tr = Tracker::new(LEAF_TOLERANCE);
    let mut first: HashMap<usize, (StateVector, f64)> = HashMap::new();
    for (idx, s) in space.states().enumerate() {
        if model.is_terminal(idx) {
            continue;
        }
        let r = model.expected_reward(idx, action);
        let k = key_of(&s);
        match first.get(&k) {
            None => {
                first.insert(k, (s, r));
            }
            Some((s0, r0)) => {
                let d = (r - r0).abs();
                tr.observe(d, || Counterexample {
                    what: "expected reward differs within a leaf key".into(),
                    first: s0.clone(),
                    second: Some(s.clone()),
                    left: *r0,
                    right: r,
                });
            }
        }
    }
    tr.finish(Condition::LeafIrrelevance, subject, 0)
}

/// Y for the declared result annotation of slot `slot` of `parent`: the
/// parent's relevant variables outside the edge's result-relevant set.
/// `None` when the edge carries no result annotation.
pub fn declared_result_irrelevant(g: &CompiledGraph, parent: usize, slot: usize) -> Option<Vec<usize>> {
    let def = &g.graph().subtasks()[parent];
    let label = g.slots(parent)[slot].label.clone();
    let result = g.graph().edge(&def.id, &label).result_relevant_vars?;
    let keep = g.graph().var_indices(&result);
    let mut y: Vec<usize> = g
        .graph()
        .var_indices(&def.relevant_vars)
        .into_iter()
        .filter(|v| !keep.contains(v))
        .collect();
    y.sort_unstable();
    Some(y)
}

/// Condition 3: for states that differ only in `y_vars`, the child's
/// distribution over result states is identical for every policy. With
/// `compare_steps` the joint over (s', N) is compared instead.
pub fn check_result_distribution(
    model: &TabularModel,
    g: &CompiledGraph,
    parent: usize,
    slot: usize,
    y_vars: &[usize],
    policies: &[&dyn HierarchicalPolicy],
    compare_steps: bool,
) -> Result<ConditionResult, AuditError> {
    let def = &g.graph().subtasks()[parent];
    let label = g.slots(parent)[slot].label.clone();
    let subject = format!(
        "{}/{} Y={}{}",
        def.id,
        label,
        var_names(g, y_vars),
        if compare_steps { " with N" } else { "" }
    );
    let mut tr = Tracker::new(DISTRIBUTION_TOLERANCE);
    if y_vars.is_empty() {
        return Ok(tr.finish(Condition::ResultDistribution, subject, policies.len()));
    }
    let space = g.space();
    let keep = complement(space.schemas().len(), y_vars);
    let pk = Projection::new(space, &keep, None);
    let states: Vec<StateVector> = space.states().collect();
    let me = NodeRef::Subtask(parent);
    let n = g.n_states();
    let mut first: HashMap<usize, (usize, NodeRef)> = HashMap::new();
    let mut rep: Vec<Option<usize>> = vec![None; n];
    let mut groups: BTreeMap<NodeRef, Vec<usize>> = BTreeMap::new();
    for s in 0..n {
        if g.is_terminated(me, s) {
            continue;
        }
        let Some(child) = g.available(parent, slot, s) else {
            continue;
        };
        let (s0, c0) = *first.entry(pk.key(&states[s])).or_insert((s, child));
        if c0 != child {
            tr.fail(Counterexample {
                what: format!("{label} binds a different child when only {} changes", var_names(g, y_vars)),
                first: states[s0].clone(),
                second: Some(states[s].clone()),
                left: 0.0,
                right: 1.0,
            });
            continue;
        }
        if s0 != s {
            rep[s] = Some(s0);
        }
        groups.entry(child).or_default().push(s);
    }
    let what = format!("{label} result distribution depends on {} (TV)", var_names(g, y_vars));
    for policy in policies {
        let mut analyzers = Analyzers::new(model, g, *policy);
        for (&child, members) in &groups {
            let mut tv = vec![0.0; n];
            if compare_steps {
                analyzers.per_step(child, |_, f| {
                    for &s in members {
                        if let Some(s0) = rep[s] {
                            tv[s] += sorted_tv(&f[s0], &f[s]);
                        }
                    }
                })?;
            } else {
                let all = analyzers.all(child)?;
                for &s in members {
                    if let Some(s0) = rep[s] {
                        tv[s] = sorted_tv(&all.exits[s0], &all.exits[s]);
                    }
                }
            }
            for &s in members {
                if let Some(s0) = rep[s] {
                    tr.observe(tv[s], || Counterexample {
                        what: what.clone(),
                        first: states[s0].clone(),
                        second: Some(states[s].clone()),
                        left: tv[s],
                        right: 0.0,
                    });
                }
            }
        }
    }
    Ok(tr.finish(Condition::ResultDistribution, subject, policies.len()))
}

fn descendant_primitives(g: &CompiledGraph, node: NodeRef, out: &mut BTreeSet<usize>, seen: &mut BTreeSet<usize>) {
    match node {
        NodeRef::Primitive(a) => {
            out.insert(a);
        }
        NodeRef::Subtask(i) => {
            if !seen.insert(i) {
                return;
            }
            for slot in g.slots(i) {
                let targets: BTreeSet<NodeRef> = slot.resolve.iter().flatten().copied().collect();
                for t in targets {
                    descendant_primitives(g, t, out, seen);
                }
            }
        }
    }
}

/// Condition 4: every state in which the child can exit also terminates the
/// parent. Exit states are all one-step successors, through a primitive in
/// the child's subtree, of states where the child is available, that
/// satisfy the child's termination predicate. Policy independent.
pub fn check_termination(model: &TabularModel, g: &CompiledGraph, parent: usize, slot: usize) -> ConditionResult {
    let label = g.slots(parent)[slot].label.clone();
    let subject = format!("{}/{}", g.name(NodeRef::Subtask(parent)), label);
    let mut tr = Tracker::new(0.0);
    let me = NodeRef::Subtask(parent);
    let mut prims_cache: HashMap<NodeRef, BTreeSet<usize>> = HashMap::new();
    let space = g.space();
    for s in 0..g.n_states() {
        if g.is_terminated(me, s) {
            continue;
        }
        let Some(child) = g.available(parent, slot, s) else {
            continue;
        };
        let prims = prims_cache.entry(child).or_insert_with(|| {
            let mut out = BTreeSet::new();
            descendant_primitives(g, child, &mut out, &mut BTreeSet::new());
            out
        });
        for &a in prims.iter() {
            for t in model.outcomes(s, a) {
                let child_done = match child {
                    NodeRef::Primitive(_) => true,
                    NodeRef::Subtask(_) => g.is_terminated(child, t.next),
                };
                tr.comparisons += 1;
                if child_done && !g.is_terminated(me, t.next) {
                    tr.fail(Counterexample {
                        what: format!(
                            "{label} can exit in a state where {} continues (via {})",
                            g.name(me),
                            g.name(NodeRef::Primitive(a))
                        ),
                        first: space.decode(s),
                        second: Some(space.decode(t.next)),
                        left: 1.0,
                        right: 0.0,
                    });
                }
            }
        }
    }
    tr.finish(Condition::Termination, subject, 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShieldingReport {
    /// States (indices) in which the subtask is shielded.
    pub shielded: Vec<usize>,
    pub result: ConditionResult,
}

/// Condition 5: the exact shielded set of `subtask`, cross-checked against a
/// trace of `(node, state)` invocations that must never hit it.
pub fn check_shielding(g: &CompiledGraph, subtask: usize, trace: &[(NodeRef, usize)]) -> ShieldingReport {
    let node = NodeRef::Subtask(subtask);
    let shielded: Vec<usize> = (0..g.n_states()).filter(|&s| g.is_shielded(node, s)).collect();
    let subject = format!("{} shielded in {} states", g.name(node), shielded.len());
    let mut tr = Tracker::new(0.0);
    for &(n, s) in trace {
        if n != node {
            continue;
        }
        tr.comparisons += 1;
        if g.is_shielded(node, s) {
            tr.fail(Counterexample {
                what: format!("{} invoked in a shielded state", g.name(node)),
                first: g.space().decode(s),
                second: None,
                left: 1.0,
                right: 0.0,
            });
        }
    }
    ShieldingReport {
        shielded,
        result: tr.finish(Condition::Shielding, subject, 0),
    }
}
