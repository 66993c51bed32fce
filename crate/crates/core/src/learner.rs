//! MAXQ-Q: online learning of completion functions C(i, x, j) and leaf
//! values V(a, x) under strict call-and-return execution, with ordered
//! Boltzmann exploration.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{CompiledGraph, NodeRef};
use crate::mdp::{IndexedTransition, TabularModel};

/// Default per-episode cap on primitive actions during learning.
pub const DEFAULT_STEP_CAP: u64 = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnError {
    #[error("no available child for {subtask} in state {state}")]
    NoAvailableChild { subtask: String, state: usize },
    #[error("{subtask} is terminated in state {state}")]
    Terminated { subtask: String, state: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// Step-size rule for one table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    Constant(f64),
    /// `c / (c + n)` where `n` counts prior updates of the entry.
    Harmonic(f64),
}

impl StepSize {
    pub fn alpha(&self, visits: u64) -> f64 {
        match *self {
            StepSize::Constant(a) => a,
            StepSize::Harmonic(c) => c / (c + visits as f64),
        }
    }

    /// Whether the rule satisfies sum(alpha) = inf and sum(alpha^2) < inf.
    pub fn satisfies_convergence_conditions(&self) -> bool {
        match *self {
            StepSize::Constant(_) => false,
            StepSize::Harmonic(c) => c > 0.0,
        }
    }

    pub fn mode_label(&self) -> &'static str {
        if self.satisfies_convergence_conditions() {
            "convergent"
        } else {
            "practical mode"
        }
    }

    fn validate(&self) -> Result<(), LearnError> {
        match *self {
            StepSize::Constant(a) if (0.0..=1.0).contains(&a) => Ok(()),
            StepSize::Harmonic(c) if c > 0.0 && c.is_finite() => Ok(()),
            other => Err(LearnError::InvalidSchedule(format!("{other:?}"))),
        }
    }
}

impl std::fmt::Display for StepSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StepSize::Constant(a) => write!(f, "constant:{a}"),
            StepSize::Harmonic(c) => write!(f, "harmonic:{c}"),
        }
    }
}

/// Step sizes per subtask family (completion tables) and per primitive
/// (leaf tables), with a default for everything not listed.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningSchedule {
    pub default: StepSize,
    pub overrides: BTreeMap<String, StepSize>,
}

impl LearningSchedule {
    pub fn uniform(rule: StepSize) -> Self {
        Self {
            default: rule,
            overrides: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, rule: StepSize) -> Self {
        self.overrides.insert(name.to_string(), rule);
        self
    }

    pub fn rule(&self, name: &str) -> StepSize {
        self.overrides.get(name).copied().unwrap_or(self.default)
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        self.default.validate()?;
        self.overrides.values().try_for_each(StepSize::validate)
    }

    pub fn is_convergent(&self) -> bool {
        self.default.satisfies_convergence_conditions()
            && self
                .overrides
                .values()
                .all(StepSize::satisfies_convergence_conditions)
    }
}

/// Boltzmann temperature cooled geometrically per episode down to a floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplorationSchedule {
    pub initial: f64,
    pub decay: f64,
    pub minimum: f64,
}

impl ExplorationSchedule {
    pub fn new(initial: f64, decay: f64, minimum: f64) -> Result<Self, LearnError> {
        let s = Self {
            initial,
            decay,
            minimum,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        let ok = self.initial > 0.0
            && self.initial.is_finite()
            && self.decay > 0.0
            && self.decay <= 1.0
            && self.minimum > 0.0
            && self.minimum.is_finite();
        if ok {
            Ok(())
        } else {
            Err(LearnError::InvalidSchedule(format!("{self:?}")))
        }
    }

    pub fn temperature(&self, episode: u64) -> f64 {
        let t = self.initial * self.decay.powf(episode as f64);
        t.max(self.minimum)
    }
}

/// Samples from the Boltzmann distribution over `q` at `temperature`.
/// Uses exactly one uniform draw.
pub fn boltzmann_pick(q: &[f64], temperature: f64, rng: &mut dyn RngCore) -> usize {
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = q.iter().map(|v| ((v - best) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    // Rounding slack: fall back to the last positive weight.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    value: f64,
    visits: u64,
}

/// Learned completion and leaf values. Absent entries read as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxqTables {
    completion: Vec<Vec<Option<Entry>>>,
    leaf: Vec<Vec<Option<Entry>>>,
}

impl MaxqTables {
    pub fn new(graph: &CompiledGraph) -> Self {
        Self {
            completion: graph.tables().iter().map(|t| vec![None; t.size]).collect(),
            leaf: (0..graph.n_primitives())
                .map(|a| vec![None; graph.leaf_size(a)])
                .collect(),
        }
    }

    #[inline]
    pub fn completion(&self, table: usize, key: usize) -> f64 {
        self.completion[table][key].map_or(0.0, |e| e.value)
    }

    #[inline]
    pub fn leaf(&self, action: usize, key: usize) -> f64 {
        self.leaf[action][key].map_or(0.0, |e| e.value)
    }

    pub fn is_stored(&self, table: usize, key: usize) -> bool {
        self.completion[table][key].is_some()
    }

    /// `(table, key, value)` for every stored completion entry.
    pub fn completion_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.completion.iter().enumerate().flat_map(|(t, row)| {
            row.iter()
                .enumerate()
                .filter_map(move |(k, e)| e.map(|e| (t, k, e.value)))
        })
    }

    pub fn leaf_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.leaf.iter().enumerate().flat_map(|(a, row)| {
            row.iter()
                .enumerate()
                .filter_map(move |(k, e)| e.map(|e| (a, k, e.value)))
        })
    }

    pub fn stored_completion_count(&self) -> usize {
        self.completion.iter().flatten().filter(|e| e.is_some()).count()
    }

    pub fn stored_leaf_count(&self) -> usize {
        self.leaf.iter().flatten().filter(|e| e.is_some()).count()
    }

    fn update_completion(&mut self, table: usize, key: usize, target: f64, rule: StepSize) {
        let slot = &mut self.completion[table][key];
        let e = slot.get_or_insert(Entry {
            value: 0.0,
            visits: 0,
        });
        let a = rule.alpha(e.visits);
        e.value = (1.0 - a) * e.value + a * target;
        e.visits += 1;
    }

    fn update_leaf(&mut self, action: usize, key: usize, target: f64, rule: StepSize) {
        let slot = &mut self.leaf[action][key];
        let e = slot.get_or_insert(Entry {
            value: 0.0,
            visits: 0,
        });
        let a = rule.alpha(e.visits);
        e.value = (1.0 - a) * e.value + a * target;
        e.visits += 1;
    }

    /// Sorted line-oriented snapshot: `subtask<TAB>key<TAB>child<TAB>value`,
    /// values with 17 significant digits. Leaf entries use `-` as child.
    pub fn snapshot(&self, graph: &CompiledGraph) -> String {
        let space = graph.space();
        let mut lines = Vec::new();
        for (t, k, v) in self.completion_entries() {
            let spec = &graph.tables()[t];
            lines.push(format!(
                "{}\t{}\t{}\t{}",
                spec.family,
                spec.projection
                    .describe(space, k, spec.binding_name.as_deref()),
                spec.child,
                format_value(v)
            ));
        }
        for (a, k, v) in self.leaf_entries() {
            lines.push(format!(
                "{}\t{}\t-\t{}",
                graph.name(NodeRef::Primitive(a)),
                describe_leaf(graph, a, k),
                format_value(v)
            ));
        }
        lines.sort();
        let mut out = String::new();
        for l in lines {
            let _ = writeln!(out, "{l}");
        }
        out
    }
}

fn describe_leaf(graph: &CompiledGraph, action: usize, key: usize) -> String {
    use crate::graph::{LeafAbstraction, Projection};
    match graph.graph().leaf(action) {
        LeafAbstraction::Vars(vars) => {
            let idx: Vec<usize> = vars
                .iter()
                .filter_map(|v| graph.space().var_index(v))
                .collect();
            Projection::new(graph.space(), &idx, None).describe(graph.space(), key, None)
        }
        LeafAbstraction::Feature { name, .. } => format!("{name}={key}"),
    }
}

/// Value formatting shared by all snapshot files: 17 significant digits.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Outcome of one subtask invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubtaskResult {
    pub final_state: usize,
    /// Primitive actions executed.
    pub steps: u64,
    /// Reward accumulated with discounting from the invocation start.
    pub reward: f64,
    pub episode_ended: bool,
    /// The episode was cut by the step cap or the learning budget.
    pub truncated: bool,
}

/// Environment stepping with per-episode cap and optional global budget.
#[derive(Debug)]
pub struct EnvSession<'m> {
    model: &'m TabularModel,
    state: usize,
    episode_steps: u64,
    step_cap: u64,
    total_steps: u64,
    budget: Option<u64>,
    ended: bool,
    truncated: bool,
    episode_return: f64,
}

impl<'m> EnvSession<'m> {
    pub fn new(model: &'m TabularModel, step_cap: u64) -> Self {
        Self {
            model,
            state: 0,
            episode_steps: 0,
            step_cap,
            total_steps: 0,
            budget: None,
            ended: true,
            truncated: false,
            episode_return: 0.0,
        }
    }

    /// Limits the total number of primitive steps across episodes.
    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn reset(&mut self, rng: &mut dyn RngCore) -> usize {
        self.reset_to(self.model.sample_initial(rng))
    }

    pub fn reset_to(&mut self, state: usize) -> usize {
        self.state = state;
        self.episode_steps = 0;
        self.ended = self.model.is_terminal(state) || self.budget_exhausted();
        self.truncated = !self.model.is_terminal(state) && self.budget_exhausted();
        self.episode_return = 0.0;
        state
    }

    fn budget_exhausted(&self) -> bool {
        self.budget.is_some_and(|b| self.total_steps >= b)
    }

    pub fn step(&mut self, action: usize, rng: &mut dyn RngCore) -> IndexedTransition {
        let t = self.model.sample(self.state, action, rng);
        self.state = t.next;
        self.episode_steps += 1;
        self.total_steps += 1;
        self.episode_return += t.reward;
        if self.model.is_terminal(t.next) {
            self.ended = true;
        } else if self.episode_steps >= self.step_cap || self.budget_exhausted() {
            self.ended = true;
            self.truncated = true;
        }
        t
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn ended(&self) -> bool {
        self.ended
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn episode_steps(&self) -> u64 {
        self.episode_steps
    }

    pub fn episode_return(&self) -> f64 {
        self.episode_return
    }

    pub fn model(&self) -> &'m TabularModel {
        self.model
    }
}

/// Instrumentation points of the learning recursion.
pub trait LearnHooks {
    /// Called when `node` is invoked in (true) state `state`.
    fn on_invoke(&mut self, _node: NodeRef, _state: usize) {}

    /// Called after every primitive step with the updated tables.
    fn on_primitive(&mut self, _tables: &MaxqTables, _total_steps: u64) {}

    /// The state subtask `context` observes when the environment is in
    /// `state`. Identity unless a test rewrites irrelevant variables.
    fn view(&self, _context: usize, state: usize) -> usize {
        state
    }
}

/// Hooks that do nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHooks;

impl LearnHooks for NoHooks {}

/// Records every subtask invocation as `(node, state)`.
#[derive(Debug, Default, Clone)]
pub struct TraceHooks {
    pub invocations: Vec<(NodeRef, usize)>,
}

impl LearnHooks for TraceHooks {
    fn on_invoke(&mut self, node: NodeRef, state: usize) {
        self.invocations.push((node, state));
    }
}

/// V(node, s): leaf lookup for primitives, best child's Q for subtasks.
pub fn evaluate_v(
    tables: &MaxqTables,
    g: &CompiledGraph,
    node: NodeRef,
    state: usize,
) -> Result<f64, LearnError> {
    evaluate_v_with(tables, g, node, state, &NoHooks)
}

fn evaluate_v_with<H: LearnHooks>(
    tables: &MaxqTables,
    g: &CompiledGraph,
    node: NodeRef,
    state: usize,
    hooks: &H,
) -> Result<f64, LearnError> {
    match node {
        NodeRef::Primitive(a) => Ok(tables.leaf(a, g.leaf_key(a, state))),
        NodeRef::Subtask(i) => {
            let s = hooks.view(i, state);
            if g.is_terminated(node, s) {
                return Err(LearnError::Terminated {
                    subtask: g.name(node).to_string(),
                    state: s,
                });
            }
            best_child_with(tables, g, i, s, state, hooks).map(|(_, v)| v)
        }
    }
}

/// Greedy child of subtask `i` in `state`: `(slot index, Q value)`. Exact
/// ties go to the earliest-declared child.
pub fn best_child(
    tables: &MaxqTables,
    g: &CompiledGraph,
    i: usize,
    state: usize,
) -> Result<(usize, f64), LearnError> {
    best_child_with(tables, g, i, state, state, &NoHooks)
}

/// `s` is subtask `i`'s view of the true state `true_state`.
fn best_child_with<H: LearnHooks>(
    tables: &MaxqTables,
    g: &CompiledGraph,
    i: usize,
    s: usize,
    true_state: usize,
    hooks: &H,
) -> Result<(usize, f64), LearnError> {
    let mut best: Option<(usize, f64)> = None;
    for slot in 0..g.slots(i).len() {
        let Some(child) = g.available(i, slot, s) else {
            continue;
        };
        let q = evaluate_v_with(tables, g, child, child_state(child, s, true_state), hooks)?
            + child_completion(tables, g, i, slot, s);
        if best.is_none_or(|(_, b)| q > b) {
            best = Some((slot, q));
        }
    }
    best.ok_or_else(|| LearnError::NoAvailableChild {
        subtask: g.name(NodeRef::Subtask(i)).to_string(),
        state: s,
    })
}

/// Composite children re-derive their own view from the true state;
/// primitives see their parent's view.
#[inline]
fn child_state(child: NodeRef, parent_view: usize, true_state: usize) -> usize {
    match child {
        NodeRef::Primitive(_) => parent_view,
        NodeRef::Subtask(_) => true_state,
    }
}

#[inline]
fn child_completion(tables: &MaxqTables, g: &CompiledGraph, i: usize, slot: usize, s: usize) -> f64 {
    let (table, key) = g.completion_key(i, slot, s);
    if g.tables()[table].eliminated {
        0.0
    } else {
        tables.completion(table, key)
    }
}

/// Q values of every available child of `i` in `state`, as `(slot, q)`.
pub fn child_q_values(
    tables: &MaxqTables,
    g: &CompiledGraph,
    i: usize,
    state: usize,
) -> Result<Vec<(usize, f64)>, LearnError> {
    child_q_values_with(tables, g, i, state, state, &NoHooks)
}

fn child_q_values_with<H: LearnHooks>(
    tables: &MaxqTables,
    g: &CompiledGraph,
    i: usize,
    s: usize,
    true_state: usize,
    hooks: &H,
) -> Result<Vec<(usize, f64)>, LearnError> {
    let mut out = Vec::with_capacity(g.slots(i).len());
    for slot in 0..g.slots(i).len() {
        if let Some(child) = g.available(i, slot, s) {
            let q = evaluate_v_with(tables, g, child, child_state(child, s, true_state), hooks)?
                + child_completion(tables, g, i, slot, s);
            out.push((slot, q));
        }
    }
    if out.is_empty() {
        return Err(LearnError::NoAvailableChild {
            subtask: g.name(NodeRef::Subtask(i)).to_string(),
            state: s,
        });
    }
    Ok(out)
}

/// Boltzmann selection among the available children of `i`. Returns the
/// slot index.
pub fn select_child(
    tables: &MaxqTables,
    g: &CompiledGraph,
    i: usize,
    state: usize,
    temperature: f64,
    rng: &mut dyn RngCore,
) -> Result<usize, LearnError> {
    let qs = child_q_values(tables, g, i, state)?;
    let values: Vec<f64> = qs.iter().map(|(_, q)| *q).collect();
    Ok(qs[boltzmann_pick(&values, temperature, rng)].0)
}

/// Hyperparameters of one MAXQ-Q learner.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxqSettings {
    pub learning: LearningSchedule,
    pub exploration: ExplorationSchedule,
    pub gamma: f64,
    pub step_cap: u64,
}

impl MaxqSettings {
    pub fn validate(&self) -> Result<(), LearnError> {
        self.learning.validate()?;
        self.exploration.validate()?;
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(LearnError::InvalidSchedule(format!("gamma = {}", self.gamma)));
        }
        if self.step_cap == 0 {
            return Err(LearnError::InvalidSchedule("step cap must be positive".into()));
        }
        Ok(())
    }
}

/// Per-episode summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub steps: u64,
    pub undiscounted_return: f64,
    pub truncated: bool,
}

/// One MAXQ-Q learner: tables, schedules and its own RNG stream.
pub struct MaxqLearner<'a> {
    graph: &'a CompiledGraph,
    tables: MaxqTables,
    completion_rules: Vec<StepSize>,
    leaf_rules: Vec<StepSize>,
    settings: MaxqSettings,
    rng: ChaCha8Rng,
    episodes: u64,
    truncations: u64,
}

impl<'a> MaxqLearner<'a> {
    pub fn new(graph: &'a CompiledGraph, settings: MaxqSettings, seed: u64) -> Result<Self, LearnError> {
        settings.validate()?;
        let completion_rules = graph
            .tables()
            .iter()
            .map(|t| settings.learning.rule(&t.family))
            .collect();
        let leaf_rules = (0..graph.n_primitives())
            .map(|a| settings.learning.rule(graph.name(NodeRef::Primitive(a))))
            .collect();
        Ok(Self {
            graph,
            tables: MaxqTables::new(graph),
            completion_rules,
            leaf_rules,
            settings,
            rng: ChaCha8Rng::seed_from_u64(seed),
            episodes: 0,
            truncations: 0,
        })
    }

    pub fn tables(&self) -> &MaxqTables {
        &self.tables
    }

    pub fn into_tables(self) -> MaxqTables {
        self.tables
    }

    pub fn graph(&self) -> &'a CompiledGraph {
        self.graph
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn truncations(&self) -> u64 {
        self.truncations
    }

    pub fn temperature(&self) -> f64 {
        self.settings.exploration.temperature(self.episodes)
    }

    /// Runs one episode from a sampled start state.
    pub fn run_episode<H: LearnHooks>(
        &mut self,
        session: &mut EnvSession<'_>,
        hooks: &mut H,
    ) -> Result<EpisodeStats, LearnError> {
        let start = session.reset(&mut self.rng);
        self.run_episode_from(session, start, hooks)
    }

    pub fn run_episode_from<H: LearnHooks>(
        &mut self,
        session: &mut EnvSession<'_>,
        start: usize,
        hooks: &mut H,
    ) -> Result<EpisodeStats, LearnError> {
        session.reset_to(start);
        let before = session.total_steps();
        let root = NodeRef::Subtask(self.graph.root());
        if !session.ended() && !self.graph.is_terminated(root, hooks.view(self.graph.root(), start)) {
            self.run_maxq_q(root, None, session, hooks)?;
        }
        self.episodes += 1;
        if session.truncated() {
            self.truncations += 1;
        }
        Ok(EpisodeStats {
            steps: session.total_steps() - before,
            undiscounted_return: session.episode_return(),
            truncated: session.truncated(),
        })
    }

    /// Executes `node` from the session's current state, learning as it
    /// goes. `parent` is the invoking subtask (used for a primitive's view).
    pub fn run_maxq_q<H: LearnHooks>(
        &mut self,
        node: NodeRef,
        parent: Option<usize>,
        session: &mut EnvSession<'_>,
        hooks: &mut H,
    ) -> Result<SubtaskResult, LearnError> {
        let g = self.graph;
        let gamma = self.settings.gamma;
        hooks.on_invoke(node, session.state());
        match node {
            NodeRef::Primitive(a) => {
                let seen = parent.map_or(session.state(), |p| hooks.view(p, session.state()));
                let t = session.step(a, &mut self.rng);
                self.tables
                    .update_leaf(a, g.leaf_key(a, seen), t.reward, self.leaf_rules[a]);
                hooks.on_primitive(&self.tables, session.total_steps());
                Ok(SubtaskResult {
                    final_state: t.next,
                    steps: 1,
                    reward: t.reward,
                    episode_ended: session.ended(),
                    truncated: session.truncated(),
                })
            }
            NodeRef::Subtask(i) => {
                let mut total = SubtaskResult {
                    final_state: session.state(),
                    steps: 0,
                    reward: 0.0,
                    episode_ended: session.ended(),
                    truncated: session.truncated(),
                };
                if g.is_terminated(node, hooks.view(i, session.state())) {
                    return Err(LearnError::Terminated {
                        subtask: g.name(node).to_string(),
                        state: session.state(),
                    });
                }
                let mut discount = 1.0;
                while !session.ended() {
                    let true_s = session.state();
                    let s = hooks.view(i, true_s);
                    if g.is_terminated(node, s) {
                        break;
                    }
                    let temperature = self.temperature();
                    let qs = child_q_values_with(&self.tables, g, i, s, true_s, hooks)?;
                    let values: Vec<f64> = qs.iter().map(|(_, q)| *q).collect();
                    let slot = qs[boltzmann_pick(&values, temperature, &mut self.rng)].0;
                    let child = g.available(i, slot, s).expect("selected child is available");
                    let res = self.run_maxq_q(child, Some(i), session, hooks)?;

                    if !res.truncated {
                        let (table, key) = g.completion_key(i, slot, s);
                        if !g.tables()[table].eliminated {
                            let s2_true = res.final_state;
                            let s2 = hooks.view(i, s2_true);
                            let continuation = if g.is_terminated(node, s2) {
                                0.0
                            } else {
                                // max over a' of [V(a', s') + C(i, s', a')]
                                match child_q_values_with(&self.tables, g, i, s2, s2_true, hooks) {
                                    Ok(q) => q.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max),
                                    Err(LearnError::NoAvailableChild { .. }) => 0.0,
                                    Err(e) => return Err(e),
                                }
                            };
                            let target = gamma.powi(res.steps as i32) * continuation;
                            self.tables
                                .update_completion(table, key, target, self.completion_rules[table]);
                        }
                    }

                    total.reward += discount * res.reward;
                    discount *= gamma.powi(res.steps as i32);
                    total.steps += res.steps;
                    total.final_state = res.final_state;
                    total.episode_ended = res.episode_ended;
                    total.truncated = res.truncated;
                    if res.episode_ended {
                        break;
                    }
                }
                Ok(total)
            }
        }
    }
}

/// Greedy hierarchical execution with frozen tables: returns the
/// undiscounted return and number of primitive steps of one episode.
pub fn run_greedy_episode(
    tables: &MaxqTables,
    g: &CompiledGraph,
    session: &mut EnvSession<'_>,
    start: usize,
    rng: &mut dyn RngCore,
) -> Result<EpisodeStats, LearnError> {
    session.reset_to(start);
    let root = NodeRef::Subtask(g.root());
    if !session.ended() && !g.is_terminated(root, start) {
        greedy_execute(tables, g, root, session, rng)?;
    }
    Ok(EpisodeStats {
        steps: session.episode_steps(),
        undiscounted_return: session.episode_return(),
        truncated: session.truncated(),
    })
}

fn greedy_execute(
    tables: &MaxqTables,
    g: &CompiledGraph,
    node: NodeRef,
    session: &mut EnvSession<'_>,
    rng: &mut dyn RngCore,
) -> Result<(), LearnError> {
    match node {
        NodeRef::Primitive(a) => {
            session.step(a, rng);
        }
        NodeRef::Subtask(i) => {
            while !session.ended() && !g.is_terminated(node, session.state()) {
                let s = session.state();
                let (slot, _) = best_child(tables, g, i, s)?;
                let child = g.available(i, slot, s).expect("best child is available");
                greedy_execute(tables, g, child, session, rng)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ChildSpec, SubtaskDef, TaskGraph};
    use crate::mdp::{MdpError, MdpModel, StateSpace, StateVector, Transition, VariableSchema};
    use std::sync::Arc;

    /// Two states; action "go" moves 0 -> 1 (terminal) with reward -1.
    struct OneStep {
        space: StateSpace,
        actions: Vec<String>,
    }

    impl OneStep {
        fn new() -> Self {
            Self {
                space: StateSpace::new(vec![VariableSchema::new("pos", 2)]).unwrap(),
                actions: vec!["go".into()],
            }
        }
    }

    impl MdpModel for OneStep {
        fn space(&self) -> &StateSpace {
            &self.space
        }
        fn action_names(&self) -> &[String] {
            &self.actions
        }
        fn transitions(&self, _: &StateVector, _: usize) -> Result<Vec<Transition>, MdpError> {
            Ok(vec![Transition {
                next_state: StateVector(vec![1]),
                probability: 1.0,
                reward: -1.0,
            }])
        }
        fn is_terminal(&self, s: &StateVector) -> bool {
            s.get(0) == 1
        }
        fn initial_states(&self) -> Vec<StateVector> {
            vec![StateVector(vec![0])]
        }
    }

    fn one_step_graph() -> CompiledGraph {
        let g = TaskGraph::new(
            vec![VariableSchema::new("pos", 2)],
            vec!["go".into()],
            vec![SubtaskDef::new(
                "Root",
                vec![ChildSpec::Fixed("go".into())],
                Arc::new(|s: &StateVector| s.get(0) == 1),
                &["pos"],
            )],
            "Root",
            Arc::new(|s: &StateVector| s.get(0) == 1),
        )
        .unwrap();
        CompiledGraph::compile(&g).unwrap()
    }

    fn settings(rule: StepSize) -> MaxqSettings {
        MaxqSettings {
            learning: LearningSchedule::uniform(rule),
            exploration: ExplorationSchedule::new(1.0, 1.0, 1.0).unwrap(),
            gamma: 1.0,
            step_cap: 100,
        }
    }

    #[test]
    fn harmonic_rule_starts_at_one_and_decays() {
        let h = StepSize::Harmonic(10.0);
        assert_eq!(h.alpha(0), 1.0);
        assert!((h.alpha(10) - 0.5).abs() < 1e-15);
        assert!(h.satisfies_convergence_conditions());
        assert_eq!(StepSize::Constant(0.1).mode_label(), "practical mode");
    }

    #[test]
    fn temperature_is_non_increasing_and_floored() {
        let e = ExplorationSchedule::new(10.0, 0.9, 0.5).unwrap();
        let ts: Vec<f64> = (0..100).map(|k| e.temperature(k)).collect();
        assert!(ts.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*ts.last().unwrap(), 0.5);
        assert!(ExplorationSchedule::new(0.0, 0.9, 0.5).is_err());
        assert!(ExplorationSchedule::new(1.0, 1.5, 0.5).is_err());
    }

    #[test]
    fn zero_tables_evaluate_to_zero() {
        let g = one_step_graph();
        let t = MaxqTables::new(&g);
        assert_eq!(evaluate_v(&t, &g, NodeRef::Subtask(0), 0).unwrap(), 0.0);
        assert_eq!(evaluate_v(&t, &g, NodeRef::Primitive(0), 1).unwrap(), 0.0);
        assert!(matches!(
            evaluate_v(&t, &g, NodeRef::Subtask(0), 1),
            Err(LearnError::Terminated { .. })
        ));
    }

    #[test]
    fn one_step_fixpoint_with_unit_rate() {
        let model = TabularModel::compile(&OneStep::new()).unwrap();
        let g = one_step_graph();
        let mut l = MaxqLearner::new(&g, settings(StepSize::Constant(1.0)), 3).unwrap();
        let mut env = EnvSession::new(&model, 100);
        let stats = l.run_episode(&mut env, &mut NoHooks).unwrap();
        assert_eq!(stats.steps, 1);
        assert_eq!(stats.undiscounted_return, -1.0);
        // The only child leads to termination, so C(Root, 0, go) = 0 exactly.
        assert_eq!(l.tables().completion(0, 0), 0.0);
        assert!(l.tables().is_stored(0, 0));
        assert_eq!(l.tables().leaf(0, 0), -1.0);
        assert_eq!(evaluate_v(l.tables(), &g, NodeRef::Subtask(0), 0).unwrap(), -1.0);
    }

    #[test]
    fn zero_rate_leaves_tables_unchanged() {
        let model = TabularModel::compile(&OneStep::new()).unwrap();
        let g = one_step_graph();
        let mut l = MaxqLearner::new(&g, settings(StepSize::Constant(0.0)), 3).unwrap();
        let before = l.tables().completion(0, 0).to_bits();
        let mut env = EnvSession::new(&model, 100);
        for _ in 0..5 {
            l.run_episode(&mut env, &mut NoHooks).unwrap();
        }
        assert_eq!(l.tables().completion(0, 0).to_bits(), before);
        assert_eq!(l.tables().leaf(0, 0).to_bits(), 0f64.to_bits());
    }

    #[test]
    fn boltzmann_equal_values_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[boltzmann_pick(&[2.0, 2.0, 2.0], 0.05, &mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02);
        }
    }

    #[test]
    fn boltzmann_cold_is_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| boltzmann_pick(&[-3.0, -2.0, -4.5], 0.2, &mut rng) == 1)
            .count();
        assert!(hits as f64 / n as f64 >= 0.99);
    }
}
