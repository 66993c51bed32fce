//! MAXQ task hierarchies: subtasks with termination predicates and ordered
//! child slots, abstraction annotations, and state projection.
//!
//! A [`TaskGraph`] is declarative and works on [`StateVector`]s. Learners and
//! oracles use [`CompiledGraph`], which evaluates every predicate, slot
//! resolution and projection once per dense state index.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use thiserror::Error;

use crate::mdp::{MdpError, StateSpace, StateVector, VariableSchema};

pub type StatePredicate = Arc<dyn Fn(&StateVector) -> bool + Send + Sync>;
pub type StateFeature = Arc<dyn Fn(&StateVector) -> usize + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown subtask {0}")]
    InvalidSubtask(String),
    #[error("task graph is invalid: {}", format_violations(.0))]
    Invalid(Vec<DagViolation>),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

fn format_violations(v: &[DagViolation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Structural problems reported by [`validate_dag`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum DagViolation {
    UnknownRoot(String),
    DuplicateId(String),
    EmptyChildren(String),
    UnknownChild { parent: String, child: String },
    Cycle(Vec<String>),
    Unreachable(String),
    UnknownVariable { owner: String, variable: String },
    BadDispatch { parent: String, slot: String, reason: String },
    BadBinding(String),
    UnknownEdge { parent: String, child: String },
}

impl fmt::Display for DagViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DagViolation::UnknownRoot(r) => write!(f, "root {r} is not a subtask"),
            DagViolation::DuplicateId(id) => write!(f, "duplicate node id {id}"),
            DagViolation::EmptyChildren(id) => write!(f, "subtask {id} has no children"),
            DagViolation::UnknownChild { parent, child } => {
                write!(f, "subtask {parent} lists unknown child {child}")
            }
            DagViolation::Cycle(ids) => write!(f, "cycle through {{{}}}", ids.join(",")),
            DagViolation::Unreachable(id) => write!(f, "subtask {id} is unreachable from the root"),
            DagViolation::UnknownVariable { owner, variable } => {
                write!(f, "{owner} refers to unknown variable {variable}")
            }
            DagViolation::BadDispatch { parent, slot, reason } => {
                write!(f, "slot {slot} of {parent}: {reason}")
            }
            DagViolation::BadBinding(id) => write!(f, "binding of {id} is out of range"),
            DagViolation::UnknownEdge { parent, child } => {
                write!(f, "annotation for unknown edge {parent} -> {child}")
            }
        }
    }
}

/// One child slot of a subtask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChildSpec {
    /// A fixed subtask or primitive action.
    Fixed(String),
    /// A parameterized child whose bound instance is selected by the value of
    /// a state variable (e.g. navigate to wherever the passenger is).
    /// `None` targets mean the slot is unavailable for that value.
    Dispatch {
        label: String,
        var: String,
        targets: Vec<Option<String>>,
    },
}

impl ChildSpec {
    pub fn label(&self) -> &str {
        match self {
            ChildSpec::Fixed(id) => id,
            ChildSpec::Dispatch { label, .. } => label,
        }
    }

    fn target_names(&self) -> Vec<&str> {
        match self {
            ChildSpec::Fixed(id) => vec![id.as_str()],
            ChildSpec::Dispatch { targets, .. } => {
                targets.iter().flatten().map(|s| s.as_str()).collect()
            }
        }
    }
}

/// Compile-time parameter of a subtask instance. Folded into the abstract
/// key so that instances of one family share completion tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Binding {
    pub name: String,
    pub value: usize,
    pub arity: usize,
}

#[derive(Clone)]
pub struct SubtaskDef {
    pub id: String,
    /// Instances with the same family share completion tables.
    pub family: String,
    /// Ordered; the order is the tie-breaking order.
    pub children: Vec<ChildSpec>,
    pub termination: StatePredicate,
    pub relevant_vars: Vec<String>,
    pub binding: Option<Binding>,
}

impl SubtaskDef {
    pub fn new(
        id: impl Into<String>,
        children: Vec<ChildSpec>,
        termination: StatePredicate,
        relevant_vars: &[&str],
    ) -> Self {
        let id = id.into();
        Self {
            family: id.clone(),
            id,
            children,
            termination,
            relevant_vars: relevant_vars.iter().map(|s| s.to_string()).collect(),
            binding: None,
        }
    }

    pub fn with_binding(mut self, family: &str, name: &str, value: usize, arity: usize) -> Self {
        self.family = family.to_string();
        self.binding = Some(Binding {
            name: name.to_string(),
            value,
            arity,
        });
        self
    }
}

impl fmt::Debug for SubtaskDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SubtaskDef")
            .field("id", &self.id)
            .field("family", &self.family)
            .field("children", &self.children)
            .field("relevant_vars", &self.relevant_vars)
            .field("binding", &self.binding)
            .finish()
    }
}

/// Per-edge abstraction flags.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EdgeAnnotation {
    /// The child's termination implies the parent's, so C(parent, ., child)
    /// is identically zero and never stored.
    pub completion_eliminated: bool,
    /// Variables the child's result distribution depends on; the completion
    /// table for this edge is keyed by these instead of the parent's set.
    pub result_relevant_vars: Option<Vec<String>>,
}

/// How a primitive's leaf value table is keyed.
#[derive(Clone)]
pub enum LeafAbstraction {
    Vars(Vec<String>),
    /// A named discrete feature of the state with values in `[0, arity)`.
    Feature {
        name: String,
        arity: usize,
        feature: StateFeature,
    },
}

impl LeafAbstraction {
    pub fn vars(names: &[&str]) -> Self {
        LeafAbstraction::Vars(names.iter().map(|s| s.to_string()).collect())
    }

    pub fn describe(&self) -> String {
        match self {
            LeafAbstraction::Vars(v) => format!("vars={}", v.join(",")),
            LeafAbstraction::Feature { name, arity, .. } => format!("feature={name}/{arity}"),
        }
    }
}

impl fmt::Debug for LeafAbstraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

/// A resolved node of the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeRef {
    Primitive(usize),
    Subtask(usize),
}

/// A mixed-radix projection onto a variable subset, optionally prefixed by a
/// binding value.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Projection {
    vars: Vec<usize>,
    radices: Vec<usize>,
    binding: Option<(usize, usize)>,
}

impl Projection {
    pub fn new(space: &StateSpace, vars: &[usize], binding: Option<(usize, usize)>) -> Self {
        let mut vars = vars.to_vec();
        vars.sort_unstable();
        vars.dedup();
        let radices = vars
            .iter()
            .map(|&v| space.schemas()[v].domain_size)
            .collect();
        Self {
            vars,
            radices,
            binding,
        }
    }

    pub fn vars(&self) -> &[usize] {
        &self.vars
    }

    /// Number of distinct keys this projection can produce.
    pub fn size(&self) -> usize {
        let base: usize = self.radices.iter().product();
        base * self.binding.map_or(1, |(_, arity)| arity)
    }

    pub fn key(&self, state: &StateVector) -> usize {
        let base = self
            .vars
            .iter()
            .zip(&self.radices)
            .fold(0, |acc, (&v, &r)| acc * r + state.get(v));
        match self.binding {
            Some((value, _)) => value * self.radices.iter().product::<usize>() + base,
            None => base,
        }
    }

    pub fn abstract_state(&self, state: &StateVector) -> AbstractState {
        AbstractState {
            vars: self.vars.clone(),
            binding: self.binding.map(|b| b.0),
            key: self.key(state),
        }
    }

    /// Human-readable rendering of a key, e.g. `t=2,taxi_row=0,taxi_col=4`.
    pub fn describe(&self, space: &StateSpace, key: usize, binding_name: Option<&str>) -> String {
        let per: usize = self.radices.iter().product();
        let mut parts = Vec::new();
        let mut rest = key % per.max(1);
        if let Some(name) = binding_name {
            parts.push(format!("{name}={}", key / per.max(1)));
        }
        let mut digits = vec![0; self.vars.len()];
        for (slot, r) in digits.iter_mut().zip(&self.radices).rev() {
            *slot = rest % r;
            rest /= r;
        }
        for (&v, d) in self.vars.iter().zip(digits) {
            parts.push(format!("{}={d}", space.schemas()[v].name));
        }
        if parts.is_empty() {
            "*".into()
        } else {
            parts.join(",")
        }
    }
}

/// The key of a state under a projection, together with the identity of the
/// variable subset (and binding) that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AbstractState {
    pub vars: Vec<usize>,
    pub binding: Option<usize>,
    pub key: usize,
}

#[derive(Clone)]
pub struct TaskGraph {
    space: StateSpace,
    primitives: Vec<String>,
    subtasks: Vec<SubtaskDef>,
    root: String,
    edges: BTreeMap<(String, String), EdgeAnnotation>,
    leaves: Vec<LeafAbstraction>,
    episode_terminal: StatePredicate,
}

impl fmt::Debug for TaskGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl TaskGraph {
    /// Builds a graph without validating it; see [`validate_dag`].
    ///
    /// Every primitive starts with a leaf table over all variables.
    pub fn new(
        schemas: Vec<VariableSchema>,
        primitives: Vec<String>,
        subtasks: Vec<SubtaskDef>,
        root: impl Into<String>,
        episode_terminal: StatePredicate,
    ) -> Result<Self, GraphError> {
        let space = StateSpace::new(schemas)?;
        let all: Vec<String> = space.schemas().iter().map(|s| s.name.clone()).collect();
        let leaves = primitives
            .iter()
            .map(|_| LeafAbstraction::Vars(all.clone()))
            .collect();
        Ok(Self {
            space,
            primitives,
            subtasks,
            root: root.into(),
            edges: BTreeMap::new(),
            leaves,
            episode_terminal,
        })
    }

    pub fn annotate_edge(&mut self, parent: &str, child: &str, annotation: EdgeAnnotation) {
        self.edges
            .insert((parent.to_string(), child.to_string()), annotation);
    }

    pub fn set_leaf(&mut self, primitive: &str, abstraction: LeafAbstraction) {
        if let Some(k) = self.primitives.iter().position(|p| p == primitive) {
            self.leaves[k] = abstraction;
        }
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn schemas(&self) -> &[VariableSchema] {
        self.space.schemas()
    }

    pub fn primitives(&self) -> &[String] {
        &self.primitives
    }

    pub fn subtasks(&self) -> &[SubtaskDef] {
        &self.subtasks
    }

    pub fn subtasks_mut(&mut self) -> &mut [SubtaskDef] {
        &mut self.subtasks
    }

    pub fn root(&self) -> &str {
        &self.root
    }

    pub fn edge(&self, parent: &str, child: &str) -> EdgeAnnotation {
        self.edges
            .get(&(parent.to_string(), child.to_string()))
            .cloned()
            .unwrap_or_default()
    }

    pub fn edges(&self) -> &BTreeMap<(String, String), EdgeAnnotation> {
        &self.edges
    }

    pub fn leaf(&self, primitive: usize) -> &LeafAbstraction {
        &self.leaves[primitive]
    }

    pub fn is_episode_terminal(&self, s: &StateVector) -> bool {
        (self.episode_terminal)(s)
    }

    pub fn node(&self, name: &str) -> Option<NodeRef> {
        self.subtasks
            .iter()
            .position(|t| t.id == name)
            .map(NodeRef::Subtask)
            .or_else(|| {
                self.primitives
                    .iter()
                    .position(|p| p == name)
                    .map(NodeRef::Primitive)
            })
    }

    pub fn subtask_index(&self, id: &str) -> Result<usize, GraphError> {
        self.subtasks
            .iter()
            .position(|t| t.id == id)
            .ok_or_else(|| GraphError::InvalidSubtask(id.to_string()))
    }

    pub fn node_name(&self, node: NodeRef) -> &str {
        match node {
            NodeRef::Primitive(a) => &self.primitives[a],
            NodeRef::Subtask(i) => &self.subtasks[i].id,
        }
    }

    pub fn var_indices(&self, names: &[String]) -> Vec<usize> {
        names
            .iter()
            .filter_map(|n| self.space.var_index(n))
            .collect()
    }

    /// Projection a subtask uses for its own policy (relevant variables plus
    /// binding).
    pub fn subtask_projection(&self, i: usize) -> Projection {
        let t = &self.subtasks[i];
        Projection::new(
            &self.space,
            &self.var_indices(&t.relevant_vars),
            t.binding.as_ref().map(|b| (b.value, b.arity)),
        )
    }

    /// Projection keying C(i, ., slot).
    pub fn completion_projection(&self, i: usize, slot: usize) -> Projection {
        let t = &self.subtasks[i];
        let edge = self.edge(&t.id, t.children[slot].label());
        let vars = match &edge.result_relevant_vars {
            Some(v) => self.var_indices(v),
            None => self.var_indices(&t.relevant_vars),
        };
        Projection::new(&self.space, &vars, t.binding.as_ref().map(|b| (b.value, b.arity)))
    }

    /// The concrete child a slot refers to in state `s`, if any.
    pub fn resolve(&self, i: usize, slot: usize, s: &StateVector) -> Option<NodeRef> {
        match &self.subtasks[i].children[slot] {
            ChildSpec::Fixed(id) => self.node(id),
            ChildSpec::Dispatch { var, targets, .. } => {
                let v = self.space.var_index(var)?;
                targets
                    .get(s.get(v))
                    .and_then(|t| t.as_deref())
                    .and_then(|t| self.node(t))
            }
        }
    }

    fn terminated_node(&self, node: NodeRef, s: &StateVector) -> bool {
        match node {
            NodeRef::Primitive(_) => false,
            NodeRef::Subtask(i) => self.is_episode_terminal(s) || (self.subtasks[i].termination)(s),
        }
    }

    /// Copy of this graph with every abstraction removed: all subtasks and
    /// leaves keyed by the full state and no edge eliminations. Bindings are
    /// kept so bound instances stay distinct.
    pub fn without_abstractions(&self) -> TaskGraph {
        let all: Vec<String> = self.schemas().iter().map(|s| s.name.clone()).collect();
        let mut g = self.clone();
        for t in &mut g.subtasks {
            t.relevant_vars = all.clone();
        }
        g.edges.clear();
        for leaf in &mut g.leaves {
            *leaf = LeafAbstraction::Vars(all.clone());
        }
        g
    }

    /// Line-oriented text rendering: one record per line, order-significant.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# maxq task graph v1\n");
        out.push_str(&format!("root {}\n", self.root));
        let vars: Vec<String> = self
            .schemas()
            .iter()
            .map(|s| format!("{}:{}", s.name, s.domain_size))
            .collect();
        out.push_str(&format!("variables {}\n", vars.join(" ")));
        out.push_str(&format!("primitives {}\n", self.primitives.join(" ")));
        for t in &self.subtasks {
            let children: Vec<String> = t.children.iter().map(render_child).collect();
            let binding = t
                .binding
                .as_ref()
                .map_or("-".to_string(), |b| format!("{}={}/{}", b.name, b.value, b.arity));
            out.push_str(&format!(
                "subtask {} family={} binding={} children={} relevant={}\n",
                t.id,
                t.family,
                binding,
                children.join(";"),
                render_list(&t.relevant_vars)
            ));
        }
        for ((p, c), e) in &self.edges {
            out.push_str(&format!(
                "edge {p} {c} eliminated={} result_relevant={}\n",
                e.completion_eliminated,
                e.result_relevant_vars
                    .as_ref()
                    .map_or("-".to_string(), |v| render_list(v))
            ));
        }
        for (p, leaf) in self.primitives.iter().zip(&self.leaves) {
            let text = match leaf {
                LeafAbstraction::Vars(v) => format!("vars={}", render_list(v)),
                other => other.describe(),
            };
            out.push_str(&format!("leaf {p} {text}\n"));
        }
        out
    }

    pub fn outline(&self) -> GraphOutline {
        GraphOutline::parse(&self.to_text()).expect("rendered graph text always parses")
    }
}

fn render_list(v: &[String]) -> String {
    if v.is_empty() {
        "{}".into()
    } else {
        v.join(",")
    }
}

fn render_child(c: &ChildSpec) -> String {
    match c {
        ChildSpec::Fixed(id) => id.clone(),
        ChildSpec::Dispatch {
            label,
            var,
            targets,
        } => {
            let ts: Vec<&str> = targets.iter().map(|t| t.as_deref().unwrap_or("-")).collect();
            format!("{label}@{var}[{}]", ts.join("/"))
        }
    }
}

/// The structural content of a [`TaskGraph`] text record, without the
/// predicates (which are code, not data).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GraphOutline {
    pub root: String,
    pub variables: Vec<(String, usize)>,
    pub primitives: Vec<String>,
    pub subtasks: Vec<SubtaskOutline>,
    pub edges: Vec<(String, String, EdgeAnnotation)>,
    pub leaves: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubtaskOutline {
    pub id: String,
    pub family: String,
    pub binding: Option<Binding>,
    pub children: Vec<ChildSpec>,
    pub relevant_vars: Vec<String>,
}

impl GraphOutline {
    pub fn parse(text: &str) -> Result<Self, GraphError> {
        let mut out = GraphOutline::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| GraphError::Parse {
                line: n + 1,
                message,
            };
            let mut words = line.split_whitespace();
            let kind = words.next().unwrap_or_default();
            let rest: Vec<&str> = words.collect();
            match kind {
                "root" => out.root = rest.first().ok_or_else(|| err("missing root".into()))?.to_string(),
                "variables" => {
                    for w in rest {
                        let (name, size) = w
                            .split_once(':')
                            .ok_or_else(|| err(format!("bad variable {w}")))?;
                        let size = size
                            .parse()
                            .map_err(|_| err(format!("bad domain size in {w}")))?;
                        out.variables.push((name.to_string(), size));
                    }
                }
                "primitives" => out.primitives = rest.iter().map(|s| s.to_string()).collect(),
                "subtask" => {
                    let id = rest.first().ok_or_else(|| err("missing id".into()))?.to_string();
                    let fields = parse_fields(&rest[1..]).map_err(err)?;
                    let get = |k: &str| {
                        fields
                            .get(k)
                            .cloned()
                            .ok_or_else(|| err(format!("missing {k}")))
                    };
                    let binding = match get("binding")?.as_str() {
                        "-" => None,
                        b => Some(parse_binding(b).ok_or_else(|| err(format!("bad binding {b}")))?),
                    };
                    let children = get("children")?
                        .split(';')
                        .filter(|c| !c.is_empty())
                        .map(parse_child)
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| err("bad child list".into()))?;
                    out.subtasks.push(SubtaskOutline {
                        id,
                        family: get("family")?,
                        binding,
                        children,
                        relevant_vars: parse_list(&get("relevant")?),
                    });
                }
                "edge" => {
                    if rest.len() < 2 {
                        return Err(err("edge needs parent and child".into()));
                    }
                    let fields = parse_fields(&rest[2..]).map_err(err)?;
                    let eliminated = fields.get("eliminated").map(String::as_str) == Some("true");
                    let result = match fields.get("result_relevant").map(String::as_str) {
                        None | Some("-") => None,
                        Some(v) => Some(parse_list(v)),
                    };
                    out.edges.push((
                        rest[0].to_string(),
                        rest[1].to_string(),
                        EdgeAnnotation {
                            completion_eliminated: eliminated,
                            result_relevant_vars: result,
                        },
                    ));
                }
                "leaf" => {
                    if rest.len() != 2 {
                        return Err(err("leaf needs a primitive and an abstraction".into()));
                    }
                    out.leaves.push((rest[0].to_string(), rest[1].to_string()));
                }
                other => return Err(err(format!("unknown record {other}"))),
            }
        }
        Ok(out)
    }
}

fn parse_fields(words: &[&str]) -> Result<HashMap<String, String>, String> {
    words
        .iter()
        .map(|w| {
            w.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| format!("expected key=value, found {w}"))
        })
        .collect()
}

fn parse_list(v: &str) -> Vec<String> {
    if v == "{}" {
        Vec::new()
    } else {
        v.split(',').map(|s| s.to_string()).collect()
    }
}

fn parse_binding(b: &str) -> Option<Binding> {
    let (name, rest) = b.split_once('=')?;
    let (value, arity) = rest.split_once('/')?;
    Some(Binding {
        name: name.to_string(),
        value: value.parse().ok()?,
        arity: arity.parse().ok()?,
    })
}

fn parse_child(c: &str) -> Option<ChildSpec> {
    match c.split_once('@') {
        None => Some(ChildSpec::Fixed(c.to_string())),
        Some((label, rest)) => {
            let (var, targets) = rest.split_once('[')?;
            let targets = targets.strip_suffix(']')?;
            Some(ChildSpec::Dispatch {
                label: label.to_string(),
                var: var.to_string(),
                targets: targets
                    .split('/')
                    .map(|t| (t != "-").then(|| t.to_string()))
                    .collect(),
            })
        }
    }
}

/// Structural validation. Returns every violation found rather than
/// stopping at the first.
pub fn validate_dag(g: &TaskGraph) -> Result<(), Vec<DagViolation>> {
    let mut violations = BTreeSet::new();
    let mut seen = BTreeSet::new();
    for name in g.primitives.iter().chain(g.subtasks.iter().map(|t| &t.id)) {
        if !seen.insert(name.as_str()) {
            violations.insert(DagViolation::DuplicateId(name.clone()));
        }
    }
    let root = g.subtasks.iter().position(|t| t.id == g.root);
    if root.is_none() {
        violations.insert(DagViolation::UnknownRoot(g.root.clone()));
    }

    let mut dag: DiGraph<usize, ()> = DiGraph::new();
    let nodes: Vec<NodeIndex> = (0..g.subtasks.len()).map(|i| dag.add_node(i)).collect();
    for (i, t) in g.subtasks.iter().enumerate() {
        if t.children.is_empty() {
            violations.insert(DagViolation::EmptyChildren(t.id.clone()));
        }
        for v in &t.relevant_vars {
            if g.space.var_index(v).is_none() {
                violations.insert(DagViolation::UnknownVariable {
                    owner: t.id.clone(),
                    variable: v.clone(),
                });
            }
        }
        if let Some(b) = &t.binding {
            if b.value >= b.arity {
                violations.insert(DagViolation::BadBinding(t.id.clone()));
            }
        }
        for child in &t.children {
            if let ChildSpec::Dispatch {
                label,
                var,
                targets,
            } = child
            {
                match g.space.var_index(var) {
                    None => {
                        violations.insert(DagViolation::UnknownVariable {
                            owner: t.id.clone(),
                            variable: var.clone(),
                        });
                    }
                    Some(v) if g.schemas()[v].domain_size != targets.len() => {
                        violations.insert(DagViolation::BadDispatch {
                            parent: t.id.clone(),
                            slot: label.clone(),
                            reason: format!(
                                "{} targets for a variable with {} values",
                                targets.len(),
                                g.schemas()[v].domain_size
                            ),
                        });
                    }
                    Some(_) => {}
                }
            }
            for name in child.target_names() {
                match g.node(name) {
                    None => {
                        violations.insert(DagViolation::UnknownChild {
                            parent: t.id.clone(),
                            child: name.to_string(),
                        });
                    }
                    Some(NodeRef::Subtask(j)) => {
                        dag.add_edge(nodes[i], nodes[j], ());
                    }
                    Some(NodeRef::Primitive(_)) => {}
                }
            }
        }
    }
    for ((parent, child), e) in &g.edges {
        let known = g
            .subtasks
            .iter()
            .find(|t| &t.id == parent)
            .is_some_and(|t| t.children.iter().any(|c| c.label() == child));
        if !known {
            violations.insert(DagViolation::UnknownEdge {
                parent: parent.clone(),
                child: child.clone(),
            });
        }
        for v in e.result_relevant_vars.iter().flatten() {
            if g.space.var_index(v).is_none() {
                violations.insert(DagViolation::UnknownVariable {
                    owner: format!("{parent}->{child}"),
                    variable: v.clone(),
                });
            }
        }
    }
    for (p, leaf) in g.primitives.iter().zip(&g.leaves) {
        if let LeafAbstraction::Vars(vars) = leaf {
            for v in vars {
                if g.space.var_index(v).is_none() {
                    violations.insert(DagViolation::UnknownVariable {
                        owner: p.clone(),
                        variable: v.clone(),
                    });
                }
            }
        }
    }

    for scc in tarjan_scc(&dag) {
        let self_loop = scc.len() == 1 && dag.contains_edge(scc[0], scc[0]);
        if scc.len() > 1 || self_loop {
            let mut ids: Vec<String> = scc.iter().map(|n| g.subtasks[dag[*n]].id.clone()).collect();
            ids.sort();
            violations.insert(DagViolation::Cycle(ids));
        }
    }

    if let Some(r) = root {
        let mut reached = vec![false; g.subtasks.len()];
        let mut dfs = petgraph::visit::Dfs::new(&dag, nodes[r]);
        while let Some(n) = dfs.next(&dag) {
            reached[dag[n]] = true;
        }
        for (i, t) in g.subtasks.iter().enumerate() {
            if !reached[i] {
                violations.insert(DagViolation::Unreachable(t.id.clone()));
            }
        }
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations.into_iter().collect())
    }
}

/// Projects `s` onto the relevant variables (and binding) of `subtask`.
pub fn project(g: &TaskGraph, subtask: &str, s: &StateVector) -> Result<AbstractState, GraphError> {
    let i = g.subtask_index(subtask)?;
    g.space.validate(s)?;
    Ok(g.subtask_projection(i).abstract_state(s))
}

/// Evaluates the termination predicate of `node`. Primitives are never
/// terminated; every subtask is terminated in episode-terminal states.
pub fn is_terminated(g: &TaskGraph, node: &str, s: &StateVector) -> Result<bool, GraphError> {
    let n = g
        .node(node)
        .ok_or_else(|| GraphError::InvalidSubtask(node.to_string()))?;
    Ok(g.terminated_node(n, s))
}

/// True iff every root-to-`node` invocation path that is live in `s`
/// passes through a terminated subtask (the node itself included, the root
/// excluded from being shielded). A dispatch slot that does not resolve to
/// the next node in `s` closes that path.
pub fn is_shielded(g: &TaskGraph, node: &str, s: &StateVector) -> Result<bool, GraphError> {
    let n = g
        .node(node)
        .ok_or_else(|| GraphError::InvalidSubtask(node.to_string()))?;
    let root = g.subtask_index(&g.root)?;
    Ok(shielded_with(g, root, n, s, &mut HashMap::new()))
}

fn shielded_with(
    g: &TaskGraph,
    root: usize,
    node: NodeRef,
    s: &StateVector,
    memo: &mut HashMap<NodeRef, bool>,
) -> bool {
    if node == NodeRef::Subtask(root) {
        return false;
    }
    !live(g, root, node, s, memo)
}

/// Whether some unterminated invocation path reaches `node` in `s`.
fn live(
    g: &TaskGraph,
    root: usize,
    node: NodeRef,
    s: &StateVector,
    memo: &mut HashMap<NodeRef, bool>,
) -> bool {
    if let Some(&v) = memo.get(&node) {
        return v;
    }
    let result = if g.terminated_node(node, s) {
        false
    } else if node == NodeRef::Subtask(root) {
        true
    } else {
        let mut any = false;
        for (p, t) in g.subtasks.iter().enumerate() {
            let feeds = (0..t.children.len()).any(|slot| g.resolve(p, slot, s) == Some(node));
            if feeds && live(g, root, NodeRef::Subtask(p), s, memo) {
                any = true;
                break;
            }
        }
        any
    };
    memo.insert(node, result);
    result
}

/// Dense-index form of a validated graph bound to its state space.
#[derive(Debug, Clone)]
pub struct CompiledGraph {
    graph: TaskGraph,
    n_states: usize,
    root: usize,
    terminated: Vec<Vec<bool>>,
    shielded: Vec<Vec<bool>>,
    primitive_shielded: Vec<Vec<bool>>,
    slots: Vec<Vec<CompiledSlot>>,
    tables: Vec<TableSpec>,
    leaf_keys: Vec<Vec<u32>>,
    leaf_sizes: Vec<usize>,
    policy_keys: Vec<Vec<u32>>,
    bottom_up: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CompiledSlot {
    pub label: String,
    pub table: usize,
    /// Resolved child per state index.
    pub resolve: Vec<Option<NodeRef>>,
    /// Completion-table key per state index.
    pub keys: Vec<u32>,
}

/// One completion table, shared by every instance of a subtask family for a
/// given child label.
#[derive(Debug, Clone)]
pub struct TableSpec {
    pub family: String,
    pub child: String,
    pub size: usize,
    pub eliminated: bool,
    pub projection: Projection,
    pub binding_name: Option<String>,
}

impl CompiledGraph {
    pub fn compile(graph: &TaskGraph) -> Result<Self, GraphError> {
        validate_dag(graph).map_err(GraphError::Invalid)?;
        let space = graph.space().clone();
        let n_states = space.len();
        let states: Vec<StateVector> = space.states().collect();
        let root = graph.subtask_index(&graph.root)?;

        let terminated: Vec<Vec<bool>> = (0..graph.subtasks.len())
            .map(|i| {
                states
                    .iter()
                    .map(|s| graph.terminated_node(NodeRef::Subtask(i), s))
                    .collect()
            })
            .collect();

        let mut shielded = vec![vec![false; n_states]; graph.subtasks.len()];
        let mut primitive_shielded = vec![vec![false; n_states]; graph.primitives.len()];
        for (x, s) in states.iter().enumerate() {
            let mut memo = HashMap::new();
            for (i, row) in shielded.iter_mut().enumerate() {
                row[x] = shielded_with(graph, root, NodeRef::Subtask(i), s, &mut memo);
            }
            for (a, row) in primitive_shielded.iter_mut().enumerate() {
                row[x] = shielded_with(graph, root, NodeRef::Primitive(a), s, &mut memo);
            }
        }

        let mut tables: Vec<TableSpec> = Vec::new();
        let mut table_ids: HashMap<(String, String), usize> = HashMap::new();
        let mut slots = Vec::with_capacity(graph.subtasks.len());
        for (i, t) in graph.subtasks.iter().enumerate() {
            let mut row = Vec::with_capacity(t.children.len());
            for (slot, child) in t.children.iter().enumerate() {
                let projection = graph.completion_projection(i, slot);
                let eliminated = graph.edge(&t.id, child.label()).completion_eliminated;
                let id = *table_ids
                    .entry((t.family.clone(), child.label().to_string()))
                    .or_insert_with(|| {
                        tables.push(TableSpec {
                            family: t.family.clone(),
                            child: child.label().to_string(),
                            size: projection.size(),
                            eliminated,
                            projection: projection.clone(),
                            binding_name: t.binding.as_ref().map(|b| b.name.clone()),
                        });
                        tables.len() - 1
                    });
                let spec = &mut tables[id];
                spec.size = spec.size.max(projection.size());
                spec.eliminated &= eliminated;
                row.push(CompiledSlot {
                    label: child.label().to_string(),
                    table: id,
                    resolve: states.iter().map(|s| graph.resolve(i, slot, s)).collect(),
                    keys: states.iter().map(|s| projection.key(s) as u32).collect(),
                });
            }
            slots.push(row);
        }

        let mut leaf_keys = Vec::with_capacity(graph.primitives.len());
        let mut leaf_sizes = Vec::with_capacity(graph.primitives.len());
        for leaf in &graph.leaves {
            match leaf {
                LeafAbstraction::Vars(vars) => {
                    let p = Projection::new(&space, &graph.var_indices(vars), None);
                    leaf_sizes.push(p.size());
                    leaf_keys.push(states.iter().map(|s| p.key(s) as u32).collect());
                }
                LeafAbstraction::Feature { arity, feature, .. } => {
                    leaf_sizes.push(*arity);
                    leaf_keys.push(
                        states
                            .iter()
                            .map(|s| (feature(s).min(arity.saturating_sub(1))) as u32)
                            .collect(),
                    );
                }
            }
        }

        let policy_keys = (0..graph.subtasks.len())
            .map(|i| {
                let p = graph.subtask_projection(i);
                states.iter().map(|s| p.key(s) as u32).collect()
            })
            .collect();

        let bottom_up = bottom_up_order(graph);

        Ok(Self {
            graph: graph.clone(),
            n_states,
            root,
            terminated,
            shielded,
            primitive_shielded,
            slots,
            tables,
            leaf_keys,
            leaf_sizes,
            policy_keys,
            bottom_up,
        })
    }

    pub fn graph(&self) -> &TaskGraph {
        &self.graph
    }

    pub fn space(&self) -> &StateSpace {
        self.graph.space()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn n_subtasks(&self) -> usize {
        self.slots.len()
    }

    pub fn n_primitives(&self) -> usize {
        self.leaf_keys.len()
    }

    pub fn name(&self, node: NodeRef) -> &str {
        self.graph.node_name(node)
    }

    pub fn slots(&self, i: usize) -> &[CompiledSlot] {
        &self.slots[i]
    }

    pub fn tables(&self) -> &[TableSpec] {
        &self.tables
    }

    pub fn is_terminated(&self, node: NodeRef, state: usize) -> bool {
        match node {
            NodeRef::Primitive(_) => false,
            NodeRef::Subtask(i) => self.terminated[i][state],
        }
    }

    pub fn is_shielded(&self, node: NodeRef, state: usize) -> bool {
        match node {
            NodeRef::Primitive(a) => self.primitive_shielded[a][state],
            NodeRef::Subtask(i) => self.shielded[i][state],
        }
    }

    /// Child of slot `slot` of subtask `i` if it resolves and is not
    /// terminated in `state`.
    #[inline]
    pub fn available(&self, i: usize, slot: usize, state: usize) -> Option<NodeRef> {
        let node = self.slots[i][slot].resolve[state]?;
        (!self.is_terminated(node, state)).then_some(node)
    }

    pub fn completion_key(&self, i: usize, slot: usize, state: usize) -> (usize, usize) {
        let s = &self.slots[i][slot];
        (s.table, s.keys[state] as usize)
    }

    pub fn leaf_key(&self, action: usize, state: usize) -> usize {
        self.leaf_keys[action][state] as usize
    }

    pub fn leaf_size(&self, action: usize) -> usize {
        self.leaf_sizes[action]
    }

    /// Key of `state` under subtask `i`'s own relevant variables and binding.
    pub fn policy_key(&self, i: usize, state: usize) -> usize {
        self.policy_keys[i][state] as usize
    }

    /// Subtasks ordered so that every subtask appears after all of its
    /// subtask descendants.
    pub fn bottom_up(&self) -> &[usize] {
        &self.bottom_up
    }
}

fn bottom_up_order(g: &TaskGraph) -> Vec<usize> {
    fn visit(g: &TaskGraph, i: usize, done: &mut Vec<bool>, out: &mut Vec<usize>) {
        if done[i] {
            return;
        }
        done[i] = true;
        for child in &g.subtasks[i].children {
            for name in child.target_names() {
                if let Some(NodeRef::Subtask(j)) = g.node(name) {
                    visit(g, j, done, out);
                }
            }
        }
        out.push(i);
    }
    let mut done = vec![false; g.subtasks.len()];
    let mut out = Vec::new();
    for i in 0..g.subtasks.len() {
        visit(g, i, &mut done, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schemas() -> Vec<VariableSchema> {
        vec![VariableSchema::new("a", 2), VariableSchema::new("b", 3)]
    }

    fn never() -> StatePredicate {
        Arc::new(|_: &StateVector| false)
    }

    fn graph(subtasks: Vec<SubtaskDef>, root: &str) -> TaskGraph {
        TaskGraph::new(schemas(), vec!["x".into(), "y".into()], subtasks, root, never()).unwrap()
    }

    fn fixed(ids: &[&str]) -> Vec<ChildSpec> {
        ids.iter().map(|s| ChildSpec::Fixed(s.to_string())).collect()
    }

    #[test]
    fn detects_two_node_cycle() {
        let g = graph(
            vec![
                SubtaskDef::new("Root", fixed(&["A"]), never(), &["a"]),
                SubtaskDef::new("A", fixed(&["B", "x"]), never(), &["a"]),
                SubtaskDef::new("B", fixed(&["A"]), never(), &["a"]),
            ],
            "Root",
        );
        let v = validate_dag(&g).unwrap_err();
        assert!(v.contains(&DagViolation::Cycle(vec!["A".into(), "B".into()])), "{v:?}");
    }

    #[test]
    fn detects_unknown_child_and_empty_lists() {
        let g = graph(
            vec![
                SubtaskDef::new("Root", fixed(&["Fly", "E"]), never(), &["a"]),
                SubtaskDef::new("E", vec![], never(), &["a"]),
            ],
            "Root",
        );
        let v = validate_dag(&g).unwrap_err();
        assert!(v.contains(&DagViolation::UnknownChild {
            parent: "Root".into(),
            child: "Fly".into()
        }));
        assert!(v.contains(&DagViolation::EmptyChildren("E".into())));
    }

    #[test]
    fn detects_unreachable_and_bad_variables() {
        let g = graph(
            vec![
                SubtaskDef::new("Root", fixed(&["x"]), never(), &["a"]),
                SubtaskDef::new("Orphan", fixed(&["y"]), never(), &["zzz"]),
            ],
            "Root",
        );
        let v = validate_dag(&g).unwrap_err();
        assert!(v.contains(&DagViolation::Unreachable("Orphan".into())));
        assert!(v.contains(&DagViolation::UnknownVariable {
            owner: "Orphan".into(),
            variable: "zzz".into()
        }));
    }

    #[test]
    fn identity_projection_separates_states() {
        let g = graph(
            vec![SubtaskDef::new("Root", fixed(&["x"]), never(), &["a", "b"])],
            "Root",
        );
        let keys: BTreeSet<_> = g
            .space()
            .states()
            .map(|s| project(&g, "Root", &s).unwrap())
            .collect();
        assert_eq!(keys.len(), 6);
        assert!(project(&g, "Nope", &StateVector(vec![0, 0])).is_err());
    }

    #[test]
    fn binding_prefixes_the_key() {
        let space = StateSpace::new(schemas()).unwrap();
        let p = Projection::new(&space, &[1], Some((1, 4)));
        assert_eq!(p.size(), 12);
        assert_eq!(p.key(&StateVector(vec![0, 2])), 5);
        assert_eq!(p.describe(&space, 5, Some("t")), "t=1,b=2");
    }

    #[test]
    fn primitives_are_never_terminated() {
        let g = graph(
            vec![SubtaskDef::new("Root", fixed(&["x"]), Arc::new(|_| true), &["a"])],
            "Root",
        );
        let s = StateVector(vec![0, 0]);
        assert!(!is_terminated(&g, "x", &s).unwrap());
        assert!(is_terminated(&g, "Root", &s).unwrap());
        assert!(!is_shielded(&g, "Root", &s).unwrap());
    }

    #[test]
    fn text_roundtrip_preserves_order() {
        let mut g = graph(
            vec![
                SubtaskDef::new("Root", fixed(&["B", "A"]), never(), &["a"]),
                SubtaskDef::new(
                    "A",
                    vec![ChildSpec::Dispatch {
                        label: "Pick".into(),
                        var: "a".into(),
                        targets: vec![Some("y".into()), None],
                    }],
                    never(),
                    &[],
                ),
                SubtaskDef::new("B", fixed(&["y", "x"]), never(), &["b", "a"]),
            ],
            "Root",
        );
        g.annotate_edge(
            "Root",
            "A",
            EdgeAnnotation {
                completion_eliminated: true,
                result_relevant_vars: Some(vec!["b".into()]),
            },
        );
        validate_dag(&g).unwrap();
        let text = g.to_text();
        let outline = GraphOutline::parse(&text).unwrap();
        assert_eq!(outline.subtasks[0].children, fixed(&["B", "A"]));
        assert_eq!(outline.subtasks[2].relevant_vars, vec!["b", "a"]);
        assert!(outline.subtasks[1].relevant_vars.is_empty());
        assert_eq!(outline, g.outline());
        assert_eq!(outline.edges.len(), 1);
    }

    #[test]
    fn parse_reports_line_numbers() {
        let err = GraphOutline::parse("root R\nbogus x\n").unwrap_err();
        assert_eq!(
            err,
            GraphError::Parse {
                line: 2,
                message: "unknown record bogus".into()
            }
        );
    }
}
