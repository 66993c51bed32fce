//! Exact exit distributions P(s', N | s, j) of a subtask run under a fixed
//! hierarchical policy. Three routes over (call stack, state) pairs: forward
//! propagation from one start, a backward recursion on the step count for
//! all starts at once, and a direct absorbing-chain solve when N is not
//! needed.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;

use crate::audit::policy::HierarchicalPolicy;
use crate::audit::AuditError;
use crate::graph::{CompiledGraph, NodeRef};
use crate::mdp::TabularModel;

pub const DEFAULT_HORIZON: usize = 2000;
pub const MAX_HORIZON: usize = 128_000;
/// Live mass below this stops propagation early.
const NEGLIGIBLE_MASS: f64 = 1e-13;
/// Termination mass required at the horizon.
pub const REQUIRED_MASS: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ExitDistribution {
    /// `(exit state, primitive steps, probability)`, sorted by state then steps.
    pub outcomes: Vec<(usize, u32, f64)>,
    /// Expected discounted reward accumulated until exit.
    pub value: f64,
    pub terminated_mass: f64,
    pub horizon: usize,
}

impl ExitDistribution {
    pub fn state_marginal(&self) -> BTreeMap<usize, f64> {
        let mut m = BTreeMap::new();
        for &(s, _, p) in &self.outcomes {
            *m.entry(s).or_default() += p;
        }
        m
    }

    pub fn expected_steps(&self) -> f64 {
        self.outcomes.iter().map(|&(_, n, p)| n as f64 * p).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct MacroStep {
    /// Stack configuration after the step; `None` once the analysed node exits.
    target: Option<usize>,
    next: usize,
    probability: f64,
    reward: f64,
}

/// Computes exit distributions for one node under one policy, caching the
/// one-primitive-step macro transitions across start states.
pub struct ExitAnalyzer<'a> {
    model: &'a TabularModel,
    g: &'a CompiledGraph,
    policy: &'a dyn HierarchicalPolicy,
    node: NodeRef,
    gamma: f64,
    stacks: Vec<Vec<usize>>,
    stack_ids: HashMap<Vec<usize>, usize>,
    cache: Vec<Option<Vec<MacroStep>>>,
    pub horizon: usize,
    pub max_horizon: usize,
}

impl<'a> ExitAnalyzer<'a> {
    pub fn new(
        model: &'a TabularModel,
        g: &'a CompiledGraph,
        policy: &'a dyn HierarchicalPolicy,
        node: NodeRef,
        gamma: f64,
    ) -> Self {
        let mut stacks = Vec::new();
        if let NodeRef::Subtask(j) = node {
            enumerate_stacks(g, &mut vec![j], &mut stacks);
        }
        let stack_ids = stacks
            .iter()
            .enumerate()
            .map(|(k, st)| (st.clone(), k))
            .collect();
        let cache = vec![None; stacks.len() * g.n_states()];
        Self {
            model,
            g,
            policy,
            node,
            gamma,
            stacks,
            stack_ids,
            cache,
            horizon: DEFAULT_HORIZON,
            max_horizon: MAX_HORIZON,
        }
    }

    pub fn node(&self) -> NodeRef {
        self.node
    }

    fn ensure_macro_steps(&mut self, idx: usize) {
        if self.cache[idx].is_none() {
            let n = self.g.n_states();
            let mut out = Vec::new();
            let stack = self.stacks[idx / n].clone();
            self.expand(stack, idx % n, 1.0, &mut out);
            self.cache[idx] = Some(out);
        }
    }

    fn expand(&self, stack: Vec<usize>, state: usize, mass: f64, out: &mut Vec<MacroStep>) {
        let top = *stack.last().expect("non-empty stack");
        let dist = self.policy.distribution(self.g, top, state);
        for (slot, p) in dist.into_iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            let Some(child) = self.g.available(top, slot, state) else {
                continue;
            };
            match child {
                NodeRef::Subtask(c) => {
                    let mut deeper = stack.clone();
                    deeper.push(c);
                    self.expand(deeper, state, mass * p, out);
                }
                NodeRef::Primitive(a) => {
                    for t in self.model.outcomes(state, a) {
                        let mut after = stack.clone();
                        while let Some(&k) = after.last() {
                            if self.g.is_terminated(NodeRef::Subtask(k), t.next) {
                                after.pop();
                            } else {
                                break;
                            }
                        }
                        let target = if after.is_empty() {
                            None
                        } else {
                            Some(self.stack_ids[&after])
                        };
                        out.push(MacroStep {
                            target,
                            next: t.next,
                            probability: mass * p * t.probability,
                            reward: t.reward,
                        });
                    }
                }
            }
        }
    }

    /// Exit distribution of the node started in `start`. The node must be
    /// available (not terminated) there.
    pub fn distribution(&mut self, start: usize) -> Result<ExitDistribution, AuditError> {
        self.propagate(start, true)
    }

    /// Like [`Self::distribution`] but with the step count marginalised out:
    /// every outcome carries N = 0.
    pub fn state_distribution(&mut self, start: usize) -> Result<ExitDistribution, AuditError> {
        self.propagate(start, false)
    }

    fn propagate(&mut self, start: usize, with_steps: bool) -> Result<ExitDistribution, AuditError> {
        let j = match self.node {
            NodeRef::Primitive(a) => {
                let outcomes = self.model.outcomes(start, a);
                let mut out: Vec<(usize, u32, f64)> =
                    outcomes.iter().map(|t| (t.next, with_steps as u32, t.probability)).collect();
                out.sort_by_key(|o| o.0);
                return Ok(ExitDistribution {
                    outcomes: out,
                    value: self.model.expected_reward(start, a),
                    terminated_mass: 1.0,
                    horizon: 1,
                });
            }
            NodeRef::Subtask(j) => j,
        };
        if self.g.is_terminated(self.node, start) {
            return Err(AuditError::InvalidArgument(format!(
                "{} is terminated in state {start}",
                self.g.name(self.node)
            )));
        }
        let n = self.g.n_states();
        let mut cur = vec![0.0; self.stacks.len() * n];
        let mut next = vec![0.0; self.stacks.len() * n];
        let first = self.stack_ids[&vec![j]] * n + start;
        cur[first] = 1.0;
        let mut active = vec![first];
        let mut next_active = Vec::new();
        let mut outcomes: Vec<(usize, u32, f64)> = Vec::new();
        let mut step_exits: Vec<(usize, f64)> = Vec::new();
        let mut value = 0.0;
        let mut discount = 1.0;
        let mut horizon = self.horizon;
        let mut t: usize = 0;
        let mut live = 1.0;
        loop {
            if live <= NEGLIGIBLE_MASS {
                break;
            }
            if t >= horizon {
                if live <= 1.0 - REQUIRED_MASS {
                    break;
                }
                if horizon * 2 > self.max_horizon {
                    return Err(AuditError::HorizonTooSmall {
                        subject: format!("{} from state {start}", self.g.name(self.node)),
                        mass: 1.0 - live,
                    });
                }
                horizon *= 2;
            }
            t += 1;
            for &idx in &active {
                self.ensure_macro_steps(idx);
            }
            for &idx in &active {
                let m = cur[idx];
                cur[idx] = 0.0;
                if m == 0.0 {
                    continue;
                }
                for step in self.cache[idx].as_deref().unwrap_or(&[]) {
                    let w = m * step.probability;
                    value += discount * w * step.reward;
                    match step.target {
                        None => step_exits.push((step.next, w)),
                        Some(c) => {
                            let k = c * n + step.next;
                            if next[k] == 0.0 {
                                next_active.push(k);
                            }
                            next[k] += w;
                        }
                    }
                }
            }
            let n_steps = if with_steps { t as u32 } else { 0 };
            outcomes.extend(step_exits.drain(..).map(|(s2, w)| (s2, n_steps, w)));
            discount *= self.gamma;
            std::mem::swap(&mut cur, &mut next);
            std::mem::swap(&mut active, &mut next_active);
            next_active.clear();
            live = active.iter().map(|&k| cur[k]).sum();
        }
        outcomes.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        outcomes.dedup_by(|b, a| {
            let same = a.0 == b.0 && a.1 == b.1;
            if same {
                a.2 += b.2;
            }
            same
        });
        let terminated_mass = outcomes.iter().map(|o| o.2).sum();
        Ok(ExitDistribution {
            outcomes,
            value,
            terminated_mass,
            horizon,
        })
    }
}

/// Exit information for every start state of one node at once.
#[derive(Debug, Clone, Default)]
pub struct AllStarts {
    /// Exit-state distribution per start, sorted by state. Empty where the
    /// node is terminated.
    pub exits: Vec<Vec<(usize, f64)>>,
    /// Expected discounted reward until exit; NaN where the node is terminated.
    pub values: Vec<f64>,
    /// Primitive steps swept; 0 when solved directly.
    pub steps: usize,
}

fn merge_sorted(buf: &mut Vec<(usize, f64)>) {
    buf.sort_unstable_by_key(|e| e.0);
    buf.dedup_by(|b, a| {
        let same = a.0 == b.0;
        if same {
            a.1 += b.1;
        }
        same
    });
}

impl ExitAnalyzer<'_> {
    /// Exits from every start at once, by a backward recursion on the number
    /// of primitive steps: `f_t(c, s)` is the exit mass after exactly `t`
    /// steps from configuration `c` in state `s`. `on_step` sees `f_t` for
    /// the bottom configuration, indexed by start state.
    pub fn sweep(
        &mut self,
        mut on_step: impl FnMut(u32, &[Vec<(usize, f64)>]),
    ) -> Result<AllStarts, AuditError> {
        let n = self.g.n_states();
        if let NodeRef::Primitive(a) = self.node {
            let mut f = vec![Vec::new(); n];
            let mut values = vec![f64::NAN; n];
            for s in 0..n {
                if self.model.is_terminal(s) {
                    continue;
                }
                f[s] = self.model.outcomes(s, a).iter().map(|t| (t.next, t.probability)).collect();
                merge_sorted(&mut f[s]);
                values[s] = self.model.expected_reward(s, a);
            }
            on_step(1, &f);
            return Ok(AllStarts { exits: f, values, steps: 1 });
        }
        let mut valid = Vec::new();
        for (k, stack) in self.stacks.iter().enumerate() {
            for s in 0..n {
                if stack.iter().all(|&i| !self.g.is_terminated(NodeRef::Subtask(i), s)) {
                    valid.push(k * n + s);
                }
            }
        }
        for &idx in &valid {
            self.ensure_macro_steps(idx);
        }
        let starts: Vec<usize> = valid.iter().copied().filter(|&idx| idx < n).collect();
        let size = self.stacks.len() * n;
        let mut prev: Vec<Vec<(usize, f64)>> = vec![Vec::new(); size];
        let mut cur: Vec<Vec<(usize, f64)>> = vec![Vec::new(); size];
        let mut v_prev = vec![0.0; size];
        let mut v_cur = vec![0.0; size];
        let mut exits: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut done = vec![0.0; n];
        let mut horizon = self.horizon;
        let mut t: usize = 0;
        loop {
            let live = starts.iter().map(|&s| 1.0 - done[s]).fold(0.0, f64::max);
            if live <= NEGLIGIBLE_MASS {
                break;
            }
            if t >= horizon {
                if horizon * 2 > self.max_horizon {
                    if live <= 1.0 - REQUIRED_MASS {
                        break;
                    }
                    return Err(AuditError::HorizonTooSmall {
                        subject: format!("{} after {t} steps", self.g.name(self.node)),
                        mass: 1.0 - live,
                    });
                }
                horizon *= 2;
            }
            t += 1;
            for &idx in &valid {
                let out = &mut cur[idx];
                out.clear();
                let mut v = 0.0;
                for step in self.cache[idx].as_deref().unwrap_or(&[]) {
                    match step.target {
                        None => {
                            v += step.probability * step.reward;
                            if t == 1 {
                                out.push((step.next, step.probability));
                            }
                        }
                        Some(c) => {
                            let k = c * n + step.next;
                            v += step.probability * (step.reward + self.gamma * v_prev[k]);
                            out.extend(prev[k].iter().map(|&(s2, q)| (s2, q * step.probability)));
                        }
                    }
                }
                merge_sorted(out);
                v_cur[idx] = v;
            }
            std::mem::swap(&mut prev, &mut cur);
            std::mem::swap(&mut v_prev, &mut v_cur);
            on_step(t as u32, &prev[..n]);
            for &s in &starts {
                for &(s2, q) in &prev[s] {
                    done[s] += q;
                    exits[s].push((s2, q));
                }
                merge_sorted(&mut exits[s]);
            }
        }
        let mut values = vec![f64::NAN; n];
        for &s in &starts {
            values[s] = v_prev[s];
        }
        Ok(AllStarts { exits, values, steps: t })
    }
}

impl ExitAnalyzer<'_> {
    /// Exit-state distributions and values from every start, by solving the
    /// absorbing-chain equations `(I - Q) B = R` directly on each connected
    /// component of the transient (configuration, state) graph.
    pub fn solve(&mut self) -> Result<AllStarts, AuditError> {
        if let NodeRef::Primitive(_) = self.node {
            return self.sweep(|_, _| {});
        }
        let n = self.g.n_states();
        let mut valid = Vec::new();
        for (k, stack) in self.stacks.iter().enumerate() {
            for s in 0..n {
                if stack.iter().all(|&i| !self.g.is_terminated(NodeRef::Subtask(i), s)) {
                    valid.push(k * n + s);
                }
            }
        }
        for &idx in &valid {
            self.ensure_macro_steps(idx);
        }
        let mut local = vec![usize::MAX; self.stacks.len() * n];
        for (pos, &idx) in valid.iter().enumerate() {
            local[idx] = pos;
        }
        let mut parent: Vec<usize> = (0..valid.len()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for (pos, &idx) in valid.iter().enumerate() {
            for step in self.cache[idx].as_deref().unwrap_or(&[]) {
                if let Some(c) = step.target {
                    let (a, b) = (find(&mut parent, pos), find(&mut parent, local[c * n + step.next]));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
        let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for pos in 0..valid.len() {
            let r = find(&mut parent, pos);
            components.entry(r).or_default().push(pos);
        }
        let mut exits: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut values = vec![f64::NAN; n];
        let mut row_of = vec![usize::MAX; valid.len()];
        for members in components.values() {
            if members.iter().all(|&pos| valid[pos] >= n) {
                continue;
            }
            for (r, &pos) in members.iter().enumerate() {
                row_of[pos] = r;
            }
            let mut columns: Vec<usize> = members
                .iter()
                .flat_map(|&pos| self.cache[valid[pos]].as_deref().unwrap_or(&[]))
                .filter(|step| step.target.is_none())
                .map(|step| step.next)
                .collect();
            columns.sort_unstable();
            columns.dedup();
            let m = members.len();
            // augmented [I - d Q | R | r]; exit probabilities always use d = 1
            let build = |discount: f64, with_exits: bool| {
                let k = if with_exits { columns.len() } else { 0 } + 1;
                let mut lhs = DMatrix::<f64>::identity(m, m);
                let mut rhs = DMatrix::<f64>::zeros(m, k);
                for (r, &pos) in members.iter().enumerate() {
                    for step in self.cache[valid[pos]].as_deref().unwrap_or(&[]) {
                        rhs[(r, k - 1)] += step.probability * step.reward;
                        match step.target {
                            None if with_exits => {
                                let col = columns.binary_search(&step.next).expect("exit column");
                                rhs[(r, col)] += step.probability;
                            }
                            None => {}
                            Some(c) => {
                                lhs[(r, row_of[local[c * n + step.next]])] -= discount * step.probability;
                            }
                        }
                    }
                }
                lhs.lu().solve(&rhs).ok_or_else(|| AuditError::HorizonTooSmall {
                    subject: format!("{} (singular absorbing chain)", self.g.name(self.node)),
                    mass: 0.0,
                })
            };
            let solution = build(1.0, true)?;
            let discounted = if self.gamma == 1.0 { None } else { Some(build(self.gamma, false)?) };
            for (r, &pos) in members.iter().enumerate() {
                let idx = valid[pos];
                if idx >= n {
                    continue;
                }
                exits[idx] = columns
                    .iter()
                    .enumerate()
                    .map(|(col, &s2)| (s2, solution[(r, col)]))
                    .filter(|e| e.1 != 0.0)
                    .collect();
                values[idx] = match &discounted {
                    None => solution[(r, columns.len())],
                    Some(d) => d[(r, 0)],
                };
                let mass: f64 = exits[idx].iter().map(|e| e.1).sum();
                if mass < REQUIRED_MASS {
                    return Err(AuditError::HorizonTooSmall {
                        subject: format!("{} from state {idx}", self.g.name(self.node)),
                        mass,
                    });
                }
            }
        }
        Ok(AllStarts { exits, values, steps: 0 })
    }
}

fn enumerate_stacks(g: &CompiledGraph, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    out.push(path.clone());
    let top = *path.last().expect("non-empty path");
    let mut children: Vec<usize> = Vec::new();
    for slot in g.slots(top) {
        for node in slot.resolve.iter().flatten() {
            if let NodeRef::Subtask(c) = node {
                if !children.contains(c) {
                    children.push(*c);
                }
            }
        }
    }
    for c in children {
        path.push(c);
        enumerate_stacks(g, path, out);
        path.pop();
    }
}

/// Total-variation distance between two sparse distributions.
pub fn total_variation<K: Ord + Copy>(a: &BTreeMap<K, f64>, b: &BTreeMap<K, f64>) -> f64 {
    let mut sum = 0.0;
    for (k, p) in a {
        sum += (p - b.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, q) in b {
        if !a.contains_key(k) {
            sum += q.abs();
        }
    }
    0.5 * sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::oracle::hierarchical_dp_oracle;
    use crate::audit::policy::{OraclePolicy, RandomAbstractPolicy};
    use crate::mdp::StateVector;
    use crate::taxi::{taxi_model, taxi_task_graph, TaxiConfig};

    fn setup(config: TaxiConfig) -> (TabularModel, CompiledGraph) {
        let model = TabularModel::compile(&taxi_model(config)).unwrap();
        let g = CompiledGraph::compile(&taxi_task_graph()).unwrap();
        (model, g)
    }

    #[test]
    fn navigate_to_g_from_r_takes_eight_steps() {
        let (model, g) = setup(TaxiConfig::deterministic());
        let sol = hierarchical_dp_oracle(&model, &g, 1.0).unwrap();
        let policy = OraclePolicy { solution: &sol };
        let nav = g.graph().node("Navigate(G)").unwrap();
        let mut an = ExitAnalyzer::new(&model, &g, &policy, nav, 1.0);
        let s = g.space().encode(&StateVector(vec![0, 0, 0, 2]));
        let d = an.distribution(s).unwrap();
        let exit = g.space().encode(&StateVector(vec![0, 4, 0, 2]));
        assert_eq!(d.outcomes, vec![(exit, 8, 1.0)]);
        let all = an.sweep(|_, _| {}).unwrap();
        assert_eq!(all.exits[s], vec![(exit, 1.0)]);
        assert_eq!(all.steps, 8);
        assert!((d.value + 8.0).abs() < 1e-12);
    }

    #[test]
    fn chain_value_matches_oracle_under_oracle_policy() {
        let (model, g) = setup(TaxiConfig::noisy(0.2));
        let sol = hierarchical_dp_oracle(&model, &g, 1.0).unwrap();
        let policy = OraclePolicy { solution: &sol };
        let root = NodeRef::Subtask(g.root());
        let mut an = ExitAnalyzer::new(&model, &g, &policy, root, 1.0);
        for &s in model.initial_states().iter().step_by(37) {
            let d = an.distribution(s).unwrap();
            assert!(d.terminated_mass >= REQUIRED_MASS);
            assert!((d.value - sol.root_value(&g, s)).abs() < 1e-6);
        }
    }

    #[test]
    fn random_policy_terminates() {
        let (model, g) = setup(TaxiConfig::noisy(0.2));
        let policy = RandomAbstractPolicy { seed: 11 };
        let get = g.graph().node("Get").unwrap();
        let mut an = ExitAnalyzer::new(&model, &g, &policy, get, 1.0);
        let s = model.initial_states()[5];
        let d = an.distribution(s).unwrap();
        assert!(d.terminated_mass >= REQUIRED_MASS);
        assert!(d.expected_steps() > 1.0);
    }

    #[test]
    fn sweep_agrees_with_single_start_propagation() {
        let (model, g) = setup(TaxiConfig::noisy(0.2));
        let policy = RandomAbstractPolicy { seed: 5 };
        let get = g.graph().node("Get").unwrap();
        let mut an = ExitAnalyzer::new(&model, &g, &policy, get, 1.0);
        let s = model.initial_states()[17];
        let single = an.distribution(s).unwrap();
        let mut by_step: BTreeMap<(usize, u32), f64> = BTreeMap::new();
        let all = an
            .sweep(|t, f| {
                for &(s2, p) in &f[s] {
                    *by_step.entry((s2, t)).or_default() += p;
                }
            })
            .unwrap();
        let expected: BTreeMap<(usize, u32), f64> =
            single.outcomes.iter().map(|&(s2, t, p)| ((s2, t), p)).collect();
        let tv = total_variation(&by_step, &expected);
        assert!(tv < 1e-12, "tv {tv}");
        assert!((all.values[s] - single.value).abs() < 1e-9);
        let marginal: BTreeMap<usize, f64> = all.exits[s].iter().copied().collect();
        assert!(total_variation(&marginal, &single.state_marginal()) < 1e-12);
        assert!(all.values.iter().enumerate().all(|(k, v)| v.is_nan() == g.is_terminated(get, k)));
        let direct = an.solve().unwrap();
        for k in 0..g.n_states() {
            if g.is_terminated(get, k) {
                assert!(direct.exits[k].is_empty());
                continue;
            }
            let a: BTreeMap<usize, f64> = all.exits[k].iter().copied().collect();
            let b: BTreeMap<usize, f64> = direct.exits[k].iter().copied().collect();
            assert!(total_variation(&a, &b) < 1e-11, "state {k}");
            assert!((all.values[k] - direct.values[k]).abs() < 1e-8, "state {k}");
        }
        let mut discounted = ExitAnalyzer::new(&model, &g, &policy, get, 0.9);
        let (a, b) = (discounted.sweep(|_, _| {}).unwrap(), discounted.solve().unwrap());
        assert!((a.values[s] - b.values[s]).abs() < 1e-9);
        assert_eq!(a.exits[s].len(), b.exits[s].len());
    }

    #[test]
    fn tv_distance() {
        let a: BTreeMap<usize, f64> = [(0, 0.5), (1, 0.5)].into();
        let b: BTreeMap<usize, f64> = [(1, 0.5), (2, 0.5)].into();
        assert!((total_variation(&a, &b) - 0.5).abs() < 1e-15);
        assert_eq!(total_variation(&a, &a), 0.0);
    }
}
