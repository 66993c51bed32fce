//! Number of stored values under flat Q-learning, MAXQ without abstraction,
//! and MAXQ with the graph's declared abstractions.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::graph::{CompiledGraph, GraphError, NodeRef, TaskGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountMode {
    Flat,
    MaxqPlain,
    MaxqAbstracted,
}

impl CountMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CountMode::Flat => "flat",
            CountMode::MaxqPlain => "maxq_plain",
            CountMode::MaxqAbstracted => "maxq_abstracted",
        }
    }
}

impl FromStr for CountMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flat" => Ok(CountMode::Flat),
            "maxq_plain" => Ok(CountMode::MaxqPlain),
            "maxq_abstracted" => Ok(CountMode::MaxqAbstracted),
            other => Err(format!(
                "unknown count mode `{other}` (expected flat, maxq_plain or maxq_abstracted)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValueCount {
    pub mode: CountMode,
    pub total: usize,
    /// `(table, count)` in a stable order.
    pub breakdown: Vec<(String, usize)>,
}

impl fmt::Display for ValueCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.total)?;
        for (name, n) in &self.breakdown {
            writeln!(f, "  {name}\t{n}")?;
        }
        Ok(())
    }
}

/// Distinct completion keys per shared table over live states (the parent is
/// running, unshielded, and the slot's child is available), plus distinct
/// leaf keys over states where the primitive can execute. Eliminated tables
/// store nothing.
pub fn abstracted_keys(g: &CompiledGraph) -> (Vec<BTreeSet<usize>>, Vec<BTreeSet<usize>>) {
    let mut completion = vec![BTreeSet::new(); g.tables().len()];
    for i in 0..g.n_subtasks() {
        let me = NodeRef::Subtask(i);
        for slot in 0..g.slots(i).len() {
            for s in 0..g.n_states() {
                if g.is_terminated(me, s) || g.is_shielded(me, s) {
                    continue;
                }
                if g.available(i, slot, s).is_none() {
                    continue;
                }
                let (table, key) = g.completion_key(i, slot, s);
                if !g.tables()[table].eliminated {
                    completion[table].insert(key);
                }
            }
        }
    }
    let leaves = (0..g.n_primitives())
        .map(|a| {
            (0..g.n_states())
                .filter(|&s| !g.is_shielded(NodeRef::Primitive(a), s))
                .map(|s| g.leaf_key(a, s))
                .collect()
        })
        .collect();
    (completion, leaves)
}

pub fn count_values(graph: &TaskGraph, mode: CountMode) -> Result<ValueCount, GraphError> {
    let n = graph.space().len();
    let mut breakdown = Vec::new();
    match mode {
        CountMode::Flat => {
            breakdown.push(("Q".to_string(), n * graph.primitives().len()));
        }
        CountMode::MaxqPlain => {
            for t in graph.subtasks() {
                for child in &t.children {
                    breakdown.push((format!("C {}/{}", t.id, child.label()), n));
                }
            }
            for p in graph.primitives() {
                breakdown.push((format!("V {p}"), n));
            }
        }
        CountMode::MaxqAbstracted => {
            let g = CompiledGraph::compile(graph)?;
            let (completion, leaves) = abstracted_keys(&g);
            for (spec, keys) in g.tables().iter().zip(&completion) {
                let mut name = format!("C {}/{}", spec.family, spec.child);
                if spec.eliminated {
                    name.push_str(" (eliminated)");
                }
                breakdown.push((name, keys.len()));
            }
            for (a, keys) in leaves.iter().enumerate() {
                breakdown.push((format!("V {}", g.name(NodeRef::Primitive(a))), keys.len()));
            }
        }
    }
    Ok(ValueCount {
        mode,
        total: breakdown.iter().map(|(_, k)| k).sum(),
        breakdown,
    })
}
