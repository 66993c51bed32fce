//! Hierarchical policies used to drive exact exit-distribution analysis.

use crate::audit::oracle::HierarchicalSolution;
use crate::graph::CompiledGraph;

/// A (possibly stochastic) choice of child slot for every subtask and state.
pub trait HierarchicalPolicy: Send + Sync {
    /// Probability of each slot of subtask `i` in `state`. Unavailable slots
    /// must get zero mass.
    fn distribution(&self, g: &CompiledGraph, i: usize, state: usize) -> Vec<f64>;

    fn describe(&self) -> String;
}

/// The greedy policy of a hierarchical oracle solution.
pub struct OraclePolicy<'a> {
    pub solution: &'a HierarchicalSolution,
}

impl HierarchicalPolicy for OraclePolicy<'_> {
    fn distribution(&self, g: &CompiledGraph, i: usize, state: usize) -> Vec<f64> {
        let mut d = vec![0.0; g.slots(i).len()];
        if let Some(slot) = self.solution.policy[i][state] {
            d[slot] = 1.0;
        }
        d
    }

    fn describe(&self) -> String {
        "recursively optimal".into()
    }
}

/// Random stochastic policy that only looks at the subtask's abstract state.
/// Every available slot gets a weight in `[0.5, 1]` drawn from a hash of
/// `(seed, subtask family, abstract key, slot)`, so instances of one family
/// that share a table also share behaviour.
#[derive(Debug, Clone, Copy)]
pub struct RandomAbstractPolicy {
    pub seed: u64,
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn family_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl HierarchicalPolicy for RandomAbstractPolicy {
    fn distribution(&self, g: &CompiledGraph, i: usize, state: usize) -> Vec<f64> {
        let family = &g.graph().subtasks()[i].family;
        let key = g.policy_key(i, state) as u64;
        let base = mix(self.seed ^ family_hash(family)) ^ mix(key);
        let mut d: Vec<f64> = (0..g.slots(i).len())
            .map(|slot| {
                if g.available(i, slot, state).is_none() {
                    return 0.0;
                }
                let h = mix(base.wrapping_add(slot as u64));
                0.5 + 0.5 * (h >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        let total: f64 = d.iter().sum();
        if total > 0.0 {
            d.iter_mut().for_each(|p| *p /= total);
        }
        d
    }

    fn describe(&self) -> String {
        format!("random abstract (seed {})", self.seed)
    }
}
