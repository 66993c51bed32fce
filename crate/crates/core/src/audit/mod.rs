//! Exact checks of the state-abstraction conditions against a compiled model
//! and task graph.

pub mod chain;
pub mod conditions;
pub mod count;
pub mod oracle;
pub mod policy;
pub mod report;

pub use conditions::{Condition, ConditionResult, Counterexample};
pub use count::{count_values, CountMode, ValueCount};
pub use oracle::{flat_value_iteration, hierarchical_dp_oracle, FlatSolution, HierarchicalSolution};
pub use report::{audit_graph, AuditOptions, AuditReport};

use thiserror::Error;

use crate::graph::GraphError;
use crate::mdp::MdpError;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{what} did not converge (residual {residual:e})")]
    Divergence { what: String, residual: f64 },
    #[error("{subject} did not terminate within the horizon (terminated mass {mass})")]
    HorizonTooSmall { subject: String, mass: f64 },
    #[error("subtask {subtask} has no available child in state {state}")]
    NoAvailableChild { subtask: String, state: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}
