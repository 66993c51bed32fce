//! Tabular MAXQ value-function decomposition with MAXQ-Q learning, a flat
//! Q-learning baseline, the Taxi domain, and an exact audit of the five
//! safe state-abstraction conditions.

pub mod audit;
pub mod experiment;
pub mod flat_q;
pub mod graph;
pub mod learner;
pub mod mdp;
pub mod taxi;
