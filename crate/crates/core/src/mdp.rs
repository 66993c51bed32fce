//! Factored finite MDPs: variable schemas, state vectors, and the model
//! interface consumed by the learners and the exact oracles.

use std::fmt;

use rand::{Rng, RngCore};
use thiserror::Error;

/// Upper bound on the number of states `enumerate_states` will materialize.
pub const ENUMERATION_LIMIT: usize = 10_000_000;

/// Tolerance on the total probability mass of an enumerated distribution.
pub const PROBABILITY_TOLERANCE: f64 = 1e-12;

pub type ActionId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("state space has {size} states, above the enumeration limit of {limit}")]
    CapacityExceeded { size: u128, limit: usize },
    #[error("invalid action {action} (model has {count} primitive actions)")]
    InvalidAction { action: ActionId, count: usize },
    #[error("invalid state {state}: {reason}")]
    InvalidState { state: String, reason: String },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
}

/// One named discrete state variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VariableSchema {
    pub name: String,
    pub domain_size: usize,
}

impl VariableSchema {
    pub fn new(name: impl Into<String>, domain_size: usize) -> Self {
        Self {
            name: name.into(),
            domain_size,
        }
    }
}

/// A point in a factored state space: one value per schema variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateVector(pub Vec<usize>);

impl StateVector {
    pub fn new(values: Vec<usize>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[usize] {
        &self.0
    }

    pub fn get(&self, var: usize) -> usize {
        self.0[var]
    }

    /// Returns a copy with variable `var` set to `value`.
    pub fn with(&self, var: usize, value: usize) -> Self {
        let mut values = self.0.clone();
        values[var] = value;
        Self(values)
    }
}

impl fmt::Display for StateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, v) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

/// Mixed-radix codec between state vectors and dense indices.
///
/// The first variable is the most significant digit, so dense indices
/// follow the lexicographic order of the value vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSpace {
    schemas: Vec<VariableSchema>,
    size: usize,
}

impl StateSpace {
    pub fn new(schemas: Vec<VariableSchema>) -> Result<Self, MdpError> {
        if schemas.is_empty() {
            return Err(MdpError::InvalidSchema("no state variables".into()));
        }
        for (k, s) in schemas.iter().enumerate() {
            if s.domain_size == 0 {
                return Err(MdpError::InvalidSchema(format!(
                    "variable {} has an empty domain",
                    s.name
                )));
            }
            if schemas[..k].iter().any(|o| o.name == s.name) {
                return Err(MdpError::InvalidSchema(format!(
                    "duplicate variable name {}",
                    s.name
                )));
            }
        }
        let size: u128 = schemas.iter().map(|s| s.domain_size as u128).product();
        if size > ENUMERATION_LIMIT as u128 {
            return Err(MdpError::CapacityExceeded {
                size,
                limit: ENUMERATION_LIMIT,
            });
        }
        Ok(Self {
            schemas,
            size: size as usize,
        })
    }

    pub fn schemas(&self) -> &[VariableSchema] {
        &self.schemas
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.schemas.iter().position(|s| s.name == name)
    }

    pub fn validate(&self, state: &StateVector) -> Result<(), MdpError> {
        if state.0.len() != self.schemas.len() {
            return Err(MdpError::InvalidState {
                state: state.to_string(),
                reason: format!(
                    "expected {} components, found {}",
                    self.schemas.len(),
                    state.0.len()
                ),
            });
        }
        for (v, s) in state.0.iter().zip(&self.schemas) {
            if *v >= s.domain_size {
                return Err(MdpError::InvalidState {
                    state: state.to_string(),
                    reason: format!("{} = {v} outside [0, {})", s.name, s.domain_size),
                });
            }
        }
        Ok(())
    }

    pub fn encode(&self, state: &StateVector) -> usize {
        state
            .0
            .iter()
            .zip(&self.schemas)
            .fold(0, |acc, (v, s)| acc * s.domain_size + v)
    }

    pub fn decode(&self, mut index: usize) -> StateVector {
        let mut values = vec![0; self.schemas.len()];
        for (slot, s) in values.iter_mut().zip(&self.schemas).rev() {
            *slot = index % s.domain_size;
            index /= s.domain_size;
        }
        StateVector(values)
    }

    pub fn states(&self) -> impl Iterator<Item = StateVector> + '_ {
        (0..self.size).map(|i| self.decode(i))
    }
}

/// Result of executing one primitive action.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveOutcome {
    pub next_state: StateVector,
    pub reward: f64,
    pub terminal_episode: bool,
}

/// One entry of an enumerated next-state distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub next_state: StateVector,
    pub probability: f64,
    pub reward: f64,
}

/// A factored finite MDP with enumerable transition distributions.
///
/// Implementations are immutable; all randomness comes from the caller's RNG.
pub trait MdpModel: Send + Sync {
    fn space(&self) -> &StateSpace;

    fn action_names(&self) -> &[String];

    /// Full next-state distribution for `(state, action)`, in a fixed order.
    fn transitions(&self, state: &StateVector, action: ActionId)
        -> Result<Vec<Transition>, MdpError>;

    /// Whether the episode is over in `state`.
    fn is_terminal(&self, state: &StateVector) -> bool;

    /// Support of the (uniform) initial-state distribution.
    fn initial_states(&self) -> Vec<StateVector>;

    fn schemas(&self) -> &[VariableSchema] {
        self.space().schemas()
    }

    fn num_actions(&self) -> usize {
        self.action_names().len()
    }

    fn action_index(&self, name: &str) -> Option<ActionId> {
        self.action_names().iter().position(|a| a == name)
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> StateVector {
        let starts = self.initial_states();
        starts[rng.gen_range(0..starts.len())].clone()
    }

    fn sample_step(
        &self,
        state: &StateVector,
        action: ActionId,
        rng: &mut dyn RngCore,
    ) -> Result<PrimitiveOutcome, MdpError> {
        self.space().validate(state)?;
        let outcomes = self.transitions(state, action)?;
        let pick = pick_outcome(outcomes.iter().map(|t| t.probability), rng.gen::<f64>());
        let chosen = &outcomes[pick];
        Ok(PrimitiveOutcome {
            terminal_episode: self.is_terminal(&chosen.next_state),
            next_state: chosen.next_state.clone(),
            reward: chosen.reward,
        })
    }
}

/// Inverse-CDF selection with a single uniform draw `u` in [0, 1).
/// Rounding slack at the top of the CDF falls on the last positive entry.
pub(crate) fn pick_outcome(probabilities: impl Iterator<Item = f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, p) in probabilities.enumerate() {
        if p > 0.0 {
            last_positive = k;
        }
        acc += p;
        if u < acc {
            return k;
        }
    }
    last_positive
}

/// Every state of the model, in lexicographic order of the value vectors.
pub fn enumerate_states(model: &dyn MdpModel) -> Vec<StateVector> {
    model.space().states().collect()
}

/// Samples one transition from `model`.
pub fn sample_step(
    model: &dyn MdpModel,
    state: &StateVector,
    action: ActionId,
    rng: &mut dyn RngCore,
) -> Result<PrimitiveOutcome, MdpError> {
    model.sample_step(state, action, rng)
}

/// Dense-index transition: `(next index, probability, reward)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexedTransition {
    pub next: usize,
    pub probability: f64,
    pub reward: f64,
}

/// A model compiled to dense state indices for the hot loops of the
/// learners and oracles.
#[derive(Debug, Clone)]
pub struct TabularModel {
    space: StateSpace,
    action_names: Vec<String>,
    outcomes: Vec<Vec<IndexedTransition>>,
    terminal: Vec<bool>,
    initial: Vec<usize>,
    expected_reward: Vec<f64>,
}

impl TabularModel {
    pub fn compile(model: &dyn MdpModel) -> Result<Self, MdpError> {
        let space = model.space().clone();
        let n_actions = model.num_actions();
        let mut outcomes = Vec::with_capacity(space.len() * n_actions);
        let mut expected_reward = Vec::with_capacity(space.len() * n_actions);
        let mut terminal = Vec::with_capacity(space.len());
        for state in space.states() {
            terminal.push(model.is_terminal(&state));
            for a in 0..n_actions {
                let ts = model.transitions(&state, a)?;
                let total: f64 = ts.iter().map(|t| t.probability).sum();
                if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
                    return Err(MdpError::InvalidState {
                        state: state.to_string(),
                        reason: format!("action {a} probabilities sum to {total}"),
                    });
                }
                expected_reward.push(ts.iter().map(|t| t.probability * t.reward).sum());
                outcomes.push(
                    ts.iter()
                        .map(|t| IndexedTransition {
                            next: space.encode(&t.next_state),
                            probability: t.probability,
                            reward: t.reward,
                        })
                        .collect(),
                );
            }
        }
        let initial = model
            .initial_states()
            .iter()
            .map(|s| space.encode(s))
            .collect();
        Ok(Self {
            space,
            action_names: model.action_names().to_vec(),
            outcomes,
            terminal,
            initial,
            expected_reward,
        })
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn num_states(&self) -> usize {
        self.space.len()
    }

    pub fn num_actions(&self) -> usize {
        self.action_names.len()
    }

    pub fn action_names(&self) -> &[String] {
        &self.action_names
    }

    pub fn outcomes(&self, state: usize, action: ActionId) -> &[IndexedTransition] {
        &self.outcomes[state * self.action_names.len() + action]
    }

    pub fn expected_reward(&self, state: usize, action: ActionId) -> f64 {
        self.expected_reward[state * self.action_names.len() + action]
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.terminal[state]
    }

    pub fn initial_states(&self) -> &[usize] {
        &self.initial
    }

    pub fn sample_initial(&self, rng: &mut dyn RngCore) -> usize {
        self.initial[rng.gen_range(0..self.initial.len())]
    }

    /// Same draw discipline as [`MdpModel::sample_step`]: one uniform per step.
    pub fn sample(&self, state: usize, action: ActionId, rng: &mut dyn RngCore) -> IndexedTransition {
        let outs = self.outcomes(state, action);
        outs[pick_outcome(outs.iter().map(|t| t.probability), rng.gen::<f64>())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Chain {
        space: StateSpace,
        actions: Vec<String>,
    }

    impl Chain {
        fn new(sizes: &[usize]) -> Self {
            let schemas = sizes
                .iter()
                .enumerate()
                .map(|(k, &n)| VariableSchema::new(format!("v{k}"), n))
                .collect();
            Self {
                space: StateSpace::new(schemas).unwrap(),
                actions: vec!["stay".into()],
            }
        }
    }

    impl MdpModel for Chain {
        fn space(&self) -> &StateSpace {
            &self.space
        }
        fn action_names(&self) -> &[String] {
            &self.actions
        }
        fn transitions(&self, s: &StateVector, a: ActionId) -> Result<Vec<Transition>, MdpError> {
            if a != 0 {
                return Err(MdpError::InvalidAction { action: a, count: 1 });
            }
            Ok(vec![Transition {
                next_state: s.clone(),
                probability: 1.0,
                reward: -1.0,
            }])
        }
        fn is_terminal(&self, _: &StateVector) -> bool {
            false
        }
        fn initial_states(&self) -> Vec<StateVector> {
            self.space.states().collect()
        }
    }

    #[test]
    fn enumerates_single_binary_variable() {
        let m = Chain::new(&[2]);
        assert_eq!(
            enumerate_states(&m),
            vec![StateVector(vec![0]), StateVector(vec![1])]
        );
    }

    #[test]
    fn enumerates_lexicographic_product() {
        let m = Chain::new(&[2, 2]);
        let got: Vec<Vec<usize>> = enumerate_states(&m).into_iter().map(|s| s.0).collect();
        assert_eq!(got, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
    }

    #[test]
    fn capacity_guard() {
        let schemas = (0..8).map(|k| VariableSchema::new(format!("v{k}"), 10)).collect();
        assert!(matches!(
            StateSpace::new(schemas),
            Err(MdpError::CapacityExceeded { .. })
        ));
    }

    #[test]
    fn rejects_bad_schemas() {
        assert!(StateSpace::new(vec![VariableSchema::new("a", 0)]).is_err());
        assert!(StateSpace::new(vec![
            VariableSchema::new("a", 2),
            VariableSchema::new("a", 3)
        ])
        .is_err());
    }

    #[test]
    fn deterministic_model_returns_unique_outcome() {
        use rand::SeedableRng;
        let m = Chain::new(&[3]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let s = StateVector(vec![2]);
        let out = sample_step(&m, &s, 0, &mut rng).unwrap();
        assert_eq!(out.next_state, s);
        assert_eq!(out.reward, -1.0);
        assert!(matches!(
            sample_step(&m, &s, 1, &mut rng),
            Err(MdpError::InvalidAction { .. })
        ));
        assert!(matches!(
            sample_step(&m, &StateVector(vec![3]), 0, &mut rng),
            Err(MdpError::InvalidState { .. })
        ));
    }

    #[test]
    fn pick_outcome_skips_zero_mass_tail() {
        assert_eq!(pick_outcome([0.5, 0.5, 0.0].into_iter(), 0.999_999_999_999), 1);
        assert_eq!(pick_outcome([0.3, 0.7].into_iter(), 0.0), 0);
        assert_eq!(pick_outcome([0.3, 0.7].into_iter(), 0.3), 1);
    }

    proptest::proptest! {
        #[test]
        fn encode_decode_roundtrip(sizes in proptest::collection::vec(1usize..6, 1..5), seed in 0usize..10_000) {
            let schemas: Vec<_> = sizes.iter().enumerate()
                .map(|(k, &n)| VariableSchema::new(format!("v{k}"), n)).collect();
            let space = StateSpace::new(schemas).unwrap();
            let idx = seed % space.len();
            let s = space.decode(idx);
            space.validate(&s).unwrap();
            proptest::prop_assert_eq!(space.encode(&s), idx);
        }
    }
}
