//! The 5x5 Taxi domain (deterministic and noisy) and its MAXQ hierarchy.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use crate::graph::{ChildSpec, EdgeAnnotation, LeafAbstraction, SubtaskDef, TaskGraph};
use crate::mdp::{ActionId, MdpError, MdpModel, StateSpace, StateVector, Transition, VariableSchema};

pub const ROWS: usize = 5;
pub const COLS: usize = 5;

pub const TAXI_ROW: usize = 0;
pub const TAXI_COL: usize = 1;
pub const PASSENGER: usize = 2;
pub const DESTINATION: usize = 3;

/// `passenger_loc` value meaning the passenger is in the taxi.
pub const IN_TAXI: usize = 4;

pub const NORTH: ActionId = 0;
pub const SOUTH: ActionId = 1;
pub const EAST: ActionId = 2;
pub const WEST: ActionId = 3;
pub const PICKUP: ActionId = 4;
pub const PUTDOWN: ActionId = 5;

pub const ACTION_NAMES: [&str; 6] = ["North", "South", "East", "West", "Pickup", "Putdown"];

pub const STEP_REWARD: f64 = -1.0;
pub const DELIVERY_BONUS: f64 = 20.0;
pub const ILLEGAL_REWARD: f64 = -10.0;

pub const DEFAULT_NOISE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Landmark {
    R = 0,
    G = 1,
    B = 2,
    Y = 3,
}

impl Landmark {
    pub const ALL: [Landmark; 4] = [Landmark::R, Landmark::G, Landmark::B, Landmark::Y];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(k: usize) -> Option<Self> {
        Self::ALL.get(k).copied()
    }

    pub fn cell(self) -> (usize, usize) {
        match self {
            Landmark::R => (0, 0),
            Landmark::G => (0, 4),
            Landmark::Y => (4, 0),
            Landmark::B => (4, 3),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Landmark::R => "R",
            Landmark::G => "G",
            Landmark::B => "B",
            Landmark::Y => "Y",
        }
    }
}

/// Landmark grid coordinates as `(row, col)`, row 0 at the top.
pub fn landmark_coordinates() -> BTreeMap<Landmark, (usize, usize)> {
    Landmark::ALL.iter().map(|l| (*l, l.cell())).collect()
}

/// Interior wall segments: `(row, col)` has a wall on its east side.
const EAST_WALLS: [(usize, usize); 6] = [(0, 1), (1, 1), (3, 0), (4, 0), (3, 2), (4, 2)];

/// Cell reached by moving from `(row, col)` in direction `action`; walls and
/// the border make the move a no-op.
pub fn move_taxi(row: usize, col: usize, action: ActionId) -> (usize, usize) {
    match action {
        NORTH if row > 0 => (row - 1, col),
        SOUTH if row + 1 < ROWS => (row + 1, col),
        EAST if col + 1 < COLS && !EAST_WALLS.contains(&(row, col)) => (row, col + 1),
        WEST if col > 0 && !EAST_WALLS.contains(&(row, col - 1)) => (row, col - 1),
        _ => (row, col),
    }
}

fn perpendicular(action: ActionId) -> [ActionId; 2] {
    match action {
        NORTH | SOUTH => [WEST, EAST],
        _ => [NORTH, SOUTH],
    }
}

/// Typed view of a Taxi state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaxiState {
    pub taxi_row: usize,
    pub taxi_col: usize,
    /// `None` means the passenger is in the taxi.
    pub passenger: Option<Landmark>,
    pub destination: Landmark,
}

impl TaxiState {
    pub fn to_vector(self) -> StateVector {
        StateVector(vec![
            self.taxi_row,
            self.taxi_col,
            self.passenger.map_or(IN_TAXI, Landmark::index),
            self.destination.index(),
        ])
    }

    pub fn from_vector(s: &StateVector) -> Option<Self> {
        if s.0.len() != 4 || s.0[0] >= ROWS || s.0[1] >= COLS || s.0[2] > IN_TAXI {
            return None;
        }
        Some(Self {
            taxi_row: s.0[0],
            taxi_col: s.0[1],
            passenger: Landmark::from_index(s.0[2]),
            destination: Landmark::from_index(s.0[3])?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaxiConfig {
    /// Probability mass diverted from the intended navigation move, split
    /// evenly between the two perpendicular moves.
    pub noise: f64,
}

impl TaxiConfig {
    pub fn deterministic() -> Self {
        Self { noise: 0.0 }
    }

    pub fn noisy(noise: f64) -> Self {
        Self { noise }
    }
}

impl Default for TaxiConfig {
    fn default() -> Self {
        Self::deterministic()
    }
}

pub fn taxi_schemas() -> Vec<VariableSchema> {
    vec![
        VariableSchema::new("taxi_row", ROWS),
        VariableSchema::new("taxi_col", COLS),
        VariableSchema::new("passenger_loc", 5),
        VariableSchema::new("destination", 4),
    ]
}

/// Episode over: the passenger sits at the destination landmark.
pub fn taxi_terminal(s: &StateVector) -> bool {
    s.get(PASSENGER) == s.get(DESTINATION)
}

fn at_landmark(s: &StateVector, landmark: usize) -> bool {
    Landmark::from_index(landmark)
        .is_some_and(|l| l.cell() == (s.get(TAXI_ROW), s.get(TAXI_COL)))
}

#[derive(Debug, Clone)]
pub struct TaxiModel {
    config: TaxiConfig,
    space: StateSpace,
    actions: Vec<String>,
}

/// The Taxi MDP with actions ordered North, South, East, West, Pickup,
/// Putdown.
pub fn taxi_model(config: TaxiConfig) -> TaxiModel {
    TaxiModel {
        config,
        space: StateSpace::new(taxi_schemas()).expect("taxi schema is valid"),
        actions: ACTION_NAMES.iter().map(|s| s.to_string()).collect(),
    }
}

impl TaxiModel {
    pub fn config(&self) -> TaxiConfig {
        self.config
    }

    fn navigation(&self, s: &StateVector, action: ActionId) -> Vec<Transition> {
        let p = self.config.noise;
        let mut moves = vec![(action, 1.0 - p)];
        if p > 0.0 {
            for side in perpendicular(action) {
                moves.push((side, p / 2.0));
            }
        }
        let mut out: Vec<Transition> = Vec::with_capacity(3);
        for (dir, prob) in moves {
            let (r, c) = move_taxi(s.get(TAXI_ROW), s.get(TAXI_COL), dir);
            let next = s.with(TAXI_ROW, r).with(TAXI_COL, c);
            match out.iter_mut().find(|t| t.next_state == next) {
                Some(t) => t.probability += prob,
                None => out.push(Transition {
                    next_state: next,
                    probability: prob,
                    reward: STEP_REWARD,
                }),
            }
        }
        out.retain(|t| t.probability > 0.0);
        out
    }
}

impl MdpModel for TaxiModel {
    fn space(&self) -> &StateSpace {
        &self.space
    }

    fn action_names(&self) -> &[String] {
        &self.actions
    }

    fn transitions(&self, s: &StateVector, action: ActionId) -> Result<Vec<Transition>, MdpError> {
        self.space.validate(s)?;
        let stay = |reward| {
            vec![Transition {
                next_state: s.clone(),
                probability: 1.0,
                reward,
            }]
        };
        match action {
            NORTH | SOUTH | EAST | WEST => Ok(self.navigation(s, action)),
            PICKUP => {
                let p = s.get(PASSENGER);
                if p != IN_TAXI && at_landmark(s, p) {
                    Ok(vec![Transition {
                        next_state: s.with(PASSENGER, IN_TAXI),
                        probability: 1.0,
                        reward: STEP_REWARD,
                    }])
                } else {
                    Ok(stay(ILLEGAL_REWARD))
                }
            }
            PUTDOWN => {
                let d = s.get(DESTINATION);
                if s.get(PASSENGER) == IN_TAXI && at_landmark(s, d) {
                    Ok(vec![Transition {
                        next_state: s.with(PASSENGER, d),
                        probability: 1.0,
                        reward: STEP_REWARD + DELIVERY_BONUS,
                    }])
                } else {
                    Ok(stay(ILLEGAL_REWARD))
                }
            }
            _ => Err(MdpError::InvalidAction {
                action,
                count: self.actions.len(),
            }),
        }
    }

    fn is_terminal(&self, s: &StateVector) -> bool {
        taxi_terminal(s)
    }

    /// Taxi anywhere, passenger waiting at a landmark, destination a
    /// different landmark: 25 * 4 * 3 = 300 start states.
    fn initial_states(&self) -> Vec<StateVector> {
        self.space
            .states()
            .filter(|s| s.get(PASSENGER) != IN_TAXI && !taxi_terminal(s))
            .collect()
    }
}

pub const ROOT: &str = "Root";
pub const GET: &str = "Get";
pub const PUT: &str = "Put";
pub const NAVIGATE: &str = "Navigate";

pub fn navigate_id(t: Landmark) -> String {
    format!("Navigate({})", t.name())
}

/// The canonical Taxi hierarchy with its abstraction annotations:
///
/// ```text
/// Root -> Get, Put
/// Get  -> Navigate(passenger_loc), Pickup
/// Put  -> Navigate(destination), Putdown
/// Navigate(t) -> North, South, East, West     for t in R, G, B, Y
/// ```
pub fn taxi_task_graph() -> TaskGraph {
    let pred = |f: fn(&StateVector) -> bool| -> crate::graph::StatePredicate { Arc::new(f) };
    let nav_targets: Vec<Option<String>> = Landmark::ALL.iter().map(|l| Some(navigate_id(*l))).collect();

    let mut subtasks = vec![
        SubtaskDef::new(
            ROOT,
            vec![ChildSpec::Fixed(GET.into()), ChildSpec::Fixed(PUT.into())],
            pred(taxi_terminal),
            &["taxi_row", "taxi_col", "passenger_loc", "destination"],
        ),
        SubtaskDef::new(
            GET,
            vec![
                ChildSpec::Dispatch {
                    label: NAVIGATE.into(),
                    var: "passenger_loc".into(),
                    targets: nav_targets
                        .iter()
                        .cloned()
                        .chain(std::iter::once(None))
                        .collect(),
                },
                ChildSpec::Fixed("Pickup".into()),
            ],
            pred(|s| s.get(PASSENGER) == IN_TAXI),
            &["taxi_row", "taxi_col", "passenger_loc"],
        ),
        SubtaskDef::new(
            PUT,
            vec![
                ChildSpec::Dispatch {
                    label: NAVIGATE.into(),
                    var: "destination".into(),
                    targets: nav_targets,
                },
                ChildSpec::Fixed("Putdown".into()),
            ],
            pred(|s| s.get(PASSENGER) != IN_TAXI),
            &["taxi_row", "taxi_col", "passenger_loc", "destination"],
        ),
    ];
    for t in Landmark::ALL {
        subtasks.push(
            SubtaskDef::new(
                navigate_id(t),
                ["North", "South", "East", "West"]
                    .iter()
                    .map(|a| ChildSpec::Fixed(a.to_string()))
                    .collect(),
                Arc::new(move |s: &StateVector| at_landmark(s, t.index())),
                &["taxi_row", "taxi_col"],
            )
            .with_binding(NAVIGATE, "t", t.index(), 4),
        );
    }

    let mut g = TaskGraph::new(
        taxi_schemas(),
        ACTION_NAMES.iter().map(|s| s.to_string()).collect(),
        subtasks,
        ROOT,
        pred(taxi_terminal),
    )
    .expect("taxi schema is valid");

    g.annotate_edge(
        ROOT,
        PUT,
        EdgeAnnotation {
            completion_eliminated: true,
            result_relevant_vars: None,
        },
    );
    g.annotate_edge(
        ROOT,
        GET,
        EdgeAnnotation {
            completion_eliminated: false,
            result_relevant_vars: Some(vec!["passenger_loc".into(), "destination".into()]),
        },
    );
    g.annotate_edge(
        GET,
        NAVIGATE,
        EdgeAnnotation {
            completion_eliminated: false,
            result_relevant_vars: Some(vec!["passenger_loc".into()]),
        },
    );
    g.annotate_edge(
        PUT,
        NAVIGATE,
        EdgeAnnotation {
            completion_eliminated: false,
            result_relevant_vars: Some(vec!["passenger_loc".into(), "destination".into()]),
        },
    );
    for a in ["North", "South", "East", "West"] {
        g.set_leaf(a, LeafAbstraction::vars(&[]));
    }
    g.set_leaf(
        "Pickup",
        LeafAbstraction::Feature {
            name: "pickup_legal".into(),
            arity: 2,
            feature: Arc::new(|s| {
                usize::from(s.get(PASSENGER) != IN_TAXI && at_landmark(s, s.get(PASSENGER)))
            }),
        },
    );
    g.set_leaf(
        "Putdown",
        LeafAbstraction::Feature {
            name: "putdown_legal".into(),
            arity: 2,
            feature: Arc::new(|s| {
                usize::from(s.get(PASSENGER) == IN_TAXI && at_landmark(s, s.get(DESTINATION)))
            }),
        },
    );
    g
}

/// Breadth-first shortest path lengths (in moves) from every cell to
/// `target` under the wall layout, indexed `[row][col]`.
pub fn bfs_distances(target: (usize, usize)) -> [[Option<usize>; COLS]; ROWS] {
    let mut dist = [[None; COLS]; ROWS];
    dist[target.0][target.1] = Some(0);
    let mut queue = VecDeque::from([target]);
    while let Some((r, c)) = queue.pop_front() {
        let d = dist[r][c].unwrap_or(0);
        // Moves are symmetric, so searching outward from the target is valid.
        for a in [NORTH, SOUTH, EAST, WEST] {
            let (nr, nc) = move_taxi(r, c, a);
            if dist[nr][nc].is_none() {
                dist[nr][nc] = Some(d + 1);
                queue.push_back((nr, nc));
            }
        }
    }
    dist
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{is_shielded, is_terminated, project, validate_dag};

    fn st(row: usize, col: usize, p: Option<Landmark>, d: Landmark) -> StateVector {
        TaxiState {
            taxi_row: row,
            taxi_col: col,
            passenger: p,
            destination: d,
        }
        .to_vector()
    }

    #[test]
    fn delivery_pays_nineteen_and_ends_episode() {
        let m = taxi_model(TaxiConfig::deterministic());
        let s = st(4, 3, None, Landmark::B);
        let t = m.transitions(&s, PUTDOWN).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].reward, 19.0);
        assert!(m.is_terminal(&t[0].next_state));
    }

    #[test]
    fn illegal_pickup_costs_ten() {
        let m = taxi_model(TaxiConfig::deterministic());
        let s = st(2, 2, Some(Landmark::G), Landmark::R);
        let t = m.transitions(&s, PICKUP).unwrap();
        assert_eq!(t[0].reward, -10.0);
        assert_eq!(t[0].next_state, s);
        let s = st(0, 4, Some(Landmark::G), Landmark::R);
        let t = m.transitions(&s, PICKUP).unwrap();
        assert_eq!(t[0].reward, -1.0);
        assert_eq!(t[0].next_state.get(PASSENGER), IN_TAXI);
    }

    #[test]
    fn north_at_top_row_is_noop() {
        let m = taxi_model(TaxiConfig::deterministic());
        let s = st(0, 2, Some(Landmark::G), Landmark::R);
        let t = m.transitions(&s, NORTH).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].next_state, s);
        assert_eq!(t[0].reward, -1.0);
    }

    #[test]
    fn walls_block_moves() {
        assert_eq!(move_taxi(0, 1, EAST), (0, 1));
        assert_eq!(move_taxi(0, 2, WEST), (0, 2));
        assert_eq!(move_taxi(2, 1, EAST), (2, 2));
        assert_eq!(move_taxi(3, 0, EAST), (3, 0));
        assert_eq!(move_taxi(4, 3, WEST), (4, 3));
        assert_eq!(move_taxi(4, 4, SOUTH), (4, 4));
    }

    #[test]
    fn noise_splits_perpendicular() {
        let m = taxi_model(TaxiConfig::noisy(0.2));
        let s = st(2, 2, Some(Landmark::G), Landmark::R);
        let t = m.transitions(&s, NORTH).unwrap();
        let probs: Vec<f64> = t.iter().map(|x| x.probability).collect();
        assert_eq!(probs, vec![0.8, 0.1, 0.1]);
        assert_eq!(t[0].next_state.get(TAXI_ROW), 1);
        // Corner: both the intended move and one slip are blocked.
        let s = st(0, 0, Some(Landmark::G), Landmark::R);
        let t = m.transitions(&s, NORTH).unwrap();
        assert_eq!(t.len(), 2);
        assert!((t[0].probability - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_matches_deterministic() {
        let a = taxi_model(TaxiConfig::deterministic());
        let b = taxi_model(TaxiConfig::noisy(0.0));
        for s in a.space().states() {
            for act in 0..6 {
                assert_eq!(a.transitions(&s, act).unwrap(), b.transitions(&s, act).unwrap());
            }
        }
    }

    #[test]
    fn sizes() {
        let m = taxi_model(TaxiConfig::deterministic());
        assert_eq!(crate::mdp::enumerate_states(&m).len(), 500);
        assert_eq!(m.num_actions(), 6);
        assert_eq!(m.initial_states().len(), 300);
    }

    #[test]
    fn landmarks_are_distinct_and_in_grid() {
        let coords = landmark_coordinates();
        let cells: std::collections::BTreeSet<_> = coords.values().collect();
        assert_eq!(cells.len(), 4);
        assert!(coords.values().all(|&(r, c)| r < ROWS && c < COLS));
        assert_eq!(coords[&Landmark::R], (0, 0));
        assert_eq!(coords[&Landmark::B], (4, 3));
    }

    #[test]
    fn bfs_reaches_every_landmark_from_every_cell() {
        for l in Landmark::ALL {
            let d = bfs_distances(l.cell());
            assert!(d.iter().flatten().all(Option::is_some));
        }
        // R at (0,0) to G at (0,4): down to row 2, across, back up.
        assert_eq!(bfs_distances(Landmark::G.cell())[0][0], Some(8));
    }

    #[test]
    fn hierarchy_shape() {
        let g = taxi_task_graph();
        validate_dag(&g).unwrap();
        let navs = g.subtasks().iter().filter(|t| t.family == NAVIGATE).count();
        assert_eq!(navs, 4);
    }

    #[test]
    fn navigate_ignores_passenger_and_destination() {
        let g = taxi_task_graph();
        let a = st(1, 3, Some(Landmark::G), Landmark::R);
        let b = st(1, 3, None, Landmark::Y);
        assert_eq!(
            project(&g, "Navigate(R)", &a).unwrap(),
            project(&g, "Navigate(R)", &b).unwrap()
        );
        let c = st(1, 3, Some(Landmark::G), Landmark::B);
        assert_eq!(project(&g, GET, &a).unwrap(), project(&g, GET, &c).unwrap());
        assert_ne!(
            project(&g, "Navigate(R)", &a).unwrap(),
            project(&g, "Navigate(G)", &a).unwrap()
        );
    }

    #[test]
    fn termination_predicates() {
        let g = taxi_task_graph();
        let waiting = st(2, 2, Some(Landmark::Y), Landmark::R);
        assert!(is_terminated(&g, PUT, &waiting).unwrap());
        assert!(!is_terminated(&g, ROOT, &waiting).unwrap());
        assert!(is_terminated(&g, "Navigate(G)", &st(0, 4, None, Landmark::R)).unwrap());
        assert!(!is_terminated(&g, "Navigate(G)", &st(0, 3, None, Landmark::R)).unwrap());
    }

    #[test]
    fn shielding_examples() {
        let g = taxi_task_graph();
        let waiting = st(2, 2, Some(Landmark::Y), Landmark::R);
        assert!(is_shielded(&g, PUT, &waiting).unwrap());
        assert!(!is_shielded(&g, ROOT, &waiting).unwrap());
        assert!(!is_shielded(&g, "Navigate(Y)", &waiting).unwrap());
        assert!(is_shielded(&g, "Navigate(R)", &waiting).unwrap());
        let carried = st(2, 2, None, Landmark::R);
        assert!(!is_shielded(&g, "Navigate(R)", &carried).unwrap());
        assert!(is_shielded(&g, GET, &carried).unwrap());
    }
}
