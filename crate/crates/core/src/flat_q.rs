//! Flat tabular Q-learning with the same step-size and Boltzmann schedules
//! as the hierarchical learner.

use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::learner::{
    boltzmann_pick, format_value, EnvSession, EpisodeStats, ExplorationSchedule, LearnError,
    StepSize,
};
use crate::mdp::TabularModel;

#[derive(Debug, Clone, PartialEq)]
pub struct FlatSettings {
    pub step_size: StepSize,
    pub exploration: ExplorationSchedule,
    pub gamma: f64,
}

/// Q(s, a) over the full state space.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_actions: usize,
    values: Vec<f64>,
    visits: Vec<u64>,
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            values: vec![0.0; n_states * n_actions],
            visits: vec![0; n_states * n_actions],
        }
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.n_actions + action]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.values[state * self.n_actions..(state + 1) * self.n_actions]
    }

    /// Greedy action, ties to the lowest action index.
    pub fn greedy(&self, state: usize) -> usize {
        let row = self.row(state);
        let mut best = 0;
        for (a, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn max(&self, state: usize) -> f64 {
        self.row(state).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Same line format as the hierarchical snapshot, with `Q` as subtask.
    pub fn snapshot(&self, model: &TabularModel) -> String {
        let mut lines = Vec::new();
        for (idx, (v, n)) in self.values.iter().zip(&self.visits).enumerate() {
            if *n == 0 {
                continue;
            }
            let s = model.space().decode(idx / self.n_actions);
            let key: Vec<String> = model
                .space()
                .schemas()
                .iter()
                .zip(s.values())
                .map(|(sc, x)| format!("{}={x}", sc.name))
                .collect();
            lines.push(format!(
                "Q\t{}\t{}\t{}",
                key.join(","),
                model.action_names()[idx % self.n_actions],
                format_value(*v)
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

pub struct FlatQLearner {
    table: QTable,
    settings: FlatSettings,
    rng: ChaCha8Rng,
    episodes: u64,
}

impl FlatQLearner {
    pub fn new(model: &TabularModel, settings: FlatSettings, seed: u64) -> Result<Self, LearnError> {
        settings.exploration.validate()?;
        if !(settings.gamma > 0.0 && settings.gamma <= 1.0) {
            return Err(LearnError::InvalidSchedule(format!("gamma = {}", settings.gamma)));
        }
        Ok(Self {
            table: QTable::new(model.num_states(), model.num_actions()),
            settings,
            rng: ChaCha8Rng::seed_from_u64(seed),
            episodes: 0,
        })
    }

    pub fn table(&self) -> &QTable {
        &self.table
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    /// Runs one episode; `on_step` sees the table after every update.
    pub fn run_episode(
        &mut self,
        session: &mut EnvSession<'_>,
        on_step: &mut dyn FnMut(&QTable, u64),
    ) -> EpisodeStats {
        session.reset(&mut self.rng);
        let before = session.total_steps();
        let temperature = self.settings.exploration.temperature(self.episodes);
        let model = session.model();
        while !session.ended() {
            let s = session.state();
            let a = boltzmann_pick(self.table.row(s), temperature, &mut self.rng);
            let t = session.step(a, &mut self.rng);
            if !session.truncated() {
                let future = if model.is_terminal(t.next) {
                    0.0
                } else {
                    self.table.max(t.next)
                };
                let idx = s * self.table.n_actions + a;
                let alpha = self.settings.step_size.alpha(self.table.visits[idx]);
                let target = t.reward + self.settings.gamma * future;
                self.table.values[idx] = (1.0 - alpha) * self.table.values[idx] + alpha * target;
                self.table.visits[idx] += 1;
            }
            on_step(&self.table, session.total_steps());
        }
        self.episodes += 1;
        EpisodeStats {
            steps: session.total_steps() - before,
            undiscounted_return: session.episode_return(),
            truncated: session.truncated(),
        }
    }
}

/// Greedy rollout of a frozen Q table.
pub fn run_greedy_flat_episode(
    table: &QTable,
    session: &mut EnvSession<'_>,
    start: usize,
    rng: &mut dyn RngCore,
) -> EpisodeStats {
    session.reset_to(start);
    while !session.ended() {
        let a = table.greedy(session.state());
        session.step(a, rng);
    }
    EpisodeStats {
        steps: session.episode_steps(),
        undiscounted_return: session.episode_return(),
        truncated: session.truncated(),
    }
}
