//! Runs independent learning trials and aggregates their greedy-policy
//! learning curves.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::audit::{flat_value_iteration, AuditError};
use crate::experiment::config::{EvalStarts, ExperimentConfig, Method};
use crate::flat_q::{run_greedy_flat_episode, FlatQLearner, FlatSettings, QTable};
use crate::graph::{CompiledGraph, GraphError};
use crate::learner::{
    run_greedy_episode, EnvSession, LearnError, LearnHooks, MaxqLearner, MaxqSettings, MaxqTables,
};
use crate::mdp::{MdpError, TabularModel};
use crate::taxi::{taxi_model, taxi_task_graph};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("trial {trial} (seed {seed}) failed: {source}")]
    Trial {
        trial: usize,
        seed: u64,
        source: LearnError,
    },
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub steps: u64,
    pub mean_return: f64,
    pub stderr: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    /// `(primitive steps, mean greedy return)` per evaluation.
    pub curve: Vec<(u64, f64)>,
    pub episodes: u64,
    pub truncations: u64,
    /// Sorted table snapshot after the last learning step.
    pub snapshot: String,
    /// Stored completion entries per shared table, for the MAXQ methods.
    pub stored_completion: Vec<(usize, usize)>,
}

impl TrialResult {
    /// First evaluation step from which every later evaluation (inclusive)
    /// is at least `threshold`.
    pub fn steps_to_threshold(&self, threshold: f64) -> Option<u64> {
        let mut first = None;
        for &(steps, r) in &self.curve {
            if r >= threshold {
                first.get_or_insert(steps);
            } else {
                first = None;
            }
        }
        first
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub curve: LearningCurve,
    pub trials: Vec<TrialResult>,
    /// Mean optimal return over the start distribution.
    pub optimal_mean_return: f64,
}

impl ExperimentResult {
    pub fn threshold(&self) -> f64 {
        self.optimal_mean_return - self.config.near_optimal_margin
    }

    pub fn steps_to_threshold(&self) -> Vec<Option<u64>> {
        let t = self.threshold();
        self.trials.iter().map(|tr| tr.steps_to_threshold(t)).collect()
    }

    pub fn summary(&self) -> String {
        let c = &self.config;
        let mut lines = vec![
            format!("method: {}", c.method.as_str()),
            format!("domain: {}", c.domain),
            format!("trials: {}", c.trials),
            format!("budget: {}", c.budget),
            format!(
                "step size: {}{}",
                c.learning.default,
                if c.learning.is_convergent() { "" } else { " (practical mode)" }
            ),
            format!("optimal mean return: {:.6}", self.optimal_mean_return),
        ];
        if let Some(last) = self.curve.points.last() {
            lines.push(format!(
                "final mean return: {:.6} +/- {:.6} at {} steps",
                last.mean_return, last.stderr, last.steps
            ));
        }
        let hits: Vec<f64> = self
            .steps_to_threshold()
            .into_iter()
            .map(|s| s.map_or(f64::NAN, |x| x as f64))
            .collect();
        let reached = hits.iter().filter(|h| h.is_finite()).count();
        let (m, se) = mean_stderr(&hits.iter().copied().filter(|h| h.is_finite()).collect::<Vec<_>>());
        lines.push(format!(
            "steps to within {} of optimal: {reached}/{} trials, mean {m:.1} +/- {se:.1}",
            c.near_optimal_margin,
            self.trials.len()
        ));
        let trunc: u64 = self.trials.iter().map(|t| t.truncations).sum();
        lines.push(format!("truncated learning episodes: {trunc}"));
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

/// Sample mean and standard error (0 for fewer than two values).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Aggregates per-trial curves at matched step counts.
pub fn aggregate(trials: &[Vec<(u64, f64)>]) -> LearningCurve {
    let mut steps: Vec<u64> = trials.iter().flatten().map(|p| p.0).collect();
    steps.sort_unstable();
    steps.dedup();
    let points = steps
        .into_iter()
        .map(|st| {
            let vals: Vec<f64> = trials
                .iter()
                .filter_map(|c| c.iter().find(|p| p.0 == st).map(|p| p.1))
                .collect();
            let (mean_return, stderr) = mean_stderr(&vals);
            CurvePoint {
                steps: st,
                mean_return,
                stderr,
                trials: vals.len(),
            }
        })
        .collect();
    LearningCurve { points }
}

/// Trial seeds `(learning, evaluation)` derived from the master seed.
pub fn trial_seeds(master: u64, trials: usize) -> Vec<(u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..trials).map(|_| (rng.next_u64(), rng.next_u64())).collect()
}

/// Frozen-policy evaluation with its own RNG stream.
struct Evaluator<'a> {
    model: &'a TabularModel,
    starts: EvalStarts,
    episodes: usize,
    cap: u64,
    rng: ChaCha8Rng,
}

impl Evaluator<'_> {
    fn start_states(&mut self) -> Vec<usize> {
        match self.starts {
            EvalStarts::All => self.model.initial_states().to_vec(),
            EvalStarts::Sampled => (0..self.episodes)
                .map(|_| self.model.sample_initial(&mut self.rng))
                .collect(),
        }
    }

    fn maxq(&mut self, tables: &MaxqTables, g: &CompiledGraph) -> Result<f64, LearnError> {
        let starts = self.start_states();
        let mut total = 0.0;
        let mut env = EnvSession::new(self.model, self.cap);
        for &s in &starts {
            total += run_greedy_episode(tables, g, &mut env, s, &mut self.rng)?.undiscounted_return;
        }
        Ok(total / starts.len() as f64)
    }

    fn flat(&mut self, table: &QTable) -> f64 {
        let starts = self.start_states();
        let mut total = 0.0;
        let mut env = EnvSession::new(self.model, self.cap);
        for &s in &starts {
            total += run_greedy_flat_episode(table, &mut env, s, &mut self.rng).undiscounted_return;
        }
        total / starts.len() as f64
    }
}

/// Evaluates at every multiple of the interval during learning.
struct EvalHooks<'a, 'e> {
    g: &'a CompiledGraph,
    evaluator: &'e mut Evaluator<'a>,
    interval: u64,
    curve: Vec<(u64, f64)>,
    error: Option<LearnError>,
}

impl LearnHooks for EvalHooks<'_, '_> {
    fn on_primitive(&mut self, tables: &MaxqTables, total_steps: u64) {
        if total_steps % self.interval == 0 && self.error.is_none() {
            match self.evaluator.maxq(tables, self.g) {
                Ok(v) => self.curve.push((total_steps, v)),
                Err(e) => self.error = Some(e),
            }
        }
    }
}

fn run_maxq_trial(
    cfg: &ExperimentConfig,
    model: &TabularModel,
    g: &CompiledGraph,
    trial: usize,
    (seed, eval_seed): (u64, u64),
) -> Result<TrialResult, LearnError> {
    let settings = MaxqSettings {
        learning: cfg.learning.clone(),
        exploration: cfg.exploration,
        gamma: cfg.gamma,
        step_cap: cfg.step_cap,
    };
    let mut learner = MaxqLearner::new(g, settings, seed)?;
    let mut evaluator = Evaluator {
        model,
        starts: cfg.eval_starts,
        episodes: cfg.eval_episodes,
        cap: cfg.eval_cap,
        rng: ChaCha8Rng::seed_from_u64(eval_seed),
    };
    let first = evaluator.maxq(learner.tables(), g)?;
    let mut hooks = EvalHooks {
        g,
        evaluator: &mut evaluator,
        interval: cfg.eval_interval,
        curve: vec![(0, first)],
        error: None,
    };
    let mut env = EnvSession::new(model, cfg.step_cap).with_budget(cfg.budget);
    while env.total_steps() < cfg.budget {
        learner.run_episode(&mut env, &mut hooks)?;
        if let Some(e) = hooks.error.take() {
            return Err(e);
        }
    }
    let mut curve = hooks.curve;
    if curve.last().map(|p| p.0) != Some(env.total_steps()) {
        let v = evaluator.maxq(learner.tables(), g)?;
        curve.push((env.total_steps(), v));
    }
    let mut stored = vec![0; g.tables().len()];
    for (table, _, _) in learner.tables().completion_entries() {
        stored[table] += 1;
    }
    Ok(TrialResult {
        trial,
        seed,
        curve,
        episodes: learner.episodes(),
        truncations: learner.truncations(),
        snapshot: learner.tables().snapshot(g),
        stored_completion: stored.into_iter().enumerate().collect(),
    })
}

fn run_flat_trial(
    cfg: &ExperimentConfig,
    model: &TabularModel,
    trial: usize,
    (seed, eval_seed): (u64, u64),
) -> Result<TrialResult, LearnError> {
    let settings = FlatSettings {
        step_size: cfg.learning.default,
        exploration: cfg.exploration,
        gamma: cfg.gamma,
    };
    let mut learner = FlatQLearner::new(model, settings, seed)?;
    let mut evaluator = Evaluator {
        model,
        starts: cfg.eval_starts,
        episodes: cfg.eval_episodes,
        cap: cfg.eval_cap,
        rng: ChaCha8Rng::seed_from_u64(eval_seed),
    };
    let mut curve = vec![(0, evaluator.flat(learner.table()))];
    let mut env = EnvSession::new(model, cfg.step_cap).with_budget(cfg.budget);
    let interval = cfg.eval_interval;
    let mut truncations = 0;
    while env.total_steps() < cfg.budget {
        let stats = learner.run_episode(&mut env, &mut |table, steps| {
            if steps % interval == 0 {
                curve.push((steps, evaluator.flat(table)));
            }
        });
        if stats.truncated {
            truncations += 1;
        }
    }
    if curve.last().map(|p| p.0) != Some(env.total_steps()) {
        curve.push((env.total_steps(), evaluator.flat(learner.table())));
    }
    Ok(TrialResult {
        trial,
        seed,
        curve,
        episodes: learner.episodes(),
        truncations,
        snapshot: learner.table().snapshot(model),
        stored_completion: Vec::new(),
    })
}

/// Compiled model and the hierarchy a method learns over.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(TabularModel, Option<CompiledGraph>), ExperimentError> {
    let model = TabularModel::compile(&taxi_model(cfg.domain.taxi_config()))?;
    let graph = match cfg.method {
        Method::FlatQ => None,
        Method::MaxqAbstracted => Some(CompiledGraph::compile(&taxi_task_graph())?),
        Method::MaxqPlain => Some(CompiledGraph::compile(&taxi_task_graph().without_abstractions())?),
    };
    Ok((model, graph))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    let (model, graph) = prepare(cfg)?;
    let oracle = flat_value_iteration(&model, cfg.gamma)?;
    let seeds = trial_seeds(cfg.seed, cfg.trials);
    let trials: Vec<TrialResult> = seeds
        .par_iter()
        .enumerate()
        .map(|(k, &s)| {
            let r = match &graph {
                Some(g) => run_maxq_trial(cfg, &model, g, k, s),
                None => run_flat_trial(cfg, &model, k, s),
            };
            r.map_err(|source| ExperimentError::Trial {
                trial: k,
                seed: s.0,
                source,
            })
        })
        .collect::<Result<_, _>>()?;
    let curves: Vec<Vec<(u64, f64)>> = trials.iter().map(|t| t.curve.clone()).collect();
    Ok(ExperimentResult {
        config: cfg.clone(),
        curve: aggregate(&curves),
        trials,
        optimal_mean_return: oracle.mean_start_value(&model),
    })
}
