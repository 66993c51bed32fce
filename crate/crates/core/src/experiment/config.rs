//! `key = value` experiment configuration files.
//!
//! Required keys: `method`, `domain`, `trials`, `budget`. Everything else
//! has a default; see [`ExperimentConfig::default_for`]. Lines starting with
//! `#` and text after a `#` are comments.
//!
//! Step sizes are written `harmonic:C` or `constant:ALPHA`. The key
//! `step_size` sets the default; `step_size.NAME` overrides it for one
//! subtask family or primitive action.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::learner::{ExplorationSchedule, LearningSchedule, StepSize, DEFAULT_STEP_CAP};
use crate::taxi::{TaxiConfig, DEFAULT_NOISE};

pub const REQUIRED_KEYS: [&str; 4] = ["method", "domain", "trials", "budget"];

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("missing required keys: {}", .0.join(", "))]
    Missing(Vec<String>),
    #[error("invalid value for `{key}`: {message}")]
    Range { key: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    FlatQ,
    MaxqPlain,
    MaxqAbstracted,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::FlatQ => "flat-q",
            Method::MaxqPlain => "maxq-plain",
            Method::MaxqAbstracted => "maxq-abstracted",
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flat-q" => Ok(Method::FlatQ),
            "maxq-plain" => Ok(Method::MaxqPlain),
            "maxq-abstracted" => Ok(Method::MaxqAbstracted),
            _ => Err("expected flat-q, maxq-plain or maxq-abstracted".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Domain {
    TaxiDeterministic,
    TaxiNoisy(f64),
}

impl Domain {
    pub fn taxi_config(self) -> TaxiConfig {
        match self {
            Domain::TaxiDeterministic => TaxiConfig::deterministic(),
            Domain::TaxiNoisy(p) => TaxiConfig::noisy(p),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::TaxiDeterministic => f.write_str("taxi-deterministic"),
            Domain::TaxiNoisy(p) => write!(f, "taxi-noisy({p})"),
        }
    }
}

impl FromStr for Domain {
    type Err = String;

    /// `taxi`, `taxi-deterministic`, `taxi-noisy` or `taxi-noisy(P)`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "taxi-deterministic" | "taxi" => return Ok(Domain::TaxiDeterministic),
            "taxi-noisy" => return Ok(Domain::TaxiNoisy(DEFAULT_NOISE)),
            _ => {}
        }
        let p = s
            .strip_prefix("taxi-noisy(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or("expected taxi-deterministic, taxi-noisy or taxi-noisy(P)")?;
        let p: f64 = p.trim().parse().map_err(|_| format!("bad noise level `{p}`"))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(format!("noise {p} outside [0, 1]"));
        }
        Ok(Domain::TaxiNoisy(p))
    }
}

/// Which start states greedy evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalStarts {
    /// `eval_episodes` start states drawn uniformly.
    Sampled,
    /// Every start state once.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub domain: Domain,
    pub gamma: f64,
    pub trials: usize,
    /// Primitive steps of learning per trial.
    pub budget: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub eval_starts: EvalStarts,
    pub eval_cap: u64,
    pub step_cap: u64,
    pub learning: LearningSchedule,
    pub exploration: ExplorationSchedule,
    pub seed: u64,
    /// Margin below the optimal mean return that counts as near-optimal.
    pub near_optimal_margin: f64,
}

impl ExperimentConfig {
    pub fn default_for(method: Method, domain: Domain, trials: usize, budget: u64) -> Self {
        Self {
            method,
            domain,
            gamma: 1.0,
            trials,
            budget,
            eval_interval: 10_000,
            eval_episodes: 100,
            eval_starts: EvalStarts::Sampled,
            eval_cap: 1_000,
            step_cap: DEFAULT_STEP_CAP,
            learning: LearningSchedule::uniform(StepSize::Harmonic(20.0)),
            exploration: ExplorationSchedule {
                initial: 50.0,
                decay: 0.99,
                minimum: 0.5,
            },
            seed: 0,
            near_optimal_margin: 1.0,
        }
    }

    /// Renders the config in the file format; parsing the output gives back
    /// an equal config.
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("method = {}", self.method.as_str()),
            format!("domain = {}", self.domain),
            format!("trials = {}", self.trials),
            format!("budget = {}", self.budget),
            format!("gamma = {}", self.gamma),
            format!("eval_interval = {}", self.eval_interval),
            format!("eval_episodes = {}", self.eval_episodes),
            format!(
                "eval_starts = {}",
                match self.eval_starts {
                    EvalStarts::Sampled => "sampled",
                    EvalStarts::All => "all",
                }
            ),
            format!("eval_cap = {}", self.eval_cap),
            format!("step_cap = {}", self.step_cap),
            format!("step_size = {}", self.learning.default),
        ];
        for (name, rule) in &self.learning.overrides {
            lines.push(format!("step_size.{name} = {rule}"));
        }
        lines.extend([
            format!("temperature = {}", self.exploration.initial),
            format!("temperature_decay = {}", self.exploration.decay),
            format!("temperature_min = {}", self.exploration.minimum),
            format!("seed = {}", self.seed),
            format!("near_optimal_margin = {}", self.near_optimal_margin),
        ]);
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

fn parse_step(v: &str) -> Result<StepSize, String> {
    let (kind, param) = v
        .split_once(':')
        .ok_or("expected harmonic:C or constant:ALPHA")?;
    let x: f64 = param
        .trim()
        .parse()
        .map_err(|_| format!("`{}` is not a number", param.trim()))?;
    let rule = match kind.trim() {
        "harmonic" => StepSize::Harmonic(x),
        "constant" => StepSize::Constant(x),
        other => return Err(format!("unknown step-size rule `{other}`")),
    };
    match rule {
        StepSize::Harmonic(c) if !(c > 0.0 && c.is_finite()) => Err("harmonic C must be positive".into()),
        StepSize::Constant(a) if !(0.0..=1.0).contains(&a) => Err("constant alpha must be in [0, 1]".into()),
        r => Ok(r),
    }
}

fn range(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Range {
        key: key.to_string(),
        message: message.into(),
    }
}

fn number<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| range(key, format!("`{v}` is not a valid number")))
}

const KNOWN: [&str; 18] = [
    "method",
    "domain",
    "trials",
    "budget",
    "gamma",
    "eval_interval",
    "eval_episodes",
    "eval_starts",
    "eval_cap",
    "step_cap",
    "step_size",
    "temperature",
    "temperature_decay",
    "temperature_min",
    "seed",
    "near_optimal_margin",
    // accepted for readability in shipped files
    "name",
    "note",
];

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut values: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: line_no,
            message: format!("expected `key = value`, found `{line}`"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(ConfigError::Syntax {
                line: line_no,
                message: format!("bad key `{k}`"),
            });
        }
        if v.is_empty() {
            return Err(ConfigError::Syntax {
                line: line_no,
                message: format!("missing value for `{k}`"),
            });
        }
        if !KNOWN.contains(&k) && !k.starts_with("step_size.") {
            return Err(ConfigError::UnknownKey {
                line: line_no,
                key: k.to_string(),
            });
        }
        if values.insert(k.to_string(), (line_no, v.to_string())).is_some() {
            return Err(ConfigError::Duplicate {
                line: line_no,
                key: k.to_string(),
            });
        }
    }

    let missing: Vec<String> = REQUIRED_KEYS
        .iter()
        .filter(|k| !values.contains_key(**k))
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(ConfigError::Missing(missing));
    }
    let get = |k: &str| values.get(k).map(|(_, v)| v.as_str());

    let method: Method = get("method").unwrap_or_default().parse().map_err(|m: String| range("method", m))?;
    let domain: Domain = get("domain").unwrap_or_default().parse().map_err(|m: String| range("domain", m))?;
    let trials: usize = number("trials", get("trials").unwrap_or_default())?;
    if trials == 0 {
        return Err(range("trials", "must be at least 1"));
    }
    let budget: u64 = number("budget", get("budget").unwrap_or_default())?;
    let mut c = ExperimentConfig::default_for(method, domain, trials, budget);

    if let Some(v) = get("gamma") {
        c.gamma = number("gamma", v)?;
        if !(c.gamma > 0.0 && c.gamma <= 1.0) {
            return Err(range("gamma", format!("{} is outside (0, 1]", c.gamma)));
        }
    }
    if let Some(v) = get("eval_interval") {
        c.eval_interval = number("eval_interval", v)?;
        if c.eval_interval == 0 {
            return Err(range("eval_interval", "must be positive"));
        }
    }
    if let Some(v) = get("eval_episodes") {
        c.eval_episodes = number("eval_episodes", v)?;
        if c.eval_episodes == 0 {
            return Err(range("eval_episodes", "must be positive"));
        }
    }
    if let Some(v) = get("eval_starts") {
        c.eval_starts = match v {
            "sampled" => EvalStarts::Sampled,
            "all" => EvalStarts::All,
            _ => return Err(range("eval_starts", "expected sampled or all")),
        };
    }
    if let Some(v) = get("eval_cap") {
        c.eval_cap = number("eval_cap", v)?;
        if c.eval_cap == 0 {
            return Err(range("eval_cap", "must be positive"));
        }
    }
    if let Some(v) = get("step_cap") {
        c.step_cap = number("step_cap", v)?;
        if c.step_cap == 0 {
            return Err(range("step_cap", "must be positive"));
        }
    }
    if let Some(v) = get("step_size") {
        c.learning.default = parse_step(v).map_err(|m| range("step_size", m))?;
    }
    for (k, (_, v)) in values.range("step_size.".to_string()..) {
        let Some(name) = k.strip_prefix("step_size.") else {
            break;
        };
        if name.is_empty() {
            return Err(range(k, "missing subtask or action name"));
        }
        let rule = parse_step(v).map_err(|m| range(k, m))?;
        c.learning = c.learning.with(name, rule);
    }
    if let Some(v) = get("temperature") {
        c.exploration.initial = number("temperature", v)?;
    }
    if let Some(v) = get("temperature_decay") {
        c.exploration.decay = number("temperature_decay", v)?;
    }
    if let Some(v) = get("temperature_min") {
        c.exploration.minimum = number("temperature_min", v)?;
    }
    if !(c.exploration.initial > 0.0 && c.exploration.initial.is_finite()) {
        return Err(range("temperature", "must be positive"));
    }
    if !(c.exploration.decay > 0.0 && c.exploration.decay <= 1.0) {
        return Err(range("temperature_decay", "must be in (0, 1]"));
    }
    if !(c.exploration.minimum > 0.0 && c.exploration.minimum <= c.exploration.initial) {
        return Err(range("temperature_min", "must be positive and at most temperature"));
    }
    if let Some(v) = get("seed") {
        c.seed = number("seed", v)?;
    }
    if let Some(v) = get("near_optimal_margin") {
        c.near_optimal_margin = number("near_optimal_margin", v)?;
        if !(c.near_optimal_margin >= 0.0) {
            return Err(range("near_optimal_margin", "must be non-negative"));
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = "method = maxq-abstracted\ndomain = taxi-deterministic\ntrials = 20\nbudget = 1000\n";

    #[test]
    fn empty_file_lists_required_keys() {
        match parse_config("") {
            Err(ConfigError::Missing(keys)) => assert_eq!(keys, REQUIRED_KEYS.to_vec()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn basic_values() {
        let c = parse_config(BASIC).unwrap();
        assert_eq!(c.method, Method::MaxqAbstracted);
        assert_eq!(c.domain, Domain::TaxiDeterministic);
        assert_eq!(c.trials, 20);
        assert_eq!(c.budget, 1000);
        assert_eq!(c.gamma, 1.0);
    }

    #[test]
    fn gamma_out_of_range_names_gamma() {
        let err = parse_config(&format!("{BASIC}gamma = 1.5\n")).unwrap_err();
        assert!(matches!(&err, ConfigError::Range { key, .. } if key == "gamma"), "{err}");
        assert!(err.to_string().contains("gamma"));
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = parse_config("# header\nmethod maxq-plain\n").unwrap_err();
        assert_eq!(
            err,
            ConfigError::Syntax {
                line: 2,
                message: "expected `key = value`, found `method maxq-plain`".into()
            }
        );
        let err = parse_config(&format!("{BASIC}colour = blue\n")).unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey { line: 5, key: "colour".into() });
    }

    #[test]
    fn step_sizes_and_overrides() {
        let c = parse_config(&format!(
            "{BASIC}step_size = constant:0.3 # practical\nstep_size.Navigate = harmonic:50\n"
        ))
        .unwrap();
        assert_eq!(c.learning.rule("Root"), StepSize::Constant(0.3));
        assert_eq!(c.learning.rule("Navigate"), StepSize::Harmonic(50.0));
        assert!(parse_config(&format!("{BASIC}step_size = constant:2\n")).is_err());
        assert!(parse_config(&format!("{BASIC}step_size = fast\n")).is_err());
    }

    #[test]
    fn domains() {
        assert_eq!("taxi-noisy".parse::<Domain>().unwrap(), Domain::TaxiNoisy(0.2));
        assert_eq!("taxi-noisy(0.1)".parse::<Domain>().unwrap(), Domain::TaxiNoisy(0.1));
        assert!("taxi-noisy(2)".parse::<Domain>().is_err());
        assert!("grid".parse::<Domain>().is_err());
    }

    #[test]
    fn text_round_trip() {
        let c = parse_config(&format!(
            "{BASIC}step_size.Get = constant:0.5\neval_starts = all\nseed = 9\n"
        ))
        .unwrap();
        assert_eq!(parse_config(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn zero_trials_rejected() {
        let err = parse_config("method = flat-q\ndomain = taxi\ntrials = 0\nbudget = 5\n").unwrap_err();
        assert!(matches!(err, ConfigError::Range { key, .. } if key == "trials"));
    }
}
