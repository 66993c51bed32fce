use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use maxq::audit::{
    audit_graph, count_values, flat_value_iteration, hierarchical_dp_oracle, AuditOptions, CountMode,
};
use maxq::experiment::csv::write_csv;
use maxq::experiment::{parse_config, run_experiment, Domain};
use maxq::graph::CompiledGraph;
use maxq::mdp::TabularModel;
use maxq::taxi::{taxi_model, taxi_task_graph};

/// Environment variable that overrides the output directory.
const OUT_DIR_ENV: &str = "MAXQ_OUT_DIR";

#[derive(Parser)]
#[command(name = "maxq", version, about = "MAXQ-Q learning experiments and abstraction audits")]
struct Cli {
    /// Override the master seed (run) or the policy-sample seed (audit).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured experiment and write CSV, summary and table snapshots.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check all five abstraction conditions on the shipped hierarchy.
    Audit {
        domain: String,
        /// Random abstract policies sampled in addition to the optimal one.
        #[arg(long, default_value_t = 20)]
        policies: usize,
    },
    /// Count stored values: flat, maxq_plain or maxq_abstracted.
    Count { domain: String, mode: String },
    /// Solve the domain exactly and write flat and hierarchical solutions.
    Oracle {
        domain: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
    },
}

fn out_dir(flag: Option<PathBuf>) -> Result<PathBuf> {
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            return Ok(PathBuf::from(dir));
        }
    }
    flag.context(format!("no output directory (pass --out or set {OUT_DIR_ENV})"))
}

fn domain(s: &str) -> Result<Domain> {
    s.parse::<Domain>().map_err(|m| anyhow::anyhow!("domain `{s}`: {m}"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut cfg = parse_config(&text).with_context(|| format!("config {}", config.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out_dir(out)?;
    fs::create_dir_all(dir.join("tables")).with_context(|| format!("creating {}", dir.display()))?;
    let result = run_experiment(&cfg)?;
    write_csv(&result.curve, &dir.join("curve.csv"))?;
    let mut trials = String::from("trial,steps,mean_return\n");
    for t in &result.trials {
        for (steps, r) in &t.curve {
            trials.push_str(&format!("{},{steps},{r:?}\n", t.trial));
        }
    }
    write(&dir.join("trials.csv"), &trials)?;
    for t in &result.trials {
        write(&dir.join("tables").join(format!("trial-{:03}.txt", t.trial)), &t.snapshot)?;
    }
    write(&dir.join("config.txt"), &cfg.to_text())?;
    let summary = result.summary();
    write(&dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn audit(domain_name: &str, policies: usize, seed: Option<u64>) -> Result<()> {
    let d = domain(domain_name)?;
    let model = TabularModel::compile(&taxi_model(d.taxi_config()))?;
    let g = CompiledGraph::compile(&taxi_task_graph())?;
    let mut options = AuditOptions {
        random_policies: policies,
        ..AuditOptions::default()
    };
    if let Some(s) = seed {
        options.policy_seed = s;
    }
    let report = audit_graph(&model, &g, &options)?;
    print!("{}", report.to_text());
    if !report.passed() {
        bail!("audit failed");
    }
    Ok(())
}

fn count(domain_name: &str, mode: &str) -> Result<()> {
    domain(domain_name)?;
    let mode: CountMode = mode.parse().map_err(anyhow::Error::msg)?;
    print!("{}", count_values(&taxi_task_graph(), mode)?);
    Ok(())
}

fn oracle(domain_name: &str, out: Option<PathBuf>, gamma: f64) -> Result<()> {
    let d = domain(domain_name)?;
    let dir = out_dir(out)?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let model = TabularModel::compile(&taxi_model(d.taxi_config()))?;
    let g = CompiledGraph::compile(&taxi_task_graph())?;
    let flat = flat_value_iteration(&model, gamma)?;
    let hier = hierarchical_dp_oracle(&model, &g, gamma)?;
    write(&dir.join("flat.txt"), &flat.to_text(&model))?;
    write(&dir.join("hierarchical.txt"), &hier.to_text(&g))?;
    let worst = (0..model.num_states())
        .filter(|&s| !model.is_terminal(s))
        .map(|s| (flat.values[s] - hier.root_value(&g, s)).abs())
        .fold(0.0, f64::max);
    println!("flat residual: {:e} after {} sweeps", flat.residual, flat.sweeps);
    println!("mean optimal return over start states: {:.6}", flat.mean_start_value(&model));
    println!("max |V_flat - V_root|: {worst:e}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out } => run(&config, out, cli.seed),
        Command::Audit { domain, policies } => audit(&domain, policies, cli.seed),
        Command::Count { domain, mode } => count(&domain, &mode),
        Command::Oracle { domain, out, gamma } => oracle(&domain, out, gamma),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace(['\n', '\t'], " ");
            eprintln!("error\t{msg}");
            ExitCode::FAILURE
        }
    }
}
