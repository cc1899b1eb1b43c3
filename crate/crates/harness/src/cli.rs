//! `rce-lab` subcommands. Exit codes: 0 success, 1 failed check or I/O
//! error, 2 usage error, 3 input that violates an invariant.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rce_core::envs::{collect, collect_uniform_transitions, sample_success_examples};
use rce_core::oracle::optimal_control;
use rce_core::rce::MetricRow;
use rce_core::robust::{numeric_inner_min, robust_report, heatmap_csv, InnerMinMethod};
use rce_core::{
    control_objective, discounted_occupancy, future_success_prob, make_env, EnvKind, LabError, OccupancyStart,
    Policy, TaskSpec,
};
use serde::{Deserialize, Serialize};

use crate::config::{env_spec_from_parts, parse_seeds, EnvParts, ExperimentConfig, Method};
use crate::error::{HarnessError, Result};
use crate::experiments::{prepare_inputs, run_method, two_region_run, Inputs, RunResult};
use crate::io::{self, CSV_SCHEMA_LINE};
use crate::sweep::{run_sweep, SweepAxis};
use crate::verify::{run_suite, Fault, SUITES};

#[derive(Parser, Debug)]
#[command(name = "rce-lab", version, about = "Tabular recursive classification of examples")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write an environment file.
    GenEnv(GenEnvArgs),
    /// Roll out a policy and write a dataset, optionally with success examples.
    Collect(CollectArgs),
    /// Train one method and write policy, classifier, metrics and result files.
    Train(TrainArgs),
    /// Exact objective and future-success table of a policy.
    OracleEval(OracleArgs),
    /// Worst-case user visitation and robust value of a policy.
    RobustEval(RobustArgs),
    /// Iterated RCE with per-round success-region shares.
    Iterate(IterateArgs),
    /// Run property suites over seeded random MDPs.
    Verify(VerifyArgs),
    /// Collect result files under a directory into one CSV.
    Report(ReportArgs),
    /// Sweep one configuration axis over seeds.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct GenEnvArgs {
    /// chain, random, grid or two_region.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    len: Option<usize>,
    #[arg(long)]
    two_way: bool,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    concentration: Option<f64>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct CollectArgs {
    #[arg(long)]
    env: PathBuf,
    #[arg(long, default_value_t = 1510)]
    steps: usize,
    #[arg(long, default_value_t = 151)]
    episode_len: usize,
    /// One-step samples of every state-action pair instead of rollouts.
    #[arg(long)]
    per_pair: Option<usize>,
    /// Behavior policy file; uniform when absent.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
    /// Also write success examples here.
    #[arg(long)]
    successes_out: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    num_successes: usize,
    /// uniform or data.
    #[arg(long, default_value = "uniform")]
    user_marginal: String,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    successes: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    online: bool,
    #[arg(short, long, default_value = "out")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long)]
    env: PathBuf,
    /// Policy file; the optimal policy when absent.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
}

#[derive(Args, Debug)]
struct RobustArgs {
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    successes: PathBuf,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    /// gradient or grid.
    #[arg(long, default_value = "gradient")]
    inner: String,
}

#[derive(Args, Debug)]
struct IterateArgs {
    /// Config file; the two-region preset when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long, default_value = "out")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Suite names, comma separated, or `all`.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value = "0..99")]
    seeds: String,
    /// Write the JSON summary here.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Config file; the corridor preset when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// n_step, num_successes or action_source.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values; may be empty.
    #[arg(long, default_value = "", allow_hyphen_values = true)]
    values: String,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

/// Contents of `result.json`; the objective is always an oracle evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultFile {
    pub method: String,
    pub seed: u64,
    pub gamma: f64,
    pub objective: f64,
    pub objective_source: String,
    pub iterations: usize,
    pub converged: bool,
}

pub const OBJECTIVE_SOURCE: &str = "control_objective";

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    cli_dispatch_to(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn cli_dispatch_to<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenEnv(a) => gen_env(a, out),
        Command::Collect(a) => collect_cmd(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::OracleEval(a) => oracle_eval(a, out),
        Command::RobustEval(a) => robust_eval(a, out),
        Command::Iterate(a) => iterate_cmd(a, out),
        Command::Verify(a) => verify_cmd(a, out),
        Command::Report(a) => report_cmd(a, out),
        Command::Sweep(a) => sweep_cmd(a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| HarnessError::io("stdout", e))
}

fn seed_or_env(seed: u64) -> Result<u64> {
    let mut cfg = ExperimentConfig {
        seeds: vec![seed],
        ..ExperimentConfig::default()
    };
    cfg.apply_env_seed_override()?;
    Ok(cfg.seeds[0])
}

fn task(gamma: f64) -> Result<TaskSpec> {
    Ok(TaskSpec::new(gamma)?)
}

fn gen_env(a: GenEnvArgs, out: &mut dyn Write) -> Result<()> {
    let parts = EnvParts {
        len: a.len,
        two_way: a.two_way.then_some(true),
        noise: a.noise,
        num_states: a.states,
        num_actions: a.actions,
        concentration: a.concentration,
        size: a.size,
    };
    let mut spec = env_spec_from_parts(&a.kind, parts, None)?;
    spec.seed = seed_or_env(a.seed)?;
    let mdp = make_env(&spec)?;
    io::write_text(&a.output, &io::env_json(Some(&spec), &mdp))?;
    emit(out, &format!("wrote {} ({} states, {} actions)\n", a.output.display(), mdp.num_states(), mdp.num_actions()))
}

fn collect_cmd(a: CollectArgs, out: &mut dyn Write) -> Result<()> {
    let (spec, mdp) = io::read_env(&a.env)?;
    let seed = seed_or_env(a.seed)?;
    let (n, m) = (mdp.num_states(), mdp.num_actions());
    let mut data = match a.per_pair {
        Some(k) => collect_uniform_transitions(mdp.dynamics(), k, seed),
        None => {
            let policy = match &a.policy {
                Some(path) => io::read_policy(path)?,
                None => Policy::uniform(n, m),
            };
            io::check_shape("policy", (policy.num_states(), policy.num_actions()), &mdp)?;
            collect(mdp.dynamics(), &policy, a.steps, a.episode_len, seed)?
        }
    };
    data.env = spec;
    io::write_dataset(&a.output, &data)?;
    emit(out, &format!("wrote {} ({} transitions)\n", a.output.display(), data.num_transitions()))?;
    if let Some(path) = &a.successes_out {
        let marginal = match a.user_marginal.as_str() {
            "uniform" => vec![1.0 / n as f64; n],
            "data" => data.state_marginal(),
            other => return Err(HarnessError::Usage(format!("unknown user marginal `{other}`"))),
        };
        let successes = sample_success_examples(&mdp, &marginal, a.num_successes, seed)?;
        io::write_json(path, &successes)?;
        emit(out, &format!("wrote {} ({} examples)\n", path.display(), successes.examples.len()))?;
    }
    Ok(())
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut text = format!("{CSV_SCHEMA_LINE}\niteration,objective,bellman_residual,policy_delta,wallclock_ns\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iteration,
            opt(r.objective),
            opt(r.bellman_residual),
            r.policy_delta,
            r.wallclock_ns
        ));
    }
    text
}

fn load_config(path: Option<&Path>, preset: &str) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::preset(preset)?,
    };
    cfg.apply_env_seed_override()?;
    Ok(cfg)
}

fn needs_data(method: Method, online: bool) -> bool {
    match method {
        Method::RceStochastic => !online,
        Method::Sqil | Method::Density => false,
        _ => true,
    }
}

fn missing(what: &str, method: Method) -> HarnessError {
    LabError::MissingInput(format!("{what} (required by {method})")).into()
}

fn write_run(dir: &Path, run: &RunResult, gamma: f64) -> Result<()> {
    io::write_json(&dir.join("policy.json"), &run.policy)?;
    if let Some(cls) = &run.classifier {
        io::write_json(&dir.join("classifier.json"), cls)?;
        io::write_text(&dir.join("metrics.csv"), &metrics_csv(&run.metrics))?;
    }
    io::write_json(
        &dir.join("result.json"),
        &ResultFile {
            method: run.method.to_string(),
            seed: run.seed,
            gamma,
            objective: run.objective,
            objective_source: OBJECTIVE_SOURCE.to_string(),
            iterations: run.iterations,
            converged: run.converged,
        },
    )
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), "default")?;
    if let Some(m) = &a.method {
        cfg.method = m.parse()?;
    }
    if a.online {
        cfg.online = true;
    }
    let seed = match a.seed {
        Some(s) => seed_or_env(s)?,
        None => cfg.seeds[0],
    };
    let (_, mdp) = io::read_env(&a.env)?;
    let successes = match &a.successes {
        Some(p) => io::read_successes(p)?,
        None => return Err(missing("--successes", cfg.method)),
    };
    if successes.num_states() != mdp.num_states() {
        return Err(HarnessError::input(
            "success examples match the environment",
            format!("{} states vs {}", successes.num_states(), mdp.num_states()),
        ));
    }
    let data = match &a.data {
        Some(p) => io::read_dataset(p)?,
        None if needs_data(cfg.method, cfg.online) => return Err(missing("--data", cfg.method)),
        None => rce_core::TransitionDataset::new(mdp.num_states(), mdp.num_actions(), seed),
    };
    io::check_shape("dataset", (data.num_states, data.num_actions), &mdp)?;
    let inputs = Inputs { mdp, data, successes };
    let run = run_method(&cfg, &inputs, seed)?;
    write_run(&a.output, &run, cfg.train.gamma)?;
    emit(
        out,
        &format!("method={} seed={} objective={} dir={}\n", run.method, seed, run.objective, a.output.display()),
    )
}

#[derive(Serialize)]
struct OracleReport {
    gamma: f64,
    objective: f64,
    optimal_objective: f64,
    occupancy: Vec<f64>,
    future_success: Vec<Vec<f64>>,
}

fn oracle_eval(a: OracleArgs, out: &mut dyn Write) -> Result<()> {
    let (_, mdp) = io::read_env(&a.env)?;
    let task = task(a.gamma)?;
    let (optimal, optimal_objective) = optimal_control(&mdp, &task)?;
    let policy = match &a.policy {
        Some(p) => io::read_policy(p)?,
        None => optimal,
    };
    io::check_shape("policy", (policy.num_states(), policy.num_actions()), &mdp)?;
    let q = future_success_prob(&mdp, &task, &policy)?;
    let report = OracleReport {
        gamma: a.gamma,
        objective: control_objective(&mdp, &task, &policy)?,
        optimal_objective,
        occupancy: discounted_occupancy(mdp.dynamics(), &task, &policy, OccupancyStart::Initial)?,
        future_success: (0..mdp.num_states()).map(|s| q.row(s).to_vec()).collect(),
    };
    emit(out, &io::to_json_pretty(&report))
}

fn robust_eval(a: RobustArgs, out: &mut dyn Write) -> Result<()> {
    let (_, mdp) = io::read_env(&a.env)?;
    let task = task(a.gamma)?;
    let policy = io::read_policy(&a.policy)?;
    io::check_shape("policy", (policy.num_states(), policy.num_actions()), &mdp)?;
    let successes = io::read_successes(&a.successes)?;
    let rho = discounted_occupancy(mdp.dynamics(), &task, &policy, OccupancyStart::Initial)?;
    let method = match a.inner.as_str() {
        "gradient" => InnerMinMethod::default(),
        "grid" => InnerMinMethod::Grid {
            resolution: 200,
            rounds: 8,
        },
        other => return Err(HarnessError::Usage(format!("unknown inner minimizer `{other}`"))),
    };
    let value = serde_json::json!({
        "gamma": a.gamma,
        "objective": control_objective(&mdp, &task, &policy)?,
        "report": robust_report(&rho, &successes.dist, successes.prior)?,
        "numeric": numeric_inner_min(&rho, &successes.dist, method)?,
    });
    emit(out, &io::to_json_pretty(&value))
}

fn iterate_cmd(a: IterateArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), "two_region")?;
    cfg.method = Method::RobustIterated;
    let seed = match a.seed {
        Some(s) => seed_or_env(s)?,
        None => cfg.seeds[0],
    };
    if let EnvKind::Grid2d { width, .. } = cfg.env.kind {
        if cfg.env_file.is_none() {
            let result = two_region_run(&cfg, seed)?;
            let mut shares = format!("{CSV_SCHEMA_LINE}\nround,region,share\n");
            for (k, round) in result.per_round.iter().enumerate() {
                for (r, share) in round.iter().enumerate() {
                    shares.push_str(&format!("{k},{r},{share}\n"));
                }
            }
            io::write_text(&a.output.join("shares.csv"), &shares)?;
            let run = &result.run;
            let last = run.occupancies.last().expect("at least one round");
            io::write_text(
                &a.output.join("heatmap.csv"),
                &format!("{CSV_SCHEMA_LINE}\n{}", heatmap_csv(last, width)),
            )?;
            io::write_json(&a.output.join("iterate.json"), &result)?;
            write_run(&a.output, run, cfg.train.gamma)?;
            return emit(
                out,
                &format!(
                    "offline shares {:?}, iterated shares {:?}, objective {}\n",
                    result.offline_shares, result.iterated_shares, run.objective
                ),
            );
        }
    }
    let inputs = prepare_inputs(&cfg, seed)?;
    let run = run_method(&cfg, &inputs, seed)?;
    write_run(&a.output, &run, cfg.train.gamma)?;
    emit(out, &format!("rounds {} objective {}\n", run.iterations, run.objective))
}

fn verify_cmd(a: VerifyArgs, out: &mut dyn Write) -> Result<()> {
    let names: Vec<String> = if a.suite.trim() == "all" {
        SUITES.iter().map(|s| s.to_string()).collect()
    } else {
        a.suite
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    };
    if names.is_empty() {
        return Err(HarnessError::Usage("empty suite selection".into()));
    }
    let seeds = parse_seeds(&a.seeds)?;
    if seeds.is_empty() {
        return Err(HarnessError::Usage("empty seed selection".into()));
    }
    let fault: Option<Fault> = a.inject_fault.as_deref().map(str::parse).transpose()?;
    let mut reports = Vec::new();
    for name in &names {
        let report = run_suite(name, &seeds, fault)?;
        emit(out, &format!("{}\n", report.summary_line()))?;
        reports.push(report);
    }
    if let Some(path) = &a.json {
        io::write_json(path, &reports)?;
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({})", r.suite, r.violation.as_deref().unwrap_or("unnamed")))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Failed(failed.join("; ")))
    }
}

fn find_results(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::io(dir.display().to_string(), e))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for path in paths {
        if path.is_dir() {
            find_results(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == "result.json") {
            found.push(path);
        }
    }
    Ok(())
}

fn report_cmd(a: ReportArgs, out: &mut dyn Write) -> Result<()> {
    let mut files = Vec::new();
    find_results(&a.dir, &mut files)?;
    let mut text = format!("{CSV_SCHEMA_LINE}\nmethod,seed,gamma,objective,objective_source,file\n");
    for path in &files {
        let r: ResultFile = io::read_json(path)?;
        if r.objective_source != OBJECTIVE_SOURCE {
            return Err(HarnessError::input(
                "reported objectives come from the oracle",
                format!("{} has objective_source `{}`", path.display(), r.objective_source),
            ));
        }
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method,
            r.seed,
            r.gamma,
            r.objective,
            r.objective_source,
            path.display()
        ));
    }
    match &a.output {
        Some(path) => io::write_text(path, &text),
        None => emit(out, &text),
    }
}

fn sweep_cmd(a: SweepArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), "corridor")?;
    if let Some(s) = &a.seeds {
        cfg.seeds = parse_seeds(s)?;
        cfg.validate()?;
    }
    let axis = SweepAxis::parse(&a.axis, &a.values)?;
    let csv = run_sweep(&cfg, &axis)?.to_csv();
    match &a.output {
        Some(path) => io::write_text(path, &csv),
        None => emit(out, &csv),
    }
}
