//! Experiment protocols shared by the CLI, sweeps and the acceptance suite.
//! Every objective reported here comes from `control_objective` on the
//! true MDP.

use rce_core::baselines::{
    density_reward, skewed_counterexample, solve_baseline, sqil_reward, vice_iterative, vice_ratio_reward,
    ViceOptions,
};
use rce_core::envs::{collect, collect_uniform_transitions, sample_success_examples, EnvCollector};
use rce_core::oracle::exhaustive_optimum;
use rce_core::rce::{train, MetricRow, TrainHooks};
use rce_core::robust::{iterated_rce, region_shares, FixedPointReport, IteratedConfig};
use rce_core::{
    control_objective, discounted_occupancy, future_success_prob, make_env, Classifier, EnvKind,
    OccupancyStart, Policy, SuccessExampleSet, TabularMdp, TrainMode, TransitionDataset,
};
use serde::Serialize;

use crate::config::{ExperimentConfig, Method, UserMarginal};
use crate::error::{HarnessError, Result};

/// Environment, transition data and success examples for one seed.
pub struct Inputs {
    pub mdp: TabularMdp,
    pub data: TransitionDataset,
    pub successes: SuccessExampleSet,
}

pub fn load_mdp(cfg: &ExperimentConfig) -> Result<TabularMdp> {
    match &cfg.env_file {
        Some(path) => Ok(crate::io::read_env(path)?.1),
        None => Ok(make_env(&cfg.env)?),
    }
}

/// Uniform-policy data (rollouts, or `per_pair` samples of every pair)
/// and success examples drawn under the configured user marginal.
pub fn prepare_inputs(cfg: &ExperimentConfig, seed: u64) -> Result<Inputs> {
    let mdp = load_mdp(cfg)?;
    let dynamics = mdp.dynamics();
    let (n, m) = (mdp.num_states(), mdp.num_actions());
    let mut data = if cfg.data.per_pair > 0 {
        collect_uniform_transitions(dynamics, cfg.data.per_pair, seed)
    } else {
        collect(dynamics, &Policy::uniform(n, m), cfg.data.steps, cfg.data.episode_len, seed)?
    };
    data.env = Some(cfg.env.clone());
    let marginal = match cfg.successes.marginal {
        UserMarginal::Uniform => vec![1.0 / n as f64; n],
        UserMarginal::Data => data.state_marginal(),
    };
    let successes = sample_success_examples(&mdp, &marginal, cfg.successes.count, seed)?;
    Ok(Inputs { mdp, data, successes })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    /// `control_objective` of `policy` on the true MDP.
    pub objective: f64,
    pub policy: Policy,
    #[serde(skip)]
    pub classifier: Option<Classifier>,
    #[serde(skip)]
    pub metrics: Vec<MetricRow>,
    pub iterations: usize,
    pub converged: bool,
    /// Exact state occupancy of each outer-iteration policy (iterated methods).
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub occupancies: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_point: Option<FixedPointReport>,
}

/// Runs one method on prepared inputs.
pub fn run_method(cfg: &ExperimentConfig, inputs: &Inputs, seed: u64) -> Result<RunResult> {
    let mdp = &inputs.mdp;
    let dynamics = mdp.dynamics();
    let mut tc = cfg.train;
    tc.seed = seed;
    let task = tc.task();
    let mut result = RunResult {
        method: cfg.method,
        seed,
        objective: 0.0,
        policy: Policy::uniform(mdp.num_states(), mdp.num_actions()),
        classifier: None,
        metrics: Vec::new(),
        iterations: 0,
        converged: true,
        occupancies: Vec::new(),
        fixed_point: None,
    };
    let marginal = inputs.data.state_marginal();
    match cfg.method {
        Method::RceExpected | Method::RceStochastic => {
            let mode = if cfg.method == Method::RceExpected {
                TrainMode::Expected
            } else {
                TrainMode::Stochastic
            };
            let mut collector = EnvCollector::new(
                dynamics,
                cfg.collector_episode_len,
                seed.wrapping_add(cfg.collector_seed_offset),
            );
            let objective_of = |pi: &Policy| control_objective(mdp, &task, pi).unwrap_or(f64::NAN);
            let hooks = TrainHooks {
                evaluate: Some(&objective_of),
                collector: if cfg.online { Some(&mut collector) } else { None },
                ..TrainHooks::default()
            };
            let out = train(&inputs.data, &inputs.successes, &tc, mode, cfg.online, hooks)?;
            result.policy = out.policy;
            result.classifier = Some(out.classifier);
            result.metrics = out.metrics;
            result.iterations = out.iterations;
            result.converged = out.converged || mode == TrainMode::Stochastic;
        }
        Method::Sqil => {
            result.policy = solve_baseline(dynamics, &task, &sqil_reward(&inputs.successes, mdp.num_states()))?.policy;
        }
        Method::Vice => {
            let rm = vice_ratio_reward(&inputs.successes, &marginal, ViceOptions::default())?;
            result.policy = solve_baseline(dynamics, &task, &rm)?.policy;
        }
        Method::ViceIterative => {
            let rounds = vice_iterative(dynamics, &task, &inputs.successes, &marginal, cfg.iterate.outer_iters, false)?;
            result.iterations = rounds.len();
            result.policy = rounds.last().expect("at least one round").policy.clone();
        }
        Method::Density => {
            result.policy = solve_baseline(dynamics, &task, &density_reward(&inputs.successes))?.policy;
        }
        Method::RobustIterated => {
            let icfg = IteratedConfig {
                train: tc,
                mode: if cfg.iterate.stochastic {
                    TrainMode::Stochastic
                } else {
                    TrainMode::Expected
                },
                outer_iters: cfg.iterate.outer_iters,
                steps_per_iter: cfg.iterate.steps_per_iter,
                episode_len: cfg.iterate.episode_len,
                seed,
                fixed_point_tol: cfg.iterate.fixed_point_tol,
            };
            let out = iterated_rce(dynamics, &inputs.successes, &inputs.data, &icfg)?;
            result.iterations = out.policies.len();
            result.policy = out.policies.last().expect("at least one round").clone();
            result.occupancies = out.occupancies;
            result.fixed_point = Some(out.fixed_point);
        }
    }
    result.objective = control_objective(mdp, &task, &result.policy)?;
    Ok(result)
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    let inputs = prepare_inputs(cfg, seed)?;
    run_method(cfg, &inputs, seed)
}

/// Success-region shares of the first (offline) and last outer iteration.
#[derive(Debug, Clone, Serialize)]
pub struct TwoRegionResult {
    pub seed: u64,
    pub offline_shares: Vec<f64>,
    pub iterated_shares: Vec<f64>,
    pub per_round: Vec<Vec<f64>>,
    pub fixed_point: FixedPointReport,
    #[serde(skip)]
    pub run: RunResult,
}

/// The first outer iteration trains on the initial data alone, so it is
/// exactly the offline run.
pub fn two_region_run(cfg: &ExperimentConfig, seed: u64) -> Result<TwoRegionResult> {
    let regions = match &cfg.env.kind {
        EnvKind::Grid2d { width, regions, .. } => regions.iter().map(|r| r.states(*width)).collect::<Vec<_>>(),
        _ => return Err(HarnessError::input("two-region run needs a grid", format!("{:?}", cfg.env.kind))),
    };
    let mut cfg = cfg.clone();
    cfg.method = Method::RobustIterated;
    let run = run_seed(&cfg, seed)?;
    let per_round: Vec<Vec<f64>> = run.occupancies.iter().map(|rho| region_shares(rho, &regions)).collect();
    Ok(TwoRegionResult {
        seed,
        offline_shares: per_round.first().cloned().unwrap_or_default(),
        iterated_shares: per_round.last().cloned().unwrap_or_default(),
        per_round,
        fixed_point: run.fixed_point.clone().expect("iterated run reports a fixed point"),
        run,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyResult {
    pub seeds: usize,
    /// Seed-averaged odds minus the exact future-success probability, sup norm.
    pub sup_error: f64,
    pub mean_ratio: Vec<f64>,
    pub exact: Vec<f64>,
}

/// Stochastic policy evaluation of the uniform policy against the exact fixed point.
pub fn stochastic_consistency(cfg: &ExperimentConfig) -> Result<ConsistencyResult> {
    let mdp = load_mdp(cfg)?;
    let pi = Policy::uniform(mdp.num_states(), mdp.num_actions());
    let exact = future_success_prob(&mdp, &cfg.train.task(), &pi)?.values;
    let mut mean = vec![0.0; exact.len()];
    for &seed in &cfg.seeds {
        let run = run_seed(cfg, seed)?;
        let ratios = run.classifier.expect("rce run keeps its classifier").ratios();
        for (acc, r) in mean.iter_mut().zip(ratios) {
            *acc += r / cfg.seeds.len() as f64;
        }
    }
    let sup_error = mean.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(ConsistencyResult {
        seeds: cfg.seeds.len(),
        sup_error,
        mean_ratio: mean,
        exact,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SeparationResult {
    pub gamma: f64,
    /// Best objective over every deterministic policy.
    pub optimum: f64,
    pub rce_expected: f64,
    /// Discriminator against the initial (uniform) policy's occupancy.
    pub vice_ratio: f64,
    /// Discriminator against the data marginal, for reference.
    pub vice_ratio_data: f64,
    pub density: f64,
    pub sqil: f64,
}

/// Skewed-visitation counterexample evaluated by exhaustive enumeration.
pub fn baseline_separation(gamma: f64) -> Result<SeparationResult> {
    let ce = skewed_counterexample(gamma)?;
    let dynamics = ce.mdp.dynamics();
    let (n, m) = (ce.mdp.num_states(), ce.mdp.num_actions());
    let (_, optimum) = exhaustive_optimum(&ce.mdp, &ce.task)?;
    let objective = |pi: &Policy| control_objective(&ce.mdp, &ce.task, pi);
    let tc = rce_core::TrainConfig {
        gamma,
        ..rce_core::TrainConfig::default()
    };
    let rce = train(&ce.data, &ce.successes, &tc, TrainMode::Expected, false, TrainHooks::default())?;
    let uniform_rho = discounted_occupancy(dynamics, &ce.task, &Policy::uniform(n, m), OccupancyStart::Initial)?;
    let vice = solve_baseline(
        dynamics,
        &ce.task,
        &vice_ratio_reward(&ce.successes, &uniform_rho, ViceOptions::default())?,
    )?;
    let vice_data = solve_baseline(
        dynamics,
        &ce.task,
        &vice_ratio_reward(&ce.successes, &ce.data.state_marginal(), ViceOptions::default())?,
    )?;
    let density = solve_baseline(dynamics, &ce.task, &density_reward(&ce.successes))?;
    let sqil = solve_baseline(dynamics, &ce.task, &sqil_reward(&ce.successes, n))?;
    Ok(SeparationResult {
        gamma,
        optimum,
        rce_expected: objective(&rce.policy)?,
        vice_ratio: objective(&vice.policy)?,
        vice_ratio_data: objective(&vice_data.policy)?,
        density: objective(&density.policy)?,
        sqil: objective(&sqil.policy)?,
    })
}
