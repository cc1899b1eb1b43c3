//! Seeded property suites over random MDPs, with a JSON summary per suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rce_core::mdp::{max_abs_diff, TaskSpec};
use rce_core::oracle::{
    bellman_backup, enumerate_future_success, greedy_improvement, optimal_control, verify_policy_improvement,
    ViMode,
};
use rce_core::rce::{
    bellman_residual, expected_update, stochastic_gradient, train, ExpectedModel, PolicyUpdate, StepParams,
    TdSample, TrainHooks,
};
use rce_core::robust::{bhattacharyya, hellinger_sq, numeric_inner_min, robust_objective, worst_case_pu, InnerMinMethod};
use rce_core::{
    future_success_prob, make_env, Classifier, EnvSpec, LabError, Policy, QTable, SuccessExampleSet, TabularMdp,
    TrainConfig, TrainMode, TransitionDataset, TransitionKernel,
};
use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::experiments::baseline_separation;

pub const SUITES: [&str; 7] = [
    "lemma2",
    "convergence",
    "enumeration",
    "improvement",
    "robust",
    "gradient",
    "separation",
];

pub const GAMMAS: [f64; 3] = [0.5, 0.9, 0.99];
pub const LEMMA2_TOL: f64 = 1e-12;
pub const CONVERGENCE_TOL: f64 = 1e-9;
pub const ENUMERATION_TOL: f64 = 2e-10;
pub const ENUMERATION_MAX_STATES: usize = 6;
pub const ROBUST_L1_TOL: f64 = 1e-3;
pub const HELLINGER_TOL: f64 = 1e-12;
pub const GRADIENT_TOL: f64 = 1e-8;

/// Deliberate corruption used to check that a suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// The discount is stored as exactly one.
    GammaOne,
}

impl std::str::FromStr for Fault {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma-one" => Ok(Fault::GammaOne),
            other => Err(HarnessError::Usage(format!("unknown fault `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub cases: usize,
    pub failures: usize,
    pub max_residual: f64,
    /// Invariant named by the first failing case.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violation: Option<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{} {}/{} max_residual={:e}",
            self.suite,
            self.cases - self.failures,
            self.cases,
            self.max_residual
        )
    }
}

/// Outcome of one case: `Ok(None)` skips it, `Ok(Some(r))` passes with
/// residual `r`, `Err` fails naming an invariant.
type Case = std::result::Result<Option<f64>, Violation>;

#[derive(Debug)]
struct Violation {
    invariant: String,
    residual: f64,
}

fn violation(invariant: impl Into<String>, residual: f64) -> Violation {
    Violation {
        invariant: invariant.into(),
        residual,
    }
}

impl From<LabError> for Violation {
    fn from(e: LabError) -> Self {
        let invariant = match &e {
            LabError::Invariant { invariant, .. } => invariant.to_string(),
            other => other.to_string(),
        };
        Violation {
            invariant,
            residual: f64::INFINITY,
        }
    }
}

impl From<HarnessError> for Violation {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Core(core) => core.into(),
            other => violation(other.to_string(), f64::INFINITY),
        }
    }
}

fn check(residual: f64, tol: f64, invariant: &str) -> Case {
    if residual < tol {
        Ok(Some(residual))
    } else {
        Err(violation(invariant, residual))
    }
}

/// Seeded random MDP with at most 10 states and 4 actions, its discount,
/// and an RNG for further draws.
pub fn suite_mdp(seed: u64) -> (TabularMdp, f64, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = rng.random_range(1..=10);
    let m = rng.random_range(1..=4);
    let gamma = GAMMAS[rng.random_range(0..GAMMAS.len())];
    let mdp = make_env(&EnvSpec::random(n, m, seed)).expect("random spec is valid");
    (mdp, gamma, rng)
}

pub fn random_policy(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Policy {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let w: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = w.iter().sum();
            w.iter().map(|x| x / total).collect()
        })
        .collect();
    Policy::from_rows(&rows).expect("normalized rows")
}

fn task_for(gamma: f64, fault: Option<Fault>) -> TaskSpec {
    TaskSpec {
        gamma: if fault == Some(Fault::GammaOne) { 1.0 } else { gamma },
        horizon_truncation: 100,
    }
}

fn lemma2_case(seed: u64, fault: Option<Fault>) -> Case {
    let (mdp, gamma, mut rng) = suite_mdp(seed);
    let (n, m) = (mdp.num_states(), mdp.num_actions());
    let pi = random_policy(n, m, &mut rng);
    let logits: Vec<f64> = (0..n * m).map(|_| rng.random_range(-4.0..4.0)).collect();
    let cls = Classifier::from_logits(n, m, logits)?;
    let task = task_for(gamma, fault);
    let next = expected_update(&cls, &pi, mdp.success_prob(), mdp.dynamics(), &task)?;
    let q = QTable {
        num_states: n,
        num_actions: m,
        values: cls.ratios(),
    };
    let reward: Vec<f64> = mdp.success_prob().iter().map(|p| (1.0 - task.gamma) * p).collect();
    let vi = bellman_backup(mdp.dynamics(), task.gamma, &reward, ViMode::PolicyEval(&pi), &q);
    check(max_abs_diff(&next.ratios(), &vi.values), LEMMA2_TOL, "expected update equals one value-iteration step")
}

fn expected_run(mdp: &TabularMdp, task: &TaskSpec, update: PolicyUpdate, pi: Option<Policy>) -> rce_core::Result<rce_core::rce::TrainOutcome> {
    let (n, m) = (mdp.num_states(), mdp.num_actions());
    let cfg = TrainConfig {
        gamma: task.gamma,
        policy_update: update,
        max_iters: 100_000,
        ..TrainConfig::default()
    };
    let data = TransitionDataset::new(n, m, 0);
    let successes = SuccessExampleSet::from_dist(vec![1.0 / n as f64; n], 1.0)?;
    let hooks = TrainHooks {
        initial_policy: pi,
        model: Some(ExpectedModel {
            kernel: mdp.dynamics(),
            signal: mdp.success_prob().to_vec(),
        }),
        ..TrainHooks::default()
    };
    train(&data, &successes, &cfg, TrainMode::Expected, false, hooks)
}

fn convergence_case(seed: u64, fault: Option<Fault>) -> Case {
    let (mdp, gamma, mut rng) = suite_mdp(seed);
    let (n, m) = (mdp.num_states(), mdp.num_actions());
    let task = task_for(gamma, fault);
    let pi = random_policy(n, m, &mut rng);
    let eval = expected_run(&mdp, &task, PolicyUpdate::Fixed, Some(pi.clone()))?;
    if !eval.converged {
        return Err(violation("expected-mode training converges", f64::INFINITY));
    }
    let q = future_success_prob(&mdp, &task, &pi)?;
    let ratio_err = max_abs_diff(&eval.classifier.ratios(), &q.values);
    let residual = bellman_residual(&eval.classifier, &pi, mdp.success_prob(), mdp.dynamics(), &task)?;
    check(ratio_err, CONVERGENCE_TOL, "converged ratio equals future success probability")?;
    check(residual, CONVERGENCE_TOL, "Bellman identity at the fixed point")?;
    let control = expected_run(&mdp, &task, PolicyUpdate::Greedy, None)?;
    if !control.converged {
        return Err(violation("greedy expected-mode training converges", f64::INFINITY));
    }
    let (_, best) = optimal_control(&mdp, &task)?;
    let gap = best - rce_core::control_objective(&mdp, &task, &control.policy)?;
    check(gap.max(0.0), CONVERGENCE_TOL, "greedy expected-mode RCE reaches the optimum")?;
    Ok(Some(ratio_err.max(residual).max(gap.max(0.0))))
}

fn enumeration_case(seed: u64, fault: Option<Fault>) -> Case {
    let (mdp, gamma, mut rng) = suite_mdp(seed);
    let (n, m) = (mdp.num_states(), mdp.num_actions());
    if n > ENUMERATION_MAX_STATES {
        return Ok(None);
    }
    let task = task_for(gamma, fault);
    let pi = random_policy(n, m, &mut rng);
    let horizon = TaskSpec::horizon_for_tail(task.gamma, 1e-10);
    let q = future_success_prob(&mdp, &task, &pi)?;
    let brute = enumerate_future_success(&mdp, &task, &pi, horizon)?;
    check(q.max_abs_diff(&brute), ENUMERATION_TOL, "linear solve equals truncated enumeration")
}

fn improvement_case(seed: u64, fault: Option<Fault>) -> Case {
    let (mdp, gamma, _) = suite_mdp(seed);
    let task = task_for(gamma, fault);
    let mut pi = Policy::uniform(mdp.num_states(), mdp.num_actions());
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let next = greedy_improvement(&mdp, &task, &pi)?;
        let report = verify_policy_improvement(&mdp, &task, &pi, &next)?;
        worst = worst.max(report.old - report.new);
        if !report.improved {
            return Err(violation("greedy improvement does not lower the objective", worst));
        }
        pi = next;
    }
    Ok(Some(worst.max(0.0)))
}

fn simplex(k: usize, rng: &mut ChaCha8Rng, zero_prob: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..k)
            .map(|_| if rng.random::<f64>() < zero_prob { 0.0 } else { rng.random::<f64>() })
            .collect();
        let total: f64 = v.iter().sum();
        if total > 0.0 {
            return v.iter().map(|x| x / total).collect();
        }
    }
}

fn robust_case(seed: u64, _fault: Option<Fault>) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0b);
    let k = rng.random_range(1..=10);
    let (rho, p) = loop {
        let rho = simplex(k, &mut rng, 0.1);
        let p = simplex(k, &mut rng, 0.1);
        if rho.iter().zip(&p).any(|(a, b)| a * b > 0.0) {
            break (rho, p);
        }
    };
    let analytic = worst_case_pu(&rho, &p)?;
    let numeric = numeric_inner_min(&rho, &p, InnerMinMethod::default())?;
    let l1: f64 = analytic.iter().zip(&numeric.pu_hat).map(|(a, b)| (a - b).abs()).sum();
    check(l1, ROBUST_L1_TOL, "analytic worst case equals numeric minimizer")?;
    let identity = (1.0 - hellinger_sq(&rho, &p) / 2.0 - bhattacharyya(&rho, &p)).abs();
    check(identity, HELLINGER_TOL, "1 - H^2/2 = sum sqrt(rho p)")?;
    let two_state = (robust_objective(&[0.9, 0.1], &[0.5, 0.5], 1.0) - 0.8).abs();
    check(two_state, 1e-12, "two-state closed form is 0.8")?;
    Ok(Some(l1.max(identity).max(two_state)))
}

/// Expected stochastic gradient at the Bayes-optimal classifier, enumerating
/// every success pair and transition with its sampling probability.
fn gradient_case(seed: u64, fault: Option<Fault>) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9ad);
    let n = rng.random_range(1..=4);
    let m = rng.random_range(1..=2);
    let gamma = GAMMAS[rng.random_range(0..GAMMAS.len())];
    let mdp = make_env(&EnvSpec::random(n, m, seed)).expect("random spec is valid");
    let task = task_for(gamma, fault);
    let pi = random_policy(n, m, &mut rng);
    let d = simplex(n, &mut rng, 0.0);
    let weights: Vec<f64> = d.iter().zip(mdp.success_prob()).map(|(a, b)| a * b).collect();
    let prior: f64 = weights.iter().sum();
    if prior == 0.0 {
        return Ok(None);
    }
    let q = future_success_prob(&mdp, &task, &pi)?;
    let cls = Classifier::from_ratios(n, m, &q.values)?;
    let params = StepParams {
        gamma: task.gamma,
        learning_rate: 1.0,
        n_step: 1,
        ratio_clip: f64::INFINITY,
        success_scale: prior,
    };
    let mut total = vec![0.0; n * m];
    for s in 0..n {
        for a in 0..m {
            let p_succ = weights[s] / prior * pi.prob(s, a);
            if p_succ > 0.0 {
                let g = stochastic_gradient(&cls, &cls, &pi, &[(s, a)], &[], &params);
                total.iter_mut().zip(g).for_each(|(t, g)| *t += p_succ * g);
            }
            for (s2, &p) in mdp.dynamics().next_dist(s, a).iter().enumerate() {
                let p_data = d[s] * pi.prob(s, a) * p;
                if p_data > 0.0 {
                    let g = stochastic_gradient(&cls, &cls, &pi, &[], &[TdSample::one_step(s, a, s2)], &params);
                    total.iter_mut().zip(g).for_each(|(t, g)| *t += p_data * g);
                }
            }
        }
    }
    let norm = total.iter().map(|g| g * g).sum::<f64>().sqrt();
    check(norm, GRADIENT_TOL, "expected gradient vanishes at the Bayes-optimal classifier")
}

fn separation_case(seed: u64, fault: Option<Fault>) -> Case {
    let gamma = GAMMAS[(seed % GAMMAS.len() as u64) as usize];
    let gamma = task_for(gamma, fault).gamma;
    let r = baseline_separation(gamma)?;
    let rce_gap = (r.optimum - r.rce_expected).abs();
    check(rce_gap, 1e-9, "expected-mode RCE attains the enumerated optimum")?;
    if r.vice_ratio >= r.optimum - 1e-9 || r.density >= r.optimum - 1e-9 {
        return Err(violation("reward baselines fall strictly below the optimum", 0.0));
    }
    Ok(Some(rce_gap))
}

pub fn run_suite(name: &str, seeds: &[u64], fault: Option<Fault>) -> Result<SuiteReport> {
    let case: fn(u64, Option<Fault>) -> Case = match name {
        "lemma2" => lemma2_case,
        "convergence" => convergence_case,
        "enumeration" => enumeration_case,
        "improvement" => improvement_case,
        "robust" => robust_case,
        "gradient" => gradient_case,
        "separation" => separation_case,
        other => return Err(HarnessError::Usage(format!("unknown suite `{other}`; known: {}", SUITES.join(", ")))),
    };
    let mut report = SuiteReport {
        suite: name.to_string(),
        cases: 0,
        failures: 0,
        max_residual: 0.0,
        violation: None,
    };
    for &seed in seeds {
        match case(seed, fault) {
            Ok(None) => {}
            Ok(Some(r)) => {
                report.cases += 1;
                report.max_residual = report.max_residual.max(r);
            }
            Err(v) => {
                report.cases += 1;
                report.failures += 1;
                report.max_residual = report.max_residual.max(v.residual);
                if report.violation.is_none() {
                    report.violation = Some(format!("seed {seed}: {}", v.invariant));
                }
            }
        }
    }
    Ok(report)
}

/// Every suite over the same seeds.
pub fn verify_all(seeds: &[u64], fault: Option<Fault>) -> Result<Vec<SuiteReport>> {
    SUITES.iter().map(|s| run_suite(s, seeds, fault)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_a_few_seeds() {
        let seeds: Vec<u64> = (0..6).collect();
        for report in verify_all(&seeds, None).unwrap() {
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn gamma_fault_names_the_invariant() {
        let report = run_suite("lemma2", &[0, 1, 2], Some(Fault::GammaOne)).unwrap();
        assert_eq!(report.failures, 3);
        assert!(report.violation.unwrap().contains("TaskSpec.gamma < 1"));
    }

    #[test]
    fn unknown_suite_is_a_usage_error() {
        assert_eq!(run_suite("nope", &[0], None).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn json_summary_fields() {
        let report = run_suite("robust", &[0], None).unwrap();
        let value = serde_json::to_value(&report).unwrap();
        for key in ["suite", "cases", "failures", "max_residual"] {
            assert!(value.get(key).is_some(), "{key}");
        }
    }
}
