//! Ground-truth solvers used to check the learner: value iteration on an
//! explicit reward, the Bayes-optimal future-success classifier, greedy
//! policy improvement, and brute-force enumeration of future success.

use serde::{Deserialize, Serialize};

pub use crate::mdp::QTable;
use crate::error::{LabError, Result};
use crate::mdp::{
    argmax, control_objective, future_success_prob, Policy, TabularMdp, TaskSpec, TransitionKernel,
};

/// Iteration cap for [`value_iteration`].
pub const VALUE_ITERATION_CAP: usize = 1_000_000;
/// Sup-norm residual at which value iteration stops, relative to `max(1, |Q|)`.
pub const VALUE_ITERATION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub enum ViMode<'a> {
    /// Back up `sum_a' pi(a'|s') Q(s', a')`.
    PolicyEval(&'a Policy),
    /// Back up `max_a' Q(s', a')`.
    Control,
}

/// One synchronous backup `Q'(s,a) = r(s) + gamma sum_s' P(s'|s,a) V(s')`.
pub fn bellman_backup<K: TransitionKernel + ?Sized>(
    kernel: &K,
    gamma: f64,
    reward: &[f64],
    mode: ViMode<'_>,
    q: &QTable,
) -> QTable {
    let (n, m) = (kernel.num_states(), kernel.num_actions());
    let v = match mode {
        ViMode::PolicyEval(pi) => q.state_values(pi),
        ViMode::Control => q.max_values(),
    };
    let mut out = QTable::zeros(n, m);
    for s in 0..n {
        for a in 0..m {
            let next: f64 = kernel
                .next_dist(s, a)
                .iter()
                .zip(&v)
                .map(|(p, v)| if *p == 0.0 { 0.0 } else { p * v })
                .sum();
            out.values[s * m + a] = reward[s] + gamma * next;
        }
    }
    out
}

/// Iterates [`bellman_backup`] from `Q = 0` until the sup-norm change drops
/// below [`VALUE_ITERATION_TOL`].
pub fn value_iteration<K: TransitionKernel + ?Sized>(
    kernel: &K,
    task: &TaskSpec,
    reward: &[f64],
    mode: ViMode<'_>,
) -> Result<QTable> {
    task.validate()?;
    let (n, m) = (kernel.num_states(), kernel.num_actions());
    if reward.len() != n {
        return Err(LabError::Dimension(format!(
            "reward has {} entries, expected {n}",
            reward.len()
        )));
    }
    if let Some(s) = reward.iter().position(|r| !r.is_finite()) {
        return Err(LabError::invariant(
            "reward finite",
            format!("reward[{s}] = {}", reward[s]),
        ));
    }
    if let ViMode::PolicyEval(pi) = mode {
        pi.check_shape(n, m)?;
    }
    let mut q = QTable::zeros(n, m);
    let mut residual = f64::INFINITY;
    for _ in 0..VALUE_ITERATION_CAP {
        let next = bellman_backup(kernel, task.gamma, reward, mode, &q);
        residual = next.max_abs_diff(&q);
        let scale = next.values.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
        q = next;
        if residual < VALUE_ITERATION_TOL * scale {
            return Ok(q);
        }
    }
    Err(LabError::IterationCap {
        cap: VALUE_ITERATION_CAP,
        residual,
    })
}

/// Bayes-optimal classifier table; entries with zero data mass are undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesClassifier {
    pub num_states: usize,
    pub num_actions: usize,
    /// `C(s,a)`; `NaN` where undefined.
    pub probs: Vec<f64>,
    pub defined: Vec<bool>,
    /// `p(e_{t+}=1)` under the data marginal.
    pub success_mass: f64,
}

impl BayesClassifier {
    pub fn prob(&self, s: usize, a: usize) -> Option<f64> {
        let i = s * self.num_actions + a;
        self.defined[i].then_some(self.probs[i])
    }

    pub fn ratio(&self, s: usize, a: usize) -> Option<f64> {
        self.prob(s, a).map(|c| c / (1.0 - c))
    }

    pub fn undefined_entries(&self) -> Vec<(usize, usize)> {
        (0..self.num_states * self.num_actions)
            .filter(|&i| !self.defined[i])
            .map(|i| (i / self.num_actions, i % self.num_actions))
            .collect()
    }

    /// Greedy policy over defined entries; a state with no defined entry picks action 0.
    pub fn greedy_policy(&self) -> Policy {
        let actions: Vec<usize> = (0..self.num_states)
            .map(|s| {
                let row: Vec<f64> = (0..self.num_actions)
                    .map(|a| self.prob(s, a).unwrap_or(f64::NEG_INFINITY))
                    .collect();
                argmax(&row)
            })
            .collect();
        Policy::deterministic(self.num_actions, &actions)
    }
}

pub fn bayes_optimal_classifier(
    mdp: &TabularMdp,
    task: &TaskSpec,
    pi: &Policy,
    data_marginal: &[f64],
) -> Result<BayesClassifier> {
    let (n, m) = (mdp.num_states(), mdp.num_actions());
    if data_marginal.len() != n * m {
        return Err(LabError::Dimension(format!(
            "data marginal has {} entries, expected {}",
            data_marginal.len(),
            n * m
        )));
    }
    let total: f64 = data_marginal.iter().sum();
    if data_marginal.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
        return Err(LabError::invariant(
            "data_marginal is a probability matrix",
            format!("sums to {total}"),
        ));
    }
    let q = future_success_prob(mdp, task, pi)?;
    let success_mass: f64 = data_marginal.iter().zip(&q.values).map(|(p, q)| p * q).sum();
    let mut probs = vec![f64::NAN; n * m];
    let mut defined = vec![false; n * m];
    for i in 0..n * m {
        let p = data_marginal[i];
        if p <= 0.0 {
            continue;
        }
        // Positives weighted by p(e+=1): their mass is p(s,a|e+=1) p(e+=1) = Q p(s,a).
        let positive = if success_mass > 0.0 {
            (q.values[i] * p / success_mass) * success_mass
        } else {
            0.0
        };
        probs[i] = positive / (positive + p);
        defined[i] = true;
    }
    Ok(BayesClassifier {
        num_states: n,
        num_actions: m,
        probs,
        defined,
        success_mass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImprovementReport {
    pub old: f64,
    pub new: f64,
    pub improved: bool,
}

/// Tolerance on the greedy-improvement comparison.
pub const IMPROVEMENT_TOL: f64 = 1e-10;

pub fn verify_policy_improvement(
    mdp: &TabularMdp,
    task: &TaskSpec,
    pi: &Policy,
    pi_greedy: &Policy,
) -> Result<ImprovementReport> {
    let old = control_objective(mdp, task, pi)?;
    let new = control_objective(mdp, task, pi_greedy)?;
    Ok(ImprovementReport {
        old,
        new,
        improved: new >= old - IMPROVEMENT_TOL,
    })
}

/// One round of greedy improvement: greedy w.r.t. the Bayes-optimal
/// classifier of `pi` under a uniform data marginal.
pub fn greedy_improvement(mdp: &TabularMdp, task: &TaskSpec, pi: &Policy) -> Result<Policy> {
    let k = mdp.num_states() * mdp.num_actions();
    let marginal = vec![1.0 / k as f64; k];
    Ok(bayes_optimal_classifier(mdp, task, pi, &marginal)?.greedy_policy())
}

/// Optimal policy by control-mode value iteration on `(1-gamma) p_e`,
/// with its objective.
pub fn optimal_control(mdp: &TabularMdp, task: &TaskSpec) -> Result<(Policy, f64)> {
    let reward: Vec<f64> = mdp.success_prob().iter().map(|p| (1.0 - task.gamma) * p).collect();
    let q = value_iteration(mdp.dynamics(), task, &reward, ViMode::Control)?;
    let pi = q.greedy_policy();
    let value = control_objective(mdp, task, &pi)?;
    Ok((pi, value))
}

/// Largest number of deterministic policies `exhaustive_optimum` will score.
pub const ENUMERATION_LIMIT: usize = 1 << 20;

/// Best deterministic policy by scoring every one of the `A^S` candidates;
/// ties go to the first in lexicographic order of actions.
pub fn exhaustive_optimum(mdp: &TabularMdp, task: &TaskSpec) -> Result<(Policy, f64)> {
    let (n, m) = (mdp.num_states(), mdp.num_actions());
    let count = (m as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if count > ENUMERATION_LIMIT as u128 {
        return Err(LabError::Config(format!("{count} deterministic policies exceed the enumeration limit")));
    }
    let mut actions = vec![0usize; n];
    let mut best: Option<(Policy, f64)> = None;
    loop {
        let pi = Policy::deterministic(m, &actions);
        let value = control_objective(mdp, task, &pi)?;
        if best.as_ref().is_none_or(|(_, v)| value > *v) {
            best = Some((pi, value));
        }
        // Odometer increment, last state fastest.
        let mut i = n;
        loop {
            if i == 0 {
                return Ok(best.expect("at least one policy"));
            }
            i -= 1;
            actions[i] += 1;
            if actions[i] < m {
                break;
            }
            actions[i] = 0;
        }
    }
}

/// Brute-force `(1-gamma) sum_{k=0}^{H} gamma^k E[p_e(s_{t+k}) | s, a]` by
/// pushing explicit state distributions through the transition tensor.
pub fn enumerate_future_success(
    mdp: &TabularMdp,
    task: &TaskSpec,
    pi: &Policy,
    horizon: usize,
) -> Result<QTable> {
    task.validate()?;
    let d = mdp.dynamics();
    let (n, m) = (d.num_states(), d.num_actions());
    pi.check_shape(n, m)?;
    let p_e = mdp.success_prob();
    let gamma = task.gamma;
    let mut q = QTable::zeros(n, m);
    for s in 0..n {
        for a in 0..m {
            let mut total = (1.0 - gamma) * p_e[s];
            let mut dist = d.row(s, a).to_vec();
            let mut weight = 1.0 - gamma;
            for _ in 1..=horizon {
                weight *= gamma;
                total += weight * dist.iter().zip(p_e).map(|(p, e)| p * e).sum::<f64>();
                let mut next = vec![0.0; n];
                for (s1, &mass) in dist.iter().enumerate() {
                    if mass == 0.0 {
                        continue;
                    }
                    for a1 in 0..m {
                        let w = mass * pi.prob(s1, a1);
                        if w == 0.0 {
                            continue;
                        }
                        for (s2, p) in d.row(s1, a1).iter().enumerate() {
                            next[s2] += w * p;
                        }
                    }
                }
                dist = next;
            }
            q.values[s * m + a] = total;
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::fixtures::chain2;
    use crate::mdp::Dynamics;

    #[test]
    fn chain2_policy_eval() {
        let mdp = chain2();
        let task = TaskSpec::new(0.5).unwrap();
        let pi = Policy::uniform(2, 1);
        let q = value_iteration(mdp.dynamics(), &task, &[0.0, 0.5], ViMode::PolicyEval(&pi)).unwrap();
        assert!((q.get(0, 0) - 0.5).abs() < 1e-11);
        assert!((q.get(1, 0) - 1.0).abs() < 1e-11);
        let exact = future_success_prob(&mdp, &task, &pi).unwrap();
        assert!(q.max_abs_diff(&exact) < 1e-9);
    }

    #[test]
    fn zero_reward_and_zero_gamma() {
        let mdp = chain2();
        let pi = Policy::uniform(2, 1);
        let q = value_iteration(mdp.dynamics(), &TaskSpec::new(0.9).unwrap(), &[0.0, 0.0], ViMode::Control)
            .unwrap();
        assert!(q.values.iter().all(|&v| v == 0.0));
        let q = value_iteration(mdp.dynamics(), &TaskSpec::new(0.0).unwrap(), &[0.3, 0.7], ViMode::PolicyEval(&pi))
            .unwrap();
        assert_eq!(q.values, vec![0.3, 0.7]);
    }

    #[test]
    fn rejects_non_finite_reward() {
        let mdp = chain2();
        let err = value_iteration(mdp.dynamics(), &TaskSpec::new(0.5).unwrap(), &[f64::NAN, 0.0], ViMode::Control)
            .unwrap_err();
        assert!(err.to_string().contains("reward finite"));
    }

    #[test]
    fn chain2_bayes_classifier() {
        let mdp = chain2();
        let task = TaskSpec::new(0.5).unwrap();
        let c = bayes_optimal_classifier(&mdp, &task, &Policy::uniform(2, 1), &[0.5, 0.5]).unwrap();
        assert!((c.prob(0, 0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((c.prob(1, 0).unwrap() - 0.5).abs() < 1e-12);
        assert!((c.ratio(0, 0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bayes_classifier_flags_unsupported_entries() {
        let mdp = chain2();
        let task = TaskSpec::new(0.5).unwrap();
        let c = bayes_optimal_classifier(&mdp, &task, &Policy::uniform(2, 1), &[0.0, 1.0]).unwrap();
        assert_eq!(c.undefined_entries(), vec![(0, 0)]);
        assert_eq!(c.prob(0, 0), None);
        // Q = 0 gives C = 0.
        let never = mdp.with_success_prob(vec![0.0, 0.0]).unwrap();
        let c = bayes_optimal_classifier(&never, &task, &Policy::uniform(2, 1), &[0.5, 0.5]).unwrap();
        assert_eq!(c.prob(0, 0), Some(0.0));
    }

    #[test]
    fn single_action_improvement_is_neutral() {
        let mdp = chain2();
        let task = TaskSpec::new(0.9).unwrap();
        let pi = Policy::uniform(2, 1);
        let greedy = greedy_improvement(&mdp, &task, &pi).unwrap();
        let r = verify_policy_improvement(&mdp, &task, &pi, &greedy).unwrap();
        assert_eq!(r.old, r.new);
        assert!(r.improved);
    }

    #[test]
    fn optimal_policy_is_greedy_fixed_point() {
        // Two actions: stay or move to the success state.
        let d = Dynamics::new(
            2,
            2,
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
            vec![1.0, 0.0],
        )
        .unwrap();
        let mdp = TabularMdp::new(d, vec![0.0, 1.0]).unwrap();
        let task = TaskSpec::new(0.9).unwrap();
        let optimal = Policy::deterministic(2, &[1, 0]);
        let greedy = greedy_improvement(&mdp, &task, &optimal).unwrap();
        let r = verify_policy_improvement(&mdp, &task, &optimal, &greedy).unwrap();
        assert_eq!(r.old, r.new);
    }

    #[test]
    fn enumeration_edge_cases() {
        let mdp = chain2();
        let pi = Policy::uniform(2, 1);
        let q = enumerate_future_success(&mdp, &TaskSpec::new(0.5).unwrap(), &pi, 60).unwrap();
        assert!((q.get(0, 0) - 0.5).abs() < 1e-15);
        let q = enumerate_future_success(&mdp, &TaskSpec::new(0.5).unwrap(), &pi, 0).unwrap();
        assert_eq!(q.values, vec![0.0, 0.5]);
        let q = enumerate_future_success(&mdp, &TaskSpec::new(0.0).unwrap(), &pi, 7).unwrap();
        assert_eq!(q.values, vec![0.0, 1.0]);
    }
}
