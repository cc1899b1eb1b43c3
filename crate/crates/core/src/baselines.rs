//! Reward-model baselines solved with the same value iteration and greedy
//! extraction as the oracle, so they differ from RCE only in the reward.

use serde::{Deserialize, Serialize};

use crate::data::{Trajectory, TransitionDataset};
use crate::error::{LabError, Result};
use crate::mdp::{
    discounted_occupancy, Dynamics, OccupancyStart, Policy, QTable, SuccessExampleSet, TabularMdp,
    TaskSpec,
};
use crate::oracle::{value_iteration, ViMode};

/// Reward assigned to a zero ratio when the logarithm is requested.
pub const LOG_RATIO_FLOOR: f64 = -27.631021115928547; // ln(1e-12)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Sqil,
    ViceRatio { log: bool, iterative: bool },
    Density,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub reward: Vec<f64>,
    pub provenance: Provenance,
}

/// `r(s) = 1` on states that appear among the success examples.
pub fn sqil_reward(successes: &SuccessExampleSet, num_states: usize) -> RewardModel {
    let mut reward = vec![0.0; num_states];
    if successes.examples.is_empty() {
        for (r, &p) in reward.iter_mut().zip(&successes.dist) {
            if p > 0.0 {
                *r = 1.0;
            }
        }
    } else {
        for &s in &successes.examples {
            if s < num_states {
                reward[s] = 1.0;
            }
        }
    }
    RewardModel {
        reward,
        provenance: Provenance::Sqil,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViceOptions {
    pub log: bool,
    pub iterative: bool,
}

/// `r(s) = p(s|e=1) / q(s)`, the odds of a Bayes-optimal discriminator
/// between success examples and `q`.
pub fn vice_ratio_reward(
    successes: &SuccessExampleSet,
    data_marginal: &[f64],
    opts: ViceOptions,
) -> Result<RewardModel> {
    if data_marginal.len() != successes.dist.len() {
        return Err(LabError::Dimension("marginal vs success distribution".into()));
    }
    let mut reward = Vec::with_capacity(data_marginal.len());
    for (s, (&p, &q)) in successes.dist.iter().zip(data_marginal).enumerate() {
        let ratio = if p == 0.0 {
            0.0
        } else if q > 0.0 {
            p / q
        } else {
            return Err(LabError::UnvisitedSuccessState { state: s });
        };
        reward.push(if opts.log {
            if ratio > 0.0 {
                ratio.ln().max(LOG_RATIO_FLOOR)
            } else {
                LOG_RATIO_FLOOR
            }
        } else {
            ratio
        });
    }
    Ok(RewardModel {
        reward,
        provenance: Provenance::ViceRatio {
            log: opts.log,
            iterative: opts.iterative,
        },
    })
}

/// `r(s) = p(s|e=1)`, the empirical success-state frequency.
pub fn density_reward(successes: &SuccessExampleSet) -> RewardModel {
    RewardModel {
        reward: successes.dist.clone(),
        provenance: Provenance::Density,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSolution {
    pub q: QTable,
    pub policy: Policy,
}

/// Control-mode value iteration on the reward, then greedy extraction.
pub fn solve_baseline(dynamics: &Dynamics, task: &TaskSpec, rm: &RewardModel) -> Result<BaselineSolution> {
    if rm.reward.len() != dynamics.num_states() {
        return Err(LabError::Dimension("reward length vs num_states".into()));
    }
    let q = value_iteration(dynamics, task, &rm.reward, ViMode::Control)?;
    let policy = q.greedy_policy();
    Ok(BaselineSolution { q, policy })
}

/// Adversarial-style VICE: the discriminator is refit each round against a
/// replay mixture of the data marginal and every previous policy's
/// occupancy, and the policy is re-solved on the new ratio.
pub fn vice_iterative(
    dynamics: &Dynamics,
    task: &TaskSpec,
    successes: &SuccessExampleSet,
    data_marginal: &[f64],
    rounds: usize,
    log: bool,
) -> Result<Vec<BaselineSolution>> {
    let opts = ViceOptions {
        log,
        iterative: true,
    };
    let mut replay = data_marginal.to_vec();
    let mut solutions = Vec::with_capacity(rounds);
    for k in 0..rounds {
        let q: Vec<f64> = replay.iter().map(|x| x / (k + 1) as f64).collect();
        let solution = solve_baseline(dynamics, task, &vice_ratio_reward(successes, &q, opts)?)?;
        let rho = discounted_occupancy(dynamics, task, &solution.policy, OccupancyStart::Initial)?;
        for (acc, r) in replay.iter_mut().zip(&rho) {
            *acc += r;
        }
        solutions.push(solution);
    }
    Ok(solutions)
}

/// A three-state problem where user visitation is skewed toward the
/// worse of two absorbing outcomes.
#[derive(Debug, Clone)]
pub struct Counterexample {
    pub mdp: TabularMdp,
    pub task: TaskSpec,
    /// Transitions whose state marginal equals the user visitation.
    pub data: TransitionDataset,
    pub user_marginal: Vec<f64>,
    pub successes: SuccessExampleSet,
}

/// State 0 picks between absorbing state 1 (`p_e = 0.6`, visited by users
/// 80% of the time) and absorbing state 2 (`p_e = 0.9`, visited 10%).
pub fn skewed_counterexample(gamma: f64) -> Result<Counterexample> {
    let transition = vec![
        vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        vec![vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]],
        vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]],
    ];
    let dynamics = Dynamics::from_nested(&transition, vec![1.0, 0.0, 0.0])?;
    let mdp = TabularMdp::new(dynamics, vec![0.0, 0.6, 0.9])?;
    let user_marginal = vec![0.1, 0.8, 0.1];
    let counts = [5usize, 40, 5];
    let mut data = TransitionDataset::new(3, 2, 0);
    for (s, &per_action) in counts.iter().enumerate() {
        for a in 0..2 {
            let s_next = mdp.dynamics().row(s, a).iter().position(|&p| p == 1.0).expect("deterministic");
            for _ in 0..per_action {
                data.push(Trajectory {
                    states: vec![s, s_next],
                    actions: vec![a],
                })?;
            }
        }
    }
    let weights: Vec<f64> = user_marginal.iter().zip(mdp.success_prob()).map(|(u, e)| u * e).collect();
    let prior: f64 = weights.iter().sum();
    let successes = SuccessExampleSet::from_dist(weights.iter().map(|w| w / prior).collect(), prior)?;
    Ok(Counterexample {
        mdp,
        task: TaskSpec::new(gamma)?,
        data,
        user_marginal,
        successes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::fixtures::chain2;
    use crate::mdp::{control_objective, max_abs_diff};

    #[test]
    fn sqil_examples() {
        let one = SuccessExampleSet::from_examples(vec![1], 2, 1.0).unwrap();
        assert_eq!(sqil_reward(&one, 2).reward, vec![0.0, 1.0]);
        let empty = SuccessExampleSet {
            examples: vec![],
            dist: vec![0.0, 0.0],
            prior: 1.0,
        };
        assert_eq!(sqil_reward(&empty, 2).reward, vec![0.0, 0.0]);
        let all = SuccessExampleSet::from_examples(vec![0, 1, 2], 3, 1.0).unwrap();
        assert_eq!(sqil_reward(&all, 3).reward, vec![1.0; 3]);
    }

    #[test]
    fn vice_examples() {
        let same = SuccessExampleSet::from_dist(vec![0.25, 0.75], 1.0).unwrap();
        let r = vice_ratio_reward(&same, &[0.25, 0.75], ViceOptions::default()).unwrap();
        assert!(max_abs_diff(&r.reward, &[1.0, 1.0]) < 1e-15);
        let point = SuccessExampleSet::from_dist(vec![0.0, 1.0], 1.0).unwrap();
        let r = vice_ratio_reward(&point, &[0.5, 0.5], ViceOptions::default()).unwrap();
        assert_eq!(r.reward, vec![0.0, 2.0]);
        let skew = SuccessExampleSet::from_examples(vec![0, 0, 1], 2, 1.0).unwrap();
        let r = vice_ratio_reward(&skew, &[1.0 / 3.0, 2.0 / 3.0], ViceOptions::default()).unwrap();
        assert!(max_abs_diff(&r.reward, &[2.0, 0.5]) < 1e-15);
        let logged = vice_ratio_reward(&point, &[0.5, 0.5], ViceOptions { log: true, iterative: false }).unwrap();
        assert_eq!(logged.reward[0], LOG_RATIO_FLOOR);
        assert!((logged.reward[1] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn vice_rejects_unvisited_success_state() {
        let point = SuccessExampleSet::from_dist(vec![0.0, 1.0], 1.0).unwrap();
        let err = vice_ratio_reward(&point, &[1.0, 0.0], ViceOptions::default()).unwrap_err();
        assert!(matches!(err, LabError::UnvisitedSuccessState { state: 1 }));
    }

    #[test]
    fn density_examples() {
        let uniform = SuccessExampleSet::from_dist(vec![0.5, 0.5], 1.0).unwrap();
        assert_eq!(density_reward(&uniform).reward, vec![0.5, 0.5]);
        let point = SuccessExampleSet::from_dist(vec![0.0, 1.0], 1.0).unwrap();
        assert_eq!(density_reward(&point).reward, vec![0.0, 1.0]);
        let skew = SuccessExampleSet::from_dist(vec![0.25, 0.75], 1.0).unwrap();
        assert_eq!(density_reward(&skew).reward, vec![0.25, 0.75]);
    }

    #[test]
    fn sqil_on_chain2() {
        let mdp = chain2();
        let task = TaskSpec::new(0.5).unwrap();
        let successes = SuccessExampleSet::from_examples(vec![1], 2, 0.5).unwrap();
        let sol = solve_baseline(mdp.dynamics(), &task, &sqil_reward(&successes, 2)).unwrap();
        assert!((control_objective(&mdp, &task, &sol.policy).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_reward_uses_tie_break() {
        let ce = skewed_counterexample(0.9).unwrap();
        let rm = RewardModel {
            reward: vec![0.3; 3],
            provenance: Provenance::Density,
        };
        let sol = solve_baseline(ce.mdp.dynamics(), &ce.task, &rm).unwrap();
        assert_eq!(sol.policy, Policy::deterministic(2, &[0, 0, 0]));
    }

    #[test]
    fn counterexample_setup() {
        let ce = skewed_counterexample(0.9).unwrap();
        assert!(max_abs_diff(&ce.data.state_marginal(), &ce.user_marginal) < 1e-15);
        assert!((ce.successes.prior - 0.57).abs() < 1e-15);
        let density = solve_baseline(ce.mdp.dynamics(), &ce.task, &density_reward(&ce.successes)).unwrap();
        assert_eq!(density.policy.action(0), Some(0));
    }

    #[test]
    fn reward_model_json() {
        let rm = vice_ratio_reward(
            &SuccessExampleSet::from_dist(vec![0.0, 1.0], 1.0).unwrap(),
            &[0.5, 0.5],
            ViceOptions { log: false, iterative: true },
        )
        .unwrap();
        let text = serde_json::to_string(&rm).unwrap();
        let back: RewardModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rm);
    }
}
