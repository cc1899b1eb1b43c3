//! Recursive classification of examples on tables.
//!
//! The classifier is stored as logits, so `C = logistic(theta)` and the odds
//! `C / (1 - C) = exp(theta)` play the role of a Q-function. Expected-mode
//! updates may drive a logit to `-inf`, which represents an exact zero
//! probability of future success; gradient updates keep logits finite.

mod train;

use serde::{Deserialize, Serialize};

pub use train::{
    train, ActionSource, ExpectedModel, LrSchedule, MetricRow, PolicyUpdate, StepParams,
    SuccessWeight, TrainConfig, TrainHooks, TrainMode, TrainOutcome,
};

use crate::error::{LabError, Result};
use crate::mdp::{argmax, Policy, TaskSpec, TransitionKernel};

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    num_states: usize,
    num_actions: usize,
    logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    num_states: usize,
    num_actions: usize,
    /// `null` encodes a logit of `-inf`.
    logits: Vec<Option<f64>>,
}

impl Serialize for Classifier {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        ClassifierFile {
            num_states: self.num_states,
            num_actions: self.num_actions,
            logits: self
                .logits
                .iter()
                .map(|&l| (l != f64::NEG_INFINITY).then_some(l))
                .collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Classifier {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = ClassifierFile::deserialize(deserializer)?;
        let logits = file
            .logits
            .into_iter()
            .map(|l| l.unwrap_or(f64::NEG_INFINITY))
            .collect();
        Classifier::from_logits(file.num_states, file.num_actions, logits)
            .map_err(serde::de::Error::custom)
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Classifier {
    /// All logits zero, i.e. `C = 0.5` everywhere.
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Classifier {
            num_states,
            num_actions,
            logits: vec![0.0; num_states * num_actions],
        }
    }

    pub fn from_logits(num_states: usize, num_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != num_states * num_actions {
            return Err(LabError::Dimension(format!(
                "classifier has {} logits, expected {}",
                logits.len(),
                num_states * num_actions
            )));
        }
        if let Some(i) = logits.iter().position(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(LabError::invariant(
                "Classifier ratio exp(theta) finite",
                format!("logit {i} = {}", logits[i]),
            ));
        }
        Ok(Classifier {
            num_states,
            num_actions,
            logits,
        })
    }

    /// Classifier whose odds equal the given nonnegative table.
    pub fn from_ratios(num_states: usize, num_actions: usize, ratios: &[f64]) -> Result<Self> {
        if let Some(i) = ratios.iter().position(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(LabError::invariant(
                "Classifier ratio nonnegative and finite",
                format!("ratio {i} = {}", ratios[i]),
            ));
        }
        Classifier::from_logits(num_states, num_actions, ratios.iter().map(|r| r.ln()).collect())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logit(&self, s: usize, a: usize) -> f64 {
        self.logits[s * self.num_actions + a]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        logistic(self.logit(s, a))
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| logistic(l)).collect()
    }

    /// `C / (1 - C) = exp(theta)`.
    pub fn ratio(&self, s: usize, a: usize) -> f64 {
        self.logit(s, a).exp()
    }

    /// Odds capped at `clip`, as used inside TD targets.
    pub fn clipped_ratio(&self, s: usize, a: usize, clip: f64) -> f64 {
        self.ratio(s, a).min(clip)
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.logits.iter().map(|l| l.exp()).collect()
    }

    /// Polyak mix `tau * online + (1 - tau) * self` in logit space.
    pub fn polyak_toward(&mut self, online: &Classifier, tau: f64) {
        for (t, &o) in self.logits.iter_mut().zip(&online.logits) {
            *t = if tau >= 1.0 { o } else { tau * o + (1.0 - tau) * *t };
        }
    }

    fn check_shape(&self, num_states: usize, num_actions: usize) -> Result<()> {
        if self.num_states != num_states || self.num_actions != num_actions {
            return Err(LabError::Dimension(format!(
                "classifier is {}x{}, expected {num_states}x{num_actions}",
                self.num_states, self.num_actions
            )));
        }
        Ok(())
    }
}

/// `w = sum_a' pi(a'|s') min(C/(1-C)(s', a'), clip)`; the target table is
/// read-only here, so nothing flows back into it.
pub fn td_target_w(target: &Classifier, pi: &Policy, s_next: usize, clip: f64) -> f64 {
    pi.row(s_next)
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(a, &p)| p * target.clipped_ratio(s_next, a, clip))
        .sum()
}

/// `y = gamma w / (gamma w + 1)`.
pub fn label_from_w(w: f64, gamma: f64) -> f64 {
    let gw = gamma * w;
    if gw.is_infinite() {
        1.0
    } else {
        gw / (gw + 1.0)
    }
}

/// Average of the one-step label and the label built from the ratio `n`
/// steps ahead, discounted by `gamma^n`.
pub fn n_step_label(w_1step: f64, w_nstep: f64, gamma: f64, n: usize) -> f64 {
    0.5 * (label_from_w(w_1step, gamma) + label_from_w(w_nstep, gamma.powi(n as i32)))
}

/// Exact expected update on every pair:
/// `C <- x / (x + 1)` with `x = (1-gamma) p_e(s) + gamma E[w]`, stored as `theta = ln x`.
pub fn expected_update<K: TransitionKernel + ?Sized>(
    cls: &Classifier,
    pi: &Policy,
    p_e_implied: &[f64],
    kernel: &K,
    task: &TaskSpec,
) -> Result<Classifier> {
    task.validate()?;
    let (n, m) = (kernel.num_states(), kernel.num_actions());
    cls.check_shape(n, m)?;
    pi.check_shape(n, m)?;
    if p_e_implied.len() != n {
        return Err(LabError::Dimension("success signal length".into()));
    }
    let gamma = task.gamma;
    // E_{pi}[ratio(s', .)] per next state.
    let next_value: Vec<f64> = (0..n)
        .map(|s| {
            pi.row(s)
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(a, &p)| p * cls.ratio(s, a))
                .sum()
        })
        .collect();
    let mut logits = vec![0.0; n * m];
    for s in 0..n {
        for a in 0..m {
            let expected_w: f64 = kernel
                .next_dist(s, a)
                .iter()
                .zip(&next_value)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, v)| p * v)
                .sum();
            let x = (1.0 - gamma) * p_e_implied[s] + gamma * expected_w;
            logits[s * m + a] = x.ln();
        }
    }
    Classifier::from_logits(n, m, logits)
}

/// `sup |C/(1-C) - [(1-gamma) p_e + gamma E[C'/(1-C')]]|` under `pi`.
pub fn bellman_residual<K: TransitionKernel + ?Sized>(
    cls: &Classifier,
    pi: &Policy,
    p_e: &[f64],
    kernel: &K,
    task: &TaskSpec,
) -> Result<f64> {
    let next = expected_update(cls, pi, p_e, kernel, task)?;
    Ok(ratio_distance(cls, &next))
}

/// Sup-norm distance between the odds of two classifiers.
pub fn ratio_distance(a: &Classifier, b: &Classifier) -> f64 {
    a.logits
        .iter()
        .zip(&b.logits)
        .map(|(x, y)| {
            if x == y {
                0.0
            } else {
                (x.exp() - y.exp()).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// One `(s, a, s')` sample with an optional state `n` steps ahead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TdSample {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
    pub s_ahead: Option<usize>,
}

impl TdSample {
    pub fn one_step(s: usize, a: usize, s_next: usize) -> Self {
        TdSample {
            s,
            a,
            s_next,
            s_ahead: None,
        }
    }
}

/// Per-pair ascent direction of the two weighted cross-entropy terms,
/// each averaged over its batch, evaluated at `cls`.
pub fn stochastic_gradient(
    cls: &Classifier,
    target: &Classifier,
    pi: &Policy,
    success_batch: &[(usize, usize)],
    transition_batch: &[TdSample],
    params: &StepParams,
) -> Vec<f64> {
    let m = cls.num_actions;
    let gamma = params.gamma;
    let mut grad = vec![0.0; cls.logits.len()];
    if !success_batch.is_empty() {
        let weight = (1.0 - gamma) * params.success_scale / success_batch.len() as f64;
        for &(s, a) in success_batch {
            grad[s * m + a] += weight * (1.0 - cls.prob(s, a));
        }
    }
    if !transition_batch.is_empty() {
        let scale = 1.0 / transition_batch.len() as f64;
        for sample in transition_batch {
            let w = td_target_w(target, pi, sample.s_next, params.ratio_clip);
            let y = match sample.s_ahead {
                Some(ahead) if params.n_step > 1 => {
                    let w_ahead = td_target_w(target, pi, ahead, params.ratio_clip);
                    n_step_label(w, w_ahead, gamma, params.n_step)
                }
                _ => label_from_w(w, gamma),
            };
            let weight = 1.0 + gamma * w;
            grad[sample.s * m + sample.a] += scale * weight * (y - cls.prob(sample.s, sample.a));
        }
    }
    grad
}

/// One gradient step on the logits.
pub fn stochastic_update(
    cls: &Classifier,
    target: &Classifier,
    pi: &Policy,
    success_batch: &[(usize, usize)],
    transition_batch: &[TdSample],
    params: &StepParams,
) -> Classifier {
    if success_batch.is_empty() && transition_batch.is_empty() {
        log::warn!("stochastic_update called with empty batches; classifier unchanged");
        return cls.clone();
    }
    let grad = stochastic_gradient(cls, target, pi, success_batch, transition_batch, params);
    let mut next = cls.clone();
    if params.learning_rate != 0.0 {
        for (l, g) in next.logits.iter_mut().zip(grad) {
            *l += params.learning_rate * g;
        }
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Extraction {
    /// Point mass on the argmax, ties to the lowest action.
    Greedy,
    /// `pi(a|s) ∝ exp(theta(s,a) / temperature)`.
    Soft { temperature: f64 },
}

pub fn extract_policy(cls: &Classifier, mode: Extraction) -> Policy {
    let (n, m) = (cls.num_states, cls.num_actions);
    match mode {
        Extraction::Greedy => {
            let actions: Vec<usize> = (0..n)
                .map(|s| argmax(&cls.logits[s * m..(s + 1) * m]))
                .collect();
            Policy::deterministic(m, &actions)
        }
        Extraction::Soft { temperature } => {
            let mut probs = Vec::with_capacity(n * m);
            for s in 0..n {
                let row = &cls.logits[s * m..(s + 1) * m];
                let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if top == f64::NEG_INFINITY {
                    probs.extend(std::iter::repeat_n(1.0 / m as f64, m));
                    continue;
                }
                let weights: Vec<f64> = row
                    .iter()
                    .map(|&l| ((l - top) / temperature).exp())
                    .collect();
                let total: f64 = weights.iter().sum();
                probs.extend(weights.iter().map(|w| w / total));
            }
            Policy::new(n, m, probs).expect("softmax rows are distributions")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::fixtures::chain2;
    use crate::mdp::max_abs_diff;
    use crate::oracle::{bellman_backup, QTable, ViMode};

    fn params(gamma: f64, lr: f64) -> StepParams {
        StepParams {
            gamma,
            learning_rate: lr,
            n_step: 1,
            ratio_clip: 10.0,
            success_scale: 1.0,
        }
    }

    #[test]
    fn ratio_of_known_probabilities() {
        let c = Classifier::from_logits(1, 3, vec![0.0, (0.5f64).ln(), 9f64.ln()]).unwrap();
        assert_eq!(c.ratio(0, 0), 1.0);
        assert!((c.prob(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((c.ratio(0, 1) - 0.5).abs() < 1e-15);
        assert!((c.prob(0, 2) - 0.9).abs() < 1e-15);
        assert!((c.ratio(0, 2) - 9.0).abs() < 1e-14);
        assert_eq!(c.clipped_ratio(0, 2, 5.0), 5.0);
    }

    #[test]
    fn td_target_examples() {
        let half = Classifier::zeros(2, 2);
        assert_eq!(td_target_w(&half, &Policy::uniform(2, 2), 1, 10.0), 1.0);
        let third = Classifier::from_ratios(2, 2, &[0.5; 4]).unwrap();
        let det = Policy::deterministic(2, &[1, 1]);
        assert!((td_target_w(&third, &det, 0, 10.0) - 0.5).abs() < 1e-15);
        let mixed = Classifier::from_ratios(2, 2, &[0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((td_target_w(&mixed, &Policy::uniform(2, 2), 1, 10.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn label_examples() {
        assert_eq!(label_from_w(0.0, 0.99), 0.0);
        assert!((label_from_w(1.0, 0.99) - 0.99 / 1.99).abs() < 1e-15);
        assert_eq!(label_from_w(f64::INFINITY, 0.99), 1.0);
        let mut prev = 0.0;
        for k in 0..50 {
            let y = label_from_w(1.5f64.powi(k), 0.9);
            assert!(y > prev && y < 1.0);
            prev = y;
        }
    }

    #[test]
    fn n_step_label_examples() {
        assert_eq!(n_step_label(0.0, 0.0, 0.9, 10), 0.0);
        assert!((n_step_label(0.7, 0.7, 0.9, 1) - label_from_w(0.7, 0.9)).abs() < 1e-15);
        let expected = 0.5 * (1.0 / 3.0 + 0.25 / 1.25);
        assert!((n_step_label(1.0, 1.0, 0.5, 2) - expected).abs() < 1e-15);
        assert!((expected - 0.26667).abs() < 1e-5);
    }

    #[test]
    fn chain2_expected_updates_by_hand() {
        let mdp = chain2();
        let task = TaskSpec::new(0.5).unwrap();
        let pi = Policy::uniform(2, 1);
        let zero = Classifier::from_ratios(2, 1, &[0.0, 0.0]).unwrap();
        let one = expected_update(&zero, &pi, mdp.success_prob(), mdp.dynamics(), &task).unwrap();
        assert!(max_abs_diff(&one.ratios(), &[0.0, 0.5]) < 1e-15);
        let two = expected_update(&one, &pi, mdp.success_prob(), mdp.dynamics(), &task).unwrap();
        assert!(max_abs_diff(&two.ratios(), &[0.25, 0.75]) < 1e-15);
    }

    #[test]
    fn expected_update_fixed_point() {
        let mdp = chain2();
        let task = TaskSpec::new(0.5).unwrap();
        let pi = Policy::uniform(2, 1);
        let fixed = Classifier::from_ratios(2, 1, &[0.5, 1.0]).unwrap();
        let next = expected_update(&fixed, &pi, mdp.success_prob(), mdp.dynamics(), &task).unwrap();
        assert!(ratio_distance(&fixed, &next) < 1e-12);
        let zero = Classifier::from_ratios(2, 1, &[0.0, 0.0]).unwrap();
        let stays = expected_update(&zero, &pi, &[0.0, 0.0], mdp.dynamics(), &task).unwrap();
        assert_eq!(stays.ratios(), vec![0.0, 0.0]);
    }

    #[test]
    fn expected_update_is_value_iteration_step() {
        let mdp = chain2();
        let task = TaskSpec::new(0.9).unwrap();
        let pi = Policy::uniform(2, 1);
        let cls = Classifier::from_logits(2, 1, vec![-0.3, 1.2]).unwrap();
        let next = expected_update(&cls, &pi, mdp.success_prob(), mdp.dynamics(), &task).unwrap();
        let q = QTable {
            num_states: 2,
            num_actions: 1,
            values: cls.ratios(),
        };
        let reward: Vec<f64> = mdp.success_prob().iter().map(|p| 0.1 * p).collect();
        let vi = bellman_backup(mdp.dynamics(), 0.9, &reward, ViMode::PolicyEval(&pi), &q);
        assert!(max_abs_diff(&next.ratios(), &vi.values) < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let cls = Classifier::from_logits(2, 1, vec![0.1, -0.2]).unwrap();
        let out = stochastic_update(
            &cls,
            &cls,
            &Policy::uniform(2, 1),
            &[(1, 0)],
            &[TdSample::one_step(0, 0, 1)],
            &params(0.99, 0.0),
        );
        assert_eq!(out, cls);
    }

    #[test]
    fn success_term_gradient() {
        let cls = Classifier::zeros(2, 1);
        let out = stochastic_update(&cls, &cls, &Policy::uniform(2, 1), &[(1, 0)], &[], &params(0.99, 0.1));
        let delta = out.logit(1, 0);
        assert!((delta - 5e-4).abs() < 1e-15, "{delta}");
        assert_eq!(out.logit(0, 0), 0.0);
    }

    #[test]
    fn transition_term_vanishes_at_label() {
        // Target ratio 1 at s' gives label gamma / (gamma + 1); set C to exactly that.
        let gamma = 0.5;
        let y = label_from_w(1.0, gamma);
        let online = Classifier::from_logits(2, 1, vec![(y / (1.0 - y)).ln(), 0.0]).unwrap();
        let target = Classifier::zeros(2, 1);
        let g = stochastic_gradient(
            &online,
            &target,
            &Policy::uniform(2, 1),
            &[],
            &[TdSample::one_step(0, 0, 1)],
            &params(gamma, 1.0),
        );
        assert!(g[0].abs() < 1e-16);
    }

    #[test]
    fn empty_batches_are_a_no_op() {
        let cls = Classifier::zeros(2, 2);
        let out = stochastic_update(&cls, &cls, &Policy::uniform(2, 2), &[], &[], &params(0.9, 1.0));
        assert_eq!(out, cls);
    }

    #[test]
    fn greedy_ties_and_monotone_invariance() {
        let flat = Classifier::zeros(3, 4);
        assert_eq!(extract_policy(&flat, Extraction::Greedy), Policy::deterministic(4, &[0, 0, 0]));
        let cls = Classifier::from_logits(2, 3, vec![0.3, 1.1, -2.0, 0.0, -0.5, 0.7]).unwrap();
        let by_logit = extract_policy(&cls, Extraction::Greedy);
        let by_prob = Policy::greedy(2, 3, &cls.probs());
        let by_ratio = Policy::greedy(2, 3, &cls.ratios());
        assert_eq!(by_logit, by_prob);
        assert_eq!(by_logit, by_ratio);
    }

    #[test]
    fn soft_policy_approaches_greedy() {
        let cls = Classifier::from_logits(3, 3, vec![0.2, 0.5, 0.1, -1.0, -0.9, -3.0, 2.0, 1.0, 1.5]).unwrap();
        let soft = extract_policy(&cls, Extraction::Soft { temperature: 1e-6 });
        let greedy = extract_policy(&cls, Extraction::Greedy);
        assert!(soft.max_tv_distance(&greedy) < 1e-12);
        let warm = extract_policy(&cls, Extraction::Soft { temperature: 1.0 });
        assert!(warm.row(0).iter().all(|&p| p > 0.0));
    }

    #[test]
    fn soft_policy_handles_zero_rows() {
        let cls = Classifier::from_ratios(1, 2, &[0.0, 0.0]).unwrap();
        let pi = extract_policy(&cls, Extraction::Soft { temperature: 0.1 });
        assert_eq!(pi.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn classifier_json_keeps_negative_infinity() {
        let cls = Classifier::from_ratios(1, 2, &[0.0, 2.0]).unwrap();
        let text = serde_json::to_string(&cls).unwrap();
        assert!(text.contains("null"));
        let back: Classifier = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cls);
    }

    #[test]
    fn rejects_infinite_ratio() {
        assert!(Classifier::from_logits(1, 1, vec![f64::INFINITY]).is_err());
        assert!(Classifier::from_ratios(1, 1, &[-1.0]).is_err());
    }
}
