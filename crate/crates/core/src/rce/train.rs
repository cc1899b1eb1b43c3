use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    expected_update, extract_policy, ratio_distance, stochastic_update, Classifier, Extraction,
    TdSample,
};
use crate::data::{Collector, TransitionDataset};
use crate::envs::sample_index;
use crate::error::{LabError, Result};
use crate::mdp::{success_posterior, success_ratio, Policy, SuccessExampleSet, TaskSpec, TransitionKernel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `eta_k = eta / (1 + k / horizon)`.
    RobbinsMonro { horizon: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, k: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::RobbinsMonro { horizon } => base / (1.0 + k as f64 / horizon),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSource {
    CurrentPolicy,
    BehaviorPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyUpdate {
    Greedy,
    /// Softmax of the logits at temperature `entropy_coeff`.
    Soft,
    /// Keep the initial policy; this is policy evaluation.
    Fixed,
}

/// How much the success term weighs besides `1 - gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuccessWeight {
    /// Drop `p(e=1)`; the odds then converge to `Q / p(e=1)`.
    Unit,
    /// Multiply by the stored prior, so the odds converge to `Q`.
    Prior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    /// Temperature of soft extraction.
    pub entropy_coeff: f64,
    pub polyak: f64,
    pub n_step: usize,
    pub success_batch: usize,
    pub transition_batch: usize,
    pub max_iters: usize,
    pub tolerance: f64,
    pub action_source: ActionSource,
    pub ratio_clip: f64,
    pub policy_update: PolicyUpdate,
    pub success_weight: SuccessWeight,
    /// Re-extract the policy every this many stochastic steps.
    pub policy_every: usize,
    pub metric_cadence: usize,
    pub collect_every: usize,
    pub collect_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            learning_rate: 1.0,
            lr_schedule: LrSchedule::Constant,
            entropy_coeff: 1e-4,
            polyak: 0.005,
            n_step: 10,
            success_batch: 256,
            transition_batch: 256,
            max_iters: 10_000,
            tolerance: 1e-12,
            action_source: ActionSource::CurrentPolicy,
            ratio_clip: 10.0,
            policy_update: PolicyUpdate::Greedy,
            success_weight: SuccessWeight::Unit,
            policy_every: 1,
            metric_cadence: 1,
            collect_every: 1000,
            collect_steps: 1510,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        TaskSpec {
            gamma: self.gamma,
            horizon_truncation: 1,
        }
        .validate()?;
        let positive = [
            ("TrainConfig.learning_rate >= 0", self.learning_rate >= 0.0),
            ("TrainConfig.entropy_coeff > 0", self.entropy_coeff > 0.0),
            ("TrainConfig.polyak in (0, 1]", self.polyak > 0.0 && self.polyak <= 1.0),
            ("TrainConfig.n_step >= 1", self.n_step >= 1),
            ("TrainConfig.max_iters >= 1", self.max_iters >= 1),
            ("TrainConfig.tolerance > 0", self.tolerance > 0.0),
            ("TrainConfig.ratio_clip > 0", self.ratio_clip > 0.0),
            ("TrainConfig.policy_every >= 1", self.policy_every >= 1),
            ("TrainConfig.metric_cadence >= 1", self.metric_cadence >= 1),
            ("TrainConfig.collect_every >= 1", self.collect_every >= 1),
        ];
        for (name, ok) in positive {
            if !ok {
                return Err(LabError::invariant(name, format!("{self:?}")));
            }
        }
        if let LrSchedule::RobbinsMonro { horizon } = self.lr_schedule {
            if !(horizon > 0.0) {
                return Err(LabError::invariant("Robbins-Monro horizon > 0", horizon.to_string()));
            }
        }
        Ok(())
    }

    pub fn extraction(&self) -> Option<Extraction> {
        match self.policy_update {
            PolicyUpdate::Greedy => Some(Extraction::Greedy),
            PolicyUpdate::Soft => Some(Extraction::Soft {
                temperature: self.entropy_coeff,
            }),
            PolicyUpdate::Fixed => None,
        }
    }

    pub fn task(&self) -> TaskSpec {
        TaskSpec {
            gamma: self.gamma,
            horizon_truncation: 100,
        }
    }
}

/// Scalars a single stochastic step needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub gamma: f64,
    pub learning_rate: f64,
    pub n_step: usize,
    pub ratio_clip: f64,
    pub success_scale: f64,
}

impl StepParams {
    pub fn from_config(cfg: &TrainConfig, learning_rate: f64, prior: f64) -> Self {
        StepParams {
            gamma: cfg.gamma,
            learning_rate,
            n_step: cfg.n_step,
            ratio_clip: cfg.ratio_clip,
            success_scale: match cfg.success_weight {
                SuccessWeight::Unit => 1.0,
                SuccessWeight::Prior => prior,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Expected,
    Stochastic,
}

/// Overrides the data-derived model in expected mode (verification runs).
pub struct ExpectedModel<'a> {
    pub kernel: &'a dyn TransitionKernel,
    pub signal: Vec<f64>,
}

#[derive(Default)]
pub struct TrainHooks<'a> {
    pub initial_policy: Option<Policy>,
    pub evaluate: Option<&'a dyn Fn(&Policy) -> f64>,
    pub collector: Option<&'a mut dyn Collector>,
    pub model: Option<ExpectedModel<'a>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub objective: Option<f64>,
    pub bellman_residual: Option<f64>,
    pub policy_delta: f64,
    pub wallclock_ns: u128,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub classifier: Classifier,
    pub policy: Policy,
    pub metrics: Vec<MetricRow>,
    pub iterations: usize,
    pub converged: bool,
    /// Expected mode stopped at `max_iters` without meeting the tolerance.
    pub capped: bool,
    pub posterior_violation: bool,
    pub data: TransitionDataset,
}

/// Implied success signal from data: `p_U(s|e=1) / p_U(s)`, times the prior
/// (clamped to one) when the prior is requested.
fn data_signal(
    data: &TransitionDataset,
    successes: &SuccessExampleSet,
    weight: SuccessWeight,
) -> Result<(Vec<f64>, bool)> {
    let marginal = data.state_marginal();
    match weight {
        SuccessWeight::Unit => Ok((success_ratio(&successes.dist, &marginal)?, false)),
        SuccessWeight::Prior => {
            let post = success_posterior(successes, &marginal)?;
            Ok((post.values, post.violation))
        }
    }
}

/// Runs RCE on a dataset and a success set, optionally recollecting data
/// with the current policy when `hooks.collector` is set.
pub fn train(
    data: &TransitionDataset,
    successes: &SuccessExampleSet,
    cfg: &TrainConfig,
    mode: TrainMode,
    online: bool,
    hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    successes.validate()?;
    if successes.num_states() != data.num_states {
        return Err(LabError::Dimension("success set and dataset disagree on num_states".into()));
    }
    if online && hooks.collector.is_none() {
        return Err(LabError::MissingInput("online training needs a collector".into()));
    }
    if data.is_empty() && !(online || hooks.model.is_some()) {
        return Err(LabError::Empty("transition dataset"));
    }
    if let Some(pi) = &hooks.initial_policy {
        pi.check_shape(data.num_states, data.num_actions)?;
    }
    match mode {
        TrainMode::Expected => train_expected(data, successes, cfg, online, hooks),
        TrainMode::Stochastic => train_stochastic(data, successes, cfg, online, hooks),
    }
}

fn train_expected(
    data: &TransitionDataset,
    successes: &SuccessExampleSet,
    cfg: &TrainConfig,
    online: bool,
    hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    let TrainHooks {
        initial_policy,
        evaluate,
        mut collector,
        model,
    } = hooks;
    let (n, m) = (data.num_states, data.num_actions);
    let task = cfg.task();
    let start = Instant::now();
    let mut data = data.clone();
    let mut empirical = data.empirical_kernel();
    let (mut signal, mut violation) = match &model {
        Some(model) => (model.signal.clone(), false),
        None => data_signal(&data, successes, cfg.success_weight)?,
    };
    let mut cls = Classifier::zeros(n, m);
    let mut pi = initial_policy.unwrap_or_else(|| Policy::uniform(n, m));
    let extraction = cfg.extraction();
    let mut metrics = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for k in 0..cfg.max_iters {
        iterations = k + 1;
        let mut delta = 0.0;
        if let Some(ex) = extraction {
            let next_pi = extract_policy(&cls, ex);
            delta = pi.max_tv_distance(&next_pi);
            pi = next_pi;
        }
        let kernel: &dyn TransitionKernel = match &model {
            Some(model) => model.kernel,
            None => &empirical,
        };
        let next = expected_update(&cls, &pi, &signal, kernel, &task)?;
        let residual = ratio_distance(&cls, &next);
        let scale = next.ratios().iter().fold(1.0f64, |acc, r| acc.max(*r));
        cls = next;
        if k % cfg.metric_cadence == 0 {
            metrics.push(MetricRow {
                iteration: k,
                objective: evaluate.map(|f| f(&pi)),
                bellman_residual: Some(residual),
                policy_delta: delta,
                wallclock_ns: start.elapsed().as_nanos(),
            });
        }
        if residual < cfg.tolerance * scale && delta < cfg.tolerance {
            converged = true;
            break;
        }
        if online && (k + 1) % cfg.collect_every == 0 {
            if let Some(c) = collector.as_deref_mut() {
                data.extend(&c.collect(&pi, cfg.collect_steps));
                if model.is_none() {
                    empirical = data.empirical_kernel();
                    (signal, violation) = data_signal(&data, successes, cfg.success_weight)?;
                }
            }
        }
    }
    if !converged {
        log::warn!("expected-mode training hit the iteration cap {}", cfg.max_iters);
    }
    if let Some(ex) = extraction {
        pi = extract_policy(&cls, ex);
    }
    Ok(TrainOutcome {
        classifier: cls,
        policy: pi,
        metrics,
        iterations,
        converged,
        capped: !converged,
        posterior_violation: violation,
        data,
    })
}

/// Flat index of `(trajectory, step)` pairs for uniform replay sampling.
fn replay_index(data: &TransitionDataset) -> Vec<(usize, usize)> {
    data.trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, tr)| (0..tr.len()).map(move |t| (i, t)))
        .collect()
}

fn train_stochastic(
    data: &TransitionDataset,
    successes: &SuccessExampleSet,
    cfg: &TrainConfig,
    online: bool,
    hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    let TrainHooks {
        initial_policy,
        evaluate,
        mut collector,
        model: _,
    } = hooks;
    let (n, m) = (data.num_states, data.num_actions);
    let task = cfg.task();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = data.clone();
    let mut index = replay_index(&data);
    let mut behavior = data.behavior_policy();
    // Residual diagnostics only; the signal is never used for learning here.
    let mut diag = data_signal(&data, successes, cfg.success_weight).ok().map(|(s, _)| s);
    let mut empirical = data.empirical_kernel();

    let mut cls = Classifier::zeros(n, m);
    let mut target = cls.clone();
    let mut pi = initial_policy.unwrap_or_else(|| Policy::uniform(n, m));
    let extraction = cfg.extraction();
    let mut metrics = Vec::new();
    let mut success_batch = Vec::with_capacity(cfg.success_batch);
    let mut td_batch = Vec::with_capacity(cfg.transition_batch);

    for k in 0..cfg.max_iters {
        if online && k > 0 && k % cfg.collect_every == 0 {
            if let Some(c) = collector.as_deref_mut() {
                data.extend(&c.collect(&pi, cfg.collect_steps));
                index = replay_index(&data);
                behavior = data.behavior_policy();
                diag = data_signal(&data, successes, cfg.success_weight).ok().map(|(s, _)| s);
                empirical = data.empirical_kernel();
            }
        }

        success_batch.clear();
        for _ in 0..cfg.success_batch {
            let s = if successes.examples.is_empty() {
                sample_index(&mut rng, &successes.dist)
            } else {
                successes.examples[rng.random_range(0..successes.examples.len())]
            };
            let source = match cfg.action_source {
                ActionSource::CurrentPolicy => &pi,
                ActionSource::BehaviorPolicy => &behavior,
            };
            success_batch.push((s, sample_index(&mut rng, source.row(s))));
        }

        td_batch.clear();
        if !index.is_empty() {
            for _ in 0..cfg.transition_batch {
                let (i, t) = index[rng.random_range(0..index.len())];
                let tr = &data.trajectories[i];
                let s_ahead = (cfg.n_step > 1 && t + cfg.n_step <= tr.len())
                    .then(|| tr.states[t + cfg.n_step]);
                td_batch.push(TdSample {
                    s: tr.states[t],
                    a: tr.actions[t],
                    s_next: tr.states[t + 1],
                    s_ahead,
                });
            }
        }

        let lr = cfg.lr_schedule.rate(cfg.learning_rate, k);
        let params = StepParams::from_config(cfg, lr, successes.prior);
        cls = stochastic_update(&cls, &target, &pi, &success_batch, &td_batch, &params);
        if let Some(i) = cls.logits().iter().position(|l| !l.is_finite()) {
            return Err(LabError::invariant(
                "Classifier ratio exp(theta) finite",
                format!("logit {i} diverged at iteration {k}; lower the learning rate"),
            ));
        }
        target.polyak_toward(&cls, cfg.polyak);

        let mut delta = 0.0;
        if let Some(ex) = extraction {
            if k % cfg.policy_every == 0 {
                let next_pi = extract_policy(&cls, ex);
                delta = pi.max_tv_distance(&next_pi);
                pi = next_pi;
            }
        }

        if k % cfg.metric_cadence == 0 || k + 1 == cfg.max_iters {
            let residual = match &diag {
                Some(signal) => {
                    let next = expected_update(&cls, &pi, signal, &empirical, &task)?;
                    Some(ratio_distance(&cls, &next))
                }
                None => None,
            };
            metrics.push(MetricRow {
                iteration: k,
                objective: evaluate.map(|f| f(&pi)),
                bellman_residual: residual,
                policy_delta: delta,
                wallclock_ns: start.elapsed().as_nanos(),
            });
        }
    }

    Ok(TrainOutcome {
        classifier: cls,
        policy: pi,
        metrics,
        iterations: cfg.max_iters,
        converged: false,
        capped: false,
        posterior_violation: false,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Trajectory;
    use crate::mdp::{future_success_prob, max_abs_diff};
    use crate::mdp::fixtures::chain2;

    fn chain2_data() -> TransitionDataset {
        let mut d = TransitionDataset::new(2, 1, 0);
        d.push(Trajectory {
            states: vec![0, 1],
            actions: vec![0],
        })
        .unwrap();
        d.push(Trajectory {
            states: vec![1, 1],
            actions: vec![0],
        })
        .unwrap();
        d
    }

    #[test]
    fn expected_mode_chain2_converges() {
        let mdp = chain2();
        let data = chain2_data();
        let successes = SuccessExampleSet::from_examples(vec![1], 2, 0.5).unwrap();
        let cfg = TrainConfig {
            gamma: 0.5,
            max_iters: 200,
            policy_update: PolicyUpdate::Fixed,
            ..TrainConfig::default()
        };
        let hooks = TrainHooks {
            model: Some(ExpectedModel {
                kernel: mdp.dynamics(),
                signal: mdp.success_prob().to_vec(),
            }),
            ..TrainHooks::default()
        };
        let out = train(&data, &successes, &cfg, TrainMode::Expected, false, hooks).unwrap();
        assert!(out.converged && out.iterations <= 200, "{}", out.iterations);
        assert!(max_abs_diff(&out.classifier.ratios(), &[0.5, 1.0]) < 1e-9);
    }

    #[test]
    fn expected_mode_with_data_signal_scales_by_prior() {
        // Uniform state marginal, all success mass on state 1: signal = 2 = p_e / prior.
        let data = chain2_data();
        let successes = SuccessExampleSet::from_examples(vec![1], 2, 0.5).unwrap();
        let cfg = TrainConfig {
            gamma: 0.5,
            policy_update: PolicyUpdate::Fixed,
            ..TrainConfig::default()
        };
        let unit = train(&data, &successes, &cfg, TrainMode::Expected, false, TrainHooks::default()).unwrap();
        assert!(max_abs_diff(&unit.classifier.ratios(), &[1.0, 2.0]) < 1e-9);
        let cfg = TrainConfig {
            success_weight: SuccessWeight::Prior,
            ..cfg
        };
        let exact = train(&data, &successes, &cfg, TrainMode::Expected, false, TrainHooks::default()).unwrap();
        let q = future_success_prob(&chain2(), &cfg.task(), &Policy::uniform(2, 1)).unwrap();
        assert!(max_abs_diff(&exact.classifier.ratios(), &q.values) < 1e-9);
    }

    #[test]
    fn zero_learning_rate_is_flat() {
        let data = chain2_data();
        let successes = SuccessExampleSet::from_examples(vec![1], 2, 0.5).unwrap();
        let cfg = TrainConfig {
            gamma: 0.5,
            learning_rate: 0.0,
            max_iters: 50,
            ..TrainConfig::default()
        };
        let eval = |_: &Policy| 0.5;
        let hooks = TrainHooks {
            evaluate: Some(&eval),
            ..TrainHooks::default()
        };
        let out = train(&data, &successes, &cfg, TrainMode::Stochastic, false, hooks).unwrap();
        assert_eq!(out.classifier, Classifier::zeros(2, 1));
        let first = &out.metrics[0];
        assert!(out.metrics.iter().all(|r| r.objective == first.objective
            && r.bellman_residual == first.bellman_residual
            && r.policy_delta == 0.0));
    }

    #[test]
    fn online_without_collector_is_an_error() {
        let successes = SuccessExampleSet::from_examples(vec![1], 2, 0.5).unwrap();
        let err = train(
            &chain2_data(),
            &successes,
            &TrainConfig::default(),
            TrainMode::Stochastic,
            true,
            TrainHooks::default(),
        )
        .unwrap_err();
        assert!(matches!(err, LabError::MissingInput(_)));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let successes = SuccessExampleSet::from_examples(vec![1], 2, 0.5).unwrap();
        let err = train(
            &TransitionDataset::new(2, 1, 0),
            &successes,
            &TrainConfig::default(),
            TrainMode::Expected,
            false,
            TrainHooks::default(),
        )
        .unwrap_err();
        assert!(matches!(err, LabError::Empty(_)));
    }

    #[test]
    fn schedule_decays() {
        let s = LrSchedule::RobbinsMonro { horizon: 100.0 };
        assert_eq!(s.rate(1.0, 0), 1.0);
        assert_eq!(s.rate(1.0, 100), 0.5);
        assert_eq!(LrSchedule::Constant.rate(0.3, 1000), 0.3);
    }
}
