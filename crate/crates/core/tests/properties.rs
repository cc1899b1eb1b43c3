use proptest::prelude::*;
use rce_core::envs::{collect, make_env, sample_success_examples, EnvSpec};
use rce_core::mdp::{
    control_objective, discounted_occupancy, future_success_prob, max_abs_diff, OccupancyStart,
    Policy, TabularMdp, TaskSpec, TransitionKernel,
};
use rce_core::oracle::{
    bayes_optimal_classifier, bellman_backup, enumerate_future_success, greedy_improvement,
    value_iteration, verify_policy_improvement, QTable, ViMode,
};
use rce_core::rce::{
    bellman_residual, expected_update, extract_policy, stochastic_gradient, Classifier, Extraction,
    StepParams, TdSample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mdp(n: usize, m: usize, seed: u64) -> TabularMdp {
    make_env(&EnvSpec::random(n, m, seed)).unwrap()
}

fn random_policy(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Policy {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let w: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 1e-3).collect();
            let t: f64 = w.iter().sum();
            w.iter().map(|x| x / t).collect()
        })
        .collect();
    Policy::from_rows(&rows).unwrap()
}

fn gamma_strategy() -> impl Strategy<Value = f64> {
    prop::sample::select(vec![0.0, 0.5, 0.9, 0.99])
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn occupancy_is_a_distribution(n in 1usize..8, m in 1usize..4, seed in 0u64..1000, gamma in gamma_strategy()) {
        let mdp = random_mdp(n, m, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = random_policy(n, m, &mut rng);
        let task = TaskSpec::new(gamma).unwrap();
        let rho = discounted_occupancy(mdp.dynamics(), &task, &pi, OccupancyStart::Initial).unwrap();
        prop_assert!(rho.iter().all(|&x| x >= -1e-15));
        prop_assert!((rho.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let objective = control_objective(&mdp, &task, &pi).unwrap();
        let via_rho: f64 = rho.iter().zip(mdp.success_prob()).map(|(r, p)| r * p).sum();
        prop_assert!((objective - via_rho).abs() < 1e-9);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&objective));
    }

    #[test]
    fn future_success_satisfies_recursion(n in 1usize..8, m in 1usize..4, seed in 0u64..1000, gamma in gamma_strategy()) {
        let mdp = random_mdp(n, m, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let pi = random_policy(n, m, &mut rng);
        let task = TaskSpec::new(gamma).unwrap();
        let q = future_success_prob(&mdp, &task, &pi).unwrap();
        let reward: Vec<f64> = mdp.success_prob().iter().map(|p| (1.0 - gamma) * p).collect();
        let next = bellman_backup(mdp.dynamics(), gamma, &reward, ViMode::PolicyEval(&pi), &q);
        prop_assert!(q.max_abs_diff(&next) < 1e-9);
        prop_assert!(q.values.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        let vi = value_iteration(mdp.dynamics(), &task, &reward, ViMode::PolicyEval(&pi)).unwrap();
        prop_assert!(q.max_abs_diff(&vi) < 1e-9);
    }

    #[test]
    fn enumeration_matches_linear_solve(n in 1usize..7, m in 1usize..3, seed in 0u64..1000, gamma in prop::sample::select(vec![0.0, 0.5, 0.9])) {
        let mdp = random_mdp(n, m, seed);
        let pi = Policy::uniform(n, m);
        let task = TaskSpec::new(gamma).unwrap();
        let horizon = TaskSpec::horizon_for_tail(gamma, 1e-10);
        let q = future_success_prob(&mdp, &task, &pi).unwrap();
        let brute = enumerate_future_success(&mdp, &task, &pi, horizon).unwrap();
        prop_assert!(q.max_abs_diff(&brute) <= gamma.powi(horizon as i32 + 1) + 1e-9);
    }

    #[test]
    fn bayes_classifier_identities(n in 2usize..7, m in 1usize..4, seed in 0u64..1000, gamma in gamma_strategy()) {
        let mdp = random_mdp(n, m, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 11);
        let pi = random_policy(n, m, &mut rng);
        let task = TaskSpec::new(gamma).unwrap();
        let k = n * m;
        let mut marginal: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        marginal[0] = 0.0;
        let t: f64 = marginal.iter().sum();
        marginal.iter_mut().for_each(|x| *x /= t);
        let bayes = bayes_optimal_classifier(&mdp, &task, &pi, &marginal).unwrap();
        let q = future_success_prob(&mdp, &task, &pi).unwrap();
        prop_assert_eq!(bayes.undefined_entries(), vec![(0, 0)]);
        for s in 0..n {
            for a in 0..m {
                if let Some(r) = bayes.ratio(s, a) {
                    prop_assert!((r - q.get(s, a)).abs() < 1e-9);
                }
            }
        }
        let cls = Classifier::from_ratios(n, m, &q.values).unwrap();
        let residual = bellman_residual(&cls, &pi, mdp.success_prob(), mdp.dynamics(), &task).unwrap();
        prop_assert!(residual < 1e-9);
    }

    #[test]
    fn greedy_improvement_is_monotone(n in 1usize..8, m in 1usize..4, seed in 0u64..1000, gamma in gamma_strategy()) {
        let mdp = random_mdp(n, m, seed);
        let task = TaskSpec::new(gamma).unwrap();
        let mut pi = Policy::uniform(n, m);
        for _ in 0..3 {
            let next = greedy_improvement(&mdp, &task, &pi).unwrap();
            let report = verify_policy_improvement(&mdp, &task, &pi, &next).unwrap();
            prop_assert!(report.improved, "{report:?}");
            pi = next;
        }
    }

    #[test]
    fn expected_update_is_one_value_iteration_step(n in 1usize..11, m in 1usize..5, seed in 0u64..1000, gamma in gamma_strategy()) {
        let mdp = random_mdp(n, m, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let pi = random_policy(n, m, &mut rng);
        let task = TaskSpec::new(gamma).unwrap();
        let logits: Vec<f64> = (0..n * m).map(|_| rng.random_range(-4.0..4.0)).collect();
        let cls = Classifier::from_logits(n, m, logits).unwrap();
        let next = expected_update(&cls, &pi, mdp.success_prob(), mdp.dynamics(), &task).unwrap();
        let q = QTable { num_states: n, num_actions: m, values: cls.ratios() };
        let reward: Vec<f64> = mdp.success_prob().iter().map(|p| (1.0 - gamma) * p).collect();
        let vi = bellman_backup(mdp.dynamics(), gamma, &reward, ViMode::PolicyEval(&pi), &q);
        prop_assert!(max_abs_diff(&next.ratios(), &vi.values) < 1e-12);
    }

    #[test]
    fn greedy_extraction_ignores_monotone_transforms(n in 1usize..8, m in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..n * m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let cls = Classifier::from_logits(n, m, logits.clone()).unwrap();
        let by_logit = extract_policy(&cls, Extraction::Greedy);
        prop_assert_eq!(&by_logit, &Policy::greedy(n, m, &cls.probs()));
        prop_assert_eq!(&by_logit, &Policy::greedy(n, m, &cls.ratios()));
        let cubed: Vec<f64> = logits.iter().map(|l| l * l * l + 2.0 * l).collect();
        prop_assert_eq!(&by_logit, &Policy::greedy(n, m, &cubed));
    }
}

#[test]
fn degenerate_gamma_zero_recovers_success_prob() {
    for seed in 0..20u64 {
        let mdp = random_mdp(5, 3, seed);
        let task = TaskSpec::new(0.0).unwrap();
        let pi = Policy::uniform(5, 3);
        let cls = Classifier::zeros(5, 3);
        let out = expected_update(&cls, &pi, mdp.success_prob(), mdp.dynamics(), &task).unwrap();
        for s in 0..5 {
            for a in 0..3 {
                assert!((out.ratio(s, a) - mdp.success_prob()[s]).abs() < 1e-15);
            }
        }
    }
}

/// Expected stochastic gradient at the Bayes-optimal classifier, summing
/// singleton-batch gradients weighted by their sampling probability.
#[test]
fn expected_gradient_vanishes_at_bayes_optimum() {
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 1 + (seed as usize % 4);
        let m = 1 + (seed as usize % 2);
        let mdp = random_mdp(n, m, seed);
        let gamma = [0.5, 0.9, 0.99][seed as usize % 3];
        let task = TaskSpec::new(gamma).unwrap();
        let pi = random_policy(n, m, &mut rng);
        // Data state marginal d(s), actions from pi; user examples follow d(s) p_e(s).
        let mut d: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
        let t: f64 = d.iter().sum();
        d.iter_mut().for_each(|x| *x /= t);
        let weights: Vec<f64> = d.iter().zip(mdp.success_prob()).map(|(a, b)| a * b).collect();
        let prior: f64 = weights.iter().sum();
        let dist: Vec<f64> = weights.iter().map(|w| w / prior).collect();

        let q = future_success_prob(&mdp, &task, &pi).unwrap();
        let cls = Classifier::from_ratios(n, m, &q.values).unwrap();
        let params = StepParams {
            gamma,
            learning_rate: 1.0,
            n_step: 1,
            ratio_clip: f64::INFINITY,
            success_scale: prior,
        };
        let mut total = vec![0.0; n * m];
        for s in 0..n {
            for a in 0..m {
                let p_succ = dist[s] * pi.prob(s, a);
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
        assert!(norm < 1e-8, "seed {seed}: gradient norm {norm}");
    }
}

#[test]
fn success_posterior_round_trip() {
    use rce_core::mdp::success_posterior;
    for seed in 0..5u64 {
        let mdp = random_mdp(4, 2, seed);
        let data = collect(mdp.dynamics(), &Policy::uniform(4, 2), 100_000, 151, seed).unwrap();
        let marginal = data.state_marginal();
        let count = 100_000;
        let successes = sample_success_examples(&mdp, &marginal, count, seed).unwrap();
        let post = success_posterior(&successes, &marginal).unwrap();
        for s in 0..4 {
            let p_e = mdp.success_prob()[s];
            // Binomial count of state s among the examples, scaled back to p_e.
            let q = marginal[s] * p_e / successes.prior;
            let sd = (q * (1.0 - q) / count as f64).sqrt() * successes.prior / marginal[s];
            assert!(
                (post.values[s] - p_e).abs() <= 3.0 * sd + 1e-12,
                "seed {seed} state {s}: {} vs {p_e} (sd {sd})",
                post.values[s]
            );
        }
    }
}

#[test]
fn empirical_marginals_converge() {
    let mdp = random_mdp(4, 2, 42);
    let pi = Policy::uniform(4, 2);
    // Reference: a very long run stands in for the stationary mixture.
    let reference = collect(mdp.dynamics(), &pi, 2_000_000, 151, 999).unwrap().state_marginal();
    let mut previous = f64::INFINITY;
    for steps in [1_000usize, 10_000, 100_000] {
        let mut err = 0.0;
        for seed in 0..5u64 {
            let m = collect(mdp.dynamics(), &pi, steps, 151, seed).unwrap().state_marginal();
            err += m.iter().zip(&reference).map(|(a, b)| (a - b).abs()).sum::<f64>() / 5.0;
        }
        assert!(err < previous, "L1 {err} after {steps} steps did not decrease");
        previous = err;
    }
}
