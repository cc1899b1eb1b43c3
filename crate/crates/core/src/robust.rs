//! Robust example-based control: the worst-case user visitation, the
//! Hellinger form of the robust value, a numeric check of the inner
//! minimization, and iterated RCE with its proportionality diagnostic.

use serde::{Deserialize, Serialize};

use crate::data::TransitionDataset;
use crate::envs::collect;
use crate::error::{LabError, Result};
use crate::mdp::{discounted_occupancy, Dynamics, OccupancyStart, Policy, SuccessExampleSet};
use crate::rce::{train, TrainConfig, TrainHooks, TrainMode};

/// Default tolerance of the fixed-point diagnostic.
pub const FIXED_POINT_TOL: f64 = 0.05;

fn check_pair(rho: &[f64], p: &[f64]) -> Result<()> {
    if rho.len() != p.len() {
        return Err(LabError::Dimension(format!(
            "occupancy has {} entries, success distribution {}",
            rho.len(),
            p.len()
        )));
    }
    for (name, v) in [("occupancy", rho), ("success distribution", p)] {
        let total: f64 = v.iter().sum();
        if v.iter().any(|x| !(*x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(LabError::invariant(
                "robust inputs are probability vectors",
                format!("{name} sums to {total}"),
            ));
        }
    }
    Ok(())
}

/// `p_U(s) ∝ sqrt(rho(s) p(s))`.
pub fn worst_case_pu(rho: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    check_pair(rho, p)?;
    let root: Vec<f64> = rho.iter().zip(p).map(|(r, q)| (r * q).sqrt()).collect();
    let total: f64 = root.iter().sum();
    if total == 0.0 {
        return Err(LabError::ZeroMass(
            "occupancy and success distribution have disjoint supports".into(),
        ));
    }
    Ok(root.into_iter().map(|x| x / total).collect())
}

/// Bhattacharyya coefficient `sum sqrt(p q)`.
pub fn bhattacharyya(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a * b).sqrt()).sum()
}

pub fn hellinger_sq(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum()
}

/// `(sum sqrt(rho p))^2 * prior`.
pub fn robust_objective(rho: &[f64], p: &[f64], prior: f64) -> f64 {
    let bc = bhattacharyya(rho, p);
    bc * bc * prior
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustReport {
    pub worst_pu: Vec<f64>,
    pub robust_value: f64,
    pub hellinger_sq: f64,
    pub bhattacharyya: f64,
    /// Some state has success mass but no occupancy, or the reverse. The
    /// closed form counts those states as zero while the raw inner
    /// minimization is unbounded there.
    pub support_mismatch: bool,
}

pub fn robust_report(rho: &[f64], p: &[f64], prior: f64) -> Result<RobustReport> {
    let worst_pu = worst_case_pu(rho, p)?;
    let support_mismatch = rho.iter().zip(p).any(|(r, q)| (*r > 0.0) != (*q > 0.0));
    if support_mismatch {
        log::warn!("occupancy and success distribution supports differ");
    }
    Ok(RobustReport {
        worst_pu,
        robust_value: robust_objective(rho, p, prior),
        hellinger_sq: hellinger_sq(p, rho),
        bhattacharyya: bhattacharyya(rho, p),
        support_mismatch,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InnerMinMethod {
    /// Exponentiated gradient with step `step / ||g||_inf`.
    Gradient { max_iters: usize, step: f64 },
    /// Dense simplex grid with zooming, for at most three support states.
    Grid { resolution: usize, rounds: usize },
}

impl Default for InnerMinMethod {
    fn default() -> Self {
        InnerMinMethod::Gradient {
            max_iters: 100_000,
            step: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerMin {
    pub pu_hat: Vec<f64>,
    /// `sum rho p / pu_hat`; compare against `robust_objective / prior`.
    pub value: f64,
    pub iterations: usize,
}

fn inner_value(weights: &[f64], q: &[f64]) -> f64 {
    weights
        .iter()
        .zip(q)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, x)| w / x)
        .sum()
}

/// Minimizes `sum_s rho(s) p(s) / q(s)` over the simplex, restricted to
/// the states where `rho p > 0`.
pub fn numeric_inner_min(rho: &[f64], p: &[f64], method: InnerMinMethod) -> Result<InnerMin> {
    check_pair(rho, p)?;
    let weights: Vec<f64> = rho.iter().zip(p).map(|(r, q)| r * q).collect();
    let support: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    if support.is_empty() {
        return Err(LabError::ZeroMass("rho * p has empty support".into()));
    }
    let w: Vec<f64> = support.iter().map(|&i| weights[i]).collect();
    let (q_support, iterations) = match method {
        InnerMinMethod::Gradient { max_iters, step } => eg_minimize(&w, max_iters, step),
        InnerMinMethod::Grid { resolution, rounds } => {
            if support.len() > 3 {
                return Err(LabError::Config(format!(
                    "grid mode needs at most 3 support states, got {}",
                    support.len()
                )));
            }
            grid_minimize(&w, resolution.max(2), rounds.max(1))
        }
    };
    let mut pu_hat = vec![0.0; weights.len()];
    for (&i, &q) in support.iter().zip(&q_support) {
        pu_hat[i] = q;
    }
    Ok(InnerMin {
        value: inner_value(&w, &q_support),
        pu_hat,
        iterations,
    })
}

fn eg_minimize(w: &[f64], max_iters: usize, step: f64) -> (Vec<f64>, usize) {
    let k = w.len();
    let mut q = vec![1.0 / k as f64; k];
    let mut grad = vec![0.0; k];
    for it in 0..max_iters {
        for i in 0..k {
            grad[i] = -w[i] / (q[i] * q[i]);
        }
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let lo = grad.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = grad.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Stationary when the gradient is constant across the support.
        if (hi - lo) <= 1e-13 * scale {
            return (q, it);
        }
        let eta = step / scale;
        let mut total = 0.0;
        for i in 0..k {
            q[i] *= (-eta * grad[i]).exp();
            total += q[i];
        }
        for x in &mut q {
            *x /= total;
        }
    }
    (q, max_iters)
}

fn grid_minimize(w: &[f64], resolution: usize, rounds: usize) -> (Vec<f64>, usize) {
    let k = w.len();
    if k == 1 {
        return (vec![1.0], 0);
    }
    let mut center = vec![1.0 / k as f64; k];
    let mut radius = 1.0;
    let mut evaluations = 0;
    for _ in 0..rounds {
        let h = 2.0 * radius / resolution as f64;
        let mut best = (f64::INFINITY, center.clone());
        let coord = |c: f64, j: usize| c - radius + h * j as f64;
        let consider = |q: Vec<f64>, best: &mut (f64, Vec<f64>)| {
            if q.iter().all(|x| *x > 0.0) {
                let v = inner_value(w, &q);
                if v < best.0 {
                    *best = (v, q);
                }
            }
        };
        for i in 0..=resolution {
            let a = coord(center[0], i);
            if k == 2 {
                evaluations += 1;
                consider(vec![a, 1.0 - a], &mut best);
                continue;
            }
            for j in 0..=resolution {
                let b = coord(center[1], j);
                evaluations += 1;
                consider(vec![a, b, 1.0 - a - b], &mut best);
            }
        }
        center = best.1;
        radius = 2.0 * h;
    }
    (center, evaluations)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    /// `rho(s) / p(s|e=1)` on the success support, in state order.
    pub ratios: Vec<f64>,
    pub median_ratio: f64,
    pub max_abs_deviation: f64,
    /// `max |ratio / median - 1|`; the proportionality constant is free,
    /// so this scale-free form is what `reached` tests.
    pub max_rel_deviation: f64,
    pub tolerance: f64,
    pub reached: bool,
}

pub fn fixed_point_report(rho: &[f64], success_dist: &[f64], tolerance: f64) -> Result<FixedPointReport> {
    if rho.len() != success_dist.len() {
        return Err(LabError::Dimension("occupancy vs success distribution".into()));
    }
    let ratios: Vec<f64> = rho
        .iter()
        .zip(success_dist)
        .filter(|(_, p)| **p > 0.0)
        .map(|(r, p)| r / p)
        .collect();
    if ratios.is_empty() {
        return Err(LabError::Empty("success support"));
    }
    let mut sorted = ratios.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median_ratio = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    let max_abs_deviation = ratios.iter().map(|r| (r - median_ratio).abs()).fold(0.0, f64::max);
    let max_rel_deviation = if median_ratio > 0.0 {
        max_abs_deviation / median_ratio
    } else if max_abs_deviation == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(FixedPointReport {
        ratios,
        median_ratio,
        max_abs_deviation,
        max_rel_deviation,
        tolerance,
        reached: max_rel_deviation < tolerance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IteratedConfig {
    pub train: TrainConfig,
    pub mode: TrainMode,
    pub outer_iters: usize,
    pub steps_per_iter: usize,
    pub episode_len: usize,
    pub seed: u64,
    pub fixed_point_tol: f64,
}

#[derive(Debug, Clone)]
pub struct IteratedOutcome {
    pub policies: Vec<Policy>,
    /// Exact discounted state occupancy of each policy from the initial distribution.
    pub occupancies: Vec<Vec<f64>>,
    pub fixed_point: FixedPointReport,
    pub data: TransitionDataset,
}

/// Alternates full RCE training on the replay data with on-policy
/// collection. `outer_iters = 1` is plain offline RCE on `initial_data`.
pub fn iterated_rce(
    dynamics: &Dynamics,
    successes: &SuccessExampleSet,
    initial_data: &TransitionDataset,
    cfg: &IteratedConfig,
) -> Result<IteratedOutcome> {
    if cfg.outer_iters == 0 {
        return Err(LabError::invariant("outer_iters >= 1", "outer_iters = 0"));
    }
    let task = cfg.train.task();
    let mut data = initial_data.clone();
    let mut policies = Vec::with_capacity(cfg.outer_iters);
    let mut occupancies = Vec::with_capacity(cfg.outer_iters);
    for k in 0..cfg.outer_iters {
        let out = train(&data, successes, &cfg.train, cfg.mode, false, TrainHooks::default())?;
        let rho = discounted_occupancy(dynamics, &task, &out.policy, OccupancyStart::Initial)?;
        log::debug!("outer iteration {k}: {} transitions", data.num_transitions());
        if k + 1 < cfg.outer_iters {
            let fresh = collect(
                dynamics,
                &out.policy,
                cfg.steps_per_iter,
                cfg.episode_len,
                cfg.seed.wrapping_add(k as u64 + 1),
            )?;
            data.extend(&fresh);
        }
        policies.push(out.policy);
        occupancies.push(rho);
    }
    let last = occupancies.last().expect("at least one outer iteration");
    let fixed_point = fixed_point_report(last, &successes.dist, cfg.fixed_point_tol)?;
    Ok(IteratedOutcome {
        policies,
        occupancies,
        fixed_point,
        data,
    })
}

/// Share of the mass inside each region, normalized over their union.
pub fn region_shares(rho: &[f64], regions: &[Vec<usize>]) -> Vec<f64> {
    let masses: Vec<f64> = regions
        .iter()
        .map(|states| states.iter().map(|&s| rho[s]).sum())
        .collect();
    let total: f64 = masses.iter().sum();
    masses
        .into_iter()
        .map(|m| if total > 0.0 { m / total } else { 0.0 })
        .collect()
}

/// `x,y,mass` rows for a row-major grid, state `s = y * width + x`.
pub fn heatmap_csv(rho: &[f64], width: usize) -> String {
    let mut out = String::from("x,y,mass\n");
    for (s, m) in rho.iter().enumerate() {
        out.push_str(&format!("{},{},{m}\n", s % width, s / width));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::max_abs_diff;

    #[test]
    fn worst_case_examples() {
        assert_eq!(worst_case_pu(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), vec![0.5, 0.5]);
        let even = worst_case_pu(&[0.8, 0.2], &[0.2, 0.8]).unwrap();
        assert!(max_abs_diff(&even, &[0.5, 0.5]) < 1e-15);
        let skew = worst_case_pu(&[0.9, 0.1], &[0.5, 0.5]).unwrap();
        assert!(max_abs_diff(&skew, &[0.75, 0.25]) < 1e-15);
        assert!(worst_case_pu(&[1.0, 0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn robust_objective_examples() {
        assert!((robust_objective(&[0.3, 0.7], &[0.3, 0.7], 0.3) - 0.3).abs() < 1e-15);
        assert_eq!(robust_objective(&[1.0, 0.0], &[0.0, 1.0], 1.0), 0.0);
        assert!((robust_objective(&[0.9, 0.1], &[0.5, 0.5], 1.0) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn hellinger_examples() {
        assert_eq!(hellinger_sq(&[0.2, 0.8], &[0.2, 0.8]), 0.0);
        assert_eq!(hellinger_sq(&[1.0, 0.0], &[0.0, 1.0]), 2.0);
        let v = hellinger_sq(&[0.5, 0.5], &[1.0, 0.0]);
        assert!((v - (2.0 - 2f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn inner_min_matches_closed_form() {
        let rho = [0.9, 0.1];
        let p = [0.5, 0.5];
        let closed = robust_objective(&rho, &p, 1.0);
        for method in [
            InnerMinMethod::default(),
            InnerMinMethod::Grid {
                resolution: 200,
                rounds: 6,
            },
        ] {
            let found = numeric_inner_min(&rho, &p, method).unwrap();
            let l1: f64 = found.pu_hat.iter().zip([0.75, 0.25]).map(|(a, b)| (a - b).abs()).sum();
            assert!(l1 < 1e-3, "{method:?}: {:?}", found.pu_hat);
            assert!(found.value >= closed - 1e-6 && found.value <= closed * (1.0 + 1e-3));
        }
        let uniform = numeric_inner_min(&[1.0 / 3.0; 3], &[1.0 / 3.0; 3], InnerMinMethod::default()).unwrap();
        assert!(max_abs_diff(&uniform.pu_hat, &[1.0 / 3.0; 3]) < 1e-12);
    }

    #[test]
    fn grid_rejects_large_support() {
        let v = [0.25; 4];
        let err = numeric_inner_min(&v, &v, InnerMinMethod::Grid { resolution: 10, rounds: 1 });
        assert!(matches!(err, Err(LabError::Config(_))));
    }

    #[test]
    fn report_flags_support_mismatch() {
        let r = robust_report(&[0.5, 0.5, 0.0], &[0.5, 0.0, 0.5], 1.0).unwrap();
        assert!(r.support_mismatch);
        assert!((r.bhattacharyya - 0.5).abs() < 1e-15);
        assert!((r.bhattacharyya - (1.0 - r.hellinger_sq / 2.0)).abs() < 1e-12);
        let ok = robust_report(&[0.9, 0.1], &[0.5, 0.5], 0.5).unwrap();
        assert!(!ok.support_mismatch);
        assert!((ok.robust_value - 0.4).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_single_state() {
        let r = fixed_point_report(&[0.3, 0.7], &[0.0, 1.0], FIXED_POINT_TOL).unwrap();
        assert!(r.reached);
        assert_eq!(r.max_abs_deviation, 0.0);
        let off = fixed_point_report(&[0.2, 0.6, 0.2], &[0.0, 0.5, 0.5], FIXED_POINT_TOL).unwrap();
        assert!(!off.reached);
        assert!((off.median_ratio - 0.8).abs() < 1e-15);
    }

    #[test]
    fn region_shares_and_heatmap() {
        let rho = [0.1, 0.2, 0.3, 0.4];
        let shares = region_shares(&rho, &[vec![0, 1], vec![3]]);
        assert!(max_abs_diff(&shares, &[3.0 / 7.0, 4.0 / 7.0]) < 1e-15);
        let csv = heatmap_csv(&rho, 2);
        assert_eq!(csv.lines().next(), Some("x,y,mass"));
        assert_eq!(csv.lines().nth(4), Some("1,1,0.4"));
    }
}
