//! Controlled Markov processes and the exact probabilistic quantities built
//! on them: discounted occupancies, future-success probabilities, the
//! control objective and the Bayes posterior over success.
//!
//! Dynamics and the ground-truth success probability are kept in separate
//! types. Learning code only ever receives a [`Dynamics`] (or an empirical
//! kernel built from data), never a [`TabularMdp`], so the ground truth
//! cannot leak into a learner by accident.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Tolerance on row sums of stochastic vectors and matrices.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Tolerance on linear-solver residuals and derived probability vectors.
pub const SOLVER_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub stochastic: f64,
    pub solver: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            stochastic: STOCHASTIC_TOL,
            solver: SOLVER_TOL,
        }
    }
}

/// Anything that can produce next-state distributions for state-action pairs.
///
/// Rows of the true dynamics sum to one. Empirical kernels may return an
/// all-zero row for pairs that never occur in the data; consumers treat such
/// pairs as having no successor.
pub trait TransitionKernel {
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn next_dist(&self, s: usize, a: usize) -> &[f64];
}

/// Transition tensor plus initial state distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    num_states: usize,
    num_actions: usize,
    /// Flat `P[s][a][s']` at index `(s * num_actions + a) * num_states + s'`.
    transition: Vec<f64>,
    initial_dist: Vec<f64>,
}

impl Dynamics {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        Self::with_tolerances(
            num_states,
            num_actions,
            transition,
            initial_dist,
            Tolerances::default(),
        )
    }

    pub fn with_tolerances(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        initial_dist: Vec<f64>,
        tol: Tolerances,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(LabError::invariant(
                "TabularMDP.num_states/num_actions positive",
                format!("got {num_states} states, {num_actions} actions"),
            ));
        }
        if transition.len() != num_states * num_actions * num_states {
            return Err(LabError::Dimension(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                num_states * num_actions * num_states
            )));
        }
        if initial_dist.len() != num_states {
            return Err(LabError::Dimension(format!(
                "initial_dist has {} entries, expected {num_states}",
                initial_dist.len()
            )));
        }
        for s in 0..num_states {
            for a in 0..num_actions {
                let start = (s * num_actions + a) * num_states;
                let row = &transition[start..start + num_states];
                check_distribution(row, tol.stochastic).map_err(|detail| {
                    LabError::invariant(
                        "TabularMDP.transition rows are distributions",
                        format!("row P[{s}][{a}]: {detail}"),
                    )
                })?;
            }
        }
        check_distribution(&initial_dist, tol.stochastic).map_err(|detail| {
            LabError::invariant("TabularMDP.initial_dist sums to 1", detail)
        })?;
        Ok(Dynamics {
            num_states,
            num_actions,
            transition,
            initial_dist,
        })
    }

    /// Builds dynamics from nested `P[s][a][s']` rows.
    pub fn from_nested(transition: &[Vec<Vec<f64>>], initial_dist: Vec<f64>) -> Result<Self> {
        let num_states = transition.len();
        let num_actions = transition.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(num_states * num_actions * num_states);
        for (s, per_action) in transition.iter().enumerate() {
            if per_action.len() != num_actions {
                return Err(LabError::Dimension(format!(
                    "state {s} has {} actions, expected {num_actions}",
                    per_action.len()
                )));
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != num_states {
                    return Err(LabError::Dimension(format!(
                        "row P[{s}][{a}] has {} entries, expected {num_states}",
                        row.len()
                    )));
                }
                flat.extend_from_slice(row);
            }
        }
        Dynamics::new(num_states, num_actions, flat, initial_dist)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn prob(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition[(s * self.num_actions + a) * self.num_states + s_next]
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    pub fn nested_transition(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.num_states)
            .map(|s| {
                (0..self.num_actions)
                    .map(|a| self.row(s, a).to_vec())
                    .collect()
            })
            .collect()
    }

    /// State-to-state matrix `P_pi[s][s'] = sum_a pi(a|s) P[s][a][s']`.
    pub fn policy_matrix(&self, pi: &Policy) -> Result<DMatrix<f64>> {
        pi.check_shape(self.num_states, self.num_actions)?;
        let n = self.num_states;
        let mut m = DMatrix::zeros(n, n);
        for s in 0..n {
            for a in 0..self.num_actions {
                let w = pi.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                for (s_next, p) in self.row(s, a).iter().enumerate() {
                    m[(s, s_next)] += w * p;
                }
            }
        }
        Ok(m)
    }
}

impl TransitionKernel for Dynamics {
    fn num_states(&self) -> usize {
        self.num_states
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        self.row(s, a)
    }
}

/// Dynamics together with the per-state success probability `p(e=1|s)`.
///
/// The success probability is ground truth: only oracles, environment
/// generators and success samplers read it.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    dynamics: Dynamics,
    success_prob: Vec<f64>,
}

/// On-disk layout of a [`TabularMdp`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpFile {
    pub num_states: usize,
    pub num_actions: usize,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub initial_dist: Vec<f64>,
    pub success_prob: Vec<f64>,
}

impl TabularMdp {
    pub fn new(dynamics: Dynamics, success_prob: Vec<f64>) -> Result<Self> {
        if success_prob.len() != dynamics.num_states {
            return Err(LabError::Dimension(format!(
                "success_prob has {} entries, expected {}",
                success_prob.len(),
                dynamics.num_states
            )));
        }
        if let Some((s, p)) = success_prob
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(LabError::invariant(
                "TabularMDP.success_prob in [0,1]",
                format!("success_prob[{s}] = {p}"),
            ));
        }
        Ok(TabularMdp {
            dynamics,
            success_prob,
        })
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn success_prob(&self) -> &[f64] {
        &self.success_prob
    }

    pub fn num_states(&self) -> usize {
        self.dynamics.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.dynamics.num_actions
    }

    pub fn with_success_prob(&self, success_prob: Vec<f64>) -> Result<Self> {
        TabularMdp::new(self.dynamics.clone(), success_prob)
    }

    pub fn to_file(&self) -> MdpFile {
        MdpFile {
            num_states: self.num_states(),
            num_actions: self.num_actions(),
            transition: self.dynamics.nested_transition(),
            initial_dist: self.dynamics.initial_dist.clone(),
            success_prob: self.success_prob.clone(),
        }
    }

    pub fn from_file(file: MdpFile) -> Result<Self> {
        let dynamics = Dynamics::from_nested(&file.transition, file.initial_dist)?;
        if dynamics.num_states != file.num_states || dynamics.num_actions != file.num_actions {
            return Err(LabError::Dimension(format!(
                "header says {}x{}, transition is {}x{}",
                file.num_states, file.num_actions, dynamics.num_states, dynamics.num_actions
            )));
        }
        TabularMdp::new(dynamics, file.success_prob)
    }

    pub fn to_json(&self) -> String {
        // Serializing plain numbers cannot fail.
        serde_json::to_string_pretty(&self.to_file()).expect("mdp serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MdpFile = serde_json::from_str(text)?;
        TabularMdp::from_file(file)
    }
}

/// Discount and enumeration horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub gamma: f64,
    pub horizon_truncation: usize,
}

impl TaskSpec {
    pub fn new(gamma: f64) -> Result<Self> {
        let task = TaskSpec {
            gamma,
            horizon_truncation: 100,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(LabError::invariant(
                "TaskSpec.gamma < 1",
                format!("gamma = {}", self.gamma),
            ));
        }
        if self.horizon_truncation == 0 {
            return Err(LabError::invariant(
                "TaskSpec.horizon_truncation positive",
                "horizon_truncation = 0",
            ));
        }
        Ok(())
    }

    /// Smallest horizon `H` with `gamma^(H+1) < bound`.
    pub fn horizon_for_tail(gamma: f64, bound: f64) -> usize {
        if gamma == 0.0 {
            return 0;
        }
        let mut h = 0usize;
        let mut tail = gamma;
        while tail >= bound {
            tail *= gamma;
            h += 1;
        }
        h
    }
}

/// Row-stochastic state-to-action matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    probs: Vec<Vec<f64>>,
}

impl Serialize for Policy {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        PolicyFile { probs: self.rows() }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Policy {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = PolicyFile::deserialize(deserializer)?;
        Policy::from_rows(&file.probs).map_err(serde::de::Error::custom)
    }
}

impl Policy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_actions {
            return Err(LabError::Dimension(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                num_states * num_actions
            )));
        }
        for s in 0..num_states {
            let row = &probs[s * num_actions..(s + 1) * num_actions];
            check_distribution(row, STOCHASTIC_TOL).map_err(|detail| {
                LabError::invariant("Policy rows are distributions", format!("row {s}: {detail}"))
            })?;
        }
        Ok(Policy {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let num_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num_actions) {
            return Err(LabError::Dimension("ragged policy rows".into()));
        }
        Policy::new(rows.len(), num_actions, rows.concat())
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Policy {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * num_actions + a] = 1.0;
        }
        Policy {
            num_states: actions.len(),
            num_actions,
            probs,
        }
    }

    /// Deterministic policy picking `argmax_a values[s][a]`, ties to the
    /// lowest action index.
    pub fn greedy(num_states: usize, num_actions: usize, values: &[f64]) -> Self {
        let actions: Vec<usize> = (0..num_states)
            .map(|s| argmax(&values[s * num_actions..(s + 1) * num_actions]))
            .collect();
        Policy::deterministic(num_actions, &actions)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.num_states).map(|s| self.row(s).to_vec()).collect()
    }

    /// Action chosen in `s` if the policy is deterministic there.
    pub fn action(&self, s: usize) -> Option<usize> {
        self.row(s).iter().position(|&p| p == 1.0)
    }

    /// Largest total-variation distance between corresponding rows.
    pub fn max_tv_distance(&self, other: &Policy) -> f64 {
        (0..self.num_states)
            .map(|s| {
                0.5 * self
                    .row(s)
                    .iter()
                    .zip(other.row(s))
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    pub(crate) fn check_shape(&self, num_states: usize, num_actions: usize) -> Result<()> {
        if self.num_states != num_states || self.num_actions != num_actions {
            return Err(LabError::Dimension(format!(
                "policy is {}x{}, MDP is {num_states}x{num_actions}",
                self.num_states, self.num_actions
            )));
        }
        Ok(())
    }
}

/// Index of the largest entry; ties go to the lowest index. NaN entries never win.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] || values[best].is_nan() {
            best = i;
        }
    }
    best
}

/// Multiset of success states and its normalized distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessExampleSet {
    pub examples: Vec<usize>,
    pub dist: Vec<f64>,
    pub prior: f64,
}

impl SuccessExampleSet {
    pub fn from_examples(examples: Vec<usize>, num_states: usize, prior: f64) -> Result<Self> {
        if examples.is_empty() {
            return Err(LabError::Empty("success examples"));
        }
        let mut counts = vec![0usize; num_states];
        for &s in &examples {
            if s >= num_states {
                return Err(LabError::Dimension(format!(
                    "success example {s} outside {num_states} states"
                )));
            }
            counts[s] += 1;
        }
        let n = examples.len() as f64;
        let dist = counts.iter().map(|&c| c as f64 / n).collect();
        let set = SuccessExampleSet {
            examples,
            dist,
            prior,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn from_dist(dist: Vec<f64>, prior: f64) -> Result<Self> {
        let set = SuccessExampleSet {
            examples: Vec::new(),
            dist,
            prior,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn num_states(&self) -> usize {
        self.dist.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_distribution(&self.dist, STOCHASTIC_TOL)
            .map_err(|d| LabError::invariant("SuccessExampleSet.dist sums to 1", d))?;
        if !(self.prior > 0.0 && self.prior <= 1.0) {
            return Err(LabError::invariant(
                "SuccessExampleSet.prior in (0,1]",
                format!("prior = {}", self.prior),
            ));
        }
        if !self.examples.is_empty() {
            let mut present = vec![false; self.dist.len()];
            for &s in &self.examples {
                if s >= present.len() {
                    return Err(LabError::Dimension(format!("success example {s} out of range")));
                }
                present[s] = true;
            }
            if let Some(s) = (0..self.dist.len()).find(|&s| self.dist[s] > 0.0 && !present[s]) {
                return Err(LabError::invariant(
                    "SuccessExampleSet.dist supported on examples",
                    format!("dist[{s}] > 0 but {s} is not an example"),
                ));
            }
        }
        Ok(())
    }

    /// States with positive success mass.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.dist
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(s, _)| s)
    }
}

/// State-action table, used for Q-functions and future-success probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub num_states: usize,
    pub num_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        QTable {
            num_states,
            num_actions,
            values: vec![0.0; num_states * num_actions],
        }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.num_actions..(s + 1) * self.num_actions]
    }

    /// `V(s) = sum_a pi(a|s) Q(s,a)`.
    pub fn state_values(&self, pi: &Policy) -> Vec<f64> {
        (0..self.num_states)
            .map(|s| self.row(s).iter().zip(pi.row(s)).map(|(q, p)| q * p).sum())
            .collect()
    }

    pub fn max_values(&self) -> Vec<f64> {
        (0..self.num_states)
            .map(|s| self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    pub fn greedy_policy(&self) -> Policy {
        Policy::greedy(self.num_states, self.num_actions, &self.values)
    }

    pub fn max_abs_diff(&self, other: &QTable) -> f64 {
        max_abs_diff(&self.values, &other.values)
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn check_distribution(v: &[f64], tol: f64) -> std::result::Result<(), String> {
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !(**x >= 0.0) || !x.is_finite()) {
        return Err(format!("entry {i} = {x} is negative or not finite"));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(format!("sums to {sum:.17}"));
    }
    Ok(())
}

/// Where a discounted occupancy starts.
#[derive(Debug, Clone, Copy)]
pub enum OccupancyStart<'a> {
    /// Start from the MDP's initial distribution, first action from the policy.
    Initial,
    /// Start from an arbitrary state distribution.
    States(&'a [f64]),
    /// Start from a fixed state and first action.
    StateAction(usize, usize),
}

/// `rho(s) = (1-gamma) sum_k gamma^k p(s_{t+k} = s | start)`, by an exact linear solve.
pub fn discounted_occupancy(
    dynamics: &Dynamics,
    task: &TaskSpec,
    pi: &Policy,
    from: OccupancyStart<'_>,
) -> Result<Vec<f64>> {
    task.validate()?;
    let n = dynamics.num_states;
    let gamma = task.gamma;
    let p_pi = dynamics.policy_matrix(pi)?;
    // (I - gamma P_pi)^T x = b  gives  x^T = b^T (I - gamma P_pi)^{-1}.
    let system = (DMatrix::identity(n, n) - p_pi * gamma).transpose();
    let lu = system.lu();
    let solve = |b: DVector<f64>| -> Vec<f64> {
        lu.solve(&b)
            .expect("I - gamma P is nonsingular for gamma < 1")
            .iter()
            .copied()
            .collect()
    };
    let rho = match from {
        OccupancyStart::Initial => {
            let b = DVector::from_row_slice(dynamics.initial_dist()) * (1.0 - gamma);
            solve(b)
        }
        OccupancyStart::States(dist) => {
            if dist.len() != n {
                return Err(LabError::Dimension(format!(
                    "start distribution has {} entries, expected {n}",
                    dist.len()
                )));
            }
            check_distribution(dist, STOCHASTIC_TOL)
                .map_err(|d| LabError::invariant("occupancy start is a distribution", d))?;
            solve(DVector::from_row_slice(dist) * (1.0 - gamma))
        }
        OccupancyStart::StateAction(s, a) => {
            if s >= n || a >= dynamics.num_actions {
                return Err(LabError::Dimension(format!("({s},{a}) out of range")));
            }
            // Step zero sits at s; later steps start from P[s][a][.].
            let b = DVector::from_row_slice(dynamics.row(s, a)) * ((1.0 - gamma) * gamma);
            let mut rho = solve(b);
            rho[s] += 1.0 - gamma;
            rho
        }
    };
    Ok(rho)
}

/// Exact `V^pi(s) = (1-gamma) [(I - gamma P_pi)^{-1} p_e](s)`.
fn future_success_state_values(
    dynamics: &Dynamics,
    task: &TaskSpec,
    pi: &Policy,
    success_prob: &[f64],
) -> Result<Vec<f64>> {
    let n = dynamics.num_states;
    let p_pi = dynamics.policy_matrix(pi)?;
    let system = DMatrix::identity(n, n) - p_pi * task.gamma;
    let rhs = DVector::from_row_slice(success_prob) * (1.0 - task.gamma);
    let v = system
        .lu()
        .solve(&rhs)
        .expect("I - gamma P is nonsingular for gamma < 1");
    Ok(v.iter().copied().collect())
}

/// `Q(s,a) = p^pi(e_{t+}=1 | s, a)`, solving `Q = (1-gamma) p_e + gamma P Pi Q` exactly.
pub fn future_success_prob(mdp: &TabularMdp, task: &TaskSpec, pi: &Policy) -> Result<QTable> {
    task.validate()?;
    future_success_prob_with(mdp.dynamics(), task, pi, mdp.success_prob())
}

/// As [`future_success_prob`] with an explicit per-state success signal.
pub fn future_success_prob_with(
    dynamics: &Dynamics,
    task: &TaskSpec,
    pi: &Policy,
    success_prob: &[f64],
) -> Result<QTable> {
    task.validate()?;
    if success_prob.len() != dynamics.num_states {
        return Err(LabError::Dimension("success signal length".into()));
    }
    let v = future_success_state_values(dynamics, task, pi, success_prob)?;
    let (n, m) = (dynamics.num_states, dynamics.num_actions);
    let mut q = QTable::zeros(n, m);
    for s in 0..n {
        for a in 0..m {
            let next: f64 = dynamics.row(s, a).iter().zip(&v).map(|(p, v)| p * v).sum();
            q.values[s * m + a] = (1.0 - task.gamma) * success_prob[s] + task.gamma * next;
        }
    }
    Ok(q)
}

/// `p^pi(e_{t+}=1) = E_{p1, pi}[Q(s1, a1)]`.
pub fn control_objective(mdp: &TabularMdp, task: &TaskSpec, pi: &Policy) -> Result<f64> {
    task.validate()?;
    let v = future_success_state_values(mdp.dynamics(), task, pi, mdp.success_prob())?;
    Ok(mdp
        .dynamics()
        .initial_dist()
        .iter()
        .zip(&v)
        .map(|(p, v)| p * v)
        .sum())
}

/// Result of the Bayes inversion `p(e=1|s) = p_U(s|e=1) p(e=1) / p_U(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub values: Vec<f64>,
    /// Set when some unclamped value exceeded `1 + SOLVER_TOL`.
    pub violation: bool,
    pub max_unclamped: f64,
}

/// Raw density ratio `p_U(s|e=1) / p_U(s)`; zero where there is no success mass.
pub fn success_ratio(success_dist: &[f64], behavior_marginal: &[f64]) -> Result<Vec<f64>> {
    if success_dist.len() != behavior_marginal.len() {
        return Err(LabError::Dimension(format!(
            "success dist has {} states, marginal has {}",
            success_dist.len(),
            behavior_marginal.len()
        )));
    }
    success_dist
        .iter()
        .zip(behavior_marginal)
        .enumerate()
        .map(|(s, (&p, &q))| {
            if p == 0.0 {
                Ok(0.0)
            } else if q <= 0.0 {
                Err(LabError::UnvisitedSuccessState { state: s })
            } else {
                Ok(p / q)
            }
        })
        .collect()
}

pub fn success_posterior(
    success: &SuccessExampleSet,
    behavior_marginal: &[f64],
) -> Result<Posterior> {
    let ratio = success_ratio(&success.dist, behavior_marginal)?;
    let mut max_unclamped: f64 = 0.0;
    let values = ratio
        .iter()
        .map(|r| {
            let v = r * success.prior;
            max_unclamped = max_unclamped.max(v);
            v.min(1.0)
        })
        .collect();
    Ok(Posterior {
        values,
        violation: max_unclamped > 1.0 + SOLVER_TOL,
        max_unclamped,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Two states, one action: 0 -> 1, 1 -> 1, start in 0, success only in 1.
    pub fn chain2() -> TabularMdp {
        let dynamics = Dynamics::new(2, 1, vec![0.0, 1.0, 0.0, 1.0], vec![1.0, 0.0]).unwrap();
        TabularMdp::new(dynamics, vec![0.0, 1.0]).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::chain2;
    use super::*;

    /// Truncated-horizon enumeration of the occupancy, independent of the solver.
    fn occupancy_by_enumeration(d: &Dynamics, gamma: f64, pi: &Policy, h: usize) -> Vec<f64> {
        let n = d.num_states();
        let mut dist = d.initial_dist().to_vec();
        let mut rho = vec![0.0; n];
        let mut weight = 1.0 - gamma;
        for _ in 0..=h {
            for s in 0..n {
                rho[s] += weight * dist[s];
            }
            let mut next = vec![0.0; n];
            for s in 0..n {
                for a in 0..d.num_actions() {
                    for s2 in 0..n {
                        next[s2] += dist[s] * pi.prob(s, a) * d.prob(s, a, s2);
                    }
                }
            }
            dist = next;
            weight *= gamma;
        }
        rho
    }

    #[test]
    fn chain2_occupancy_matches_enumeration() {
        let mdp = chain2();
        let task = TaskSpec::new(0.5).unwrap();
        let pi = Policy::uniform(2, 1);
        let oracle = occupancy_by_enumeration(mdp.dynamics(), 0.5, &pi, 60);
        assert!((oracle[0] - 0.5).abs() < 1e-15 && (oracle[1] - 0.5).abs() < 1e-15);
        let rho = discounted_occupancy(mdp.dynamics(), &task, &pi, OccupancyStart::Initial).unwrap();
        assert!(max_abs_diff(&rho, &[0.5, 0.5]) < 1e-12, "{rho:?}");
    }

    #[test]
    fn gamma_zero_occupancy_is_start_distribution() {
        let mdp = chain2();
        let task = TaskSpec::new(0.0).unwrap();
        let pi = Policy::uniform(2, 1);
        let rho = discounted_occupancy(mdp.dynamics(), &task, &pi, OccupancyStart::States(&[0.25, 0.75]))
            .unwrap();
        assert!(max_abs_diff(&rho, &[0.25, 0.75]) < 1e-15);
        let rho = discounted_occupancy(mdp.dynamics(), &task, &pi, OccupancyStart::StateAction(0, 0))
            .unwrap();
        assert!(max_abs_diff(&rho, &[1.0, 0.0]) < 1e-15);
    }

    #[test]
    fn single_absorbing_state() {
        let d = Dynamics::new(1, 1, vec![1.0], vec![1.0]).unwrap();
        let rho = discounted_occupancy(&d, &TaskSpec::new(0.9).unwrap(), &Policy::uniform(1, 1), OccupancyStart::Initial)
            .unwrap();
        assert!((rho[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_gamma_one() {
        let mdp = chain2();
        let task = TaskSpec {
            gamma: 1.0,
            horizon_truncation: 10,
        };
        let err = discounted_occupancy(mdp.dynamics(), &task, &Policy::uniform(2, 1), OccupancyStart::Initial)
            .unwrap_err();
        assert!(err.to_string().contains("TaskSpec.gamma < 1"));
        assert!(TaskSpec::new(1.0).is_err());
    }

    #[test]
    fn chain2_future_success_and_objective() {
        let mdp = chain2();
        let task = TaskSpec::new(0.5).unwrap();
        let pi = Policy::uniform(2, 1);
        // Geometric series: from 0 the success stream starts one step late.
        let q0: f64 = (1..200).map(|k| 0.5 * 0.5f64.powi(k)).sum();
        let q = future_success_prob(&mdp, &task, &pi).unwrap();
        assert!((q.get(0, 0) - q0).abs() < 1e-12);
        assert!((q.get(1, 0) - 1.0).abs() < 1e-12);
        let obj = control_objective(&mdp, &task, &pi).unwrap();
        assert!((obj - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_success_prob_extremes() {
        let mdp = chain2();
        let task = TaskSpec::new(0.9).unwrap();
        let pi = Policy::uniform(2, 1);
        let zeros = mdp.with_success_prob(vec![0.0, 0.0]).unwrap();
        let ones = mdp.with_success_prob(vec![1.0, 1.0]).unwrap();
        let qz = future_success_prob(&zeros, &task, &pi).unwrap();
        let qo = future_success_prob(&ones, &task, &pi).unwrap();
        assert!(qz.values.iter().all(|&v| v == 0.0));
        assert!(qo.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert_eq!(control_objective(&zeros, &task, &pi).unwrap(), 0.0);
        assert!((control_objective(&ones, &task, &pi).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_examples() {
        let set = SuccessExampleSet::from_dist(vec![0.0, 1.0], 0.5).unwrap();
        let post = success_posterior(&set, &[0.5, 0.5]).unwrap();
        assert_eq!(post.values, vec![0.0, 1.0]);
        assert!(!post.violation);

        let set = SuccessExampleSet::from_dist(vec![2.0 / 3.0, 1.0 / 3.0], 0.3).unwrap();
        let post = success_posterior(&set, &[0.8, 0.2]).unwrap();
        assert!(max_abs_diff(&post.values, &[0.25, 0.5]) < 1e-15);

        let set = SuccessExampleSet::from_dist(vec![0.3, 0.7], 0.4).unwrap();
        let post = success_posterior(&set, &[0.3, 0.7]).unwrap();
        assert!(post.values.iter().all(|v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn posterior_clamps_and_flags() {
        let set = SuccessExampleSet::from_dist(vec![0.0, 1.0], 0.9).unwrap();
        let post = success_posterior(&set, &[0.5, 0.5]).unwrap();
        assert_eq!(post.values[1], 1.0);
        assert!(post.violation);
        assert!((post.max_unclamped - 1.8).abs() < 1e-15);
    }

    #[test]
    fn posterior_names_unvisited_state() {
        let set = SuccessExampleSet::from_dist(vec![0.5, 0.5], 0.5).unwrap();
        let err = success_posterior(&set, &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, LabError::UnvisitedSuccessState { state: 1 }));
    }

    #[test]
    fn validation_errors() {
        assert!(Dynamics::new(2, 1, vec![0.5, 0.4, 0.0, 1.0], vec![1.0, 0.0]).is_err());
        assert!(Dynamics::new(2, 1, vec![0.0, 1.0, 0.0, 1.0], vec![0.9, 0.0]).is_err());
        let d = Dynamics::new(2, 1, vec![0.0, 1.0, 0.0, 1.0], vec![1.0, 0.0]).unwrap();
        assert!(TabularMdp::new(d, vec![0.0, 1.5]).is_err());
        assert!(SuccessExampleSet::from_examples(vec![1, 1], 2, 0.0).is_err());
        let bad = SuccessExampleSet {
            examples: vec![0],
            dist: vec![0.5, 0.5],
            prior: 1.0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
        assert_eq!(argmax(&[f64::NAN, 1.0]), 1);
    }

    #[test]
    fn json_round_trip_is_bit_faithful() {
        let d = Dynamics::new(
            2,
            2,
            vec![0.1, 0.9, 1.0 / 3.0, 2.0 / 3.0, 0.7, 0.30000000000000004, 0.0, 1.0],
            vec![0.123456789012345678, 1.0 - 0.123456789012345678],
        )
        .unwrap();
        let mdp = TabularMdp::new(d, vec![1e-300, std::f64::consts::FRAC_1_SQRT_2]).unwrap();
        let back = TabularMdp::from_json(&mdp.to_json()).unwrap();
        assert_eq!(back, mdp);
    }
}
