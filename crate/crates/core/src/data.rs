//! Trajectory storage, empirical marginals and the JSON-lines dataset format.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::error::{LabError, Result};
use crate::mdp::{Policy, TransitionKernel};

/// One episode: `states.len() == actions.len() + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn transition(&self, t: usize) -> Transition {
        Transition {
            s: self.states[t],
            a: self.actions[t],
            s_next: self.states[t + 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
}

/// Anything that can roll out a policy and hand back fresh trajectories.
pub trait Collector {
    fn collect(&mut self, policy: &Policy, num_steps: usize) -> TransitionDataset;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    pub num_states: usize,
    pub num_actions: usize,
    pub trajectories: Vec<Trajectory>,
    pub seed: u64,
    pub env: Option<EnvSpec>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    num_states: usize,
    num_actions: usize,
    seed: u64,
    env: Option<EnvSpec>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryLine {
    steps: Vec<[usize; 2]>,
    #[serde(rename = "final")]
    final_state: usize,
}

impl TransitionDataset {
    pub fn new(num_states: usize, num_actions: usize, seed: u64) -> Self {
        TransitionDataset {
            num_states,
            num_actions,
            trajectories: Vec::new(),
            seed,
            env: None,
        }
    }

    pub fn push(&mut self, traj: Trajectory) -> Result<()> {
        if traj.states.len() != traj.actions.len() + 1 {
            return Err(LabError::invariant(
                "Trajectory has one more state than actions",
                format!("{} states, {} actions", traj.states.len(), traj.actions.len()),
            ));
        }
        if traj.states.iter().any(|&s| s >= self.num_states)
            || traj.actions.iter().any(|&a| a >= self.num_actions)
        {
            return Err(LabError::Dimension("trajectory index out of range".into()));
        }
        self.trajectories.push(traj);
        Ok(())
    }

    /// Appends all trajectories of `other` (replay-buffer growth).
    pub fn extend(&mut self, other: &TransitionDataset) {
        self.trajectories.extend(other.trajectories.iter().cloned());
    }

    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_transitions() == 0
    }

    pub fn transitions(&self) -> impl Iterator<Item = Transition> + '_ {
        self.trajectories
            .iter()
            .flat_map(|tr| (0..tr.len()).map(move |t| tr.transition(t)))
    }

    pub fn sa_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_states * self.num_actions];
        for tr in self.transitions() {
            counts[tr.s * self.num_actions + tr.a] += 1;
        }
        counts
    }

    /// Dense `count(s, a, s')` at index `(s * A + a) * S + s'`.
    pub fn sas_counts(&self) -> Vec<u64> {
        let (n, m) = (self.num_states, self.num_actions);
        let mut counts = vec![0u64; n * m * n];
        for tr in self.transitions() {
            counts[(tr.s * m + tr.a) * n + tr.s_next] += 1;
        }
        counts
    }

    /// Empirical `p(s, a)` over transitions.
    pub fn sa_marginal(&self) -> Vec<f64> {
        let total = self.num_transitions() as f64;
        self.sa_counts()
            .into_iter()
            .map(|c| if total > 0.0 { c as f64 / total } else { 0.0 })
            .collect()
    }

    /// Empirical `p(s)` over the current state of each transition.
    pub fn state_marginal(&self) -> Vec<f64> {
        let sa = self.sa_marginal();
        (0..self.num_states)
            .map(|s| sa[s * self.num_actions..(s + 1) * self.num_actions].iter().sum())
            .collect()
    }

    /// Empirical behavior `p(a|s)`; uniform in states the data never visits.
    pub fn behavior_policy(&self) -> Policy {
        let counts = self.sa_counts();
        let m = self.num_actions;
        let rows: Vec<Vec<f64>> = (0..self.num_states)
            .map(|s| {
                let row = &counts[s * m..(s + 1) * m];
                let total: u64 = row.iter().sum();
                if total == 0 {
                    vec![1.0 / m as f64; m]
                } else {
                    row.iter().map(|&c| c as f64 / total as f64).collect()
                }
            })
            .collect();
        Policy::from_rows(&rows).expect("empirical rows are distributions")
    }

    pub fn empirical_kernel(&self) -> EmpiricalKernel {
        let (n, m) = (self.num_states, self.num_actions);
        let counts = self.sas_counts();
        let mut next = vec![0.0; n * m * n];
        let mut visited = vec![false; n * m];
        for sa in 0..n * m {
            let row = &counts[sa * n..(sa + 1) * n];
            let total: u64 = row.iter().sum();
            if total == 0 {
                continue;
            }
            visited[sa] = true;
            for (dst, &c) in next[sa * n..(sa + 1) * n].iter_mut().zip(row) {
                *dst = c as f64 / total as f64;
            }
        }
        EmpiricalKernel {
            num_states: n,
            num_actions: m,
            next,
            visited,
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header {
            num_states: self.num_states,
            num_actions: self.num_actions,
            seed: self.seed,
            env: self.env.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for tr in &self.trajectories {
            let line = TrajectoryLine {
                steps: tr
                    .states
                    .iter()
                    .zip(&tr.actions)
                    .map(|(&s, &a)| [s, a])
                    .collect(),
                final_state: *tr.states.last().expect("trajectory has a final state"),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header: Header = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(LabError::Empty("dataset file")),
        };
        let mut data = TransitionDataset::new(header.num_states, header.num_actions, header.seed);
        data.env = header.env;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TrajectoryLine = serde_json::from_str(&line)?;
            let mut states: Vec<usize> = parsed.steps.iter().map(|p| p[0]).collect();
            states.push(parsed.final_state);
            let actions = parsed.steps.iter().map(|p| p[1]).collect();
            data.push(Trajectory { states, actions })?;
        }
        Ok(data)
    }
}

/// Maximum-likelihood transition model from counts. Rows for unvisited
/// pairs are all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalKernel {
    num_states: usize,
    num_actions: usize,
    next: Vec<f64>,
    visited: Vec<bool>,
}

impl EmpiricalKernel {
    pub fn visited(&self, s: usize, a: usize) -> bool {
        self.visited[s * self.num_actions + a]
    }
}

impl TransitionKernel for EmpiricalKernel {
    fn num_states(&self) -> usize {
        self.num_states
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.next[start..start + self.num_states]
    }
}
