//! Environment generators, seeded rollouts and success-example samplers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::{Collector, Trajectory, TransitionDataset};
use crate::error::{LabError, Result};
use crate::mdp::{Dynamics, Policy, SuccessExampleSet, TabularMdp};

/// Default fixed episode length for rollouts.
pub const DEFAULT_EPISODE_LEN: usize = 151;
/// Default number of sampled success examples.
pub const DEFAULT_NUM_SUCCESSES: usize = 200;

/// Grid actions, in index order.
pub const GRID_ACTIONS: [(i64, i64); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

/// Inclusive rectangle of grid cells sharing one success probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    #[serde(default = "one")]
    pub success_prob: f64,
}

fn one() -> f64 {
    1.0
}

impl Region {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    /// Sorted state ids of the region on a grid of the given width.
    pub fn states(&self, width: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for y in self.y0..=self.y1 {
            for x in self.x0..=self.x1 {
                out.push(y * width + x);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvKind {
    /// 4-connected grid, walls clamp moves. With probability `noise` the
    /// move direction is replaced by a uniformly random one.
    Grid2d {
        width: usize,
        height: usize,
        start: [usize; 2],
        regions: Vec<Region>,
        #[serde(default)]
        noise: f64,
    },
    /// States `0..len`, start at 0, success only at the last state, which
    /// absorbs. Action 0 advances; with `two_way`, action 1 steps back.
    Chain {
        len: usize,
        #[serde(default)]
        two_way: bool,
        #[serde(default)]
        noise: f64,
    },
    /// Dirichlet rows for every `P[s][a]` and the initial distribution,
    /// success probabilities uniform on `[0,1]`.
    RandomDirichlet {
        num_states: usize,
        num_actions: usize,
        #[serde(default = "one")]
        concentration: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    #[serde(flatten)]
    pub kind: EnvKind,
    #[serde(default)]
    pub seed: u64,
}

impl EnvSpec {
    pub fn chain(len: usize) -> Self {
        EnvSpec {
            kind: EnvKind::Chain {
                len,
                two_way: false,
                noise: 0.0,
            },
            seed: 0,
        }
    }

    pub fn random(num_states: usize, num_actions: usize, seed: u64) -> Self {
        EnvSpec {
            kind: EnvKind::RandomDirichlet {
                num_states,
                num_actions,
                concentration: 1.0,
            },
            seed,
        }
    }

    /// 11x11 navigation grid with success in 2x2 blocks at both right
    /// corners; the start cell sits left of center, nearer the top block.
    pub fn two_region_grid() -> Self {
        EnvSpec {
            kind: EnvKind::Grid2d {
                width: 11,
                height: 11,
                start: [0, 3],
                regions: vec![
                    Region {
                        x0: 9,
                        y0: 0,
                        x1: 10,
                        y1: 1,
                        success_prob: 1.0,
                    },
                    Region {
                        x0: 9,
                        y0: 9,
                        x1: 10,
                        y1: 10,
                        success_prob: 1.0,
                    },
                ],
                noise: 0.0,
            },
            seed: 0,
        }
    }

    /// Square grid with a single success cell in the far corner.
    pub fn single_goal_grid(size: usize) -> Self {
        EnvSpec {
            kind: EnvKind::Grid2d {
                width: size,
                height: size,
                start: [0, 0],
                regions: vec![Region {
                    x0: size - 1,
                    y0: size - 1,
                    x1: size - 1,
                    y1: size - 1,
                    success_prob: 1.0,
                }],
                noise: 0.0,
            },
            seed: 0,
        }
    }

    pub fn grid_width(&self) -> Option<usize> {
        match self.kind {
            EnvKind::Grid2d { width, .. } => Some(width),
            _ => None,
        }
    }
}

pub fn make_env(spec: &EnvSpec) -> Result<TabularMdp> {
    match &spec.kind {
        EnvKind::Grid2d {
            width,
            height,
            start,
            regions,
            noise,
        } => make_grid(*width, *height, *start, regions, *noise),
        EnvKind::Chain {
            len,
            two_way,
            noise,
        } => make_chain(*len, *two_way, *noise),
        EnvKind::RandomDirichlet {
            num_states,
            num_actions,
            concentration,
        } => make_random(*num_states, *num_actions, *concentration, spec.seed),
    }
}

fn check_noise(noise: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&noise) {
        return Err(LabError::invariant("EnvSpec.noise in [0,1]", format!("noise = {noise}")));
    }
    Ok(())
}

fn make_grid(
    width: usize,
    height: usize,
    start: [usize; 2],
    regions: &[Region],
    noise: f64,
) -> Result<TabularMdp> {
    check_noise(noise)?;
    if width == 0 || height == 0 || start[0] >= width || start[1] >= height {
        return Err(LabError::invariant(
            "EnvSpec.grid start inside grid",
            format!("{width}x{height} grid, start {start:?}"),
        ));
    }
    if let Some(r) = regions
        .iter()
        .find(|r| r.x1 >= width || r.y1 >= height || r.x0 > r.x1 || r.y0 > r.y1)
    {
        return Err(LabError::invariant(
            "EnvSpec.regions inside grid",
            format!("{r:?}"),
        ));
    }
    let n = width * height;
    let m = GRID_ACTIONS.len();
    let step = |x: usize, y: usize, (dx, dy): (i64, i64)| -> usize {
        let nx = (x as i64 + dx).clamp(0, width as i64 - 1) as usize;
        let ny = (y as i64 + dy).clamp(0, height as i64 - 1) as usize;
        ny * width + nx
    };
    let mut transition = vec![0.0; n * m * n];
    for y in 0..height {
        for x in 0..width {
            let s = y * width + x;
            for a in 0..m {
                let base = (s * m + a) * n;
                transition[base + step(x, y, GRID_ACTIONS[a])] += 1.0 - noise;
                for dir in GRID_ACTIONS {
                    transition[base + step(x, y, dir)] += noise / m as f64;
                }
            }
        }
    }
    let mut initial = vec![0.0; n];
    initial[start[1] * width + start[0]] = 1.0;
    let mut success = vec![0.0; n];
    for y in 0..height {
        for x in 0..width {
            if let Some(r) = regions.iter().find(|r| r.contains(x, y)) {
                success[y * width + x] = r.success_prob;
            }
        }
    }
    TabularMdp::new(Dynamics::new(n, m, transition, initial)?, success)
}

fn make_chain(len: usize, two_way: bool, noise: f64) -> Result<TabularMdp> {
    check_noise(noise)?;
    if len == 0 {
        return Err(LabError::invariant("EnvSpec.chain len positive", "len = 0"));
    }
    let n = len;
    let m = if two_way { 2 } else { 1 };
    let mut transition = vec![0.0; n * m * n];
    for s in 0..n {
        let forward = (s + 1).min(n - 1);
        let back = s.saturating_sub(1);
        let last = s == n - 1;
        for a in 0..m {
            let base = (s * m + a) * n;
            if last {
                transition[base + s] = 1.0;
                continue;
            }
            let (intended, other) = if a == 0 { (forward, back) } else { (back, forward) };
            transition[base + intended] += 1.0 - noise;
            // A slip moves the other way; on a one-way chain it stays put.
            let slip = if two_way { other } else { s };
            transition[base + slip] += noise;
        }
    }
    let mut initial = vec![0.0; n];
    initial[0] = 1.0;
    let mut success = vec![0.0; n];
    success[n - 1] = 1.0;
    TabularMdp::new(Dynamics::new(n, m, transition, initial)?, success)
}

fn make_random(
    num_states: usize,
    num_actions: usize,
    concentration: f64,
    seed: u64,
) -> Result<TabularMdp> {
    if num_states == 0 || num_actions == 0 || !(concentration > 0.0) {
        return Err(LabError::invariant(
            "EnvSpec.random dimensions positive",
            format!("{num_states} states, {num_actions} actions, alpha {concentration}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_states;
    let row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        if n == 1 {
            return vec![1.0];
        }
        // Dirichlet draw as normalized Gamma variates.
        let gamma = Gamma::new(concentration, 1.0).expect("valid Gamma");
        loop {
            let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
            if draws.iter().sum::<f64>() > 0.0 {
                return normalize(draws);
            }
        }
    };
    let mut transition = Vec::with_capacity(n * num_actions * n);
    for _ in 0..n * num_actions {
        transition.extend(row(&mut rng));
    }
    let initial = row(&mut rng);
    let success = (0..n).map(|_| rng.random::<f64>()).collect();
    TabularMdp::new(Dynamics::new(n, num_actions, transition, initial)?, success)
}

/// Rescales so the entries sum to one as closely as floating point allows.
fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    for x in &mut v {
        *x /= total;
    }
    v
}

/// Index drawn from a probability vector by inverse CDF.
pub fn sample_index<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Seeded rollouts of `behavior`, resetting to the initial distribution
/// every `episode_len` steps with no terminal flag.
pub fn collect(
    dynamics: &Dynamics,
    behavior: &Policy,
    num_steps: usize,
    episode_len: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    collect_with_rng(dynamics, behavior, num_steps, episode_len, &mut rng, seed)
}

fn collect_with_rng(
    dynamics: &Dynamics,
    behavior: &Policy,
    num_steps: usize,
    episode_len: usize,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<TransitionDataset> {
    if episode_len == 0 {
        return Err(LabError::invariant("episode_len >= 1", "episode_len = 0"));
    }
    behavior.check_shape(dynamics.num_states(), dynamics.num_actions())?;
    let mut data = TransitionDataset::new(dynamics.num_states(), dynamics.num_actions(), seed);
    let mut remaining = num_steps;
    while remaining > 0 {
        let len = remaining.min(episode_len);
        let mut s = sample_index(rng, dynamics.initial_dist());
        let mut states = Vec::with_capacity(len + 1);
        let mut actions = Vec::with_capacity(len);
        states.push(s);
        for _ in 0..len {
            let a = sample_index(rng, behavior.row(s));
            s = sample_index(rng, dynamics.row(s, a));
            actions.push(a);
            states.push(s);
        }
        data.trajectories.push(Trajectory { states, actions });
        remaining -= len;
    }
    Ok(data)
}

/// `per_pair` one-step transitions from every state-action pair, so the
/// state-action marginal is exactly uniform.
pub fn collect_uniform_transitions(
    dynamics: &Dynamics,
    per_pair: usize,
    seed: u64,
) -> TransitionDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = TransitionDataset::new(dynamics.num_states(), dynamics.num_actions(), seed);
    for s in 0..dynamics.num_states() {
        for a in 0..dynamics.num_actions() {
            for _ in 0..per_pair {
                let s_next = sample_index(&mut rng, dynamics.row(s, a));
                data.trajectories.push(Trajectory {
                    states: vec![s, s_next],
                    actions: vec![a],
                });
            }
        }
    }
    data
}

/// [`Collector`] backed by known dynamics and a private RNG stream.
pub struct EnvCollector<'a> {
    dynamics: &'a Dynamics,
    episode_len: usize,
    rng: ChaCha8Rng,
    seed: u64,
}

impl<'a> EnvCollector<'a> {
    pub fn new(dynamics: &'a Dynamics, episode_len: usize, seed: u64) -> Self {
        EnvCollector {
            dynamics,
            episode_len: episode_len.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }
}

impl Collector for EnvCollector<'_> {
    fn collect(&mut self, policy: &Policy, num_steps: usize) -> TransitionDataset {
        collect_with_rng(
            self.dynamics,
            policy,
            num_steps,
            self.episode_len,
            &mut self.rng,
            self.seed,
        )
        .expect("collector policy matches its dynamics")
    }
}

/// Draws `count` success states with probability proportional to
/// `p_U(s) p(e=1|s)`. The stored prior is `sum_s p_U(s) p(e=1|s)`.
pub fn sample_success_examples(
    mdp: &TabularMdp,
    behavior_marginal: &[f64],
    count: usize,
    seed: u64,
) -> Result<SuccessExampleSet> {
    if behavior_marginal.len() != mdp.num_states() {
        return Err(LabError::Dimension(format!(
            "marginal has {} entries, MDP has {} states",
            behavior_marginal.len(),
            mdp.num_states()
        )));
    }
    if count == 0 {
        return Err(LabError::Empty("success example count"));
    }
    let weights: Vec<f64> = behavior_marginal
        .iter()
        .zip(mdp.success_prob())
        .map(|(u, e)| u * e)
        .collect();
    let prior: f64 = weights.iter().sum();
    if !(prior > 0.0) {
        return Err(LabError::ZeroMass(
            "p_U(s) p(e=1|s) has no mass; no success example can be drawn".into(),
        ));
    }
    let probs: Vec<f64> = weights.iter().map(|w| w / prior).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..count).map(|_| sample_index(&mut rng, &probs)).collect();
    SuccessExampleSet::from_examples(examples, mdp.num_states(), prior.min(1.0))
}

/// Success examples drawn under a user visitation that differs from the
/// transition data's marginal.
pub fn violate_assumption_sampler(
    mdp: &TabularMdp,
    user_marginal: &[f64],
    count: usize,
    seed: u64,
) -> Result<SuccessExampleSet> {
    sample_success_examples(mdp, user_marginal, count, seed)
}
