//! Flat `key = value` configuration with dotted section prefixes.
//!
//! ```text
//! # comments run to end of line
//! preset = corridor
//! method = rce_stochastic
//! seeds = 0..9
//! train.gamma = 0.99
//! train.lr_schedule = robbins_monro:5000
//! env.kind = chain
//! env.len = 30
//! ```
//!
//! A `preset` line is applied first; every other key overrides it. The
//! `RCE_LAB_SEED` environment variable replaces the seed list with a
//! single seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rce_core::rce::{ActionSource, LrSchedule, PolicyUpdate, SuccessWeight};
use rce_core::{EnvKind, EnvSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const SEED_ENV_VAR: &str = "RCE_LAB_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    RceExpected,
    RceStochastic,
    Sqil,
    Vice,
    ViceIterative,
    Density,
    RobustIterated,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::RceExpected,
        Method::RceStochastic,
        Method::Sqil,
        Method::Vice,
        Method::ViceIterative,
        Method::Density,
        Method::RobustIterated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::RceExpected => "rce_expected",
            Method::RceStochastic => "rce_stochastic",
            Method::Sqil => "sqil",
            Method::Vice => "vice",
            Method::ViceIterative => "vice_iterative",
            Method::Density => "density",
            Method::RobustIterated => "robust_iterated",
        }
    }

    pub fn is_rce(self) -> bool {
        matches!(self, Method::RceExpected | Method::RceStochastic | Method::RobustIterated)
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| HarnessError::Usage(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which state marginal the success examples are drawn under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserMarginal {
    Uniform,
    /// The transition data's own state marginal.
    Data,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Uniform-policy rollout length when `per_pair = 0`.
    pub steps: usize,
    pub episode_len: usize,
    /// One-step samples from every state-action pair; overrides rollouts.
    pub per_pair: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessConfig {
    pub count: usize,
    pub marginal: UserMarginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateConfig {
    pub outer_iters: usize,
    pub steps_per_iter: usize,
    pub episode_len: usize,
    pub fixed_point_tol: f64,
    pub stochastic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    /// Load the environment from this file instead of `env`.
    pub env_file: Option<PathBuf>,
    pub train: TrainConfig,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub metric_cadence: usize,
    /// Stochastic RCE recollects with its current policy.
    pub online: bool,
    pub collector_episode_len: usize,
    /// Added to the run seed for the online collector's RNG stream.
    pub collector_seed_offset: u64,
    pub data: DataConfig,
    pub successes: SuccessConfig,
    pub iterate: IterateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvSpec::chain(2),
            env_file: None,
            train: TrainConfig::default(),
            method: Method::RceExpected,
            seeds: vec![0],
            output: PathBuf::from("out"),
            metric_cadence: 1,
            online: false,
            collector_episode_len: 151,
            collector_seed_offset: 1000,
            data: DataConfig {
                steps: 1510,
                episode_len: 151,
                per_pair: 0,
            },
            successes: SuccessConfig {
                count: 200,
                marginal: UserMarginal::Uniform,
            },
            iterate: IterateConfig {
                outer_iters: 30,
                steps_per_iter: 1510,
                episode_len: 151,
                fixed_point_tol: rce_core::robust::FIXED_POINT_TOL,
                stochastic: false,
            },
        }
    }
}

impl ExperimentConfig {
    /// Two-region grid: offline vs iterated RCE on uniform coverage data.
    pub fn two_region() -> Self {
        let mut cfg = ExperimentConfig {
            env: EnvSpec::two_region_grid(),
            method: Method::RobustIterated,
            seeds: (0..5).collect(),
            ..ExperimentConfig::default()
        };
        cfg.train.gamma = 0.9;
        cfg.train.policy_update = PolicyUpdate::Soft;
        cfg.train.entropy_coeff = 0.1;
        cfg.train.max_iters = 20_000;
        cfg.train.tolerance = 1e-10;
        cfg.data.per_pair = 5;
        cfg
    }

    /// Noisy two-way corridor with one success state at the far end,
    /// trained online with stochastic RCE.
    pub fn corridor() -> Self {
        let mut cfg = ExperimentConfig {
            env: EnvSpec {
                kind: EnvKind::Chain {
                    len: 30,
                    two_way: true,
                    noise: 0.1,
                },
                seed: 0,
            },
            method: Method::RceStochastic,
            seeds: (0..10).collect(),
            online: true,
            ..ExperimentConfig::default()
        };
        cfg.data.steps = 2 * 151;
        cfg.train.gamma = 0.99;
        cfg.train.learning_rate = 5.0;
        cfg.train.polyak = 0.05;
        cfg.train.policy_update = PolicyUpdate::Soft;
        cfg.train.entropy_coeff = 0.02;
        cfg.train.collect_every = 20;
        cfg.train.collect_steps = 151;
        cfg.train.ratio_clip = 100.0;
        cfg.train.max_iters = 300;
        cfg.train.metric_cadence = 300;
        cfg.metric_cadence = 300;
        cfg
    }

    /// Stochastic policy evaluation of the uniform policy; `grid` selects
    /// the 5x5 single-goal grid instead of the two-state chain.
    pub fn consistency(grid: bool) -> Self {
        let mut cfg = ExperimentConfig {
            env: if grid { EnvSpec::single_goal_grid(5) } else { EnvSpec::chain(2) },
            method: Method::RceStochastic,
            seeds: (0..10).collect(),
            ..ExperimentConfig::default()
        };
        cfg.train.gamma = if grid { 0.9 } else { 0.5 };
        cfg.train.policy_update = PolicyUpdate::Fixed;
        cfg.train.action_source = ActionSource::BehaviorPolicy;
        cfg.train.success_weight = SuccessWeight::Prior;
        cfg.train.n_step = 1;
        cfg.train.learning_rate = 5.0;
        cfg.train.lr_schedule = LrSchedule::RobbinsMonro { horizon: 5000.0 };
        cfg.train.polyak = 0.05;
        cfg.train.max_iters = 20_000;
        cfg.train.metric_cadence = 20_000;
        cfg.metric_cadence = 20_000;
        cfg.data.per_pair = 20;
        cfg.successes.marginal = UserMarginal::Data;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(ExperimentConfig::default()),
            "two_region" => Ok(ExperimentConfig::two_region()),
            "corridor" => Ok(ExperimentConfig::corridor()),
            "consistency_chain2" => Ok(ExperimentConfig::consistency(false)),
            "consistency_grid" => Ok(ExperimentConfig::consistency(true)),
            other => Err(HarnessError::Usage(format!("unknown preset `{other}`"))),
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = match pairs.get("preset") {
            Some(name) => ExperimentConfig::preset(name)?,
            None => ExperimentConfig::default(),
        };
        let mut env = EnvFields::default();
        for (key, value) in &pairs {
            if key == "preset" {
                continue;
            }
            cfg.set(key, value, &mut env)?;
        }
        if env.any {
            cfg.env = env.build(&cfg.env)?;
        }
        cfg.train.metric_cadence = cfg.metric_cadence;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path.display().to_string(), e))?;
        ExperimentConfig::from_text(&text)
    }

    /// Applies the seed override, if the variable held a value.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            let seed = parse_num::<u64>(SEED_ENV_VAR, v.trim())?;
            self.seeds = vec![seed];
            self.train.seed = seed;
        }
        Ok(())
    }

    pub fn apply_env_seed_override(&mut self) -> Result<()> {
        let value = std::env::var(SEED_ENV_VAR).ok();
        self.apply_seed_override(value.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::input("ExperimentConfig.seeds nonempty", "no seeds"));
        }
        if let Some(path) = &self.env_file {
            if !path.exists() {
                return Err(HarnessError::input(
                    "referenced files exist",
                    format!("env.file {} not found", path.display()),
                ));
            }
        }
        if self.collector_episode_len == 0 || self.data.episode_len == 0 || self.iterate.episode_len == 0 {
            return Err(HarnessError::input("episode_len >= 1", "an episode length is 0"));
        }
        if self.successes.count == 0 {
            return Err(HarnessError::input("successes.count >= 1", "successes.count = 0"));
        }
        self.train.validate()?;
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str, env: &mut EnvFields) -> Result<()> {
        if let Some(field) = key.strip_prefix("train.") {
            return set_train(&mut self.train, field, value, key);
        }
        if let Some(field) = key.strip_prefix("env.") {
            if field == "file" {
                self.env_file = Some(PathBuf::from(value));
                return Ok(());
            }
            return env.set(field, value, key);
        }
        match key {
            "method" => self.method = value.parse()?,
            "seeds" => self.seeds = parse_seeds(value)?,
            "output" => self.output = PathBuf::from(value),
            "metric_cadence" => self.metric_cadence = parse_num(key, value)?,
            "online" => self.online = parse_num(key, value)?,
            "collector.episode_len" => self.collector_episode_len = parse_num(key, value)?,
            "collector.seed_offset" => self.collector_seed_offset = parse_num(key, value)?,
            "data.steps" => self.data.steps = parse_num(key, value)?,
            "data.episode_len" => self.data.episode_len = parse_num(key, value)?,
            "data.per_pair" => self.data.per_pair = parse_num(key, value)?,
            "successes.count" => self.successes.count = parse_num(key, value)?,
            "successes.marginal" => {
                self.successes.marginal = match value {
                    "uniform" => UserMarginal::Uniform,
                    "data" => UserMarginal::Data,
                    _ => return Err(bad_value(key, value)),
                }
            }
            "iterate.outer_iters" => self.iterate.outer_iters = parse_num(key, value)?,
            "iterate.steps_per_iter" => self.iterate.steps_per_iter = parse_num(key, value)?,
            "iterate.episode_len" => self.iterate.episode_len = parse_num(key, value)?,
            "iterate.fixed_point_tol" => self.iterate.fixed_point_tol = parse_num(key, value)?,
            "iterate.stochastic" => self.iterate.stochastic = parse_num(key, value)?,
            _ => return Err(HarnessError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }
}

/// Parses the text into a sorted key map, rejecting duplicates.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Usage(format!("line {}: expected `key = value`", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(HarnessError::Usage(format!("line {}: bad key `{key}`", lineno + 1)));
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(HarnessError::Usage(format!("line {}: duplicate key `{key}`", lineno + 1)));
        }
    }
    Ok(out)
}

/// `a..b` (inclusive of both ends), `a..=b`, or a comma list.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let text = text.trim();
    if let Some((lo, hi)) = text.split_once("..") {
        let hi = hi.strip_prefix('=').unwrap_or(hi);
        let lo: u64 = parse_num("seeds", lo.trim())?;
        let hi: u64 = parse_num("seeds", hi.trim())?;
        return Ok((lo..=hi).collect());
    }
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num("seeds", s))
        .collect()
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad_value(key, value))
}

fn bad_value(key: &str, value: &str) -> HarnessError {
    HarnessError::Usage(format!("bad value `{value}` for `{key}`"))
}

fn set_train(t: &mut TrainConfig, field: &str, value: &str, key: &str) -> Result<()> {
    match field {
        "gamma" => t.gamma = parse_num(key, value)?,
        "learning_rate" => t.learning_rate = parse_num(key, value)?,
        "lr_schedule" => {
            t.lr_schedule = match value.split_once(':') {
                None if value == "constant" => LrSchedule::Constant,
                Some(("robbins_monro", h)) => LrSchedule::RobbinsMonro {
                    horizon: parse_num(key, h)?,
                },
                _ => return Err(bad_value(key, value)),
            }
        }
        "entropy_coeff" => t.entropy_coeff = parse_num(key, value)?,
        "polyak" => t.polyak = parse_num(key, value)?,
        "n_step" => t.n_step = parse_num(key, value)?,
        "success_batch" => t.success_batch = parse_num(key, value)?,
        "transition_batch" => t.transition_batch = parse_num(key, value)?,
        "max_iters" => t.max_iters = parse_num(key, value)?,
        "tolerance" => t.tolerance = parse_num(key, value)?,
        "action_source" => t.action_source = parse_action_source(value).ok_or_else(|| bad_value(key, value))?,
        "ratio_clip" => t.ratio_clip = parse_num(key, value)?,
        "policy_update" => {
            t.policy_update = match value {
                "greedy" => PolicyUpdate::Greedy,
                "soft" => PolicyUpdate::Soft,
                "fixed" => PolicyUpdate::Fixed,
                _ => return Err(bad_value(key, value)),
            }
        }
        "success_weight" => {
            t.success_weight = match value {
                "unit" => SuccessWeight::Unit,
                "prior" => SuccessWeight::Prior,
                _ => return Err(bad_value(key, value)),
            }
        }
        "policy_every" => t.policy_every = parse_num(key, value)?,
        "metric_cadence" => t.metric_cadence = parse_num(key, value)?,
        "collect_every" => t.collect_every = parse_num(key, value)?,
        "collect_steps" => t.collect_steps = parse_num(key, value)?,
        "seed" => t.seed = parse_num(key, value)?,
        _ => return Err(HarnessError::Usage(format!("unknown config key `{key}`"))),
    }
    Ok(())
}

pub fn parse_action_source(value: &str) -> Option<ActionSource> {
    match value {
        "current_policy" => Some(ActionSource::CurrentPolicy),
        "behavior_policy" => Some(ActionSource::BehaviorPolicy),
        _ => None,
    }
}

/// `env.*` keys, collected before the spec is assembled.
#[derive(Default)]
struct EnvFields {
    any: bool,
    kind: Option<String>,
    len: Option<usize>,
    two_way: Option<bool>,
    noise: Option<f64>,
    num_states: Option<usize>,
    num_actions: Option<usize>,
    concentration: Option<f64>,
    size: Option<usize>,
    seed: Option<u64>,
}

impl EnvFields {
    fn set(&mut self, field: &str, value: &str, key: &str) -> Result<()> {
        self.any = true;
        match field {
            "kind" => self.kind = Some(value.to_string()),
            "len" => self.len = Some(parse_num(key, value)?),
            "two_way" => self.two_way = Some(parse_num(key, value)?),
            "noise" => self.noise = Some(parse_num(key, value)?),
            "num_states" => self.num_states = Some(parse_num(key, value)?),
            "num_actions" => self.num_actions = Some(parse_num(key, value)?),
            "concentration" => self.concentration = Some(parse_num(key, value)?),
            "size" => self.size = Some(parse_num(key, value)?),
            "seed" => self.seed = Some(parse_num(key, value)?),
            _ => return Err(HarnessError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    fn build(&self, base: &EnvSpec) -> Result<EnvSpec> {
        let kind = match self.kind.as_deref() {
            Some(k) => k,
            None => match base.kind {
                EnvKind::Chain { .. } => "chain",
                EnvKind::RandomDirichlet { .. } => "random",
                EnvKind::Grid2d { .. } => "grid",
            },
        };
        let mut spec = env_spec_from_parts(
            kind,
            EnvParts {
                len: self.len,
                two_way: self.two_way,
                noise: self.noise,
                num_states: self.num_states,
                num_actions: self.num_actions,
                concentration: self.concentration,
                size: self.size,
            },
            Some(base),
        )?;
        spec.seed = self.seed.unwrap_or(base.seed);
        Ok(spec)
    }
}

/// Optional environment parameters shared by the config file and `gen-env`.
#[derive(Debug, Default, Clone, Copy)]
pub struct EnvParts {
    pub len: Option<usize>,
    pub two_way: Option<bool>,
    pub noise: Option<f64>,
    pub num_states: Option<usize>,
    pub num_actions: Option<usize>,
    pub concentration: Option<f64>,
    pub size: Option<usize>,
}

/// Builds a spec of the named kind; missing parameters come from `base`
/// when it has the same kind, else from fixed defaults.
pub fn env_spec_from_parts(kind: &str, p: EnvParts, base: Option<&EnvSpec>) -> Result<EnvSpec> {
    let seed = base.map_or(0, |b| b.seed);
    let kind = match kind {
        "chain" => {
            let (len0, two0, noise0) = match base.map(|b| &b.kind) {
                Some(EnvKind::Chain { len, two_way, noise }) => (*len, *two_way, *noise),
                _ => (2, false, 0.0),
            };
            EnvKind::Chain {
                len: p.len.unwrap_or(len0),
                two_way: p.two_way.unwrap_or(two0),
                noise: p.noise.unwrap_or(noise0),
            }
        }
        "random" => {
            let (n0, m0, c0) = match base.map(|b| &b.kind) {
                Some(EnvKind::RandomDirichlet {
                    num_states,
                    num_actions,
                    concentration,
                }) => (*num_states, *num_actions, *concentration),
                _ => (5, 2, 1.0),
            };
            EnvKind::RandomDirichlet {
                num_states: p.num_states.unwrap_or(n0),
                num_actions: p.num_actions.unwrap_or(m0),
                concentration: p.concentration.unwrap_or(c0),
            }
        }
        "grid" => {
            let mut spec = EnvSpec::single_goal_grid(p.size.unwrap_or(5).max(1));
            if let (EnvKind::Grid2d { noise, .. }, Some(n)) = (&mut spec.kind, p.noise) {
                *noise = n;
            }
            spec.kind
        }
        "two_region" => {
            let mut spec = EnvSpec::two_region_grid();
            if let (EnvKind::Grid2d { noise, .. }, Some(n)) = (&mut spec.kind, p.noise) {
                *noise = n;
            }
            spec.kind
        }
        other => return Err(HarnessError::Usage(format!("unknown env kind `{other}`"))),
    };
    Ok(EnvSpec { kind, seed })
}
