//! Run configuration: a flat `key = value` text format and its resolved JSON form.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fm_loss::{GSpec, LossKind};
use crate::hypergrid::{Hypergrid, HypergridSpec};
use crate::joint_flow::{SamplingMode, StartMode};
use crate::trainer::{Algorithm, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub preset: Option<String>,
    pub spec: HypergridSpec,
    /// Step budget per episode; `None` uses the longest possible path.
    pub horizon: Option<u32>,
}

impl EnvConfig {
    pub fn build(&self) -> Result<Hypergrid> {
        let env = Hypergrid::new(self.spec)?;
        match self.horizon {
            Some(h) => env.with_horizon(h),
            None => Ok(env),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    /// Chain steps discarded first; `None` means a tenth of the run.
    pub burn_in: Option<u64>,
    pub thinning: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub mcmc: McmcConfig,
    pub out_dir: PathBuf,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig { preset: Some("v1".into()), spec: HypergridSpec::preset("v1").unwrap(), horizon: None },
            train: TrainConfig::default(),
            mcmc: McmcConfig { burn_in: None, thinning: crate::mcmc::DEFAULT_THINNING },
            out_dir: PathBuf::from("out"),
            checkpoint_interval: 0,
            record_wall_time: false,
        }
    }
}

/// Every key the text format accepts.
pub const KEYS: &[&str] = &[
    "preset",
    "n_agents",
    "dims",
    "side",
    "r0",
    "r1",
    "r2",
    "horizon",
    "algorithm",
    "train_steps",
    "trajectories_per_step",
    "lr",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "epsilon",
    "loss",
    "g",
    "g_alpha",
    "g_beta",
    "n_omega",
    "sampling",
    "start",
    "replay_depth",
    "eval_interval",
    "eval_rollouts",
    "greedy_eval",
    "dp_cap",
    "cfn_cap",
    "seed",
    "out_dir",
    "checkpoint_interval",
    "record_wall_time",
    "mcmc_burn_in",
    "mcmc_thinning",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{value}`"))),
    }
}

impl RunConfig {
    /// Parses `key = value` lines. `#` starts a comment; a preset is applied
    /// before any explicit environment keys regardless of line order.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, String> = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", no + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", no + 1)));
            }
        }
        let mut cfg = RunConfig::default();
        if let Some(p) = entries.remove("preset") {
            let spec = HypergridSpec::preset(&p).ok_or_else(|| Error::Config(format!("unknown preset `{p}`")))?;
            cfg.env = EnvConfig { preset: Some(p), spec, horizon: None };
        }
        let (mut g_kind, mut g_alpha, mut g_beta) = (None, 1.0, 1.0);
        for (k, v) in &entries {
            let (k, v) = (k.as_str(), v.as_str());
            let t = &mut cfg.train;
            match k {
                "n_agents" => cfg.env.spec.n_agents = parse_num(k, v)?,
                "dims" => cfg.env.spec.dims = parse_num(k, v)?,
                "side" => cfg.env.spec.side = parse_num(k, v)?,
                "r0" => cfg.env.spec.r0 = parse_num(k, v)?,
                "r1" => cfg.env.spec.r1 = parse_num(k, v)?,
                "r2" => cfg.env.spec.r2 = parse_num(k, v)?,
                "horizon" => cfg.env.horizon = Some(parse_num(k, v)?),
                "algorithm" => t.algorithm = Algorithm::parse(v)?,
                "train_steps" => t.train_steps = parse_num(k, v)?,
                "trajectories_per_step" => t.trajectories_per_step = parse_num(k, v)?,
                "lr" => t.lr = parse_num(k, v)?,
                "adam_beta1" => t.adam.beta1 = parse_num(k, v)?,
                "adam_beta2" => t.adam.beta2 = parse_num(k, v)?,
                "adam_eps" => t.adam.eps = parse_num(k, v)?,
                "epsilon" => t.epsilon = parse_num(k, v)?,
                "loss" => {
                    t.loss = match v {
                        "stable" => LossKind::Stable,
                        "divergence" => LossKind::Divergence,
                        _ => return Err(Error::Config(format!("loss: expected stable or divergence, got `{v}`"))),
                    }
                }
                "g" => g_kind = Some(v.to_string()),
                "g_alpha" => g_alpha = parse_num(k, v)?,
                "g_beta" => g_beta = parse_num(k, v)?,
                "n_omega" => t.n_omega = parse_num(k, v)?,
                "sampling" => {
                    t.sampling = match v {
                        "is" => SamplingMode::Independent,
                        "cs" => SamplingMode::Centralized,
                        _ => return Err(Error::Config(format!("sampling: expected is or cs, got `{v}`"))),
                    }
                }
                "start" => {
                    t.start = match v {
                        "sync" => StartMode::Synchronous,
                        "async" => StartMode::Asynchronous,
                        _ => return Err(Error::Config(format!("start: expected sync or async, got `{v}`"))),
                    }
                }
                "replay_depth" => t.replay_depth = parse_num(k, v)?,
                "eval_interval" => t.eval_interval = parse_num(k, v)?,
                "eval_rollouts" => t.eval_rollouts = parse_num(k, v)?,
                "greedy_eval" => t.greedy_eval = parse_bool(k, v)?,
                "dp_cap" => t.dp_cap = parse_num(k, v)?,
                "cfn_cap" => t.cfn_cap = parse_num(k, v)?,
                "seed" => t.seed = parse_num(k, v)?,
                "out_dir" => cfg.out_dir = PathBuf::from(v),
                "checkpoint_interval" => cfg.checkpoint_interval = parse_num(k, v)?,
                "record_wall_time" => cfg.record_wall_time = parse_bool(k, v)?,
                "mcmc_burn_in" => cfg.mcmc.burn_in = Some(parse_num(k, v)?),
                "mcmc_thinning" => cfg.mcmc.thinning = parse_num(k, v)?,
                _ => unreachable!("key list checked above"),
            }
        }
        cfg.train.g = match g_kind.as_deref() {
            None | Some("square") => GSpec::Square,
            Some("logpoly") => GSpec::LogPoly { alpha: g_alpha, beta: g_beta },
            Some(other) => return Err(Error::Config(format!("g: expected square or logpoly, got `{other}`"))),
        };
        if entries.keys().any(|k| ["n_agents", "dims", "side", "r0", "r1", "r2"].contains(&k.as_str())) {
            cfg.env.preset = cfg.env.preset.filter(|p| HypergridSpec::preset(p) == Some(cfg.env.spec));
        }
        Ok(cfg)
    }

    /// Applies a `MAGFN_SEED` style override.
    pub fn override_seed(&mut self, value: &str) -> Result<()> {
        self.train.seed = parse_num("MAGFN_SEED", value.trim())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.env.spec.validate()?;
        self.env.build()?;
        self.train.validate()?;
        if self.mcmc.thinning == 0 {
            return Err(Error::Config("mcmc_thinning must be positive".into()));
        }
        if self.train.algorithm == Algorithm::Mcmc {
            let total = self.mcmc_steps()?;
            if self.mcmc_burn_in() >= total {
                return Err(Error::Config(format!("mcmc_burn_in must be below the {total} chain steps")));
            }
        }
        Ok(())
    }

    /// Chain length for the baseline: one step per trajectory of budget.
    pub fn mcmc_steps(&self) -> Result<u64> {
        self.train
            .train_steps
            .checked_mul(self.train.trajectories_per_step as u64)
            .ok_or_else(|| Error::Config("train_steps * trajectories_per_step overflows".into()))
    }

    pub fn mcmc_burn_in(&self) -> u64 {
        self.mcmc.burn_in.unwrap_or_else(|| crate::mcmc::default_burn_in(self.mcmc_steps().unwrap_or(0)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad resolved config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_key_and_round_trips() {
        let text = "\
# full config
preset = v1
r1 = 0.25
horizon = 20
algorithm = cjfn
train_steps = 10
trajectories_per_step = 4
lr = 0.001
adam_beta1 = 0.8
adam_beta2 = 0.99
adam_eps = 1e-10
epsilon = 0.1
loss = divergence
g = logpoly
g_alpha = 2
g_beta = 1.5
n_omega = 3
sampling = cs
start = async
replay_depth = 2
eval_interval = 5
eval_rollouts = 7
greedy_eval = true
dp_cap = 1000
cfn_cap = 99
seed = 42
out_dir = runs/a
checkpoint_interval = 5
record_wall_time = false
mcmc_burn_in = 3
mcmc_thinning = 2
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.env.spec.r1, 0.25);
        assert_eq!(cfg.env.preset, None);
        assert_eq!(cfg.train.algorithm, Algorithm::Cjfn);
        assert_eq!(cfg.train.g, GSpec::LogPoly { alpha: 2.0, beta: 1.5 });
        assert_eq!(cfg.train.sampling, SamplingMode::Centralized);
        assert_eq!(cfg.train.adam.eps, 1e-10);
        assert_eq!(cfg.mcmc.burn_in, Some(3));
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn defaults_match_the_benchmark_settings() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.env.spec, HypergridSpec::preset("v1").unwrap());
        assert_eq!(cfg.train.train_steps, 20_000);
        assert_eq!(cfg.train.trajectories_per_step, 16);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.epsilon, 5e-4);
        assert_eq!(cfg.train.n_omega, 4);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "algorithm = ppo",
            "nope = 1",
            "lr = fast",
            "lr",
            "seed = 1\nseed = 2",
            "preset = v9",
            "greedy_eval = maybe",
            "g = cube",
            "sampling = both",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
        for bad in ["lr = -1", "side = 1", "train_steps = 0", "g = logpoly\ng_alpha = 0", "horizon = 0"] {
            let cfg = RunConfig::parse(bad).unwrap();
            assert!(cfg.validate().is_err(), "{bad}");
        }
    }

    #[test]
    fn seed_override() {
        let mut cfg = RunConfig::parse("seed = 1").unwrap();
        cfg.override_seed("9").unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert!(cfg.override_seed("x").is_err());
    }
}
