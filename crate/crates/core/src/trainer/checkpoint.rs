//! Plain-text checkpoints.
//!
//! One record per line, tab separated. Floats use shortest round-trip
//! formatting so a restored trainer continues bit-for-bit.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::{stream_rng, Algorithm, IntervalSums, TrainConfig, Trainer, Trajectory, OMEGA_STREAM, TRAIN_STREAM};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::flow_table::{FlowParams, StateSpace};

const MAGIC: &str = "magfn-checkpoint 1";

/// Parsed checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub tables: Vec<FlowParams>,
    /// Opaque environment description written by the caller.
    pub env: Option<String>,
    rng_pos: u128,
    omega_pos: u128,
    adam_t: u64,
    moments: Vec<BTreeMap<(String, String), (f64, f64)>>,
    sums: IntervalSums,
    modes: Vec<u64>,
    replay: Vec<(Option<usize>, f64, Vec<u64>)>,
}

fn fmt_opt(x: Option<usize>) -> String {
    x.map_or_else(|| "-".into(), |v| v.to_string())
}

impl Trainer<'_> {
    pub fn checkpoint_text(&self) -> String {
        self.checkpoint_text_with_env(None)
    }

    /// Like [`Trainer::checkpoint_text`], embedding a single-line environment
    /// description that [`Checkpoint::parse`] hands back untouched.
    pub fn checkpoint_text_with_env(&self, env: Option<&str>) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}");
        if let Some(env) = env {
            let _ = writeln!(s, "env\t{env}");
        }
        let json = serde_json::to_string(&self.cfg).expect("config serializes");
        let _ = writeln!(s, "config\t{json}");
        let _ = writeln!(s, "step\t{}", self.step);
        let _ = writeln!(s, "rng\t{}", self.rng.get_word_pos());
        let _ = writeln!(s, "omega_rng\t{}", self.omega_rng.get_word_pos());
        let _ = writeln!(s, "adam_t\t{}", self.adam.t);
        let _ = write!(s, "sums\t{:?}\t{}\t{:?}", self.sums.loss, self.sums.count, self.sums.violation);
        for a in &self.sums.agent_losses {
            let _ = write!(s, "\t{a:?}");
        }
        s.push('\n');
        for m in &self.mode_hits {
            let _ = writeln!(s, "mode\t{m}");
        }
        for (t, table) in self.tables.iter().enumerate() {
            let (m, v) = (&self.adam.m[t], &self.adam.v[t]);
            for (key, kind, idx) in table.labels() {
                let _ = writeln!(s, "param\t{t}\t{key}\t{kind}\t{:?}", table.values()[idx]);
                let mi = m.get(idx).copied().unwrap_or(0.0);
                let vi = v.get(idx).copied().unwrap_or(0.0);
                let _ = writeln!(s, "moment\t{t}\t{key}\t{kind}\t{mi:?}\t{vi:?}");
            }
        }
        for tr in self.replay.iter() {
            let keys: Vec<String> = tr.states.iter().map(|st| self.global.key(st).to_string()).collect();
            let _ = writeln!(s, "replay\t{}\t{:?}\t{}", fmt_opt(tr.omega), tr.terminal_reward, keys.join(","));
        }
        s
    }

    /// Rebuilds a trainer from [`Trainer::checkpoint_text`] output.
    pub fn restore<'e>(env: &'e dyn Environment, text: &str) -> Result<Trainer<'e>> {
        let ck = Checkpoint::parse(text)?;
        let mut tr = Trainer::new(env, ck.config.clone())?;
        if ck.tables.len() != tr.tables.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tables, {} expected",
                ck.tables.len(),
                tr.tables.len()
            )));
        }
        if ck.sums.agent_losses.len() != tr.sums.agent_losses.len() {
            return Err(Error::Checkpoint("agent count does not match environment".into()));
        }
        tr.step = ck.step;
        tr.rng = stream_rng(tr.cfg.seed, TRAIN_STREAM);
        tr.rng.set_word_pos(ck.rng_pos);
        tr.omega_rng = stream_rng(tr.cfg.seed, OMEGA_STREAM);
        tr.omega_rng.set_word_pos(ck.omega_pos);
        tr.adam.t = ck.adam_t;
        for (t, table) in ck.tables.iter().enumerate() {
            let n = table.len();
            let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
            for (key, kind, idx) in table.labels() {
                let (mi, vi) = ck.moments[t]
                    .get(&(key.clone(), kind.clone()))
                    .copied()
                    .ok_or_else(|| Error::Checkpoint(format!("table {t} key {key} {kind} has no moment")))?;
                m[idx] = mi;
                v[idx] = vi;
            }
            tr.adam.m[t] = m;
            tr.adam.v[t] = v;
        }
        tr.tables = ck.tables;
        tr.sums = ck.sums;
        tr.mode_hits = ck.modes.into_iter().collect();
        for (omega, reward, keys) in ck.replay {
            if let Some(&bad) = keys.iter().find(|&&k| !tr.global.contains(k)) {
                return Err(Error::UnknownKey(bad));
            }
            let states = keys.iter().map(|&k| tr.global.decode(k)).collect();
            tr.replay.push(Trajectory::from_states(env.grid(), states, reward, omega)?);
        }
        Ok(tr)
    }
}

impl Checkpoint {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => return Err(Error::Checkpoint("missing checkpoint header".into())),
        }
        let mut config: Option<TrainConfig> = None;
        let mut env = None;
        let mut step = None;
        let (mut rng_pos, mut omega_pos, mut adam_t) = (None, None, None);
        let mut sums = None;
        let mut modes = Vec::new();
        let mut params: Vec<String> = Vec::new();
        let mut moments: Vec<BTreeMap<(String, String), (f64, f64)>> = Vec::new();
        let mut replay = Vec::new();
        for (no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Checkpoint(format!("line {}: {what}", no + 1));
            let f: Vec<&str> = line.split('\t').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            let table = |s: &str| s.parse::<usize>().map_err(|_| bad("bad table index"));
            match (f[0], f.len()) {
                ("config", 2) => {
                    config = Some(serde_json::from_str(f[1]).map_err(|e| bad(&format!("bad config: {e}")))?)
                }
                ("env", 2) => env = Some(f[1].to_string()),
                ("step", 2) => step = Some(f[1].parse::<u64>().map_err(|_| bad("bad step"))?),
                ("rng", 2) => rng_pos = Some(f[1].parse::<u128>().map_err(|_| bad("bad rng position"))?),
                ("omega_rng", 2) => omega_pos = Some(f[1].parse::<u128>().map_err(|_| bad("bad rng position"))?),
                ("adam_t", 2) => adam_t = Some(f[1].parse::<u64>().map_err(|_| bad("bad adam step"))?),
                ("sums", n) if n >= 4 => {
                    sums = Some(IntervalSums {
                        loss: num(f[1])?,
                        count: f[2].parse().map_err(|_| bad("bad count"))?,
                        violation: num(f[3])?,
                        agent_losses: f[4..].iter().map(|x| num(x)).collect::<Result<_>>()?,
                    })
                }
                ("mode", 2) => modes.push(f[1].parse().map_err(|_| bad("bad mode index"))?),
                ("param", 5) => {
                    let t = table(f[1])?;
                    if t >= params.len() {
                        params.resize(t + 1, String::new());
                    }
                    let _ = writeln!(params[t], "{}\t{}\t{}", f[2], f[3], f[4]);
                }
                ("moment", 6) => {
                    let t = table(f[1])?;
                    if t >= moments.len() {
                        moments.resize(t + 1, BTreeMap::new());
                    }
                    moments[t].insert((f[2].to_string(), f[3].to_string()), (num(f[4])?, num(f[5])?));
                }
                ("replay", 4) => {
                    let omega = match f[1] {
                        "-" => None,
                        s => Some(s.parse().map_err(|_| bad("bad omega"))?),
                    };
                    let keys = f[3]
                        .split(',')
                        .map(|k| k.parse::<u64>().map_err(|_| bad("bad state key")))
                        .collect::<Result<Vec<_>>>()?;
                    replay.push((omega, num(f[2])?, keys));
                }
                _ => return Err(bad("unrecognized record")),
            }
        }
        let missing = |what: &str| Error::Checkpoint(format!("missing {what} record"));
        let config = config.ok_or_else(|| missing("config"))?;
        if config.algorithm == Algorithm::Mcmc {
            return Err(Error::Checkpoint("mcmc runs have no flow checkpoint".into()));
        }
        moments.resize(params.len(), BTreeMap::new());
        let tables = params.iter().map(|p| FlowParams::from_text(p)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            step: step.ok_or_else(|| missing("step"))?,
            tables,
            env,
            rng_pos: rng_pos.ok_or_else(|| missing("rng"))?,
            omega_pos: omega_pos.ok_or_else(|| missing("omega_rng"))?,
            adam_t: adam_t.ok_or_else(|| missing("adam_t"))?,
            moments,
            sums: sums.ok_or_else(|| missing("sums"))?,
            modes,
            replay,
        })
    }
}
