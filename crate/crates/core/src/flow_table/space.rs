//! State-key encodings and transition-graph adapters.
//!
//! A local key packs one agent's observation as `position_index * 2 + phase`
//! (phase bit set for purgatory). A global key packs the agents' local keys in
//! mixed radix `2 * H^D`, agent 0 least significant. The step counter is not
//! part of either key.

use crate::env::{legal_actions_at, GlobalState, GridEnv, LocalAction, LocalObs, Phase};
use crate::error::{Error, Result};
use crate::hypergrid::{terminal_index, terminal_positions};

/// Parent/child structure of the graph a flow table lives on.
pub trait StateSpace {
    fn start_key(&self) -> u64;

    /// Whether `key` names a state of this space that can actually occur.
    fn contains(&self, key: u64) -> bool;

    /// Terminal keys carry no parameters; their outflow passes through to STOP.
    fn is_terminal(&self, key: u64) -> bool;

    /// Number of non-STOP actions at `key` (zero on terminal keys).
    fn n_actions(&self, key: u64) -> usize;

    /// Appends every `(parent_key, action_index)` with `T(parent, action) = key`.
    fn parents(&self, key: u64, out: &mut Vec<(u64, usize)>);

    /// Child reached from `key` by action `action`.
    fn child(&self, key: u64, action: usize) -> u64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalSpace {
    pub dims: usize,
    pub side: u32,
    n_positions: u64,
}

impl LocalSpace {
    pub fn new(dims: usize, side: u32) -> Result<Self> {
        let n_positions = (side as u64)
            .checked_pow(dims as u32)
            .filter(|n| n.checked_mul(2).is_some())
            .ok_or_else(|| Error::TooLarge(format!("H^D overflows for H={side}, D={dims}")))?;
        Ok(Self { dims, side, n_positions })
    }

    pub fn of_grid(grid: &GridEnv) -> Result<Self> {
        Self::new(grid.dims, grid.side)
    }

    /// Number of distinct local keys (alive and purgatory).
    pub fn n_keys(&self) -> u64 {
        2 * self.n_positions
    }

    pub fn key(&self, obs: &LocalObs) -> u64 {
        self.key_of(&obs.position, obs.phase)
    }

    pub fn key_of(&self, position: &[u32], phase: Phase) -> u64 {
        let bit = match phase {
            Phase::Alive => 0,
            Phase::Purgatory => 1,
        };
        terminal_index(position, self.side) * 2 + bit
    }

    pub fn decode(&self, key: u64) -> LocalObs {
        let phase = if key & 1 == 1 { Phase::Purgatory } else { Phase::Alive };
        LocalObs { position: terminal_positions(key >> 1, self.dims, self.side), phase }
    }

    pub fn is_alive_key(key: u64) -> bool {
        key & 1 == 0
    }

    /// Alive twin of a purgatory key (identity on alive keys).
    pub fn twin(key: u64) -> u64 {
        key & !1
    }

    pub fn purgatory_of(key: u64) -> u64 {
        key | 1
    }

    pub fn legal_actions(&self, key: u64) -> Vec<LocalAction> {
        let obs = self.decode(key);
        legal_actions_at(&obs.position, obs.phase, self.side)
    }

    /// Position of `action` in the canonical legal-action list at an alive key.
    pub fn action_index(&self, position: &[u32], action: LocalAction) -> usize {
        match action {
            LocalAction::Increment(k) => position[..k].iter().filter(|&&x| x + 1 < self.side).count(),
            LocalAction::Hold => position.iter().filter(|&&x| x + 1 < self.side).count(),
        }
    }

    fn position_sum(&self, key: u64) -> u32 {
        self.decode(key).position.iter().sum()
    }
}

impl StateSpace for LocalSpace {
    fn start_key(&self) -> u64 {
        0
    }

    fn contains(&self, key: u64) -> bool {
        key < self.n_keys()
    }

    fn is_terminal(&self, key: u64) -> bool {
        !Self::is_alive_key(key)
    }

    fn n_actions(&self, key: u64) -> usize {
        if self.is_terminal(key) {
            return 0;
        }
        let obs = self.decode(key);
        obs.position.iter().filter(|&&x| x + 1 < self.side).count() + 1
    }

    fn parents(&self, key: u64, out: &mut Vec<(u64, usize)>) {
        let obs = self.decode(key);
        match obs.phase {
            Phase::Purgatory => {
                let twin = Self::twin(key);
                out.push((twin, self.n_actions(twin) - 1));
            }
            Phase::Alive => {
                let mut pos = obs.position;
                for k in 0..self.dims {
                    if pos[k] == 0 {
                        continue;
                    }
                    pos[k] -= 1;
                    let idx = self.action_index(&pos, LocalAction::Increment(k));
                    out.push((self.key_of(&pos, Phase::Alive), idx));
                    pos[k] += 1;
                }
            }
        }
    }

    fn child(&self, key: u64, action: usize) -> u64 {
        let obs = self.decode(key);
        match legal_actions_at(&obs.position, obs.phase, self.side)[action] {
            LocalAction::Hold => Self::purgatory_of(key),
            LocalAction::Increment(k) => {
                let mut pos = obs.position;
                pos[k] += 1;
                self.key_of(&pos, Phase::Alive)
            }
        }
    }
}

/// Joint state space of `N` agents with synchronized moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlobalSpace {
    pub n_agents: usize,
    pub local: LocalSpace,
    radix: u64,
}

impl GlobalSpace {
    pub fn new(n_agents: usize, dims: usize, side: u32) -> Result<Self> {
        let local = LocalSpace::new(dims, side)?;
        let radix = local.n_keys();
        radix
            .checked_pow(n_agents as u32)
            .ok_or_else(|| Error::TooLarge(format!("global key space overflows for N={n_agents}")))?;
        Ok(Self { n_agents, local, radix })
    }

    pub fn of_grid(grid: &GridEnv) -> Result<Self> {
        Self::new(grid.n_agents, grid.dims, grid.side)
    }

    pub fn key(&self, state: &GlobalState) -> u64 {
        let d = self.local.dims;
        (0..self.n_agents).rev().fold(0u64, |acc, i| {
            acc * self.radix + self.local.key_of(&state.positions[i * d..(i + 1) * d], state.phases[i])
        })
    }

    pub fn local_keys(&self, key: u64) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.n_agents);
        self.local_keys_into(key, &mut out);
        out
    }

    pub fn local_keys_into(&self, mut key: u64, out: &mut Vec<u64>) {
        out.clear();
        for _ in 0..self.n_agents {
            out.push(key % self.radix);
            key /= self.radix;
        }
    }

    pub fn compose(&self, locals: &[u64]) -> u64 {
        locals.iter().rev().fold(0u64, |acc, &k| acc * self.radix + k)
    }

    /// Rebuilds the state; the step counter is the common alive coordinate
    /// sum, or one past the latest hold for terminal states.
    pub fn decode(&self, key: u64) -> GlobalState {
        let locals = self.local_keys(key);
        let mut positions = Vec::with_capacity(self.n_agents * self.local.dims);
        let mut phases = Vec::with_capacity(self.n_agents);
        for &lk in &locals {
            let obs = self.local.decode(lk);
            positions.extend_from_slice(&obs.position);
            phases.push(obs.phase);
        }
        let step = self.timing(&locals).unwrap_or_else(|| {
            locals.iter().map(|&k| self.local.position_sum(k) + 1).max().unwrap_or(0)
        });
        GlobalState { positions, phases, step }
    }

    /// Common step counter of the alive agents, `None` when all agents are in
    /// purgatory. Returns `Some(u32::MAX)` for inconsistent timings.
    fn timing(&self, locals: &[u64]) -> Option<u32> {
        let mut t: Option<u32> = None;
        for &lk in locals.iter().filter(|&&k| LocalSpace::is_alive_key(k)) {
            let s = self.local.position_sum(lk);
            match t {
                None => t = Some(s),
                Some(prev) if prev != s => return Some(u32::MAX),
                _ => {}
            }
        }
        t
    }

    fn reachable(&self, locals: &[u64]) -> bool {
        match self.timing(locals) {
            None => true,
            Some(u32::MAX) => false,
            Some(t) => locals
                .iter()
                .filter(|&&k| !LocalSpace::is_alive_key(k))
                .all(|&k| self.local.position_sum(k) < t),
        }
    }

    /// Decomposes a joint action index into per-agent local action indices
    /// (`None` for agents in purgatory). The first alive agent varies fastest.
    pub fn split_action(&self, locals: &[u64], mut action: usize) -> Vec<Option<usize>> {
        locals
            .iter()
            .map(|&lk| {
                if LocalSpace::is_alive_key(lk) {
                    let n = self.local.n_actions(lk);
                    let a = action % n;
                    action /= n;
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn join_action(&self, locals: &[u64], actions: &[Option<usize>]) -> usize {
        let mut idx = 0usize;
        let mut stride = 1usize;
        for (&lk, a) in locals.iter().zip(actions) {
            if LocalSpace::is_alive_key(lk) {
                idx += a.expect("alive agent needs an action") * stride;
                stride *= self.local.n_actions(lk);
            }
        }
        idx
    }
}

impl StateSpace for GlobalSpace {
    fn start_key(&self) -> u64 {
        0
    }

    fn contains(&self, key: u64) -> bool {
        match self.radix.checked_pow(self.n_agents as u32) {
            Some(n) if key >= n => false,
            _ => self.reachable(&self.local_keys(key)),
        }
    }

    fn is_terminal(&self, key: u64) -> bool {
        self.local_keys(key).iter().all(|&k| !LocalSpace::is_alive_key(k))
    }

    fn n_actions(&self, key: u64) -> usize {
        let locals = self.local_keys(key);
        if locals.iter().all(|&k| !LocalSpace::is_alive_key(k)) {
            return 0;
        }
        locals
            .iter()
            .filter(|&&k| LocalSpace::is_alive_key(k))
            .map(|&k| self.local.n_actions(k))
            .product()
    }

    fn parents(&self, key: u64, out: &mut Vec<(u64, usize)>) {
        let locals = self.local_keys(key);
        // Per agent: candidate (previous local key, local action index or None for wait).
        let mut options: Vec<Vec<(u64, Option<usize>)>> = Vec::with_capacity(self.n_agents);
        let mut scratch = Vec::new();
        for &lk in &locals {
            let mut opts = Vec::new();
            if LocalSpace::is_alive_key(lk) {
                scratch.clear();
                self.local.parents(lk, &mut scratch);
                opts.extend(scratch.iter().map(|&(p, a)| (p, Some(a))));
            } else {
                opts.push((lk, None));
                let twin = LocalSpace::twin(lk);
                opts.push((twin, Some(self.local.n_actions(twin) - 1)));
            }
            if opts.is_empty() {
                return;
            }
            options.push(opts);
        }
        let mut choice = vec![0usize; self.n_agents];
        let mut prev = vec![0u64; self.n_agents];
        let mut acts = vec![None; self.n_agents];
        loop {
            for i in 0..self.n_agents {
                let (p, a) = options[i][choice[i]];
                prev[i] = p;
                acts[i] = a;
            }
            if acts.iter().any(|a| a.is_some()) && self.reachable(&prev) {
                out.push((self.compose(&prev), self.join_action(&prev, &acts)));
            }
            let mut i = 0;
            loop {
                if i == self.n_agents {
                    return;
                }
                choice[i] += 1;
                if choice[i] < options[i].len() {
                    break;
                }
                choice[i] = 0;
                i += 1;
            }
        }
    }

    fn child(&self, key: u64, action: usize) -> u64 {
        let locals = self.local_keys(key);
        let acts = self.split_action(&locals, action);
        let next: Vec<u64> = locals
            .iter()
            .zip(&acts)
            .map(|(&lk, a)| match a {
                Some(a) => self.local.child(lk, *a),
                None => lk,
            })
            .collect();
        self.compose(&next)
    }
}
