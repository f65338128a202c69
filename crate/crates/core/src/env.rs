//! Multi-agent increment-grid environment contract.
//!
//! `N` agents live on a `D`-dimensional grid of side `H`. Each alive agent
//! either increments one coordinate or holds; holding moves the agent to
//! purgatory where it waits (keeping its last position) until every agent has
//! held. The episode is terminal once all agents are in purgatory. Agents do
//! not interact: each agent's next observation only depends on its own
//! observation and action.

use crate::error::{Error, Result};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AgentId(pub usize);

/// Action available to an alive agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LocalAction {
    Increment(usize),
    /// Agent-level stop: enter purgatory at the current position.
    Hold,
}

impl fmt::Display for LocalAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LocalAction::Increment(k) => write!(f, "inc{k}"),
            LocalAction::Hold => write!(f, "hold"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Alive,
    Purgatory,
}

/// One entry per agent; `None` means the agent waits in purgatory.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActionProfile {
    pub actions: Vec<Option<LocalAction>>,
}

impl ActionProfile {
    pub fn new(actions: Vec<Option<LocalAction>>) -> Self {
        Self { actions }
    }

    pub fn all_hold(state: &GlobalState) -> Self {
        Self::new(
            state
                .phases
                .iter()
                .map(|p| match p {
                    Phase::Alive => Some(LocalAction::Hold),
                    Phase::Purgatory => None,
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GlobalState {
    /// Row-major `n_agents x dims` coordinates.
    pub positions: Vec<u32>,
    pub phases: Vec<Phase>,
    pub step: u32,
}

impl GlobalState {
    pub fn is_terminal(&self) -> bool {
        self.phases.iter().all(|p| *p == Phase::Purgatory)
    }

    pub fn n_alive(&self) -> usize {
        self.phases.iter().filter(|p| **p == Phase::Alive).count()
    }

    pub fn agent_position(&self, agent: usize, dims: usize) -> &[u32] {
        &self.positions[agent * dims..(agent + 1) * dims]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LocalObs {
    pub position: Vec<u32>,
    pub phase: Phase,
}

/// Dynamics of the non-interacting multi-agent grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridEnv {
    pub n_agents: usize,
    pub dims: usize,
    pub side: u32,
    pub horizon: u32,
}

impl GridEnv {
    /// Grid with the default horizon `N*D*(H-1) + 1`, which never truncates.
    pub fn new(n_agents: usize, dims: usize, side: u32) -> Result<Self> {
        if n_agents == 0 || dims == 0 {
            return Err(Error::Config("need at least one agent and one dimension".into()));
        }
        if side < 2 {
            return Err(Error::Config(format!("side must be >= 2, got {side}")));
        }
        let horizon = Self::default_horizon(n_agents, dims, side);
        Ok(Self { n_agents, dims, side, horizon })
    }

    pub fn default_horizon(n_agents: usize, dims: usize, side: u32) -> u32 {
        (n_agents * dims) as u32 * (side - 1) + 1
    }

    pub fn with_horizon(mut self, horizon: u32) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn start_state(&self) -> GlobalState {
        GlobalState {
            positions: vec![0; self.n_agents * self.dims],
            phases: vec![Phase::Alive; self.n_agents],
            step: 0,
        }
    }

    pub fn observe(&self, state: &GlobalState, agent: AgentId) -> LocalObs {
        LocalObs {
            position: state.agent_position(agent.0, self.dims).to_vec(),
            phase: state.phases[agent.0],
        }
    }

    /// Legal actions in canonical order: increments by ascending axis, then hold.
    pub fn legal_actions(&self, obs: &LocalObs) -> Vec<LocalAction> {
        legal_actions_at(&obs.position, obs.phase, self.side)
    }

    /// Replaces the requested profile by the one the environment applies:
    /// at the last step before the horizon every alive agent is forced to hold.
    pub fn effective_profile(&self, state: &GlobalState, profile: &ActionProfile) -> ActionProfile {
        if state.step + 1 >= self.horizon {
            ActionProfile::all_hold(state)
        } else {
            profile.clone()
        }
    }

    pub fn validate_profile(&self, state: &GlobalState, profile: &ActionProfile) -> Result<()> {
        if profile.actions.len() != self.n_agents {
            return Err(Error::IllegalAction {
                agent: profile.actions.len().min(self.n_agents),
                detail: format!("profile has {} entries for {} agents", profile.actions.len(), self.n_agents),
            });
        }
        for (agent, (action, phase)) in profile.actions.iter().zip(&state.phases).enumerate() {
            match (phase, action) {
                (Phase::Purgatory, None) => {}
                (Phase::Purgatory, Some(a)) => {
                    return Err(Error::IllegalAction { agent, detail: format!("{a} requested in purgatory") })
                }
                (Phase::Alive, None) => {
                    return Err(Error::IllegalAction { agent, detail: "alive agent must act".into() })
                }
                (Phase::Alive, Some(a)) => {
                    let pos = state.agent_position(agent, self.dims);
                    if !is_legal(pos, *a, self.side) {
                        return Err(Error::IllegalAction { agent, detail: format!("{a} at {pos:?}") });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn step(&self, state: &GlobalState, profile: &ActionProfile) -> Result<GlobalState> {
        if state.is_terminal() {
            return Err(Error::TerminalState);
        }
        self.validate_profile(state, profile)?;
        let applied = self.effective_profile(state, profile);
        let mut next = state.clone();
        for (agent, action) in applied.actions.iter().enumerate() {
            match action {
                Some(LocalAction::Increment(k)) => next.positions[agent * self.dims + k] += 1,
                Some(LocalAction::Hold) => next.phases[agent] = Phase::Purgatory,
                None => {}
            }
        }
        next.step += 1;
        Ok(next)
    }

    /// Number of terminal position arrays, `(H^D)^N`, if it fits in `u64`.
    pub fn n_terminals(&self) -> Option<u64> {
        (self.side as u64).checked_pow((self.dims * self.n_agents) as u32)
    }
}

pub(crate) fn is_legal(position: &[u32], action: LocalAction, side: u32) -> bool {
    match action {
        LocalAction::Hold => true,
        LocalAction::Increment(k) => k < position.len() && position[k] + 1 < side,
    }
}

pub(crate) fn legal_actions_at(position: &[u32], phase: Phase, side: u32) -> Vec<LocalAction> {
    if phase == Phase::Purgatory {
        return Vec::new();
    }
    let mut out: Vec<LocalAction> = position
        .iter()
        .enumerate()
        .filter(|(_, &x)| x + 1 < side)
        .map(|(k, _)| LocalAction::Increment(k))
        .collect();
    out.push(LocalAction::Hold);
    out
}

/// An environment: grid dynamics plus a terminal reward.
pub trait Environment: Sync {
    fn grid(&self) -> &GridEnv;

    /// Reward of a terminal configuration given its row-major positions.
    fn reward(&self, positions: &[u32]) -> Result<f64>;

    /// Whether a terminal configuration counts as a mode for discovery metrics.
    fn is_mode(&self, _positions: &[u32]) -> bool {
        false
    }
}

/// Grid environment with an arbitrary reward closure, mostly for tests and
/// small solvable instances.
pub struct CustomEnv {
    grid: GridEnv,
    reward: Box<dyn Fn(&[u32]) -> f64 + Send + Sync>,
}

impl CustomEnv {
    pub fn new(grid: GridEnv, reward: impl Fn(&[u32]) -> f64 + Send + Sync + 'static) -> Self {
        Self { grid, reward: Box::new(reward) }
    }
}

impl Environment for CustomEnv {
    fn grid(&self) -> &GridEnv {
        &self.grid
    }

    fn reward(&self, positions: &[u32]) -> Result<f64> {
        if positions.len() != self.grid.n_agents * self.grid.dims
            || positions.iter().any(|&x| x >= self.grid.side)
        {
            return Err(Error::OutOfRange(format!("{positions:?}")));
        }
        Ok((self.reward)(positions))
    }
}
