use std::collections::VecDeque;

use rand::RngCore;

use crate::analysis::PolicySource;
use crate::env::{ActionProfile, Environment, GlobalState, GridEnv, LocalAction, Phase};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<GlobalState>,
    /// Profiles actually applied (after any forced hold).
    pub profiles: Vec<ActionProfile>,
    pub terminal_reward: f64,
    pub omega: Option<usize>,
}

impl Trajectory {
    /// Number of environment steps.
    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn terminal(&self) -> &GlobalState {
        self.states.last().expect("trajectory has a start state")
    }

    /// Rebuilds the applied profiles from consecutive states.
    pub fn from_states(grid: &GridEnv, states: Vec<GlobalState>, terminal_reward: f64, omega: Option<usize>) -> Result<Self> {
        let d = grid.dims;
        let mut profiles = Vec::with_capacity(states.len().saturating_sub(1));
        for w in states.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let mut actions = Vec::with_capacity(grid.n_agents);
            for i in 0..grid.n_agents {
                let act = match (a.phases[i], b.phases[i]) {
                    (Phase::Purgatory, Phase::Purgatory) => None,
                    (Phase::Alive, Phase::Purgatory) => Some(LocalAction::Hold),
                    (Phase::Alive, Phase::Alive) => {
                        let k = (0..d)
                            .find(|&k| b.positions[i * d + k] == a.positions[i * d + k] + 1)
                            .ok_or_else(|| Error::Checkpoint(format!("agent {i} did not move between states")))?;
                        Some(LocalAction::Increment(k))
                    }
                    (Phase::Purgatory, Phase::Alive) => {
                        return Err(Error::Checkpoint(format!("agent {i} left purgatory")));
                    }
                };
                actions.push(act);
            }
            let profile = ActionProfile::new(actions);
            if grid.step(a, &profile)? != *b {
                return Err(Error::Checkpoint("inconsistent trajectory".into()));
            }
            profiles.push(profile);
        }
        Ok(Self { states, profiles, terminal_reward, omega })
    }
}

/// Rolls out `policy` under condition `omega` from the start state.
pub fn sample_trajectory<P: PolicySource + ?Sized>(
    policy: &P,
    env: &dyn Environment,
    rng: &mut dyn RngCore,
    epsilon: f64,
    omega: usize,
    greedy: bool,
) -> Result<Trajectory> {
    let grid = env.grid();
    let space = policy.global_space();
    let mut state = grid.start_state();
    let mut states = vec![state.clone()];
    let mut profiles = Vec::new();
    let mut locals = Vec::with_capacity(grid.n_agents);
    while !state.is_terminal() {
        if profiles.len() > grid.horizon as usize {
            return Err(Error::HorizonBug(grid.horizon));
        }
        let key = space.key(&state);
        let choice = if greedy {
            policy.greedy_profile(omega, key)
        } else {
            policy.sample_profile(omega, key, rng, epsilon)
        };
        space.local_keys_into(key, &mut locals);
        let actions = locals
            .iter()
            .zip(&choice)
            .map(|(&lk, a)| a.map(|a| space.local.legal_actions(lk)[a]))
            .collect();
        let requested = ActionProfile::new(actions);
        let next = grid.step(&state, &requested)?;
        profiles.push(grid.effective_profile(&state, &requested));
        states.push(next.clone());
        state = next;
    }
    let terminal_reward = env.reward(&state.positions)?;
    let omega = (policy.n_conditions() > 1).then_some(omega);
    Ok(Trajectory { states, profiles, terminal_reward, omega })
}

/// FIFO store of recent trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    pub capacity: usize,
    items: VecDeque<Trajectory>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), items: VecDeque::new() }
    }

    pub fn push(&mut self, t: Trajectory) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.items.iter()
    }
}
