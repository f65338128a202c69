//! Product composition of local flow tables into a joint flow over global
//! states, and its condition-indexed family.
//!
//! The joint star outflow is the product of the local star outflows (agents in
//! purgatory contribute their pass-through flow) and the joint inflow is the
//! product of the local inflows. At the global start the initial masses
//! combine synchronously (`prod C_i + prod F_in*_i`) by default.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_table::{sample_index, Dual, FlowParams, FlowView, GlobalSpace, LocalSpace, StateSpace};
use crate::fm_loss::FlowModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StartMode {
    Synchronous,
    Asynchronous,
}

/// How a joint action is drawn from the local policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    /// Each alive agent samples from its own policy.
    Independent,
    /// One draw from the product distribution over joint actions.
    Centralized,
}

/// Uniform distribution over condition indices `0..size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionSpace {
    pub size: usize,
}

impl ConditionSpace {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("condition space needs at least one value".into()));
        }
        Ok(Self { size })
    }

    pub fn probability(&self, omega: usize) -> f64 {
        if omega < self.size {
            1.0 / self.size as f64
        } else {
            0.0
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.gen_range(0..self.size)
    }
}

#[derive(Clone)]
pub struct JointView<'a> {
    pub locals: Vec<&'a FlowParams>,
    pub global: GlobalSpace,
    pub start: StartMode,
    /// Gradient table number of agent 0; agent `i` uses `table_base + i`.
    pub table_base: u32,
}

impl<'a> JointView<'a> {
    pub fn new(locals: Vec<&'a FlowParams>, global: GlobalSpace) -> Self {
        assert_eq!(locals.len(), global.n_agents, "one local table per agent");
        Self { locals, global, start: StartMode::Synchronous, table_base: 0 }
    }

    pub fn with_start(mut self, start: StartMode) -> Self {
        self.start = start;
        self
    }

    pub fn with_table_base(mut self, base: u32) -> Self {
        self.table_base = base;
        self
    }

    pub fn local_view(&self, agent: usize) -> FlowView<'_, LocalSpace> {
        FlowView { params: self.locals[agent], space: &self.global.local, table: self.table_base + agent as u32 }
    }

    fn decode(&self, key: u64) -> Result<Vec<u64>> {
        if !self.global.contains(key) {
            return Err(Error::UnknownKey(key));
        }
        Ok(self.global.local_keys(key))
    }

    pub fn joint_out_star(&self, key: u64) -> Result<f64> {
        let locals = self.decode(key)?;
        locals.iter().enumerate().try_fold(1.0, |acc, (i, &lk)| Ok(acc * self.local_view(i).out_star(lk)?))
    }

    pub fn joint_in_flow(&self, key: u64) -> Result<f64> {
        let locals = self.decode(key)?;
        let mut star = 1.0;
        for (i, &lk) in locals.iter().enumerate() {
            star *= self.local_view(i).in_flow_star(lk)?;
        }
        if key != self.global.start_key() {
            return Ok(star);
        }
        Ok(match self.start {
            StartMode::Synchronous => (0..locals.len()).map(|i| self.local_view(i).init_mass()).product::<f64>() + star,
            StartMode::Asynchronous => {
                let mut total = 1.0;
                for (i, &lk) in locals.iter().enumerate() {
                    total *= self.local_view(i).in_flow(lk)?;
                }
                total
            }
        })
    }

    pub fn virtual_reward(&self, key: u64) -> Result<f64> {
        let inflow = self.joint_in_flow(key)?;
        if self.global.is_terminal(key) {
            return Ok(inflow);
        }
        Ok(inflow - self.joint_out_star(key)?)
    }

    pub fn joint_out_star_dual(&self, key: u64) -> Result<Dual> {
        let locals = self.decode(key)?;
        let mut acc = Dual::constant(1.0);
        for (i, &lk) in locals.iter().enumerate() {
            acc = acc.mul(&self.local_view(i).out_star_dual(lk)?);
        }
        Ok(acc)
    }

    pub fn joint_in_flow_dual(&self, key: u64) -> Result<Dual> {
        let locals = self.decode(key)?;
        let at_start = key == self.global.start_key();
        let include_init = at_start && self.start == StartMode::Asynchronous;
        let mut star = Dual::constant(1.0);
        for (i, &lk) in locals.iter().enumerate() {
            star = star.mul(&self.local_view(i).in_flow_dual(lk, include_init)?);
        }
        if at_start && self.start == StartMode::Synchronous {
            let mut init = Dual::constant(1.0);
            for i in 0..locals.len() {
                let v = self.local_view(i);
                let c = v.init_mass();
                init = init.mul(&Dual {
                    value: c,
                    grad: vec![(crate::flow_table::ParamRef { table: v.table, index: 0 }, c)],
                });
            }
            star.add_assign(&init);
        }
        Ok(star)
    }

    /// Product distribution over joint actions at a non-terminal key (mixed
    /// radix over alive agents, first alive agent fastest).
    pub fn joint_action_probs(&self, key: u64, out: &mut Vec<f64>) {
        let locals = self.global.local_keys(key);
        out.clear();
        out.push(1.0);
        let mut local = Vec::new();
        for (i, &lk) in locals.iter().enumerate() {
            if !LocalSpace::is_alive_key(lk) {
                continue;
            }
            self.local_view(i).policy_into(lk, &mut local);
            let prev = std::mem::take(out);
            for &q in &local {
                out.extend(prev.iter().map(|&p| p * q));
            }
        }
    }

    /// Local action index per agent (`None` for agents in purgatory).
    pub fn sample_profile<R: Rng + ?Sized>(
        &self,
        key: u64,
        rng: &mut R,
        epsilon: f64,
        mode: SamplingMode,
    ) -> Vec<Option<usize>> {
        let locals = self.global.local_keys(key);
        match mode {
            SamplingMode::Independent => locals
                .iter()
                .enumerate()
                .map(|(i, &lk)| LocalSpace::is_alive_key(lk).then(|| self.local_view(i).sample_action(lk, rng, epsilon)))
                .collect(),
            SamplingMode::Centralized => {
                let mut probs = Vec::new();
                self.joint_action_probs(key, &mut probs);
                let a = sample_index(&probs, rng, epsilon);
                self.global.split_action(&locals, a)
            }
        }
    }

    pub fn greedy_profile(&self, key: u64) -> Vec<Option<usize>> {
        let locals = self.global.local_keys(key);
        locals
            .iter()
            .enumerate()
            .map(|(i, &lk)| LocalSpace::is_alive_key(lk).then(|| self.local_view(i).greedy_action(lk)))
            .collect()
    }
}

impl FlowModel for JointView<'_> {
    fn table_sizes(&self) -> Vec<usize> {
        let base = self.table_base as usize;
        let mut sizes = vec![0; base + self.locals.len()];
        for (i, p) in self.locals.iter().enumerate() {
            sizes[base + i] = p.len();
        }
        sizes
    }

    fn is_terminal(&self, key: u64) -> bool {
        self.global.is_terminal(key)
    }

    fn flows(&self, key: u64) -> Result<(f64, f64)> {
        let inflow = self.joint_in_flow(key)?;
        let out = if self.global.is_terminal(key) { 0.0 } else { self.joint_out_star(key)? };
        Ok((inflow, out))
    }

    fn flows_dual(&self, key: u64) -> Result<(Dual, Dual)> {
        let inflow = self.joint_in_flow_dual(key)?;
        let out = if self.global.is_terminal(key) { Dual::constant(0.0) } else { self.joint_out_star_dual(key)? };
        Ok((inflow, out))
    }
}

/// Independent local tables for every condition value, stored
/// condition-major: table `omega * n_agents + agent`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedTables {
    pub conditions: ConditionSpace,
    pub n_agents: usize,
    pub tables: Vec<FlowParams>,
}

impl ConditionedTables {
    pub fn new(conditions: ConditionSpace, n_agents: usize) -> Self {
        Self { conditions, n_agents, tables: vec![FlowParams::new(); conditions.size * n_agents] }
    }

    pub fn table_index(&self, omega: usize, agent: usize) -> usize {
        omega * self.n_agents + agent
    }

    pub fn conditioned_view<'a>(&'a self, omega: usize, global: GlobalSpace) -> Result<JointView<'a>> {
        conditioned_view(&self.tables, self.n_agents, self.conditions.size, omega, global)
    }
}

/// Joint view over the tables of condition `omega` in a condition-major slice.
pub fn conditioned_view<'a>(
    tables: &'a [FlowParams],
    n_agents: usize,
    k: usize,
    omega: usize,
    global: GlobalSpace,
) -> Result<JointView<'a>> {
    if omega >= k {
        return Err(Error::BadOmega { omega, k });
    }
    let base = omega * n_agents;
    Ok(JointView::new(tables[base..base + n_agents].iter().collect(), global).with_table_base(base as u32))
}
