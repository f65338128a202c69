//! Exact and empirical evaluation of trained samplers.

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;

use crate::env::{Environment, GridEnv};
use crate::error::{Error, Result};
use crate::flow_table::{
    argmax, reachable_keys, FlowParams, FlowView, GlobalSpace, LocalSpace, StateSpace,
};
use crate::hypergrid::terminal_index;
use crate::joint_flow::{conditioned_view, JointView, SamplingMode, StartMode};
use crate::measure::DiscreteMeasure;
use crate::trainer::sample_trajectory;

/// A (possibly condition-mixed) policy over joint actions of global states.
pub trait PolicySource {
    fn global_space(&self) -> &GlobalSpace;

    /// Number of equally likely conditions the policy mixes over.
    fn n_conditions(&self) -> usize {
        1
    }

    /// Distribution over joint action indices at a non-terminal key.
    fn joint_action_probs(&self, omega: usize, key: u64, out: &mut Vec<f64>);

    /// Local action indices per agent, `None` for agents in purgatory.
    fn sample_profile(&self, omega: usize, key: u64, rng: &mut dyn RngCore, epsilon: f64) -> Vec<Option<usize>>;

    fn greedy_profile(&self, omega: usize, key: u64) -> Vec<Option<usize>> {
        let mut probs = Vec::new();
        self.joint_action_probs(omega, key, &mut probs);
        let locals = self.global_space().local_keys(key);
        self.global_space().split_action(&locals, argmax(&probs))
    }

    /// Star outflow of the (joint) flow at a non-terminal key.
    fn out_star(&self, omega: usize, key: u64) -> Result<f64>;

    /// For product-form policies: the local policy of `agent` at local key
    /// `lk`. Returns `false` when the policy does not factor over agents.
    fn local_policy(&self, _omega: usize, _agent: usize, _lk: u64, _out: &mut Vec<f64>) -> bool {
        false
    }
}

/// Policy of a single table over global states.
pub struct GlobalPolicy<'a> {
    pub view: FlowView<'a, GlobalSpace>,
}

impl<'a> GlobalPolicy<'a> {
    pub fn new(params: &'a FlowParams, space: &'a GlobalSpace) -> Self {
        Self { view: FlowView::new(params, space) }
    }
}

impl PolicySource for GlobalPolicy<'_> {
    fn global_space(&self) -> &GlobalSpace {
        self.view.space
    }

    fn joint_action_probs(&self, _omega: usize, key: u64, out: &mut Vec<f64>) {
        self.view.policy_into(key, out);
    }

    fn sample_profile(&self, _omega: usize, key: u64, rng: &mut dyn RngCore, epsilon: f64) -> Vec<Option<usize>> {
        let a = self.view.sample_action(key, rng, epsilon);
        let locals = self.view.space.local_keys(key);
        self.view.space.split_action(&locals, a)
    }

    fn out_star(&self, _omega: usize, key: u64) -> Result<f64> {
        self.view.out_star(key)
    }
}

/// Product of local policies, optionally one set of tables per condition
/// (condition-major layout).
pub struct ProductPolicy<'a> {
    pub tables: &'a [FlowParams],
    pub global: GlobalSpace,
    pub n_conditions: usize,
    pub mode: SamplingMode,
    pub start: StartMode,
}

impl<'a> ProductPolicy<'a> {
    pub fn new(tables: &'a [FlowParams], global: GlobalSpace) -> Self {
        let n_conditions = tables.len() / global.n_agents;
        Self { tables, global, n_conditions, mode: SamplingMode::Independent, start: StartMode::Synchronous }
    }

    pub fn with_mode(mut self, mode: SamplingMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_start(mut self, start: StartMode) -> Self {
        self.start = start;
        self
    }

    pub fn view(&self, omega: usize) -> JointView<'a> {
        conditioned_view(self.tables, self.global.n_agents, self.n_conditions, omega, self.global)
            .expect("condition index in range")
            .with_start(self.start)
    }
}

impl PolicySource for ProductPolicy<'_> {
    fn global_space(&self) -> &GlobalSpace {
        &self.global
    }

    fn n_conditions(&self) -> usize {
        self.n_conditions
    }

    fn joint_action_probs(&self, omega: usize, key: u64, out: &mut Vec<f64>) {
        self.view(omega).joint_action_probs(key, out);
    }

    fn sample_profile(&self, omega: usize, key: u64, rng: &mut dyn RngCore, epsilon: f64) -> Vec<Option<usize>> {
        self.view(omega).sample_profile(key, rng, epsilon, self.mode)
    }

    fn greedy_profile(&self, omega: usize, key: u64) -> Vec<Option<usize>> {
        self.view(omega).greedy_profile(key)
    }

    fn out_star(&self, omega: usize, key: u64) -> Result<f64> {
        self.view(omega).joint_out_star(key)
    }

    fn local_policy(&self, omega: usize, agent: usize, lk: u64, out: &mut Vec<f64>) -> bool {
        FlowView::new(&self.tables[omega * self.global.n_agents + agent], &self.global.local).policy_into(lk, out);
        true
    }
}

/// Default cap on the number of states an exact evaluation may hold.
pub const DEFAULT_DP_CAP: usize = 200_000;

/// Exact terminal distribution of `policy` on `grid`, averaged uniformly over
/// conditions. Product-form policies whose horizon cannot bind are evaluated
/// agent by agent (their agents move independently); everything else by
/// forward propagation over global states.
pub fn exact_terminal_distribution<P: PolicySource + ?Sized>(
    policy: &P,
    grid: &GridEnv,
    cap: usize,
) -> Result<DiscreteMeasure> {
    let space = policy.global_space();
    let never_binds = grid.horizon > grid.dims as u32 * (grid.side - 1);
    let mut probe = Vec::new();
    if never_binds && policy.local_policy(0, 0, space.local.start_key(), &mut probe) {
        return factorized_distribution(policy, grid, cap);
    }
    global_distribution(policy, grid, cap)
}

fn domain_size(grid: &GridEnv) -> Result<u64> {
    grid.n_terminals().ok_or_else(|| Error::TooLarge("terminal count overflows".into()))
}

pub(crate) fn global_distribution<P: PolicySource + ?Sized>(
    policy: &P,
    grid: &GridEnv,
    cap: usize,
) -> Result<DiscreteMeasure> {
    let space = policy.global_space();
    let mut out = DiscreteMeasure::new(domain_size(grid)?);
    let k = policy.n_conditions();
    let mut probs = Vec::new();
    for omega in 0..k {
        // Frontier keyed by (coordinate sum + purgatory count, key): every
        // transition strictly increases the first component.
        let mut frontier: BTreeMap<(u32, u64), f64> = BTreeMap::new();
        frontier.insert((0, space.start_key()), 1.0);
        let mut processed = 0usize;
        while let Some(((_, key), mass)) = frontier.pop_first() {
            processed += 1;
            if processed > cap {
                return Err(Error::TooLarge(format!("more than {cap} global states in exact evaluation")));
            }
            let state = space.decode(key);
            if state.is_terminal() {
                out.add(terminal_index(&state.positions, grid.side), mass / k as f64);
                continue;
            }
            let locals = space.local_keys(key);
            if state.step + 1 >= grid.horizon {
                let hold: Vec<Option<usize>> = locals
                    .iter()
                    .map(|&lk| LocalSpace::is_alive_key(lk).then(|| space.local.n_actions(lk) - 1))
                    .collect();
                let a = space.join_action(&locals, &hold);
                push_child(&mut frontier, space, key, a, mass);
                continue;
            }
            policy.joint_action_probs(omega, key, &mut probs);
            for (a, &p) in probs.iter().enumerate() {
                if p > 0.0 {
                    push_child(&mut frontier, space, key, a, mass * p);
                }
            }
        }
    }
    Ok(out)
}

fn level(space: &GlobalSpace, key: u64) -> u32 {
    let s = space.decode(key);
    s.positions.iter().sum::<u32>() + s.phases.iter().filter(|p| **p == crate::env::Phase::Purgatory).count() as u32
}

fn push_child(frontier: &mut BTreeMap<(u32, u64), f64>, space: &GlobalSpace, key: u64, a: usize, mass: f64) {
    let c = space.child(key, a);
    *frontier.entry((level(space, c), c)).or_insert(0.0) += mass;
}

/// Terminal distribution of one agent's local chain, indexed by position.
fn local_distribution<P: PolicySource + ?Sized>(policy: &P, omega: usize, agent: usize) -> Vec<f64> {
    let local = policy.global_space().local;
    let n_pos = (local.n_keys() / 2) as usize;
    let mut dist = vec![0.0; n_pos];
    let mut mass = vec![0.0; local.n_keys() as usize];
    mass[local.start_key() as usize] = 1.0;
    let mut probs = Vec::new();
    // Alive keys in increasing position index respect the increment order.
    for pos in 0..n_pos as u64 {
        let key = pos * 2;
        let m = mass[key as usize];
        if m == 0.0 {
            continue;
        }
        policy.local_policy(omega, agent, key, &mut probs);
        for (a, &p) in probs.iter().enumerate() {
            let c = local.child(key, a);
            if local.is_terminal(c) {
                dist[(c >> 1) as usize] += m * p;
            } else {
                mass[c as usize] += m * p;
            }
        }
    }
    dist
}

fn factorized_distribution<P: PolicySource + ?Sized>(policy: &P, grid: &GridEnv, cap: usize) -> Result<DiscreteMeasure> {
    let size = domain_size(grid)?;
    if size > cap as u64 {
        return Err(Error::TooLarge(format!("{size} terminals exceed the evaluation cap {cap}")));
    }
    let space = policy.global_space();
    let n_pos = space.local.n_keys() / 2;
    let k = policy.n_conditions();
    let mut total = vec![0.0; size as usize];
    for omega in 0..k {
        let locals: Vec<Vec<f64>> = (0..space.n_agents).map(|i| local_distribution(policy, omega, i)).collect();
        // Terminal index with agent 0's position most significant.
        let mut joint = vec![1.0 / k as f64];
        for dist in &locals {
            let mut next = Vec::with_capacity(joint.len() * n_pos as usize);
            for &p in &joint {
                next.extend(dist.iter().map(|&q| p * q));
            }
            joint = next;
        }
        total.iter_mut().zip(&joint).for_each(|(t, j)| *t += j);
    }
    let mut out = DiscreteMeasure::new(size);
    for (i, p) in total.into_iter().enumerate() {
        if p != 0.0 {
            out.add(i as u64, p);
        }
    }
    Ok(out)
}

pub fn empirical_terminal_distribution(samples: &[Vec<u32>], side: u32) -> Result<DiscreteMeasure> {
    let first = samples.first().ok_or_else(|| Error::Empty("terminal samples".into()))?;
    let size = (side as u64)
        .checked_pow(first.len() as u32)
        .ok_or_else(|| Error::TooLarge("terminal count overflows".into()))?;
    let mut m = DiscreteMeasure::new(size);
    let w = 1.0 / samples.len() as f64;
    for s in samples {
        m.add(terminal_index(s, side), w);
    }
    Ok(m)
}

/// Sum over terminals of `|p - q|`, in `[0, 2]` for probability vectors.
pub fn l1_error(model: &DiscreteMeasure, target: &DiscreteMeasure) -> Result<f64> {
    if model.domain_size != target.domain_size {
        return Err(Error::DomainMismatch(model.domain_size, target.domain_size));
    }
    let keys: BTreeSet<u64> = model.iter().map(|(k, _)| k).chain(target.iter().map(|(k, _)| k)).collect();
    Ok(keys.into_iter().map(|k| (model.get(k) - target.get(k)).abs()).sum())
}

/// Number of distinct modes among `samples` (terminal indices).
pub fn modes_found<'a>(samples: impl IntoIterator<Item = &'a u64>, modes: &BTreeSet<u64>) -> usize {
    samples.into_iter().filter(|s| modes.contains(s)).collect::<BTreeSet<_>>().len()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoppingTimeStats {
    pub mean_tau: f64,
    pub std_error: f64,
    /// `F_out(S) / R(S) - 1`.
    pub bound: f64,
    pub episodes: usize,
}

impl StoppingTimeStats {
    pub fn bound_holds(&self, n_sigma: f64) -> bool {
        self.mean_tau <= self.bound + n_sigma * self.std_error
    }
}

/// Mean number of environment steps per episode and the flow bound, where
/// `F_out(S) = sum over non-terminal states of F_out* + R(S)` and `R(S) = z`.
pub fn stopping_time_stats<P: PolicySource + ?Sized>(
    policy: &P,
    env: &dyn Environment,
    n_episodes: usize,
    rng: &mut dyn RngCore,
    z: f64,
    cap: usize,
) -> Result<StoppingTimeStats> {
    if n_episodes == 0 {
        return Err(Error::Empty("episodes".into()));
    }
    let space = policy.global_space();
    let keys = reachable_keys(space, cap)?;
    let k = policy.n_conditions();
    let mut star_total = 0.0;
    for omega in 0..k {
        for &key in keys.iter().filter(|&&key| !space.is_terminal(key)) {
            star_total += policy.out_star(omega, key)? / k as f64;
        }
    }
    let bound = (star_total + z) / z - 1.0;

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for e in 0..n_episodes {
        let omega = e % k;
        let t = sample_trajectory(policy, env, rng, 0.0, omega, false)?;
        let tau = t.len() as f64;
        sum += tau;
        sum_sq += tau * tau;
    }
    let n = n_episodes as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok(StoppingTimeStats { mean_tau: mean, std_error: (var / n).sqrt(), bound, episodes: n_episodes })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TheoremReport {
    /// Largest relative gap between joint flows and products of local flows.
    pub max_split_error: f64,
    /// Largest `|F_in - F_out*|` over reachable alive local observations.
    pub max_local_alive_residual: f64,
    /// Largest `|F_in - F_out*|` over global states with every agent alive.
    pub max_joint_alive_residual: f64,
    /// Largest `|R_hat - prod_i R_hat_i|` over terminal global states.
    pub max_terminal_product_error: f64,
}

pub fn theorem_checks(joint: &JointView<'_>, cap: usize) -> Result<TheoremReport> {
    let g = joint.global;
    let mut report = TheoremReport::default();
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
    let mut alive_locals = BTreeSet::new();
    for key in reachable_keys(&g, cap)? {
        let locals = g.local_keys(key);
        let mut out_prod = 1.0;
        let mut in_prod = 1.0;
        let mut r_prod = 1.0;
        for (i, &lk) in locals.iter().enumerate() {
            let v = joint.local_view(i);
            out_prod *= v.out_star(lk)?;
            in_prod *= v.in_flow(lk)?;
            r_prod *= v.virtual_reward(lk)?;
            if LocalSpace::is_alive_key(lk) {
                alive_locals.insert((i, lk));
            }
        }
        let inflow = joint.joint_in_flow(key)?;
        let split = rel(joint.joint_out_star(key)?, out_prod).max(rel(inflow, in_prod));
        report.max_split_error = report.max_split_error.max(split);
        if g.is_terminal(key) {
            let gap = (joint.virtual_reward(key)? - r_prod).abs();
            report.max_terminal_product_error = report.max_terminal_product_error.max(gap);
        } else if locals.iter().all(|&lk| LocalSpace::is_alive_key(lk)) {
            let res = joint.virtual_reward(key)?.abs();
            report.max_joint_alive_residual = report.max_joint_alive_residual.max(res);
        }
    }
    for (i, lk) in alive_locals {
        let res = joint.local_view(i).virtual_reward(lk)?.abs();
        report.max_local_alive_residual = report.max_local_alive_residual.max(res);
    }
    Ok(report)
}
