//! Training loops for the four flow-network algorithms.
//!
//! Every iteration samples a batch of trajectories with the current policy,
//! builds the empirical state distribution from the replay window, takes one
//! adaptive-moment step on the flow-matching loss and, every
//! `eval_interval` steps, emits a metrics row.
//!
//! * CFN: one table over global states and joint actions.
//! * IFN: one table per agent, each fit to its own observations with the
//!   global reward credited at its purgatory observation.
//! * JFN: one table per agent, fit through the product joint flow.
//! * CJFN: JFN with an independent set of tables per condition value.

mod adam;
mod checkpoint;
mod rollout;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    empirical_terminal_distribution, exact_terminal_distribution, l1_error, GlobalPolicy, PolicySource, ProductPolicy,
    DEFAULT_DP_CAP,
};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::flow_table::{FlowParams, FlowView, GlobalSpace, Gradient, LocalSpace};
use crate::fm_loss::{accumulate_loss_gradient, FlowModel, GSpec, LossKind, StateBatch};
use crate::hypergrid::terminal_index;
use crate::joint_flow::{conditioned_view, JointView, SamplingMode, StartMode};
use crate::measure::DiscreteMeasure;

pub use adam::{optimizer_step, Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use rollout::{sample_trajectory, ReplayBuffer, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Cfn,
    Ifn,
    Jfn,
    Cjfn,
    Mcmc,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Cfn => "cfn",
            Algorithm::Ifn => "ifn",
            Algorithm::Jfn => "jfn",
            Algorithm::Cjfn => "cjfn",
            Algorithm::Mcmc => "mcmc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cfn" => Ok(Algorithm::Cfn),
            "ifn" => Ok(Algorithm::Ifn),
            "jfn" => Ok(Algorithm::Jfn),
            "cjfn" => Ok(Algorithm::Cjfn),
            "mcmc" => Ok(Algorithm::Mcmc),
            other => Err(Error::Config(format!("unknown algorithm `{other}` (cfn|ifn|jfn|cjfn|mcmc)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub train_steps: u64,
    pub trajectories_per_step: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    /// Exploration rate during training rollouts only.
    pub epsilon: f64,
    pub loss: LossKind,
    pub g: GSpec,
    pub n_omega: usize,
    pub sampling: SamplingMode,
    pub start: StartMode,
    /// Number of most recent iterations whose trajectories form the batch.
    pub replay_depth: usize,
    pub eval_interval: u64,
    pub eval_rollouts: usize,
    pub greedy_eval: bool,
    pub dp_cap: usize,
    /// Largest global key space a centralized table may cover.
    pub cfn_cap: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Jfn,
            train_steps: 20_000,
            trajectories_per_step: 16,
            lr: 1e-4,
            adam: AdamConfig::default(),
            epsilon: 5e-4,
            loss: LossKind::Stable,
            g: GSpec::Square,
            n_omega: 4,
            sampling: SamplingMode::Independent,
            start: StartMode::Synchronous,
            replay_depth: 1,
            eval_interval: 100,
            eval_rollouts: 20,
            greedy_eval: false,
            dp_cap: DEFAULT_DP_CAP,
            cfn_cap: 1 << 21,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.train_steps == 0 || self.trajectories_per_step == 0 || self.eval_interval == 0 {
            return bad("train_steps, trajectories_per_step and eval_interval must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must lie in [0, 1], got {}", self.epsilon));
        }
        if self.n_omega == 0 || self.replay_depth == 0 || self.dp_cap == 0 {
            return bad("n_omega, replay_depth and dp_cap must be positive".into());
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        self.g.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: Option<f64>,
    pub l1_error: Option<f64>,
    pub modes_found: usize,
    pub mean_tau: Option<f64>,
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub step: u64,
    pub key: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub l1_error: Option<f64>,
    /// Whether `l1_error` came from exact dynamic programming.
    pub exact: bool,
    pub mean_tau: Option<f64>,
    pub terminals: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    /// Per-agent local losses (IFN only).
    pub agent_losses: Vec<f64>,
    /// Fraction of batch states with negative virtual reward (CJFN only).
    pub weak_fm_violation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOutcome {
    /// Evaluation before the first update (absent when resuming).
    pub initial: Option<EvalReport>,
    pub rows: Vec<MetricsRow>,
    pub diagnostics: Vec<DiagnosticRow>,
}

/// Running sums over the current evaluation interval.
#[derive(Debug, Clone, PartialEq, Default)]
struct IntervalSums {
    loss: f64,
    count: u64,
    agent_losses: Vec<f64>,
    violation: f64,
}

pub struct Trainer<'e> {
    env: &'e dyn Environment,
    cfg: TrainConfig,
    global: GlobalSpace,
    tables: Vec<FlowParams>,
    adam: Adam,
    rng: ChaCha8Rng,
    omega_rng: ChaCha8Rng,
    step: u64,
    replay: ReplayBuffer,
    mode_hits: BTreeSet<u64>,
    sums: IntervalSums,
    target: Option<DiscreteMeasure>,
}

const TRAIN_STREAM: u64 = 0;
const OMEGA_STREAM: u64 = 1;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn make_policy<'a>(cfg: &TrainConfig, global: &'a GlobalSpace, tables: &'a [FlowParams]) -> Box<dyn PolicySource + 'a> {
    match cfg.algorithm {
        Algorithm::Cfn => Box::new(GlobalPolicy::new(&tables[0], global)),
        Algorithm::Ifn => Box::new(ProductPolicy::new(tables, *global).with_start(cfg.start)),
        _ => Box::new(ProductPolicy::new(tables, *global).with_mode(cfg.sampling).with_start(cfg.start)),
    }
}

impl<'e> Trainer<'e> {
    pub fn new(env: &'e dyn Environment, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = env.grid();
        let global = GlobalSpace::of_grid(grid)?;
        let n = grid.n_agents;
        let n_tables = match cfg.algorithm {
            Algorithm::Cfn => {
                let size = global.local.n_keys().checked_pow(n as u32);
                if size.is_none_or(|s| s > cfg.cfn_cap) {
                    return Err(Error::TooLargeJointSpace(format!(
                        "{n} agents on a {}-cell local space exceed the centralized cap {}",
                        global.local.n_keys(),
                        cfg.cfn_cap
                    )));
                }
                1
            }
            Algorithm::Ifn | Algorithm::Jfn => n,
            Algorithm::Cjfn => n * cfg.n_omega,
            Algorithm::Mcmc => return Err(Error::Config("mcmc is not a flow-network trainer".into())),
        };
        let replay = ReplayBuffer::new(cfg.replay_depth * cfg.trajectories_per_step);
        let sums = IntervalSums { agent_losses: vec![0.0; n], ..Default::default() };
        Ok(Self {
            env,
            global,
            tables: vec![FlowParams::new(); n_tables],
            adam: Adam::new(cfg.adam, n_tables),
            rng: stream_rng(cfg.seed, TRAIN_STREAM),
            omega_rng: stream_rng(cfg.seed, OMEGA_STREAM),
            step: 0,
            replay,
            mode_hits: BTreeSet::new(),
            sums,
            target: None,
            cfg,
        })
    }

    /// Target distribution used for L1 metrics.
    pub fn with_target(mut self, target: Option<DiscreteMeasure>) -> Self {
        self.target = target;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Changes the run length, e.g. to extend a restored run.
    pub fn set_train_steps(&mut self, train_steps: u64) -> Result<()> {
        if train_steps == 0 {
            return Err(Error::Config("train_steps must be positive".into()));
        }
        self.cfg.train_steps = train_steps;
        Ok(())
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn tables(&self) -> &[FlowParams] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [FlowParams] {
        &mut self.tables
    }

    pub fn global_space(&self) -> &GlobalSpace {
        &self.global
    }

    pub fn modes_found(&self) -> usize {
        self.mode_hits.len()
    }

    pub fn policy(&self) -> Box<dyn PolicySource + '_> {
        make_policy(&self.cfg, &self.global, &self.tables)
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        let side = self.env.grid().side;
        {
            let policy = make_policy(&self.cfg, &self.global, &self.tables);
            let k = policy.n_conditions();
            for _ in 0..self.cfg.trajectories_per_step {
                let omega = if self.cfg.algorithm == Algorithm::Cjfn { self.omega_rng.gen_range(0..k) } else { 0 };
                let t = sample_trajectory(&*policy, self.env, &mut self.rng, self.cfg.epsilon, omega, false)?;
                let term = t.terminal();
                if self.env.is_mode(&term.positions) {
                    self.mode_hits.insert(terminal_index(&term.positions, side));
                }
                self.replay.push(t);
            }
        }
        let report = match self.cfg.algorithm {
            Algorithm::Cfn => self.centralized_update()?,
            Algorithm::Ifn => self.independent_update()?,
            Algorithm::Jfn | Algorithm::Cjfn => self.joint_update()?,
            Algorithm::Mcmc => unreachable!("rejected at construction"),
        };
        self.step += 1;
        self.sums.loss += report.loss;
        self.sums.count += 1;
        for (acc, l) in self.sums.agent_losses.iter_mut().zip(&report.agent_losses) {
            *acc += l;
        }
        self.sums.violation += report.weak_fm_violation.unwrap_or(0.0);
        Ok(report)
    }

    fn global_batch(&self, omega: Option<usize>) -> StateBatch {
        let mut batch = StateBatch::new();
        for t in self.replay.iter().filter(|t| omega.is_none() || t.omega.unwrap_or(0) == omega.unwrap()) {
            for s in &t.states {
                let reward = if s.is_terminal() { t.terminal_reward } else { 0.0 };
                batch.push(self.global.key(s), reward);
            }
        }
        batch
    }

    fn sizes(&self) -> Vec<usize> {
        self.tables.iter().map(FlowParams::len).collect()
    }

    fn apply(&mut self, grad: &Gradient) -> Result<()> {
        optimizer_step(&mut self.tables, grad, &mut self.adam, self.cfg.lr)
    }

    fn centralized_update(&mut self) -> Result<StepReport> {
        let batch = self.global_batch(None);
        let mut scratch = Vec::new();
        for item in &batch.items {
            self.tables[0].ensure_for(&self.global, item.key, &mut scratch);
        }
        let mut grad = Gradient::new(&self.sizes());
        let view = FlowView::new(&self.tables[0], &self.global);
        let loss = accumulate_loss_gradient(&view, &batch, self.cfg.g, self.cfg.loss, 1.0, &mut grad)?;
        self.apply(&grad)?;
        Ok(StepReport { loss, agent_losses: Vec::new(), weak_fm_violation: None })
    }

    fn independent_update(&mut self) -> Result<StepReport> {
        let n = self.global.n_agents;
        let local = self.global.local;
        let mut batches = vec![StateBatch::new(); n];
        for t in self.replay.iter() {
            for s in &t.states {
                for (i, &lk) in self.global.local_keys(self.global.key(s)).iter().enumerate() {
                    if LocalSpace::is_alive_key(lk) {
                        batches[i].push(lk, 0.0);
                    }
                }
            }
            for (i, &lk) in self.global.local_keys(self.global.key(t.terminal())).iter().enumerate() {
                batches[i].push(lk, t.terminal_reward);
            }
        }
        let mut scratch = Vec::new();
        for (i, b) in batches.iter().enumerate() {
            for item in &b.items {
                self.tables[i].ensure_for(&local, item.key, &mut scratch);
            }
        }
        let mut grad = Gradient::new(&self.sizes());
        let mut agent_losses = Vec::with_capacity(n);
        for (i, b) in batches.iter().enumerate() {
            let view = FlowView::new(&self.tables[i], &local).with_table(i as u32);
            agent_losses.push(accumulate_loss_gradient(&view, b, self.cfg.g, self.cfg.loss, 1.0, &mut grad)?);
        }
        self.apply(&grad)?;
        let loss = agent_losses.iter().sum::<f64>() / n as f64;
        Ok(StepReport { loss, agent_losses, weak_fm_violation: None })
    }

    fn joint_update(&mut self) -> Result<StepReport> {
        let n = self.global.n_agents;
        let k = self.tables.len() / n;
        let local = self.global.local;
        let mut groups: BTreeMap<usize, StateBatch> = BTreeMap::new();
        if self.cfg.algorithm == Algorithm::Cjfn {
            for omega in 0..k {
                let b = self.global_batch(Some(omega));
                if !b.is_empty() {
                    groups.insert(omega, b);
                }
            }
        } else {
            groups.insert(0, self.global_batch(None));
        }
        let mut scratch = Vec::new();
        let mut locals = Vec::with_capacity(n);
        for (&omega, b) in &groups {
            for item in &b.items {
                self.global.local_keys_into(item.key, &mut locals);
                for (i, &lk) in locals.iter().enumerate() {
                    self.tables[omega * n + i].ensure_for(&local, lk, &mut scratch);
                }
            }
        }
        let mut grad = Gradient::new(&self.sizes());
        let weight = 1.0 / groups.len() as f64;
        let mut loss = 0.0;
        let mut violations = 0usize;
        let mut counted = 0usize;
        for (&omega, b) in &groups {
            let view: JointView<'_> =
                conditioned_view(&self.tables, n, k, omega, self.global)?.with_start(self.cfg.start);
            loss += weight * accumulate_loss_gradient(&view, b, self.cfg.g, self.cfg.loss, weight, &mut grad)?;
            if self.cfg.algorithm == Algorithm::Cjfn {
                for item in b.items.iter().filter(|it| !view.is_terminal(it.key)) {
                    let (inflow, out) = view.flows(item.key)?;
                    counted += 1;
                    violations += usize::from(inflow - out < 0.0);
                }
            }
        }
        self.apply(&grad)?;
        let weak_fm_violation =
            (self.cfg.algorithm == Algorithm::Cjfn).then(|| violations as f64 / counted.max(1) as f64);
        Ok(StepReport { loss, agent_losses: Vec::new(), weak_fm_violation })
    }

    /// Evaluation at the current parameters. Rollouts use an RNG stream
    /// derived from `(seed, step)` and never explore.
    pub fn evaluate(&self) -> Result<EvalReport> {
        self.evaluate_with(self.cfg.eval_rollouts, self.step)
    }

    pub fn evaluate_with(&self, rollouts: usize, stream: u64) -> Result<EvalReport> {
        let policy = self.policy();
        let k = policy.n_conditions();
        let mut rng = stream_rng(self.cfg.seed, 2 + stream);
        let mut terminals = Vec::with_capacity(rollouts);
        let mut tau = 0usize;
        for e in 0..rollouts {
            let t = sample_trajectory(&*policy, self.env, &mut rng, 0.0, e % k, self.cfg.greedy_eval)?;
            tau += t.len();
            terminals.push(t.terminal().positions.clone());
        }
        let mean_tau = (rollouts > 0).then(|| tau as f64 / rollouts as f64);
        let (l1_error, exact) = match &self.target {
            None => (None, false),
            Some(target) => match exact_terminal_distribution(&*policy, self.env.grid(), self.cfg.dp_cap) {
                Ok(d) => (Some(l1_error(&d, target)?), true),
                Err(Error::TooLarge(_)) if !terminals.is_empty() => {
                    let emp = empirical_terminal_distribution(&terminals, self.env.grid().side)?;
                    (Some(l1_error(&emp, target)?), false)
                }
                Err(Error::TooLarge(_)) => (None, false),
                Err(e) => return Err(e),
            },
        };
        Ok(EvalReport { l1_error, exact, mean_tau, terminals })
    }

    /// Trains until `train_steps`, calling `on_checkpoint` every
    /// `checkpoint_interval` steps (0 disables it).
    pub fn run(
        &mut self,
        checkpoint_interval: u64,
        on_checkpoint: &mut dyn FnMut(&Trainer<'_>) -> Result<()>,
    ) -> Result<TrainOutcome> {
        self.run_with(checkpoint_interval, &mut |_| {}, on_checkpoint)
    }

    /// [`Trainer::run`] with a hook that sees each metrics row before it is stored.
    pub fn run_with(
        &mut self,
        checkpoint_interval: u64,
        on_row: &mut dyn FnMut(&mut MetricsRow),
        on_checkpoint: &mut dyn FnMut(&Trainer<'_>) -> Result<()>,
    ) -> Result<TrainOutcome> {
        let mut outcome = TrainOutcome::default();
        if self.step == 0 {
            let initial = self.evaluate()?;
            if let Some(l1) = initial.l1_error {
                outcome.diagnostics.push(DiagnosticRow { step: 0, key: "l1_error".into(), value: l1 });
            }
            if let Some(tau) = initial.mean_tau {
                outcome.diagnostics.push(DiagnosticRow { step: 0, key: "mean_tau".into(), value: tau });
            }
            outcome.initial = Some(initial);
        }
        while self.step < self.cfg.train_steps {
            self.train_step()?;
            if self.step.is_multiple_of(self.cfg.eval_interval) {
                let (mut row, diags) = self.emit_row()?;
                on_row(&mut row);
                outcome.rows.push(row);
                outcome.diagnostics.extend(diags);
            }
            if checkpoint_interval > 0 && self.step.is_multiple_of(checkpoint_interval) {
                on_checkpoint(self)?;
            }
        }
        Ok(outcome)
    }

    fn emit_row(&mut self) -> Result<(MetricsRow, Vec<DiagnosticRow>)> {
        let eval = self.evaluate()?;
        let count = self.sums.count.max(1) as f64;
        let step = self.step;
        let mut diags = Vec::new();
        if self.cfg.algorithm == Algorithm::Ifn {
            for (i, s) in self.sums.agent_losses.iter().enumerate() {
                diags.push(DiagnosticRow { step, key: format!("loss_agent{i}"), value: s / count });
            }
        }
        if self.cfg.algorithm == Algorithm::Cjfn {
            diags.push(DiagnosticRow { step, key: "weak_fm_violation".into(), value: self.sums.violation / count });
        }
        if eval.l1_error.is_some() && !eval.exact {
            diags.push(DiagnosticRow { step, key: "l1_empirical".into(), value: 1.0 });
        }
        let row = MetricsRow {
            step,
            loss: Some(self.sums.loss / count),
            l1_error: eval.l1_error,
            modes_found: self.mode_hits.len(),
            mean_tau: eval.mean_tau,
            wall_ms: None,
        };
        let n = self.sums.agent_losses.len();
        self.sums = IntervalSums { agent_losses: vec![0.0; n], ..Default::default() };
        Ok((row, diags))
    }
}

/// Result of a complete training run.
pub struct TrainResult {
    pub tables: Vec<FlowParams>,
    pub outcome: TrainOutcome,
    pub modes_found: usize,
}

/// Trains from scratch with `cfg.algorithm`.
pub fn train(env: &dyn Environment, cfg: TrainConfig, target: Option<DiscreteMeasure>) -> Result<TrainResult> {
    let mut trainer = Trainer::new(env, cfg)?.with_target(target);
    let outcome = trainer.run(0, &mut |_| Ok(()))?;
    let modes_found = trainer.modes_found();
    Ok(TrainResult { tables: trainer.tables, outcome, modes_found })
}

fn train_as(
    algorithm: Algorithm,
    env: &dyn Environment,
    mut cfg: TrainConfig,
    target: Option<DiscreteMeasure>,
) -> Result<TrainResult> {
    cfg.algorithm = algorithm;
    train(env, cfg, target)
}

/// Centralized training of one global table.
pub fn train_cfn(env: &dyn Environment, cfg: TrainConfig, target: Option<DiscreteMeasure>) -> Result<TrainResult> {
    train_as(Algorithm::Cfn, env, cfg, target)
}

/// Independent local training with the global reward as local credit.
pub fn train_ifn(env: &dyn Environment, cfg: TrainConfig, target: Option<DiscreteMeasure>) -> Result<TrainResult> {
    train_as(Algorithm::Ifn, env, cfg, target)
}

/// Local tables trained through the product joint flow.
pub fn train_jfn(env: &dyn Environment, cfg: TrainConfig, target: Option<DiscreteMeasure>) -> Result<TrainResult> {
    train_as(Algorithm::Jfn, env, cfg, target)
}

/// Joint training with `cfg.n_omega` independent condition-indexed table sets.
pub fn train_cjfn(env: &dyn Environment, cfg: TrainConfig, target: Option<DiscreteMeasure>) -> Result<TrainResult> {
    train_as(Algorithm::Cjfn, env, cfg, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::ProductPolicy;
    use crate::env::{CustomEnv, GridEnv};
    use crate::flow_table::StateSpace;
    use crate::fm_loss::{fm_loss, loss_and_gradient};
    use crate::hypergrid::{partition_function, Hypergrid, HypergridSpec};

    fn two_state() -> (Hypergrid, DiscreteMeasure) {
        let spec = HypergridSpec::new(1, 1, 2).with_rewards(1.0, 1.0, 0.0);
        let (_, target) = partition_function(&spec, 100).unwrap();
        (Hypergrid::new(spec).unwrap(), target)
    }

    fn small_cfg(algorithm: Algorithm, steps: u64) -> TrainConfig {
        TrainConfig {
            algorithm,
            train_steps: steps,
            trajectories_per_step: 8,
            lr: 1e-2,
            epsilon: 0.0,
            eval_interval: 10,
            eval_rollouts: 5,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cfn_solves_two_state_instance() {
        let (env, target) = two_state();
        let mut t = Trainer::new(&env, small_cfg(Algorithm::Cfn, 2000)).unwrap().with_target(Some(target));
        let out = t.run(0, &mut |_| Ok(())).unwrap();
        assert_eq!(out.rows.len(), 200);
        let initial = out.initial.unwrap();
        assert!(initial.l1_error.unwrap() > 0.0);
        let g = t.global;
        let keys = crate::flow_table::reachable_keys(&g, 100).unwrap();
        let mut batch = StateBatch::new();
        for k in keys {
            let r = if g.is_terminal(k) { env.spec.reward(&g.decode(k).positions).unwrap() } else { 0.0 };
            batch.push(k, r);
        }
        let view = FlowView::new(&t.tables[0], &g);
        let loss = fm_loss(&view, &batch, GSpec::Square, LossKind::Stable).unwrap();
        assert!(loss < 1e-8, "{loss}");
        assert!(out.rows.last().unwrap().l1_error.unwrap() < 1e-4);
    }

    #[test]
    fn fresh_tables_have_positive_loss_and_step_counts() {
        let (env, _) = two_state();
        let mut t = Trainer::new(&env, small_cfg(Algorithm::Cfn, 1)).unwrap();
        let r = t.train_step().unwrap();
        assert!(r.loss.is_finite() && r.loss > 0.0);
        assert_eq!(t.step(), 1);
    }

    #[test]
    fn single_agent_ifn_matches_cfn() {
        let spec = HypergridSpec::new(1, 2, 4);
        let env = Hypergrid::new(spec).unwrap();
        let a = train_cfn(&env, small_cfg(Algorithm::Cfn, 40), None).unwrap();
        let b = train_ifn(&env, small_cfg(Algorithm::Ifn, 40), None).unwrap();
        assert_eq!(a.tables[0].to_text(), b.tables[0].to_text());
        assert_eq!(a.outcome.rows, b.outcome.rows);
    }

    #[test]
    fn cjfn_with_one_condition_reproduces_jfn() {
        let env = Hypergrid::new(HypergridSpec::new(2, 1, 4)).unwrap();
        let mut cfg = small_cfg(Algorithm::Jfn, 30);
        cfg.n_omega = 1;
        cfg.epsilon = 0.05;
        let a = train_jfn(&env, cfg.clone(), None).unwrap();
        let b = train_cjfn(&env, cfg, None).unwrap();
        assert_eq!(a.outcome.rows, b.outcome.rows);
        assert_eq!(a.tables, b.tables);
    }

    #[test]
    fn cjfn_conditions_only_learn_from_their_own_rollouts() {
        let env = Hypergrid::new(HypergridSpec::new(2, 1, 4)).unwrap();
        let mut cfg = small_cfg(Algorithm::Cjfn, 1);
        cfg.n_omega = 4;
        cfg.trajectories_per_step = 1;
        let mut t = Trainer::new(&env, cfg).unwrap();
        t.train_step().unwrap();
        let omega = t.replay.iter().next().unwrap().omega.unwrap();
        for (idx, table) in t.tables.iter().enumerate() {
            assert_eq!(table.is_empty(), idx / 2 != omega, "table {idx}");
        }
    }

    #[test]
    fn jfn_fits_a_product_reward() {
        let grid = GridEnv::new(2, 1, 4).unwrap();
        let r = |x: u32| [1.0, 0.2, 0.5, 2.0][x as usize];
        let env = CustomEnv::new(grid.clone(), move |p| r(p[0]) * r(p[1]));
        let mut target = DiscreteMeasure::new(16);
        for a in 0..4u32 {
            for b in 0..4u32 {
                target.add((a * 4 + b) as u64, r(a) * r(b));
            }
        }
        let target = target.normalized();
        let mut cfg = small_cfg(Algorithm::Jfn, 3000);
        cfg.trajectories_per_step = 16;
        cfg.epsilon = 0.05;
        cfg.eval_interval = 3000;
        let res = train_jfn(&env, cfg, Some(target.clone())).unwrap();
        let g = GlobalSpace::of_grid(&grid).unwrap();
        let p = ProductPolicy::new(&res.tables, g);
        let d = exact_terminal_distribution(&p, &grid, 1000).unwrap();
        let l1 = l1_error(&d, &target).unwrap();
        assert!(l1 < 1e-3, "l1 {l1}");
    }

    #[test]
    fn joint_gradient_reaches_local_tables() {
        let env = Hypergrid::new(HypergridSpec::new(2, 1, 3)).unwrap();
        let mut t = Trainer::new(&env, small_cfg(Algorithm::Jfn, 1)).unwrap();
        t.train_step().unwrap();
        let batch = t.global_batch(None);
        let view = JointView::new(t.tables.iter().collect(), t.global);
        let (_, grad) = loss_and_gradient(&view, &batch, GSpec::Square, LossKind::Stable).unwrap();
        let mut tables = t.tables.clone();
        let g = t.global;
        let loss = |tb: &[FlowParams]| fm_loss(&JointView::new(tb.iter().collect(), g), &batch, GSpec::Square, LossKind::Stable).unwrap();
        let worst = crate::fm_loss::tests::fd_check(&mut tables, loss, &grad);
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn rejects_bad_configs() {
        let env = Hypergrid::new(HypergridSpec::preset("v3").unwrap()).unwrap();
        assert!(matches!(Trainer::new(&env, small_cfg(Algorithm::Cfn, 1)), Err(Error::TooLargeJointSpace(_))));
        assert!(matches!(Trainer::new(&env, small_cfg(Algorithm::Mcmc, 1)), Err(Error::Config(_))));
        let mut cfg = small_cfg(Algorithm::Jfn, 1);
        cfg.lr = 0.0;
        assert!(matches!(Trainer::new(&env, cfg), Err(Error::Config(_))));
        assert!(Algorithm::parse("ppo").is_err());
        assert_eq!(Algorithm::parse("cjfn").unwrap().name(), "cjfn");
    }
}
