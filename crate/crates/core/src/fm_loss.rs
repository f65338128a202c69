//! Stable and divergence flow-matching losses.
//!
//! Both compare inflow against `F_out* + R` state by state: the stable form
//! through `g(F_in - F_out* - R)`, the divergence form through
//! `g(log(F_in / (F_out* + R)))`. Terminal states have `F_out* = 0` (all of
//! their flow leaves through STOP) and non-terminal states have `R = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_table::{Dual, FlowView, Gradient, LocalSpace, StateSpace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GSpec {
    Square,
    LogPoly { alpha: f64, beta: f64 },
}

impl GSpec {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            GSpec::Square => x * x,
            GSpec::LogPoly { alpha, beta } => (alpha * x.abs().powf(beta)).ln_1p(),
        }
    }

    /// Derivative, taken as zero at the kink of `LogPoly` with `beta <= 1`.
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            GSpec::Square => 2.0 * x,
            GSpec::LogPoly { alpha, beta } => {
                if x == 0.0 {
                    return 0.0;
                }
                let a = x.abs();
                alpha * beta * a.powf(beta - 1.0) * x.signum() / (1.0 + alpha * a.powf(beta))
            }
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            GSpec::LogPoly { alpha, beta } if !(alpha > 0.0 && beta > 0.0) => {
                Err(Error::Config(format!("logpoly needs alpha, beta > 0 (got {alpha}, {beta})")))
            }
            _ => Ok(()),
        }
    }
}

pub fn g_eval(g: GSpec, x: f64) -> f64 {
    g.eval(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Stable,
    Divergence,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchItem {
    pub key: u64,
    /// Reward at terminal keys; ignored (treated as zero) elsewhere.
    pub reward: f64,
}

/// Empirical state distribution: keys with multiplicity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StateBatch {
    pub items: Vec<BatchItem>,
}

impl StateBatch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: u64, reward: f64) {
        self.items.push(BatchItem { key, reward });
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Anything exposing per-state inflow and star outflow with derivatives.
pub trait FlowModel {
    /// Parameter count of every table addressed by this model's gradients.
    fn table_sizes(&self) -> Vec<usize>;

    fn is_terminal(&self, key: u64) -> bool;

    /// `(F_in, F_out*)`, with `F_out* = 0` at terminal keys.
    fn flows(&self, key: u64) -> Result<(f64, f64)>;

    fn flows_dual(&self, key: u64) -> Result<(Dual, Dual)>;
}

impl<S: StateSpace> FlowModel for FlowView<'_, S> {
    fn table_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.table as usize + 1];
        sizes[self.table as usize] = self.params.len();
        sizes
    }

    fn is_terminal(&self, key: u64) -> bool {
        self.space.is_terminal(key)
    }

    fn flows(&self, key: u64) -> Result<(f64, f64)> {
        let inflow = self.in_flow(key)?;
        let out = if self.space.is_terminal(key) { 0.0 } else { self.out_star(key)? };
        Ok((inflow, out))
    }

    fn flows_dual(&self, key: u64) -> Result<(Dual, Dual)> {
        let inflow = self.in_flow_dual(key, true)?;
        let out = if self.space.is_terminal(key) { Dual::constant(0.0) } else { self.out_star_dual(key)? };
        Ok((inflow, out))
    }
}

fn target_reward<M: FlowModel + ?Sized>(model: &M, item: &BatchItem) -> f64 {
    if model.is_terminal(item.key) {
        item.reward
    } else {
        0.0
    }
}

/// Residual fed to `g` and its partial derivatives w.r.t. `F_in` and `F_out*`.
fn residual(kind: LossKind, key: u64, inflow: f64, out: f64, reward: f64) -> Result<(f64, f64, f64)> {
    match kind {
        LossKind::Stable => Ok((inflow - out - reward, 1.0, -1.0)),
        LossKind::Divergence => {
            let denom = out + reward;
            if !(inflow > 0.0 && denom > 0.0) {
                return Err(Error::ZeroFlow(key));
            }
            Ok(((inflow / denom).ln(), 1.0 / inflow, -1.0 / denom))
        }
    }
}

pub fn fm_loss<M: FlowModel + ?Sized>(model: &M, batch: &StateBatch, g: GSpec, kind: LossKind) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("state batch".into()));
    }
    let mut total = 0.0;
    for item in &batch.items {
        let (inflow, out) = model.flows(item.key)?;
        let (x, _, _) = residual(kind, item.key, inflow, out, target_reward(model, item))?;
        total += g.eval(x);
    }
    let loss = total / batch.len() as f64;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite)
    }
}

pub fn stable_fm_loss<M: FlowModel + ?Sized>(model: &M, batch: &StateBatch, g: GSpec) -> Result<f64> {
    fm_loss(model, batch, g, LossKind::Stable)
}

pub fn divergence_fm_loss<M: FlowModel + ?Sized>(model: &M, batch: &StateBatch, g: GSpec) -> Result<f64> {
    fm_loss(model, batch, g, LossKind::Divergence)
}

/// Local loss of one agent under independent training: the stable loss over
/// that agent's observations, with the global reward credited at its
/// purgatory observation.
pub fn ifn_local_loss(view: &FlowView<'_, LocalSpace>, batch: &StateBatch, g: GSpec) -> Result<f64> {
    stable_fm_loss(view, batch, g)
}

/// Adds `weight * d(loss)/d(theta)` into `grad` and returns the unweighted loss.
pub fn accumulate_loss_gradient<M: FlowModel + ?Sized>(
    model: &M,
    batch: &StateBatch,
    g: GSpec,
    kind: LossKind,
    weight: f64,
    grad: &mut Gradient,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("state batch".into()));
    }
    let n = batch.len() as f64;
    let mut total = 0.0;
    for item in &batch.items {
        let (inflow, out) = model.flows_dual(item.key)?;
        let (x, d_in, d_out) = residual(kind, item.key, inflow.value, out.value, target_reward(model, item))?;
        total += g.eval(x);
        let gp = g.deriv(x) * weight / n;
        grad.add_dual(&inflow, gp * d_in);
        grad.add_dual(&out, gp * d_out);
    }
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite);
    }
    grad.check_finite()?;
    Ok(loss)
}

pub fn loss_and_gradient<M: FlowModel + ?Sized>(
    model: &M,
    batch: &StateBatch,
    g: GSpec,
    kind: LossKind,
) -> Result<(f64, Gradient)> {
    let mut grad = Gradient::new(&model.table_sizes());
    let loss = accumulate_loss_gradient(model, batch, g, kind, 1.0, &mut grad)?;
    Ok((loss, grad))
}
