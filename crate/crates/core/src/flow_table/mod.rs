//! Tabular log-space flow parameterization.
//!
//! A table stores, per non-terminal state key, `log F_out*` and unnormalized
//! policy logits over that state's actions, plus one `log C` for the initial
//! mass on the start state. Terminal keys (full purgatory for global tables,
//! purgatory observations for local ones) carry no parameters: their outflow
//! is the inflow passed through to STOP.

pub mod dual;
pub mod space;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
pub use dual::{Dual, Gradient, ParamRef};
pub use space::{GlobalSpace, LocalSpace, StateSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    /// Index of `log F_out*`; the logits follow it.
    pub offset: usize,
    pub n_actions: usize,
}

/// Parameters of one flow table. Index 0 of the flat value vector is the log
/// initial mass.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowParams {
    values: Vec<f64>,
    slots: HashMap<u64, Slot>,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self::new()
    }
}

impl FlowParams {
    pub fn new() -> Self {
        Self { values: vec![0.0], slots: HashMap::new() }
    }

    pub fn log_init_mass(&self) -> f64 {
        self.values[0]
    }

    pub fn set_log_init_mass(&mut self, v: f64) {
        self.values[0] = v;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn n_keys(&self) -> usize {
        self.slots.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn slot(&self, key: u64) -> Option<Slot> {
        self.slots.get(&key).copied()
    }

    /// Creates the entries of `key` with unit flow and uniform logits if they
    /// are missing. Keys without actions get no entries.
    pub fn ensure(&mut self, key: u64, n_actions: usize) -> Option<Slot> {
        if n_actions == 0 {
            return None;
        }
        if let Some(s) = self.slots.get(&key) {
            return Some(*s);
        }
        let slot = Slot { offset: self.values.len(), n_actions };
        self.values.extend(std::iter::repeat_n(0.0, n_actions + 1));
        self.slots.insert(key, slot);
        Some(slot)
    }

    /// Ensures entries for `key` and every parent feeding its inflow.
    pub fn ensure_for<S: StateSpace>(&mut self, space: &S, key: u64, scratch: &mut Vec<(u64, usize)>) {
        self.ensure(key, space.n_actions(key));
        scratch.clear();
        space.parents(key, scratch);
        for &(p, _) in scratch.iter() {
            self.ensure(p, space.n_actions(p));
        }
    }

    pub fn log_out_star(&self, key: u64) -> f64 {
        self.slot(key).map_or(0.0, |s| self.values[s.offset])
    }

    pub fn logits(&self, key: u64) -> Option<&[f64]> {
        self.slot(key).map(|s| &self.values[s.offset + 1..s.offset + 1 + s.n_actions])
    }

    pub fn set_log_out_star(&mut self, key: u64, n_actions: usize, v: f64) {
        if let Some(s) = self.ensure(key, n_actions) {
            self.values[s.offset] = v;
        }
    }

    pub fn set_logits(&mut self, key: u64, logits: &[f64]) {
        if let Some(s) = self.ensure(key, logits.len()) {
            self.values[s.offset + 1..s.offset + 1 + s.n_actions].copy_from_slice(logits);
        }
    }

    /// Sorted `(key, kind)` labels of every parameter with its flat index.
    pub fn labels(&self) -> Vec<(String, String, usize)> {
        let mut keys: Vec<u64> = self.slots.keys().copied().collect();
        keys.sort_unstable();
        let mut out = vec![("init".to_string(), "log_init_mass".to_string(), 0)];
        for k in keys {
            let s = self.slots[&k];
            out.push((k.to_string(), "out".to_string(), s.offset));
            for a in 0..s.n_actions {
                out.push((k.to_string(), format!("logit.{a}"), s.offset + 1 + a));
            }
        }
        out
    }

    /// Human-readable name of a flat index, for error messages.
    pub fn label_of(&self, index: usize) -> String {
        if index == 0 {
            return "log_init_mass".into();
        }
        self.slots
            .iter()
            .find(|(_, s)| index >= s.offset && index <= s.offset + s.n_actions)
            .map(|(k, s)| match index - s.offset {
                0 => format!("key {k} out"),
                a => format!("key {k} logit.{}", a - 1),
            })
            .unwrap_or_else(|| format!("index {index}"))
    }

    /// One `key<TAB>kind<TAB>value` line per parameter, keys ascending. Values
    /// use Rust's shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, kind, idx) in self.labels() {
            let _ = writeln!(s, "{key}\t{kind}\t{:?}", self.values[idx]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut init = None;
        let mut entries: BTreeMap<u64, (Option<f64>, Vec<f64>)> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Checkpoint(format!("line {}: {what}: {line}", lineno + 1));
            let mut parts = line.split('\t');
            let (Some(key), Some(kind), Some(value), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad("expected three tab-separated fields"));
            };
            let value: f64 = value.parse().map_err(|_| bad("bad value"))?;
            if key == "init" {
                init = Some(value);
                continue;
            }
            let key: u64 = key.parse().map_err(|_| bad("bad key"))?;
            let entry = entries.entry(key).or_default();
            if kind == "out" {
                entry.0 = Some(value);
            } else if let Some(i) = kind.strip_prefix("logit.") {
                let i: usize = i.parse().map_err(|_| bad("bad logit index"))?;
                if i != entry.1.len() {
                    return Err(bad("logits out of order"));
                }
                entry.1.push(value);
            } else {
                return Err(bad("unknown kind"));
            }
        }
        let mut params = FlowParams::new();
        params.values[0] = init.ok_or_else(|| Error::Checkpoint("missing init line".into()))?;
        for (key, (out, logits)) in entries {
            let out = out.ok_or_else(|| Error::Checkpoint(format!("key {key} has no out entry")))?;
            if logits.is_empty() {
                return Err(Error::Checkpoint(format!("key {key} has no logits")));
            }
            params.set_log_out_star(key, logits.len(), out);
            params.set_logits(key, &logits);
        }
        Ok(params)
    }
}

/// Numerically stable softmax into `out`.
pub fn softmax(logits: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.extend(logits.iter().map(|&l| (l - m).exp()));
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
}

/// Draws an index: uniform with probability `epsilon`, else by inverse CDF.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R, epsilon: f64) -> usize {
    let n = probs.len();
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return rng.gen_range(0..n);
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` just below 1; fall back to the last positive entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(n - 1)
}

pub fn argmax(values: &[f64]) -> usize {
    values.iter().enumerate().fold(0, |best, (i, &v)| if v > values[best] { i } else { best })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopRule {
    /// STOP only at terminal keys (the unanimous-hold rule).
    Structural,
    /// STOP with probability `R̂ / (R̂ + F_out*)` from the virtual reward.
    VirtualReward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullPolicy {
    pub actions: Vec<f64>,
    pub stop: f64,
}

/// Read-only view pairing a table with the graph it lives on.
#[derive(Clone, Copy)]
pub struct FlowView<'a, S> {
    pub params: &'a FlowParams,
    pub space: &'a S,
    /// Table number used in gradient addresses.
    pub table: u32,
}

impl<'a, S: StateSpace> FlowView<'a, S> {
    pub fn new(params: &'a FlowParams, space: &'a S) -> Self {
        Self { params, space, table: 0 }
    }

    pub fn with_table(mut self, table: u32) -> Self {
        self.table = table;
        self
    }

    fn check(&self, key: u64) -> Result<()> {
        if self.space.contains(key) {
            Ok(())
        } else {
            Err(Error::UnknownKey(key))
        }
    }

    /// `F_out*` at a non-terminal key; the pass-through inflow at terminal keys.
    pub fn out_star(&self, key: u64) -> Result<f64> {
        self.check(key)?;
        if self.space.is_terminal(key) {
            return self.in_flow(key);
        }
        Ok(self.params.log_out_star(key).exp())
    }

    pub fn policy_star(&self, key: u64) -> Result<Vec<f64>> {
        self.check(key)?;
        if self.space.is_terminal(key) {
            return Err(Error::UnknownKey(key));
        }
        let mut out = Vec::new();
        self.policy_into(key, &mut out);
        Ok(out)
    }

    /// Policy at a non-terminal key without validation; missing entries read
    /// as uniform.
    pub fn policy_into(&self, key: u64, out: &mut Vec<f64>) {
        match self.params.logits(key) {
            Some(l) => softmax(l, out),
            None => {
                let n = self.space.n_actions(key);
                out.clear();
                out.resize(n, 1.0 / n as f64);
            }
        }
    }

    /// Inflow excluding the initial mass.
    pub fn in_flow_star(&self, key: u64) -> Result<f64> {
        self.check(key)?;
        let mut parents = Vec::new();
        self.space.parents(key, &mut parents);
        let mut probs = Vec::new();
        let mut total = 0.0;
        for (p, a) in parents {
            self.policy_into(p, &mut probs);
            total += self.params.log_out_star(p).exp() * probs[a];
        }
        Ok(total)
    }

    pub fn init_mass(&self) -> f64 {
        self.params.log_init_mass().exp()
    }

    pub fn in_flow(&self, key: u64) -> Result<f64> {
        let star = self.in_flow_star(key)?;
        Ok(if key == self.space.start_key() { star + self.init_mass() } else { star })
    }

    /// `F_in - F_out*`; at terminal keys the whole inflow is routed to STOP.
    pub fn virtual_reward(&self, key: u64) -> Result<f64> {
        let inflow = self.in_flow(key)?;
        if self.space.is_terminal(key) {
            return Ok(inflow);
        }
        Ok(inflow - self.out_star(key)?)
    }

    pub fn full_policy(&self, key: u64, rule: StopRule) -> Result<FullPolicy> {
        self.check(key)?;
        if self.space.is_terminal(key) {
            return Ok(FullPolicy { actions: Vec::new(), stop: 1.0 });
        }
        let pi = self.policy_star(key)?;
        match rule {
            StopRule::Structural => Ok(FullPolicy { actions: pi, stop: 0.0 }),
            StopRule::VirtualReward => {
                let r = self.virtual_reward(key)?;
                if r < 0.0 {
                    return Err(Error::NegativeVirtualReward { key, value: r });
                }
                let out = self.out_star(key)?;
                let total = r + out;
                Ok(FullPolicy { actions: pi.iter().map(|p| p * out / total).collect(), stop: r / total })
            }
        }
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, key: u64, rng: &mut R, epsilon: f64) -> usize {
        let mut probs = Vec::new();
        self.policy_into(key, &mut probs);
        sample_index(&probs, rng, epsilon)
    }

    pub fn greedy_action(&self, key: u64) -> usize {
        let mut probs = Vec::new();
        self.policy_into(key, &mut probs);
        argmax(&probs)
    }

    fn parent_term_dual(&self, parent: u64, action: usize, probs: &mut Vec<f64>) -> Result<Dual> {
        let slot = self.params.slot(parent).ok_or(Error::UnknownKey(parent))?;
        let vals = self.params.values();
        softmax(&vals[slot.offset + 1..slot.offset + 1 + slot.n_actions], probs);
        let v = vals[slot.offset].exp() * probs[action];
        let at = |i: usize| ParamRef { table: self.table, index: i as u32 };
        let mut grad = Vec::with_capacity(slot.n_actions + 1);
        grad.push((at(slot.offset), v));
        for (b, &pb) in probs.iter().enumerate() {
            let delta = if b == action { 1.0 } else { 0.0 };
            grad.push((at(slot.offset + 1 + b), v * (delta - pb)));
        }
        Ok(Dual { value: v, grad })
    }

    /// Inflow with derivatives; requires entries for every parent.
    pub fn in_flow_dual(&self, key: u64, include_init: bool) -> Result<Dual> {
        self.check(key)?;
        let mut parents = Vec::new();
        self.space.parents(key, &mut parents);
        let mut probs = Vec::new();
        let mut total = Dual::constant(0.0);
        for (p, a) in parents {
            total.add_assign(&self.parent_term_dual(p, a, &mut probs)?);
        }
        if include_init && key == self.space.start_key() {
            let c = self.init_mass();
            total.value += c;
            total.grad.push((ParamRef { table: self.table, index: 0 }, c));
        }
        Ok(total)
    }

    pub fn out_star_dual(&self, key: u64) -> Result<Dual> {
        self.check(key)?;
        if self.space.is_terminal(key) {
            return self.in_flow_dual(key, true);
        }
        let slot = self.params.slot(key).ok_or(Error::UnknownKey(key))?;
        let v = self.params.values()[slot.offset].exp();
        Ok(Dual { value: v, grad: vec![(ParamRef { table: self.table, index: slot.offset as u32 }, v)] })
    }

    /// Gradient of the configured flow-matching loss over `batch`.
    pub fn loss_gradient(
        &self,
        batch: &crate::fm_loss::StateBatch,
        g: crate::fm_loss::GSpec,
        kind: crate::fm_loss::LossKind,
    ) -> Result<(f64, Gradient)> {
        crate::fm_loss::loss_and_gradient(self, batch, g, kind)
    }
}

/// Every key reachable from the start, ordered so parents precede children.
pub fn reachable_keys<S: StateSpace>(space: &S, cap: usize) -> Result<Vec<u64>> {
    let mut order = Vec::new();
    let mut seen = std::collections::HashSet::new();
    // Reverse postorder of a DFS is a topological order of the DAG.
    let mut stack = vec![(space.start_key(), 0usize)];
    seen.insert(space.start_key());
    while let Some(&mut (key, ref mut next)) = stack.last_mut() {
        if *next < space.n_actions(key) {
            let c = space.child(key, *next);
            *next += 1;
            if seen.insert(c) {
                if seen.len() > cap {
                    return Err(Error::TooLarge(format!("more than {cap} reachable states")));
                }
                stack.push((c, 0));
            }
        } else {
            order.push(key);
            stack.pop();
        }
    }
    order.reverse();
    Ok(order)
}

/// Exactly flow-matched table built by backward induction with a uniform
/// backward policy: `F(s) = R(s)` at terminals and
/// `F(s) = sum_a F(child) / |parents(child)|` elsewhere.
pub fn exact_solution<S: StateSpace>(space: &S, reward: impl Fn(u64) -> f64, cap: usize) -> Result<FlowParams> {
    let order = reachable_keys(space, cap)?;
    let mut flow: HashMap<u64, f64> = HashMap::with_capacity(order.len());
    let mut n_parents: HashMap<u64, usize> = HashMap::new();
    let mut scratch = Vec::new();
    let mut params = FlowParams::new();
    for &key in order.iter().rev() {
        if space.is_terminal(key) {
            flow.insert(key, reward(key));
            continue;
        }
        let n = space.n_actions(key);
        let mut contrib = Vec::with_capacity(n);
        for a in 0..n {
            let c = space.child(key, a);
            let np = *n_parents.entry(c).or_insert_with(|| {
                scratch.clear();
                space.parents(c, &mut scratch);
                scratch.len()
            });
            contrib.push(flow[&c] / np as f64);
        }
        let total: f64 = contrib.iter().sum();
        flow.insert(key, total);
        params.set_log_out_star(key, n, total.ln());
        params.set_logits(key, &contrib.iter().map(|c| (c / total).ln()).collect::<Vec<_>>());
    }
    params.set_log_init_mass(flow[&space.start_key()].ln());
    Ok(params)
}
