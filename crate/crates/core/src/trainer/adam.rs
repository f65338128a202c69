use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_table::{FlowParams, Gradient};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive-moment state aligned with each table's flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, n_tables: usize) -> Self {
        Self { config, t: 0, m: vec![Vec::new(); n_tables], v: vec![Vec::new(); n_tables] }
    }
}

/// One bias-corrected adaptive-moment update over every parameter.
/// Parameters the gradient does not mention see a zero gradient.
pub fn optimizer_step(tables: &mut [FlowParams], grad: &Gradient, adam: &mut Adam, lr: f64) -> Result<()> {
    let AdamConfig { beta1, beta2, eps } = adam.config;
    adam.t += 1;
    let c1 = 1.0 - beta1.powi(adam.t.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - beta2.powi(adam.t.min(i32::MAX as u64) as i32);
    for (t, table) in tables.iter_mut().enumerate() {
        let n = table.len();
        let (m, v) = (&mut adam.m[t], &mut adam.v[t]);
        m.resize(n, 0.0);
        v.resize(n, 0.0);
        for i in 0..n {
            let g = grad.dense(t, i);
            if !g.is_finite() {
                return Err(Error::NonFiniteUpdate(table.label_of(i)));
            }
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            let next = table.values()[i] - step;
            if !next.is_finite() {
                return Err(Error::NonFiniteUpdate(table.label_of(i)));
            }
            table.values_mut()[i] = next;
        }
    }
    Ok(())
}
