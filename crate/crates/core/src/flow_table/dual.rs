//! Sparse forward-mode derivatives for flow expressions.
//!
//! Flows are sums and products of `exp(theta) * softmax(logits)[a]` terms, so
//! each value carries the (short) list of parameters it depends on.

use crate::error::{Error, Result};

/// Address of one scalar parameter: table number and index into that
/// table's flat value vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamRef {
    pub table: u32,
    pub index: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dual {
    pub value: f64,
    /// Partial derivatives; a parameter may appear more than once.
    pub grad: Vec<(ParamRef, f64)>,
}

impl Dual {
    pub fn constant(value: f64) -> Self {
        Self { value, grad: Vec::new() }
    }

    pub fn add_assign(&mut self, other: &Dual) {
        self.value += other.value;
        self.grad.extend_from_slice(&other.grad);
    }

    pub fn mul(&self, other: &Dual) -> Dual {
        let mut grad = Vec::with_capacity(self.grad.len() + other.grad.len());
        grad.extend(self.grad.iter().map(|&(p, d)| (p, d * other.value)));
        grad.extend(other.grad.iter().map(|&(p, d)| (p, d * self.value)));
        Dual { value: self.value * other.value, grad }
    }
}

/// Dense gradient buffers with a record of which entries were touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    values: Vec<Vec<f64>>,
    touched: Vec<Vec<bool>>,
}

impl Gradient {
    pub fn new(table_sizes: &[usize]) -> Self {
        Self {
            values: table_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            touched: table_sizes.iter().map(|&n| vec![false; n]).collect(),
        }
    }

    pub fn n_tables(&self) -> usize {
        self.values.len()
    }

    pub fn add(&mut self, p: ParamRef, v: f64) {
        let (t, i) = (p.table as usize, p.index as usize);
        self.values[t][i] += v;
        self.touched[t][i] = true;
    }

    pub fn add_dual(&mut self, d: &Dual, scale: f64) {
        for &(p, v) in &d.grad {
            self.add(p, scale * v);
        }
    }

    /// `None` for parameters the batch never touched.
    pub fn get(&self, p: ParamRef) -> Option<f64> {
        let (t, i) = (p.table as usize, p.index as usize);
        match self.touched.get(t).and_then(|row| row.get(i)) {
            Some(true) => Some(self.values[t][i]),
            _ => None,
        }
    }

    /// Value of entry `i` of table `t`, zero when untouched or out of range.
    pub fn dense(&self, t: usize, i: usize) -> f64 {
        self.values.get(t).and_then(|row| row.get(i)).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamRef, f64)> + '_ {
        self.values.iter().enumerate().flat_map(move |(t, row)| {
            row.iter().enumerate().filter(move |(i, _)| self.touched[t][*i]).map(move |(i, &v)| {
                (ParamRef { table: t as u32, index: i as u32 }, v)
            })
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.iter().find(|(_, v)| !v.is_finite()) {
            Some((p, _)) => Err(Error::NonFiniteGradient(format!("table {} index {}", p.table, p.index))),
            None => Ok(()),
        }
    }
}
