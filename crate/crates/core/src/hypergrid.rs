//! Multi-agent hyper-grid task: indicator-band reward over all agents'
//! coordinates, plus exact enumeration utilities for small instances.

use crate::env::{Environment, GridEnv};
use crate::error::{Error, Result};
use crate::measure::DiscreteMeasure;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Default ceiling on the number of terminals enumerated exactly.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypergridSpec {
    pub n_agents: usize,
    pub dims: usize,
    pub side: u32,
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
}

impl HypergridSpec {
    pub const DEFAULT_R0: f64 = 1e-2;
    pub const DEFAULT_R1: f64 = 0.5;
    pub const DEFAULT_R2: f64 = 2.0;

    pub fn new(n_agents: usize, dims: usize, side: u32) -> Self {
        Self { n_agents, dims, side, r0: Self::DEFAULT_R0, r1: Self::DEFAULT_R1, r2: Self::DEFAULT_R2 }
    }

    /// Benchmark presets `v1`, `v2`, `v3`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "v1" => Some(Self::new(2, 2, 8)),
            "v2" => Some(Self::new(2, 3, 8)),
            "v3" => Some(Self::new(3, 3, 8)),
            _ => None,
        }
    }

    pub fn with_rewards(mut self, r0: f64, r1: f64, r2: f64) -> Self {
        self.r0 = r0;
        self.r1 = r1;
        self.r2 = r2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 || self.dims == 0 {
            return Err(Error::Config("n_agents and dims must be >= 1".into()));
        }
        if self.side < 2 {
            return Err(Error::Config(format!("side must be >= 2, got {}", self.side)));
        }
        for (name, r) in [("r0", self.r0), ("r1", self.r1), ("r2", self.r2)] {
            if !(r.is_finite() && r >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Soft checks on the expected ordering `0 < r0 << r1 < r2`.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.r0 <= 0.0 {
            out.push("r0 = 0 gives zero reward outside the bands".to_string());
        }
        if self.r0 >= self.r1 {
            out.push(format!("r0 ({}) is not much smaller than r1 ({})", self.r0, self.r1));
        }
        if self.r1 >= self.r2 {
            out.push(format!("r1 ({}) >= r2 ({})", self.r1, self.r2));
        }
        out
    }

    /// `0.25 < |x/H - 0.5|`, evaluated exactly as `2|2x - H| > H`.
    pub fn in_outer_band(&self, x: u32) -> bool {
        let h = self.side as i64;
        2 * (2 * x as i64 - h).abs() > h
    }

    /// `0.3 < |x/H - 0.5| < 0.4`, evaluated exactly as `3H < 5|2x - H| < 4H`.
    pub fn in_mode_band(&self, x: u32) -> bool {
        let h = self.side as i64;
        let d = 5 * (2 * x as i64 - h).abs();
        3 * h < d && d < 4 * h
    }

    pub fn mode_coordinates(&self) -> Vec<u32> {
        (0..self.side).filter(|&x| self.in_mode_band(x)).collect()
    }

    pub fn reward(&self, positions: &[u32]) -> Result<f64> {
        if positions.len() != self.n_agents * self.dims {
            return Err(Error::OutOfRange(format!(
                "expected {} coordinates, got {}",
                self.n_agents * self.dims,
                positions.len()
            )));
        }
        if let Some(x) = positions.iter().find(|&&x| x >= self.side) {
            return Err(Error::OutOfRange(format!("coordinate {x} outside [0, {})", self.side)));
        }
        let outer = positions.iter().all(|&x| self.in_outer_band(x));
        let mode = positions.iter().all(|&x| self.in_mode_band(x));
        let mut r = self.r0;
        if outer {
            r += self.r1;
        }
        if mode {
            r += self.r2;
        }
        Ok(r)
    }

    pub fn is_mode(&self, positions: &[u32]) -> bool {
        positions.iter().all(|&x| self.in_mode_band(x))
    }

    fn n_coords(&self) -> usize {
        self.n_agents * self.dims
    }

    pub fn n_terminals(&self) -> Option<u64> {
        (self.side as u64).checked_pow(self.n_coords() as u32)
    }
}

/// Row-major index of a terminal configuration; the last coordinate varies fastest.
pub fn terminal_index(positions: &[u32], side: u32) -> u64 {
    positions.iter().fold(0u64, |acc, &x| acc * side as u64 + x as u64)
}

/// Inverse of [`terminal_index`].
pub fn terminal_positions(mut index: u64, n_coords: usize, side: u32) -> Vec<u32> {
    let mut out = vec![0u32; n_coords];
    for slot in out.iter_mut().rev() {
        *slot = (index % side as u64) as u32;
        index /= side as u64;
    }
    out
}

/// Iterator over all terminal position arrays in lexicographic order.
pub struct Terminals {
    side: u32,
    current: Option<Vec<u32>>,
}

impl Iterator for Terminals {
    type Item = Vec<u32>;

    fn next(&mut self) -> Option<Vec<u32>> {
        let out = self.current.clone()?;
        let mut next = out.clone();
        let mut carry = true;
        for x in next.iter_mut().rev() {
            *x += 1;
            if *x < self.side {
                carry = false;
                break;
            }
            *x = 0;
        }
        self.current = if carry { None } else { Some(next) };
        Some(out)
    }
}

pub fn enumerate_terminals(spec: &HypergridSpec, cap: u64) -> Result<Terminals> {
    let n = spec
        .n_terminals()
        .ok_or_else(|| Error::TooLarge("terminal count overflows u64".into()))?;
    if n > cap {
        return Err(Error::TooLarge(format!("{n} terminals exceed cap {cap}")));
    }
    Ok(Terminals { side: spec.side, current: Some(vec![0; spec.n_coords()]) })
}

/// Partition function `Z` and the normalized target `R/Z` over all terminals.
pub fn partition_function(spec: &HypergridSpec, cap: u64) -> Result<(f64, DiscreteMeasure)> {
    let n = spec.n_terminals().unwrap_or(u64::MAX);
    let mut target = DiscreteMeasure::new(n);
    let mut z = 0.0;
    for (i, x) in enumerate_terminals(spec, cap)?.enumerate() {
        let r = spec.reward(&x)?;
        z += r;
        target.add(i as u64, r);
    }
    if z <= 0.0 {
        return Err(Error::Config("partition function is zero".into()));
    }
    Ok((z, target.scaled(1.0 / z)))
}

/// Terminal indices whose every coordinate lies in the mode band.
pub fn mode_set(spec: &HypergridSpec, cap: u64) -> Result<BTreeSet<u64>> {
    let coords = spec.mode_coordinates();
    let count = (coords.len() as u64).checked_pow(spec.n_coords() as u32);
    match count {
        Some(c) if c <= cap => {}
        _ => return Err(Error::TooLarge("mode set too large to enumerate".into())),
    }
    let mut out = BTreeSet::new();
    if coords.is_empty() {
        return Ok(out);
    }
    let k = spec.n_coords();
    let mut digits = vec![0usize; k];
    loop {
        let pos: Vec<u32> = digits.iter().map(|&d| coords[d]).collect();
        out.insert(terminal_index(&pos, spec.side));
        let mut i = k;
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            digits[i] += 1;
            if digits[i] < coords.len() {
                break;
            }
            digits[i] = 0;
        }
    }
}

/// The hyper-grid environment.
#[derive(Debug, Clone)]
pub struct Hypergrid {
    pub spec: HypergridSpec,
    grid: GridEnv,
}

impl Hypergrid {
    pub fn new(spec: HypergridSpec) -> Result<Self> {
        spec.validate()?;
        let grid = GridEnv::new(spec.n_agents, spec.dims, spec.side)?;
        Ok(Self { spec, grid })
    }

    pub fn with_horizon(mut self, horizon: u32) -> Result<Self> {
        self.grid = self.grid.with_horizon(horizon)?;
        Ok(self)
    }
}

impl Environment for Hypergrid {
    fn grid(&self) -> &GridEnv {
        &self.grid
    }

    fn reward(&self, positions: &[u32]) -> Result<f64> {
        self.spec.reward(positions)
    }

    fn is_mode(&self, positions: &[u32]) -> bool {
        self.spec.is_mode(positions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v1() -> HypergridSpec {
        HypergridSpec::new(2, 2, 8).with_rewards(0.01, 0.5, 2.0)
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn reward_examples() {
        let s = v1();
        assert!(close(s.reward(&[1, 7, 7, 1]).unwrap(), 2.51));
        assert!(close(s.reward(&[0, 0, 0, 0]).unwrap(), 0.51));
        assert!(close(s.reward(&[4, 4, 4, 4]).unwrap(), 0.01));
        assert!(matches!(s.reward(&[8, 0, 0, 0]), Err(Error::OutOfRange(_))));
        assert!(matches!(s.reward(&[0, 0, 0]), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn boundary_takes_outer_branch() {
        // |2/8 - 0.5| = 0.25 exactly: not strictly inside the outer band.
        let s = v1();
        assert!(!s.in_outer_band(2));
        assert!(!s.in_outer_band(6));
        assert!(s.in_outer_band(7));
        // H = 10, x = 8: |0.8 - 0.5| = 0.3 exactly, excluded from the mode band.
        let s10 = HypergridSpec::new(1, 1, 10);
        assert!(!s10.in_mode_band(8));
        assert!(!s10.in_mode_band(1));
        assert!(!s10.in_mode_band(9));
    }

    #[test]
    fn enumeration_counts() {
        let count = |n, d, h| enumerate_terminals(&HypergridSpec::new(n, d, h), 1 << 20).unwrap().count();
        assert_eq!(count(1, 1, 3), 3);
        assert_eq!(count(2, 1, 2), 4);
        assert_eq!(count(2, 2, 8), 4096);
        let items: Vec<_> = enumerate_terminals(&HypergridSpec::new(1, 1, 3), 10).unwrap().collect();
        assert_eq!(items, vec![vec![0], vec![1], vec![2]]);
        assert!(matches!(
            enumerate_terminals(&HypergridSpec::new(3, 3, 8), 1 << 20),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn index_roundtrip_matches_enumeration_order() {
        let spec = HypergridSpec::new(2, 2, 3);
        for (i, x) in enumerate_terminals(&spec, 100).unwrap().enumerate() {
            assert_eq!(terminal_index(&x, 3), i as u64);
            assert_eq!(terminal_positions(i as u64, 4, 3), x);
        }
    }

    #[test]
    fn two_state_partition() {
        let spec = HypergridSpec::new(1, 1, 2).with_rewards(1.0, 1.0, 0.0);
        let (z, target) = partition_function(&spec, 100).unwrap();
        assert!(close(z, 3.0));
        assert!(close(target.get(0), 2.0 / 3.0));
        assert!(close(target.get(1), 1.0 / 3.0));
    }

    #[test]
    fn partition_is_scale_free_and_normalized() {
        let spec = v1();
        let (z, target) = partition_function(&spec, 1 << 20).unwrap();
        assert!((target.total() - 1.0).abs() < 1e-12);
        let brute: f64 = enumerate_terminals(&spec, 1 << 20).unwrap().map(|x| spec.reward(&x).unwrap()).sum();
        assert!((z - brute).abs() < 1e-9);
        let (_, scaled) = partition_function(&spec.with_rewards(0.03, 1.5, 6.0), 1 << 20).unwrap();
        for (k, v) in target.iter() {
            assert!((scaled.get(k) - v).abs() <= 1e-12 * v);
        }
    }

    #[test]
    fn mode_counts() {
        assert_eq!(mode_set(&v1(), 1 << 20).unwrap().len(), 16);
        assert_eq!(mode_set(&HypergridSpec::new(1, 1, 8), 100).unwrap().len(), 2);
        assert_eq!(mode_set(&HypergridSpec::new(1, 1, 4), 100).unwrap().len(), 0);
        assert_eq!(v1().mode_coordinates(), vec![1, 7]);
    }

    #[test]
    fn modes_attain_maximum_reward() {
        let spec = v1();
        let modes = mode_set(&spec, 1 << 20).unwrap();
        let top = spec.r0 + spec.r1 + spec.r2;
        let mut max = 0.0f64;
        for (i, x) in enumerate_terminals(&spec, 1 << 20).unwrap().enumerate() {
            let r = spec.reward(&x).unwrap();
            assert!(r >= spec.r0);
            max = max.max(r);
            assert_eq!(modes.contains(&(i as u64)), close(r, top));
        }
        assert!(close(max, top));
    }

    #[test]
    fn warns_on_unusual_rewards() {
        assert!(v1().warnings().is_empty());
        assert_eq!(HypergridSpec::new(1, 1, 4).with_rewards(1.0, 1.0, 0.5).warnings().len(), 2);
    }
}
