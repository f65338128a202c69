use std::collections::BTreeMap;

/// Finite non-negative mass assignment over a discrete set of terminal
/// configurations, identified by their row-major position index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiscreteMeasure {
    /// Size of the ground set the measure lives on.
    pub domain_size: u64,
    masses: BTreeMap<u64, f64>,
}

impl DiscreteMeasure {
    pub fn new(domain_size: u64) -> Self {
        Self { domain_size, masses: BTreeMap::new() }
    }

    pub fn add(&mut self, point: u64, mass: f64) {
        *self.masses.entry(point).or_insert(0.0) += mass;
    }

    pub fn get(&self, point: u64) -> f64 {
        self.masses.get(&point).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.masses.values().sum()
    }

    pub fn support_len(&self) -> usize {
        self.masses.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.masses.iter().map(|(&k, &v)| (k, v))
    }

    /// Returns a copy scaled to unit mass. A zero measure is returned unchanged.
    pub fn normalized(&self) -> Self {
        let z = self.total();
        if z <= 0.0 {
            return self.clone();
        }
        Self {
            domain_size: self.domain_size,
            masses: self.masses.iter().map(|(&k, &v)| (k, v / z)).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            domain_size: self.domain_size,
            masses: self.masses.iter().map(|(&k, &v)| (k, v * c)).collect(),
        }
    }

    /// Adds `weight * other` into `self`.
    pub fn accumulate(&mut self, other: &DiscreteMeasure, weight: f64) {
        for (k, v) in other.iter() {
            self.add(k, weight * v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_and_accumulate() {
        let mut m = DiscreteMeasure::new(4);
        m.add(0, 2.0);
        m.add(3, 1.0);
        m.add(0, 1.0);
        assert_eq!(m.get(0), 3.0);
        assert_eq!(m.get(1), 0.0);
        let n = m.normalized();
        assert!((n.total() - 1.0).abs() < 1e-15);
        assert_eq!(n.get(3), 0.25);
        let mut acc = DiscreteMeasure::new(4);
        acc.accumulate(&n, 0.5);
        acc.accumulate(&n, 0.5);
        assert_eq!(acc, n);
    }
}
