//! Metropolis baseline over terminal positions.
//!
//! The chain moves one coordinate of one agent by ±1 per step, so it can
//! walk back down the grid, and targets `R / Z` directly. Each step costs one
//! reward evaluation.

use rand::Rng;

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::hypergrid::{terminal_index, terminal_positions};

pub const DEFAULT_THINNING: u64 = 10;

/// Burn-in used when none is given: a tenth of the run.
pub fn default_burn_in(n_steps: u64) -> u64 {
    n_steps / 10
}

/// Probability of accepting a move from reward `from` to reward `to`.
pub fn acceptance(from: f64, to: f64) -> f64 {
    if from <= 0.0 {
        1.0
    } else {
        (to / from).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcChain {
    /// Row-major `n_agents x dims` coordinates.
    pub positions: Vec<u32>,
    pub reward: f64,
    pub steps: u64,
    pub accepted: u64,
    side: u32,
}

impl McmcChain {
    /// Starts at the origin, where every agent begins in the flow networks.
    pub fn new(env: &dyn Environment) -> Result<Self> {
        let grid = env.grid();
        let positions = vec![0; grid.n_agents * grid.dims];
        let reward = env.reward(&positions)?;
        Ok(Self { positions, reward, steps: 0, accepted: 0, side: grid.side })
    }

    /// One proposal and accept/reject decision.
    pub fn step<R: Rng + ?Sized>(&mut self, env: &dyn Environment, rng: &mut R) -> Result<bool> {
        self.steps += 1;
        let c = rng.gen_range(0..self.positions.len());
        let up = rng.gen_bool(0.5);
        let x = self.positions[c];
        let next = match (up, x) {
            (true, x) if x + 1 < self.side => x + 1,
            (false, x) if x > 0 => x - 1,
            _ => return Ok(false),
        };
        self.positions[c] = next;
        let r = env.reward(&self.positions)?;
        if rng.gen::<f64>() < acceptance(self.reward, r) {
            self.reward = r;
            self.accepted += 1;
            Ok(true)
        } else {
            self.positions[c] = x;
            Ok(false)
        }
    }

    pub fn index(&self) -> u64 {
        terminal_index(&self.positions, self.side)
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.steps.max(1) as f64
    }
}

/// Runs `n_steps` and keeps every `thinning`-th state after `burn_in`.
pub fn mcmc_run<R: Rng + ?Sized>(
    env: &dyn Environment,
    n_steps: u64,
    burn_in: u64,
    thinning: u64,
    rng: &mut R,
) -> Result<Vec<Vec<u32>>> {
    if n_steps <= burn_in || thinning == 0 {
        return Err(Error::Config(format!(
            "need n_steps > burn_in and thinning > 0 (got {n_steps}, {burn_in}, {thinning})"
        )));
    }
    let mut chain = McmcChain::new(env)?;
    let mut samples = Vec::with_capacity(((n_steps - burn_in) / thinning) as usize);
    for s in 1..=n_steps {
        chain.step(env, rng)?;
        if s > burn_in && (s - burn_in).is_multiple_of(thinning) {
            samples.push(chain.positions.clone());
        }
    }
    Ok(samples)
}

/// Dense transition matrix over terminal indices, for small grids.
pub fn kernel_matrix(env: &dyn Environment, cap: u64) -> Result<Vec<Vec<f64>>> {
    let grid = env.grid();
    let n_coords = grid.n_agents * grid.dims;
    let n = grid.n_terminals().filter(|&n| n <= cap).ok_or_else(|| Error::TooLarge(format!("more than {cap} terminals")))?;
    let n = n as usize;
    let rewards: Vec<f64> = (0..n as u64)
        .map(|i| env.reward(&terminal_positions(i, n_coords, grid.side)))
        .collect::<Result<_>>()?;
    let move_prob = 1.0 / (2 * n_coords) as f64;
    let mut k = vec![vec![0.0; n]; n];
    for x in 0..n {
        let pos = terminal_positions(x as u64, n_coords, grid.side);
        let mut stay = 1.0;
        for c in 0..n_coords {
            for up in [true, false] {
                let mut p = pos.clone();
                match up {
                    true if p[c] + 1 < grid.side => p[c] += 1,
                    false if p[c] > 0 => p[c] -= 1,
                    _ => continue,
                }
                let y = terminal_index(&p, grid.side) as usize;
                let t = move_prob * acceptance(rewards[x], rewards[y]);
                k[x][y] += t;
                stay -= t;
            }
        }
        k[x][x] += stay;
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{empirical_terminal_distribution, l1_error};
    use crate::env::{CustomEnv, GridEnv};
    use crate::hypergrid::{partition_function, Hypergrid, HypergridSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_satisfies_detailed_balance() {
        for spec in [HypergridSpec::new(1, 1, 4), HypergridSpec::new(2, 1, 4), HypergridSpec::new(1, 2, 8)] {
            let env = Hypergrid::new(spec).unwrap();
            let (_, target) = partition_function(&spec, 1000).unwrap();
            let k = kernel_matrix(&env, 1000).unwrap();
            for (x, row) in k.iter().enumerate() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (y, &kxy) in row.iter().enumerate() {
                    let lhs = target.get(x as u64) * kxy;
                    let rhs = target.get(y as u64) * k[y][x];
                    assert!((lhs - rhs).abs() <= 1e-12, "{x}->{y}");
                }
            }
        }
    }

    #[test]
    fn flat_reward_gives_uniform_samples() {
        let env = CustomEnv::new(GridEnv::new(1, 1, 4).unwrap(), |_| 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = mcmc_run(&env, 1_000_000, 100_000, DEFAULT_THINNING, &mut rng).unwrap();
        let n = samples.len() as f64;
        let mut counts = [0.0; 4];
        for s in &samples {
            counts[s[0] as usize] += 1.0;
        }
        let chi2: f64 = counts.iter().map(|c| (c - n / 4.0).powi(2) / (n / 4.0)).sum();
        // 3 degrees of freedom: mean 3, sd sqrt(6).
        assert!(chi2 < 3.0 + 3.0 * 6f64.sqrt(), "chi2 {chi2}");
    }

    #[test]
    fn uphill_moves_are_always_accepted() {
        let spec = HypergridSpec::new(1, 1, 8);
        let low = spec.reward(&[3]).unwrap();
        let high = spec.reward(&[7]).unwrap();
        assert!(high > low);
        assert_eq!(acceptance(low, high), 1.0);
        assert!((acceptance(high, low) - low / high).abs() < 1e-15);
    }

    #[test]
    fn chain_converges_on_small_grid() {
        let spec = HypergridSpec::new(1, 1, 8);
        let env = Hypergrid::new(spec).unwrap();
        let (_, target) = partition_function(&spec, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples = mcmc_run(&env, 1_000_000, default_burn_in(1_000_000), DEFAULT_THINNING, &mut rng).unwrap();
        let emp = empirical_terminal_distribution(&samples, 8).unwrap();
        assert!(l1_error(&emp, &target).unwrap() < 0.05);
    }

    #[test]
    fn rejects_bad_schedule() {
        let env = CustomEnv::new(GridEnv::new(1, 1, 4).unwrap(), |_| 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(mcmc_run(&env, 10, 10, 1, &mut rng).is_err());
        assert!(mcmc_run(&env, 10, 0, 0, &mut rng).is_err());
    }

    #[test]
    fn boundary_proposals_stay_put() {
        let env = CustomEnv::new(GridEnv::new(1, 1, 2).unwrap(), |_| 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut chain = McmcChain::new(&env).unwrap();
        for _ in 0..100 {
            chain.step(&env, &mut rng).unwrap();
            assert!(chain.positions[0] < 2);
        }
        assert!(chain.acceptance_rate() > 0.2 && chain.acceptance_rate() < 0.8);
    }
}
