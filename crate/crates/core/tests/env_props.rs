use magfn::env::{ActionProfile, GlobalState, GridEnv, LocalAction, Phase};
use magfn::flow_table::{GlobalSpace, StateSpace};
use magfn::hypergrid::{partition_function, terminal_index, terminal_positions, HypergridSpec};
use proptest::prelude::*;

/// Plays `choices` as action picks among each alive agent's legal actions.
fn rollout(grid: &GridEnv, choices: &[u8]) -> Vec<GlobalState> {
    let mut state = grid.start_state();
    let mut states = vec![state.clone()];
    let mut it = choices.iter().cycle();
    while !state.is_terminal() {
        let actions = (0..grid.n_agents)
            .map(|i| match state.phases[i] {
                Phase::Purgatory => None,
                Phase::Alive => {
                    let obs = grid.observe(&state, magfn::AgentId(i));
                    let legal = grid.legal_actions(&obs);
                    Some(legal[*it.next().unwrap() as usize % legal.len()])
                }
            })
            .collect();
        state = grid.step(&state, &ActionProfile::new(actions)).unwrap();
        states.push(state.clone());
    }
    states
}

fn grids() -> impl Strategy<Value = GridEnv> {
    (1usize..4, 1usize..3, 2u32..6, prop::option::of(1u32..8)).prop_map(|(n, d, h, horizon)| {
        let g = GridEnv::new(n, d, h).unwrap();
        match horizon {
            Some(t) => g.with_horizon(t).unwrap(),
            None => g,
        }
    })
}

proptest! {
    #[test]
    fn episodes_respect_dynamics(grid in grids(), choices in prop::collection::vec(any::<u8>(), 1..40)) {
        let states = rollout(&grid, &choices);
        prop_assert!(states.len() - 1 <= grid.horizon as usize);
        let g = GlobalSpace::of_grid(&grid).unwrap();
        for w in states.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            prop_assert_eq!(b.step, a.step + 1);
            prop_assert!(b.positions.iter().all(|&x| x < grid.side));
            for i in 0..grid.n_agents {
                let (pa, pb) = (a.agent_position(i, grid.dims), b.agent_position(i, grid.dims));
                let moved: u32 = pb.iter().zip(pa).map(|(y, x)| y - x).sum();
                match (a.phases[i], b.phases[i]) {
                    (Phase::Alive, Phase::Alive) => prop_assert_eq!(moved, 1),
                    (Phase::Purgatory, Phase::Alive) => prop_assert!(false, "left purgatory"),
                    _ => prop_assert_eq!(moved, 0),
                }
            }
        }
        for s in &states {
            let alive_sums: Vec<u32> = (0..grid.n_agents)
                .filter(|&i| s.phases[i] == Phase::Alive)
                .map(|i| s.agent_position(i, grid.dims).iter().sum())
                .collect();
            prop_assert!(alive_sums.iter().all(|&x| x == s.step));
            let key = g.key(s);
            prop_assert!(g.contains(key));
            let back = g.decode(key);
            prop_assert_eq!(&back.positions, &s.positions);
            prop_assert_eq!(&back.phases, &s.phases);
            if !s.is_terminal() {
                prop_assert_eq!(back.step, s.step);
            }
        }
        let last = states.last().unwrap();
        prop_assert!(last.is_terminal());
        prop_assert!(grid.step(last, &ActionProfile::all_hold(last)).is_err());
    }

    #[test]
    fn parents_and_children_are_inverse(grid in grids(), choices in prop::collection::vec(any::<u8>(), 1..40)) {
        let g = GlobalSpace::of_grid(&grid).unwrap();
        let mut parents = Vec::new();
        for w in rollout(&grid, &choices).windows(2) {
            let (pk, ck) = (g.key(&w[0]), g.key(&w[1]));
            parents.clear();
            g.parents(ck, &mut parents);
            let hit = parents.iter().find(|&&(p, _)| p == pk);
            prop_assert!(hit.is_some());
            let &(_, a) = hit.unwrap();
            prop_assert_eq!(g.child(pk, a), ck);
            for &(p, a) in &parents {
                prop_assert_eq!(g.child(p, a), ck);
            }
        }
    }

    #[test]
    fn illegal_moves_are_rejected(side in 2u32..6, dims in 1usize..3) {
        let grid = GridEnv::new(1, dims, side).unwrap();
        let mut state = grid.start_state();
        for _ in 0..side - 1 {
            state = grid.step(&state, &ActionProfile::new(vec![Some(LocalAction::Increment(0))])).unwrap();
        }
        prop_assert!(grid.step(&state, &ActionProfile::new(vec![Some(LocalAction::Increment(0))])).is_err());
        prop_assert!(grid.step(&state, &ActionProfile::new(vec![None])).is_err());
        prop_assert!(grid.step(&state, &ActionProfile::new(vec![])).is_err());
    }

    #[test]
    fn terminal_index_round_trips(n in 1usize..4, side in 2u32..9, idx in any::<u64>()) {
        let total = (side as u64).pow(n as u32);
        let i = idx % total;
        let pos = terminal_positions(i, n, side);
        prop_assert_eq!(terminal_index(&pos, side), i);
    }

    #[test]
    fn rewards_are_positive_and_normalize(n in 1usize..3, d in 1usize..3, side in 2u32..9, r0 in 1e-4f64..1.0) {
        let spec = HypergridSpec::new(n, d, side).with_rewards(r0, 0.5, 2.0);
        let (z, target) = partition_function(&spec, 1 << 20).unwrap();
        prop_assert!(z > 0.0);
        prop_assert!((target.total() - 1.0).abs() < 1e-12);
        for (k, p) in target.iter() {
            let r = spec.reward(&terminal_positions(k, n * d, side)).unwrap();
            prop_assert!(r >= r0);
            prop_assert!((p - r / z).abs() <= 1e-12 * (1.0 + r / z));
        }
    }
}
