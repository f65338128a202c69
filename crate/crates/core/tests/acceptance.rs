//! Acceptance criteria 1-10. Each test writes one `criterion N: PASS|FAIL`
//! line straight to stdout, so the lines show even when output is captured.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use magfn::analysis::{
    empirical_terminal_distribution, exact_terminal_distribution, l1_error, stopping_time_stats, theorem_checks,
    GlobalPolicy,
};
use magfn::flow_table::{
    exact_solution, reachable_keys, FlowParams, FlowView, GlobalSpace, Gradient, LocalSpace, StateSpace,
};
use magfn::fm_loss::{fm_loss, loss_and_gradient, GSpec, LossKind, StateBatch};
use magfn::hypergrid::{mode_set, partition_function, Hypergrid, HypergridSpec};
use magfn::joint_flow::JointView;
use magfn::mcmc::{default_burn_in, kernel_matrix, mcmc_run, DEFAULT_THINNING};
use magfn::trainer::{train_cfn, train_cjfn, train_ifn, train_jfn, TrainConfig, TrainResult};
use magfn::Environment;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn report(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {n} failed: {detail}");
}

fn v1() -> (Hypergrid, magfn::DiscreteMeasure) {
    let spec = HypergridSpec::preset("v1").unwrap();
    let (_, target) = partition_function(&spec, 1 << 20).unwrap();
    (Hypergrid::new(spec).unwrap(), target)
}

/// Benchmark settings: 20000 steps, 16 trajectories per step, lr 1e-4, eps 5e-4.
fn bench_cfg(seed: u64) -> TrainConfig {
    TrainConfig { seed, ..TrainConfig::default() }
}

fn jfn_runs() -> &'static Vec<TrainResult> {
    static RUNS: OnceLock<Vec<TrainResult>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let (env, target) = v1();
        SEEDS.iter().map(|&s| train_jfn(&env, bench_cfg(s), Some(target.clone())).unwrap()).collect()
    })
}

fn final_l1(r: &TrainResult) -> f64 {
    r.outcome.rows.last().and_then(|row| row.l1_error).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

struct ExactInstance {
    env: Hypergrid,
    table: FlowParams,
    loss: f64,
    l1: f64,
    z: f64,
    secs: f64,
}

fn exact_instance() -> &'static ExactInstance {
    static INST: OnceLock<ExactInstance> = OnceLock::new();
    INST.get_or_init(|| {
        let start = Instant::now();
        let spec = HypergridSpec::new(1, 1, 2);
        let env = Hypergrid::new(spec).unwrap();
        let (z, target) = partition_function(&spec, 100).unwrap();
        let cfg = TrainConfig { train_steps: 2000, lr: 1e-2, g: GSpec::Square, eval_interval: 100, ..TrainConfig::default() };
        let res = train_cfn(&env, cfg, Some(target.clone())).unwrap();
        let g = GlobalSpace::of_grid(env.grid()).unwrap();
        let table = res.tables[0].clone();
        let mut batch = StateBatch::new();
        for k in reachable_keys(&g, 100).unwrap() {
            let r = if g.is_terminal(k) { spec.reward(&g.decode(k).positions).unwrap() } else { 0.0 };
            batch.push(k, r);
        }
        let loss = fm_loss(&FlowView::new(&table, &g), &batch, GSpec::Square, LossKind::Stable).unwrap();
        let dist = exact_terminal_distribution(&GlobalPolicy::new(&table, &g), env.grid(), 100).unwrap();
        let l1 = l1_error(&dist, &target).unwrap();
        ExactInstance { env, table, loss, l1, z, secs: start.elapsed().as_secs_f64() }
    })
}

#[test]
fn criterion_01_exact_solve() {
    let inst = exact_instance();
    let pass = inst.loss < 1e-8 && inst.l1 < 1e-4 && inst.secs < 5.0;
    report(1, pass, &format!("loss {:.3e}, L1 {:.3e}, {:.2}s", inst.loss, inst.l1, inst.secs));
}

/// Local flows computed straight from the raw parameters.
struct LocalOracle<'a> {
    p: &'a FlowParams,
}

impl LocalOracle<'_> {
    fn probs(&self, key: u64) -> Vec<f64> {
        let logits = self.p.logits(key).unwrap();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }

    fn out_star(&self, key: u64) -> f64 {
        if key.is_multiple_of(2) {
            self.p.log_out_star(key).exp()
        } else {
            self.star_in(key)
        }
    }

    /// Inflow excluding the initial mass (one dimension).
    fn star_in(&self, key: u64) -> f64 {
        let x = key / 2;
        if key % 2 == 1 {
            let twin = key - 1;
            let pr = self.probs(twin);
            return self.out_star(twin) * pr[pr.len() - 1];
        }
        if x == 0 {
            return 0.0;
        }
        let parent = (x - 1) * 2;
        self.out_star(parent) * self.probs(parent)[0]
    }
}

fn random_table<S: StateSpace>(space: &S, keys: &[u64], rng: &mut ChaCha8Rng) -> FlowParams {
    let mut p = FlowParams::new();
    let mut scratch = Vec::new();
    for &k in keys {
        p.ensure_for(space, k, &mut scratch);
    }
    for v in p.values_mut() {
        *v = rng.gen_range(-1.5..1.5);
    }
    p
}

#[test]
fn criterion_02_split_identity() {
    let start = Instant::now();
    let g = GlobalSpace::new(2, 1, 4).unwrap();
    let keys = reachable_keys(&g, 100_000).unwrap();
    let local_keys: Vec<u64> = (0..g.local.n_keys()).filter(|&k| g.local.n_actions(k) > 0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let a = random_table(&g.local, &local_keys, &mut rng);
        let b = random_table(&g.local, &local_keys, &mut rng);
        let j = JointView::new(vec![&a, &b], g);
        let oa = LocalOracle { p: &a };
        let ob = LocalOracle { p: &b };
        for &key in &keys {
            let lk = g.local_keys(key);
            let out = oa.out_star(lk[0]) * ob.out_star(lk[1]);
            let inflow = if key == g.start_key() {
                a.log_init_mass().exp() * b.log_init_mass().exp() + oa.star_in(lk[0]) * ob.star_in(lk[1])
            } else {
                oa.star_in(lk[0]) * ob.star_in(lk[1])
            };
            worst = worst.max(rel(j.joint_out_star(key).unwrap(), out));
            worst = worst.max(rel(j.joint_in_flow(key).unwrap(), inflow));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(2, worst <= 1e-12 && secs < 10.0, &format!("worst relative error {worst:.3e} over {} states, {secs:.2}s", keys.len()));
}

fn fd_worst(
    tables: &mut [FlowParams],
    loss: impl Fn(&[FlowParams]) -> f64,
    grad: impl Fn(&[FlowParams]) -> Gradient,
) -> f64 {
    let grad = grad(tables);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for t in 0..tables.len() {
        for i in 0..tables[t].len() {
            let orig = tables[t].values()[i];
            tables[t].values_mut()[i] = orig + h;
            let up = loss(tables);
            tables[t].values_mut()[i] = orig - h;
            let down = loss(tables);
            tables[t].values_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grad.dense(t, i);
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
        }
    }
    worst
}

#[test]
fn criterion_03_gradient_oracle() {
    let start = Instant::now();
    let g = GlobalSpace::new(2, 1, 3).unwrap();
    let keys = reachable_keys(&g, 100_000).unwrap();
    let global_keys: Vec<u64> = keys.iter().copied().filter(|&k| !g.is_terminal(k)).collect();
    let local_keys: Vec<u64> = (0..g.local.n_keys()).filter(|&k| g.local.n_actions(k) > 0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for _ in 0..100 {
        let mut batch = StateBatch::new();
        for _ in 0..6 {
            batch.push(keys[rng.gen_range(0..keys.len())], rng.gen_range(0.1..3.0));
        }
        for gs in [GSpec::Square, GSpec::LogPoly { alpha: 1.0, beta: 1.0 }] {
            let mut cfn = vec![random_table(&g, &global_keys, &mut rng)];
            worst = worst.max(fd_worst(
                &mut cfn,
                |t| fm_loss(&FlowView::new(&t[0], &g), &batch, gs, LossKind::Stable).unwrap(),
                |t| loss_and_gradient(&FlowView::new(&t[0], &g), &batch, gs, LossKind::Stable).unwrap().1,
            ));
            let mut jfn = vec![random_table(&g.local, &local_keys, &mut rng), random_table(&g.local, &local_keys, &mut rng)];
            worst = worst.max(fd_worst(
                &mut jfn,
                |t| fm_loss(&JointView::new(t.iter().collect(), g), &batch, gs, LossKind::Stable).unwrap(),
                |t| loss_and_gradient(&JointView::new(t.iter().collect(), g), &batch, gs, LossKind::Stable).unwrap().1,
            ));
            pairs += 2;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(3, worst <= 1e-4 && secs < 60.0, &format!("worst relative error {worst:.3e} over {pairs} table/batch pairs, {secs:.2}s"));
}

#[test]
fn criterion_04_mode_discovery() {
    let (env, target) = v1();
    let n_modes = mode_set(&env.spec, 1 << 20).unwrap().len();
    let jfn: Vec<usize> = jfn_runs().iter().map(|r| r.modes_found).collect();
    let ifn: Vec<usize> = SEEDS
        .iter()
        .map(|&s| train_ifn(&env, bench_cfg(s), Some(target.clone())).unwrap().modes_found)
        .collect();
    let jfn_ok = jfn.iter().all(|&m| m + 1 >= n_modes);
    let ifn_fewer = jfn.iter().zip(&ifn).filter(|(j, i)| i < j).count();
    let pass = n_modes == 16 && jfn_ok && ifn_fewer >= 4;
    report(4, pass, &format!("{n_modes} modes; jfn {jfn:?}; ifn {ifn:?}; ifn strictly fewer in {ifn_fewer}/5 seeds"));
}

#[test]
fn criterion_05_l1_trend() {
    let (env, target) = v1();
    let budget = 20_000 * 16;
    let mut wins = 0;
    let mut detail = Vec::new();
    for (r, &s) in jfn_runs().iter().zip(&SEEDS) {
        let l0 = r.outcome.initial.as_ref().and_then(|e| e.l1_error).unwrap();
        let l_end = final_l1(r);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let samples = mcmc_run(&env, budget, default_burn_in(budget), DEFAULT_THINNING, &mut rng).unwrap();
        let mcmc = l1_error(&empirical_terminal_distribution(&samples, env.spec.side).unwrap(), &target).unwrap();
        if l_end < 0.5 * l0 && l_end < mcmc {
            wins += 1;
        }
        detail.push(format!("seed {s}: {l0:.3}->{l_end:.3} vs mcmc {mcmc:.3}"));
    }
    report(5, wins >= 4, &format!("{wins}/5 seeds; {}", detail.join("; ")));
}

fn magfn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_magfn"))
}

fn run_cli(dir: &Path, name: &str, config: &str) -> Vec<u8> {
    let cfg = dir.join(format!("{name}.cfg"));
    let out = dir.join(name);
    std::fs::write(&cfg, format!("{config}\nout_dir = {}\n", out.display())).unwrap();
    let status = magfn().arg("run").arg(&cfg).env_remove("MAGFN_SEED").status().unwrap();
    assert!(status.success(), "run {name} failed");
    std::fs::read(out.join("metrics.csv")).unwrap()
}

#[test]
fn criterion_06_cjfn_degeneracy() {
    let dir = tempfile::tempdir().unwrap();
    let base = "preset = v1\nseed = 7\nn_omega = 1";
    let jfn = run_cli(dir.path(), "jfn", &format!("{base}\nalgorithm = jfn"));
    let cjfn = run_cli(dir.path(), "cjfn", &format!("{base}\nalgorithm = cjfn"));
    let identical = jfn == cjfn;

    let (env, target) = v1();
    let cj: Vec<usize> = SEEDS
        .iter()
        .map(|&s| train_cjfn(&env, TrainConfig { n_omega: 4, ..bench_cfg(s) }, Some(target.clone())).unwrap().modes_found)
        .collect();
    let j: Vec<usize> = jfn_runs().iter().map(|r| r.modes_found).collect();
    let mean = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len() as f64;
    let parity = mean(&cj) >= mean(&j) - 1.0;
    report(
        6,
        identical && parity,
        &format!("K=1 metrics identical: {identical}; K=4 modes {cj:?} (mean {:.1}) vs jfn {j:?} (mean {:.1})", mean(&cj), mean(&j)),
    );
}

#[test]
fn criterion_07_stopping_time_bound() {
    let start = Instant::now();
    let inst = exact_instance();
    let g = GlobalSpace::of_grid(inst.env.grid()).unwrap();
    let policy = GlobalPolicy::new(&inst.table, &g);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let st = stopping_time_stats(&policy, &inst.env, 100_000, &mut rng, inst.z, 100).unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        7,
        st.bound_holds(3.0) && secs < 30.0,
        &format!("mean tau {:.4} +- {:.4}, bound {:.4}, {secs:.2}s", st.mean_tau, st.std_error, st.bound),
    );
}

#[test]
fn criterion_08_local_matching_implies_joint() {
    let g = GlobalSpace::new(2, 1, 4).unwrap();
    let reward = |agent: usize| move |k: u64| if LocalSpace::is_alive_key(k) { 0.0 } else { 0.3 + (agent as f64 + 1.0) * (k / 2) as f64 };
    let a = exact_solution(&g.local, reward(0), 1000).unwrap();
    let b = exact_solution(&g.local, reward(1), 1000).unwrap();
    let j = JointView::new(vec![&a, &b], g);
    let rep = theorem_checks(&j, 100_000).unwrap();
    let mut worst_product: f64 = 0.0;
    for key in reachable_keys(&g, 100_000).unwrap().into_iter().filter(|&k| g.is_terminal(k)) {
        let lk = g.local_keys(key);
        worst_product = worst_product.max((j.virtual_reward(key).unwrap() - reward(0)(lk[0]) * reward(1)(lk[1])).abs());
    }
    let pass = rep.max_joint_alive_residual <= 1e-10 && rep.max_terminal_product_error <= 1e-10 && worst_product <= 1e-10;
    report(
        8,
        pass,
        &format!(
            "joint alive residual {:.3e}, terminal product gap {:.3e}, reward product gap {worst_product:.3e}",
            rep.max_joint_alive_residual, rep.max_terminal_product_error
        ),
    );
}

#[test]
fn criterion_09_mcmc() {
    let spec4 = HypergridSpec::new(1, 1, 4);
    let env4 = Hypergrid::new(spec4).unwrap();
    let (_, pi) = partition_function(&spec4, 100).unwrap();
    let k = kernel_matrix(&env4, 100).unwrap();
    let mut worst: f64 = 0.0;
    for x in 0..k.len() {
        for y in 0..k.len() {
            worst = worst.max((pi.get(x as u64) * k[x][y] - pi.get(y as u64) * k[y][x]).abs());
        }
    }
    let spec8 = HypergridSpec::new(1, 1, 8);
    let env8 = Hypergrid::new(spec8).unwrap();
    let (_, target) = partition_function(&spec8, 100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 1_000_000;
    let samples = mcmc_run(&env8, n, default_burn_in(n), DEFAULT_THINNING, &mut rng).unwrap();
    let l1 = l1_error(&empirical_terminal_distribution(&samples, 8).unwrap(), &target).unwrap();
    report(9, worst <= 1e-12 && l1 < 0.05, &format!("detailed balance gap {worst:.3e}, chain L1 {l1:.4}"));
}

#[test]
fn criterion_10_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut same = true;
    let mut checked = Vec::new();
    for (alg, steps) in [("jfn", 2000), ("cfn", 500), ("ifn", 500), ("cjfn", 500), ("mcmc", 2000)] {
        let config = format!("preset = v1\nalgorithm = {alg}\ntrain_steps = {steps}\nseed = 5\ncheckpoint_interval = 250");
        let m1 = run_cli(dir.path(), &format!("{alg}_a"), &config);
        let m2 = run_cli(dir.path(), &format!("{alg}_b"), &config);
        let c1 = std::fs::read(dir.path().join(format!("{alg}_a/checkpoint.txt"))).unwrap();
        let c2 = std::fs::read(dir.path().join(format!("{alg}_b/checkpoint.txt"))).unwrap();
        let ok = m1 == m2 && c1 == c2 && !m1.is_empty();
        same &= ok;
        checked.push(format!("{alg}: {}", if ok { "identical" } else { "differs" }));
    }
    report(10, same, &checked.join(", "));
}
