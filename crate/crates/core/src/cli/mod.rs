//! The `magfn` command line: `run`, `summarize` and `eval`.
//!
//! Configuration problems exit with status 2 before anything is written;
//! failures during a run exit with status 1.

pub mod config;
pub mod svg;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{empirical_terminal_distribution, l1_error};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::hypergrid::{partition_function, terminal_index, Hypergrid, DEFAULT_ENUMERATION_CAP};
use crate::mcmc::McmcChain;
use crate::measure::DiscreteMeasure;
use crate::trainer::{Algorithm, Checkpoint, DiagnosticRow, MetricsRow, Trainer};

pub use config::{EnvConfig, RunConfig};

pub const METRICS_HEADER: [&str; 6] = ["step", "loss", "l1_error", "modes_found", "mean_tau", "wall_ms"];
pub const SEED_VAR: &str = "MAGFN_SEED";

#[derive(Debug, Parser)]
#[command(name = "magfn", version, about = "Multi-agent flow networks on hyper-grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train (or sample, for mcmc) as described by a config file.
    Run {
        config: PathBuf,
        /// Output directory, overriding `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare finished runs.
    Summarize {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Directory for summary.csv and summary.svg.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Evaluate the sampler stored in a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        rollouts: usize,
    },
}

#[derive(Debug)]
pub enum Failure {
    Usage(Error),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn error(&self) -> &Error {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => e,
        }
    }
}

/// Runs a parsed command, printing errors to stderr; returns the exit code.
pub fn execute(cli: Cli) -> i32 {
    let seed = std::env::var(SEED_VAR).ok();
    let result = match cli.command {
        Command::Run { config, out, resume } => run(&config, out.as_deref(), resume.as_deref(), seed.as_deref()),
        Command::Summarize { dirs, out } => summarize(&dirs, &out).map_err(Failure::Runtime),
        Command::Eval { checkpoint, rollouts } => eval(&checkpoint, rollouts).map_err(Failure::Runtime),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.error());
            f.exit_code()
        }
    }
}

/// Reads, overrides and validates a config without touching the filesystem
/// beyond reading it.
pub fn load_config(path: &Path, out: Option<&Path>, seed: Option<&str>) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg.override_seed(s)?;
    }
    if let Some(o) = out {
        cfg.out_dir = o.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn target_of(env: &Hypergrid) -> Option<DiscreteMeasure> {
    partition_function(&env.spec, DEFAULT_ENUMERATION_CAP).ok().map(|(_, t)| t)
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn fmt_f(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn metrics_record(r: &MetricsRow) -> [String; 6] {
    [
        r.step.to_string(),
        fmt_f(r.loss),
        fmt_f(r.l1_error),
        r.modes_found.to_string(),
        fmt_f(r.mean_tau),
        r.wall_ms.map(|w| w.to_string()).unwrap_or_default(),
    ]
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

fn read_csv(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    r.records().collect::<std::result::Result<_, _>>().map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn curves(rows: &[Vec<String>]) -> String {
    let col = |i: usize| -> Vec<(f64, f64)> {
        rows.iter()
            .filter_map(|r| Some((r[0].parse().ok()?, r[i].parse().ok()?)))
            .collect()
    };
    let panel = |title: &str, i: usize, log_y: bool| svg::Panel {
        title: title.into(),
        series: vec![svg::Series { name: title.into(), points: col(i) }],
        log_y,
    };
    svg::render(&[panel("loss", 1, true), panel("l1_error", 2, false), panel("modes_found", 3, false)])
}

struct RunArtifacts {
    metrics: Vec<Vec<String>>,
    diagnostics: Vec<Vec<String>>,
    checkpoint: String,
}

fn diag_record(d: &DiagnosticRow) -> Vec<String> {
    vec![d.step.to_string(), d.key.clone(), d.value.to_string()]
}

/// `magfn run`.
pub fn run(path: &Path, out: Option<&Path>, resume: Option<&Path>, seed: Option<&str>) -> std::result::Result<(), Failure> {
    let cfg = load_config(path, out, seed).map_err(Failure::Usage)?;
    let env = cfg.env.build().map_err(Failure::Usage)?;
    let env_json = serde_json::to_string(&cfg.env).expect("env config serializes");
    let started = Instant::now();

    let mut trainer = if cfg.train.algorithm == Algorithm::Mcmc {
        if resume.is_some() {
            return Err(Failure::Usage(Error::Config("mcmc runs cannot be resumed".into())));
        }
        None
    } else {
        let t = match resume {
            None => Trainer::new(&env, cfg.train.clone()),
            Some(ck) => resume_trainer(&env, &cfg, ck),
        }
        .map_err(Failure::Usage)?;
        Some(t.with_target(target_of(&env)))
    };
    for w in env.spec.warnings() {
        eprintln!("warning: {w}");
    }

    let dir = cfg.out_dir.clone();
    let setup = || -> Result<()> {
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("config.resolved.json"), &(cfg.to_json() + "\n"))
    };
    setup().map_err(Failure::Runtime)?;

    let artifacts = match trainer.as_mut() {
        Some(t) => run_trainer(t, &cfg, &env_json, resume.is_some(), started),
        None => run_mcmc(&env, &cfg, started),
    }
    .map_err(Failure::Runtime)?;

    let finish = || -> Result<()> {
        write_atomic(&dir.join("metrics.csv"), &csv_text(&METRICS_HEADER, artifacts.metrics.iter().cloned())?)?;
        write_atomic(&dir.join("diagnostics.csv"), &csv_text(&["step", "key", "value"], artifacts.diagnostics.iter().cloned())?)?;
        write_atomic(&dir.join("checkpoint.txt"), &artifacts.checkpoint)?;
        write_atomic(&dir.join("curves.svg"), &curves(&artifacts.metrics))
    };
    finish().map_err(Failure::Runtime)
}

fn resume_trainer<'e>(env: &'e Hypergrid, cfg: &RunConfig, path: &Path) -> Result<Trainer<'e>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let ck = Checkpoint::parse(&text)?;
    let mut expected = cfg.train.clone();
    expected.train_steps = ck.config.train_steps;
    if ck.config != expected {
        return Err(Error::Config("checkpoint was written with a different training config".into()));
    }
    if let Some(e) = &ck.env {
        let saved: EnvConfig = serde_json::from_str(e).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if saved != cfg.env {
            return Err(Error::Config("checkpoint was written for a different environment".into()));
        }
    }
    let mut trainer = Trainer::restore(env, &text)?;
    trainer.set_train_steps(cfg.train.train_steps)?;
    Ok(trainer)
}

fn earlier_rows(path: &Path, upto: u64) -> Result<Vec<Vec<String>>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(read_csv(path)?
        .into_iter()
        .filter(|r| r.get(0).and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= upto))
        .map(|r| r.iter().map(str::to_string).collect())
        .collect())
}

fn run_trainer(
    t: &mut Trainer<'_>,
    cfg: &RunConfig,
    env_json: &str,
    resumed: bool,
    started: Instant,
) -> Result<RunArtifacts> {
    let dir = &cfg.out_dir;
    let (mut metrics, mut diagnostics) = if resumed {
        (earlier_rows(&dir.join("metrics.csv"), t.step())?, earlier_rows(&dir.join("diagnostics.csv"), t.step())?)
    } else {
        (Vec::new(), Vec::new())
    };
    let wall = cfg.record_wall_time;
    let ck_path = dir.join("checkpoint.txt");
    let outcome = t.run_with(
        cfg.checkpoint_interval,
        &mut |row| {
            if wall {
                row.wall_ms = Some(started.elapsed().as_millis() as u64);
            }
        },
        &mut |tr| write_atomic(&ck_path, &tr.checkpoint_text_with_env(Some(env_json))),
    )?;
    metrics.extend(outcome.rows.iter().map(|r| metrics_record(r).to_vec()));
    diagnostics.extend(outcome.diagnostics.iter().map(diag_record));
    Ok(RunArtifacts { metrics, diagnostics, checkpoint: t.checkpoint_text_with_env(Some(env_json)) })
}

fn run_mcmc(env: &Hypergrid, cfg: &RunConfig, started: Instant) -> Result<RunArtifacts> {
    let total = cfg.mcmc_steps()?;
    let burn_in = cfg.mcmc_burn_in();
    let thinning = cfg.mcmc.thinning;
    let tpt = cfg.train.trajectories_per_step as u64;
    let every = cfg.train.eval_interval * tpt;
    let target = target_of(env);
    let side = env.grid().side;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut chain = McmcChain::new(env)?;
    let mut counts = DiscreteMeasure::new(env.grid().n_terminals().unwrap_or(u64::MAX));
    let mut modes = BTreeSet::new();
    let mut metrics = Vec::new();
    for s in 1..=total {
        chain.step(env, &mut rng)?;
        if env.is_mode(&chain.positions) {
            modes.insert(chain.index());
        }
        if s > burn_in && (s - burn_in).is_multiple_of(thinning) {
            counts.add(chain.index(), 1.0);
        }
        if s % every == 0 {
            let l1 = match &target {
                Some(t) if counts.total() > 0.0 => Some(l1_error(&counts.normalized(), t)?),
                _ => None,
            };
            let row = MetricsRow {
                step: s / tpt,
                loss: None,
                l1_error: l1,
                modes_found: modes.len(),
                mean_tau: None,
                wall_ms: cfg.record_wall_time.then(|| started.elapsed().as_millis() as u64),
            };
            metrics.push(metrics_record(&row).to_vec());
        }
    }
    let diagnostics = vec![vec![(total / tpt).to_string(), "acceptance_rate".into(), chain.acceptance_rate().to_string()]];
    let mut checkpoint = format!(
        "magfn-mcmc 1\nsteps\t{}\naccepted\t{}\nrng\t{}\nposition\t{}\n",
        chain.steps,
        chain.accepted,
        rng.get_word_pos(),
        terminal_index(&chain.positions, side)
    );
    for (idx, c) in counts.iter() {
        checkpoint.push_str(&format!("count\t{idx}\t{c}\n"));
    }
    Ok(RunArtifacts { metrics, diagnostics, checkpoint })
}

struct RunMetrics {
    label: String,
    rows: BTreeMap<u64, (String, String)>,
}

fn load_metrics(dir: &Path) -> Result<RunMetrics> {
    let path = dir.join("metrics.csv");
    if !path.is_file() {
        return Err(Error::MissingMetrics(path.display().to_string()));
    }
    let mut rows = BTreeMap::new();
    for r in read_csv(&path)? {
        let step = r
            .get(0)
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| Error::MissingMetrics(format!("{}: bad step column", path.display())))?;
        rows.insert(step, (r.get(2).unwrap_or("").to_string(), r.get(3).unwrap_or("").to_string()));
    }
    let label = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
    Ok(RunMetrics { label, rows })
}

/// `magfn summarize`: aligns runs on the steps they all share.
pub fn summarize(dirs: &[PathBuf], out: &Path) -> Result<()> {
    if dirs.is_empty() {
        return Err(Error::Config("summarize needs at least one run directory".into()));
    }
    let mut runs = dirs.iter().map(|d| load_metrics(d)).collect::<Result<Vec<_>>>()?;
    let mut seen = BTreeMap::new();
    for r in &mut runs {
        let n = seen.entry(r.label.clone()).or_insert(0usize);
        *n += 1;
        if *n > 1 {
            r.label = format!("{}_{}", r.label, n);
        }
    }
    let shared: Vec<u64> = runs[0].rows.keys().copied().filter(|s| runs.iter().all(|r| r.rows.contains_key(s))).collect();
    if runs.iter().any(|r| r.rows.len() != shared.len()) {
        eprintln!("warning: runs have unequal lengths; aligning on {} shared steps", shared.len());
    }
    let mut header = vec!["step".to_string()];
    for r in &runs {
        header.push(format!("{}_l1_error", r.label));
        header.push(format!("{}_modes_found", r.label));
    }
    let table: Vec<Vec<String>> = shared
        .iter()
        .map(|s| {
            let mut row = vec![s.to_string()];
            for r in &runs {
                let (l1, m) = &r.rows[s];
                row.push(l1.clone());
                row.push(m.clone());
            }
            row
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let text = csv_text(&header_refs, table)?;
    print!("{text}");
    let series = |col: usize| -> Vec<svg::Series> {
        runs.iter()
            .map(|r| svg::Series {
                name: r.label.clone(),
                points: shared
                    .iter()
                    .filter_map(|s| {
                        let v = if col == 0 { &r.rows[s].0 } else { &r.rows[s].1 };
                        Some((*s as f64, v.parse().ok()?))
                    })
                    .collect(),
            })
            .collect()
    };
    let overlay = svg::render(&[
        svg::Panel { title: "l1_error".into(), series: series(0), log_y: false },
        svg::Panel { title: "modes_found".into(), series: series(1), log_y: false },
    ]);
    fs::create_dir_all(out)?;
    write_atomic(&out.join("summary.csv"), &text)?;
    write_atomic(&out.join("summary.svg"), &overlay)
}

/// `magfn eval`: rollouts and, when feasible, the exact terminal distribution.
pub fn eval(path: &Path, rollouts: usize) -> Result<()> {
    let text = fs::read_to_string(path)?;
    let ck = Checkpoint::parse(&text)?;
    let env_cfg: EnvConfig = match &ck.env {
        Some(e) => serde_json::from_str(e).map_err(|e| Error::Checkpoint(e.to_string()))?,
        None => return Err(Error::Checkpoint("checkpoint has no environment record".into())),
    };
    let env = env_cfg.build()?;
    let target = target_of(&env);
    let trainer = Trainer::restore(&env, &text)?.with_target(target.clone());
    let report = trainer.evaluate_with(rollouts, trainer.step())?;
    let side = env.grid().side;
    let modes: BTreeSet<u64> =
        report.terminals.iter().filter(|p| env.is_mode(p)).map(|p| terminal_index(p, side)).collect();
    let empirical = match (&target, report.terminals.is_empty()) {
        (Some(t), false) => Some(l1_error(&empirical_terminal_distribution(&report.terminals, side)?, t)?),
        _ => None,
    };
    println!("step = {}", trainer.step());
    println!("algorithm = {}", trainer.config().algorithm.name());
    println!("rollouts = {rollouts}");
    println!("mean_tau = {}", fmt_f(report.mean_tau));
    println!("modes_in_rollouts = {}", modes.len());
    println!("l1_empirical = {}", fmt_f(empirical));
    println!("l1_exact = {}", fmt_f(report.l1_error.filter(|_| report.exact)));
    Ok(())
}
