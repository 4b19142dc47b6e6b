//! `opsdp`: run the algorithm, verify structural properties, enumerate sign
//! regions, and manage fixtures from the command line.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use nalgebra::DVector;

use opsdp_core::csc::cells::{bfs_sign_regions, DEFAULT_CELL_CAP};
use opsdp_core::csc::lp::DEFAULT_STRICT_TOL;
use opsdp_core::harness::{run_experiment, ExperimentConfig, OUT_DIR_ENV};
use opsdp_core::verify::{verify_suite, VerifyOptions};
use opsdp_core::{fixtures, io};

#[derive(Parser)]
#[command(
    name = "opsdp",
    about = "Optimistic policy search by dynamic programming for linearly Q-realizable layered MDPs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the algorithm on an MDP and write metrics logs.
    Run {
        /// Experiment config file (JSON); command-line flags override its
        /// fields, which override the profile defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// MDP file path, or fixture:NAME (T1, C3, L1, X1).
        #[arg(long)]
        mdp: Option<String>,
        /// Parameter profile: desk or theory.
        #[arg(long)]
        profile: Option<String>,
        /// key=value parameter overrides (repeatable). Keys: eps, delta, T,
        /// n_traj, mu, nu, lambda, beta, eps_prime, mode, gate_vectors,
        /// path_cap, audit, c.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Oracle backend: cells, or brute:<n> for a random-policy scan.
        #[arg(long)]
        oracle: Option<String>,
        /// Expectation mode shorthand: exact or sampled.
        #[arg(long)]
        mode: Option<String>,
        /// Output directory for jsonl/csv logs (default: $OPSDP_OUT_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Independent repeats with consecutive seeds.
        #[arg(long)]
        repeat: Option<usize>,
    },
    /// Run the structural verification suite against an MDP.
    Verify {
        #[arg(long)]
        mdp: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random draws per identity check.
        #[arg(long, default_value_t = 30)]
        draws: usize,
        /// Write the JSON report here as well as printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Enumerate the sign regions of a halfspace family.
    Enumerate {
        /// Input file: one normal vector per line, comma- or
        /// whitespace-separated coordinates.
        #[arg(long)]
        input: PathBuf,
        /// Write the cell report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the named fixtures as MDP files.
    Fixtures {
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Time the main components on the shipped fixtures.
    Bench {
        /// Iterations for the timed runs.
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() {
    if let Err(e) = dispatch() {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}

fn dispatch() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            mdp,
            profile,
            mut overrides,
            seed,
            oracle,
            mode,
            out,
            repeat,
        } => {
            if let Some(mode) = mode {
                overrides.push(format!("mode={mode}"));
            }
            // Precedence: command-line flags > config file > profile defaults.
            let mut config = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str::<ExperimentConfig>(&text)
                        .with_context(|| format!("parsing {}", path.display()))?
                }
                None => ExperimentConfig::new(
                    mdp.clone()
                        .ok_or_else(|| anyhow::anyhow!("--mdp or --config is required"))?,
                ),
            };
            if let Some(mdp) = mdp {
                config.mdp = mdp;
            }
            if let Some(profile) = profile {
                config.profile = profile;
            }
            if config.profile.is_empty() {
                config.profile = "desk".into();
            }
            // Later overrides win, so flag-level settings land after the
            // config file's.
            config.overrides.extend(overrides);
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(oracle) = oracle {
                config.backend = oracle;
            }
            if config.backend.is_empty() {
                config.backend = "cells".into();
            }
            if let Some(out) = out {
                config.out_dir = Some(out);
            }
            if let Some(repeat) = repeat {
                config.repeat = repeat;
            }
            if config.repeat == 0 {
                config.repeat = 1;
            }
            let (runs, aggregate) = run_experiment(&config)?;
            for m in &runs {
                let s = &m.summary;
                println!(
                    "seed {}: J = {:.6}, best iteration {}, episodes {}, oracle calls {}{}",
                    m.header.seed,
                    s.j_returned,
                    s.best_tau,
                    s.episodes,
                    s.csc_calls,
                    s.suboptimality
                        .map(|v| format!(", suboptimality {v:.6}"))
                        .unwrap_or_default()
                );
            }
            if runs.len() > 1 {
                println!(
                    "aggregate over {} runs: mean suboptimality {:.6} (stderr {:.6})",
                    aggregate.runs,
                    aggregate.mean_suboptimality.unwrap_or(f64::NAN),
                    aggregate.stderr_suboptimality.unwrap_or(f64::NAN)
                );
            }
            if config.resolve_out_dir().is_none() {
                eprintln!(
                    "note: no output directory (use --out or ${OUT_DIR_ENV}); logs not persisted"
                );
            }
            Ok(())
        }
        Command::Verify {
            mdp,
            seed,
            draws,
            out,
        } => {
            let config = ExperimentConfig::new(mdp);
            let mdp = config.load_mdp()?;
            let report = verify_suite(
                &mdp,
                &VerifyOptions {
                    seed,
                    draws,
                    ..VerifyOptions::default()
                },
            )?;
            print!("{}", report.render());
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if !report.all_passed {
                std::process::exit(1);
            }
            Ok(())
        }
        Command::Enumerate { input, out } => {
            let text = std::fs::read_to_string(&input)
                .with_context(|| format!("reading {}", input.display()))?;
            let mut vectors = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let coords: Vec<f64> = line
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|t| !t.is_empty())
                    .map(|t| {
                        t.parse()
                            .with_context(|| format!("{}:{}: bad number {t:?}", input.display(), i + 1))
                    })
                    .collect::<Result<_>>()?;
                if coords.is_empty() {
                    continue;
                }
                vectors.push(DVector::from_vec(coords));
            }
            if vectors.is_empty() {
                bail!("no normals found in {}", input.display());
            }
            let dim = vectors[0].len();
            if vectors.iter().any(|v| v.len() != dim) {
                bail!("normals have inconsistent dimensions");
            }
            let cells = bfs_sign_regions(&vectors, DEFAULT_CELL_CAP, DEFAULT_STRICT_TOL)?;
            println!(
                "{} vectors in R^{dim}: {} feasible sign regions",
                vectors.len(),
                cells.cells.len()
            );
            for (i, cell) in cells.cells.iter().enumerate() {
                let signs: String = cell
                    .signs
                    .iter()
                    .map(|&s| if s { '+' } else { '-' })
                    .collect();
                let rep: Vec<String> = cell
                    .representative
                    .iter()
                    .map(|v| format!("{v:.6}"))
                    .collect();
                println!(
                    "cell {i}: signs {signs} margin {:.3e} rep [{}]",
                    cell.margin,
                    rep.join(", ")
                );
            }
            if let Some(path) = out {
                let report: Vec<serde_json::Value> = cells
                    .cells
                    .iter()
                    .map(|c| {
                        serde_json::json!({
                            "signs": c.signs,
                            "representative": c.representative.iter().cloned().collect::<Vec<f64>>(),
                            "margin": c.margin,
                        })
                    })
                    .collect();
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            }
            Ok(())
        }
        Command::Fixtures { out_dir } => {
            std::fs::create_dir_all(&out_dir)?;
            for (name, mdp) in fixtures::fixtures() {
                let path = out_dir.join(format!("{name}.mdp"));
                io::save_mdp(&mdp, &path)?;
                println!(
                    "{}: H = {}, layers {:?}, A = {}, d = {}",
                    path.display(),
                    mdp.horizon(),
                    mdp.layer_sizes(),
                    mdp.num_actions(),
                    mdp.feature_dim()
                );
            }
            Ok(())
        }
        Command::Bench { iters, seed } => {
            for (name, _) in fixtures::fixtures() {
                if name == "X1" {
                    continue;
                }
                let mut config = ExperimentConfig::new(format!("fixture:{name}"));
                config.overrides = vec![format!("T={iters}")];
                config.seed = seed;
                let start = std::time::Instant::now();
                let (runs, _) = run_experiment(&config)?;
                let m = &runs[0];
                println!(
                    "{name}: {iters} exact iterations in {:.2?} (suboptimality {:.6}, {} oracle calls)",
                    start.elapsed(),
                    m.summary.suboptimality.unwrap_or(f64::NAN),
                    m.summary.csc_calls
                );
            }
            Ok(())
        }
    }
}
