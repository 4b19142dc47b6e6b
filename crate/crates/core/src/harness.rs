//! Experiment configuration and persistence: resolve an MDP source, apply
//! parameter overrides, run (possibly repeated with disjoint seeds), write
//! logs.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::csc::{CscOracle, OracleBackend};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::io;
use crate::mdp::LayeredMdp;
use crate::metrics::RunMetrics;
use crate::params::Params;
use crate::psdp;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "OPSDP_OUT_DIR";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Path to an MDP file, or `fixture:NAME`.
    pub mdp: String,
    /// `desk` or `theory`.
    pub profile: String,
    /// `key=value` parameter overrides; CLI flags take precedence over the
    /// profile defaults.
    pub overrides: Vec<String>,
    pub seed: u64,
    /// `cells` is the only full backend; `brute:<n>` scans n random benchmark
    /// policies and exists as a cross-check.
    pub backend: String,
    pub out_dir: Option<PathBuf>,
    pub repeat: usize,
}

impl ExperimentConfig {
    pub fn new(mdp: impl Into<String>) -> Self {
        ExperimentConfig {
            mdp: mdp.into(),
            profile: "desk".into(),
            overrides: Vec::new(),
            seed: 0,
            backend: "cells".into(),
            out_dir: None,
            repeat: 1,
        }
    }

    pub fn load_mdp(&self) -> Result<LayeredMdp> {
        if let Some(name) = self.mdp.strip_prefix("fixture:") {
            return fixtures::by_name(name).ok_or_else(|| {
                Error::InvalidParam(format!(
                    "unknown fixture {name:?}; available: T1, C3, L1, X1"
                ))
            });
        }
        io::load_mdp(&self.mdp)
    }

    pub fn params(&self, mdp: &LayeredMdp) -> Result<Params> {
        let mut params = match self.profile.as_str() {
            "desk" => Params::desk(),
            "theory" => Params::theory(0.1, 0.05, mdp)?,
            other => {
                return Err(Error::InvalidParam(format!(
                    "unknown profile {other:?}; use desk or theory"
                )))
            }
        };
        for o in &self.overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| {
                Error::InvalidParam(format!("override {o:?} is not key=value"))
            })?;
            params.set(key.trim(), value.trim())?;
        }
        params.validate()?;
        Ok(params)
    }

    pub fn oracle(&self, mdp: &LayeredMdp, params: &Params) -> Result<CscOracle> {
        match self.backend.as_str() {
            "cells" => Ok(CscOracle::cells(params.gate_vectors)),
            other => {
                if let Some(n) = other.strip_prefix("brute:") {
                    let n: usize = n
                        .parse()
                        .map_err(|_| Error::InvalidParam(format!("bad backend {other:?}")))?;
                    let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(
                        self.seed ^ 0xb10c,
                    );
                    let policies = (0..n)
                        .map(|_| random_benchmark_policy(mdp, &mut rng))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(CscOracle::new(OracleBackend::BruteForce(policies)))
                } else {
                    Err(Error::InvalidParam(format!(
                        "unknown backend {other:?}; use cells or brute:<n>"
                    )))
                }
            }
        }
    }

    pub fn resolve_out_dir(&self) -> Option<PathBuf> {
        self.out_dir
            .clone()
            .or_else(|| std::env::var(OUT_DIR_ENV).ok().map(PathBuf::from))
    }
}

fn random_benchmark_policy(
    mdp: &LayeredMdp,
    rng: &mut impl rand::Rng,
) -> Result<crate::policy::Policy> {
    use crate::policy::Policy;
    use nalgebra::DVector;
    let d = mdp.feature_dim();
    let h = mdp.horizon() as f64;
    let mut ball = |r: f64| -> DVector<f64> {
        let v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0f64));
        let n = v.norm().max(1e-12);
        &v / n * r
    };
    let g = mdp.feature_dim();
    let gates = (0..g).map(|_| ball(h * 0.9)).collect();
    let on = Policy::linear_argmax(ball(h * 0.9));
    let off = Policy::linear_argmax(ball(h * 0.9));
    Policy::gated_benchmark(gates, 0.1, on, off)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub mean_suboptimality: Option<f64>,
    pub stderr_suboptimality: Option<f64>,
    pub mean_j: f64,
    pub total_episodes: u64,
}

/// Run the configured experiment `repeat` times with disjoint seeds,
/// persisting one log per run when an output directory is configured.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(Vec<RunMetrics>, Aggregate)> {
    let mdp = config.load_mdp()?;
    let params = config.params(&mdp)?;
    let out_dir = config.resolve_out_dir();
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut all = Vec::with_capacity(config.repeat.max(1));
    for i in 0..config.repeat.max(1) {
        let seed = config.seed.wrapping_add(i as u64);
        let mut oracle = config.oracle(&mdp, &params)?;
        let (_, metrics) = psdp::run(&mdp, &params, &mut oracle, seed)?;
        if let Some(dir) = &out_dir {
            metrics.save(dir.join(format!("run_{seed}.jsonl")))?;
            std::fs::write(dir.join(format!("run_{seed}.csv")), metrics.to_csv())?;
        }
        all.push(metrics);
    }
    let subs: Vec<f64> = all
        .iter()
        .filter_map(|m| m.summary.suboptimality)
        .collect();
    let mean_j = all.iter().map(|m| m.summary.j_returned).sum::<f64>() / all.len() as f64;
    let aggregate = if subs.is_empty() {
        Aggregate {
            runs: all.len(),
            mean_suboptimality: None,
            stderr_suboptimality: None,
            mean_j,
            total_episodes: all.iter().map(|m| m.summary.episodes).sum(),
        }
    } else {
        let n = subs.len() as f64;
        let mean = subs.iter().sum::<f64>() / n;
        let var = subs.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n.max(1.0);
        Aggregate {
            runs: all.len(),
            mean_suboptimality: Some(mean),
            stderr_suboptimality: Some((var / n).sqrt()),
            mean_j,
            total_episodes: all.iter().map(|m| m.summary.episodes).sum(),
        }
    };
    Ok((all, aggregate))
}
