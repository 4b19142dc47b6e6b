//! Run records: everything needed for post-hoc invariant audits persists in
//! JSON-lines logs (one record per iteration plus a header and a summary).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::policy::Policy;

pub const SCHEMA: &str = "opsdp.run.v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub schema: String,
    pub seed: u64,
    pub params: Params,
    pub horizon: usize,
    pub feature_dim: usize,
    pub action_count: usize,
    pub layer_sizes: Vec<usize>,
}

/// Per-layer record of one iteration's updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    /// Value parameter fitted in the backward sweep.
    pub theta_hat: Vec<f64>,
    /// Largest fit discrepancy per bonus layer, `(target layer, |Delta|)`.
    pub delta_max: Vec<(usize, f64)>,
    /// Preconditioning witnesses applied this step, `(target layer, w)`.
    pub extends: Vec<(usize, Vec<f64>)>,
    /// New design direction and its policy/vector pair.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub kappa: f64,
    /// `||u||` in the inverse regularized design norm, before the update.
    pub u_design_norm: f64,
    pub new_pair_policy: Policy,
    /// Expected gated bonus at this layer under the iteration's policy.
    pub expected_bonus: f64,
    /// Exact-mode audit margin: `2 sqrt(d) ||u|| - E[max_a ||phi||]`,
    /// minimized over the rollout mixture (present when auditing).
    pub domination_margin: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub j_hat: f64,
    pub best_j: f64,
    pub best_tau: usize,
    pub csc_calls_cum: usize,
    pub episodes_cum: u64,
    pub layers: Vec<LayerRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipticalRecord {
    pub layer: usize,
    /// `sum_t ||u^(t)||_{(beta I + U^(t))^{-1}}`.
    pub potential: f64,
    /// `sqrt(T d ln(1 + T / beta))`.
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_tau: usize,
    pub j_best: f64,
    /// Exact value of the returned policy.
    pub j_returned: f64,
    pub j_optimal: Option<f64>,
    pub suboptimality: Option<f64>,
    pub episodes: u64,
    pub csc_calls: usize,
    pub csc_call_budget: usize,
    pub extends_per_layer: Vec<usize>,
    pub elliptical: Vec<EllipticalRecord>,
    /// Witness lists of the final preconditioners, per layer.
    pub precond_witnesses: Vec<Vec<Vec<f64>>>,
    pub returned_policy: Policy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub header: RunHeader,
    pub iterations: Vec<IterationRecord>,
    pub summary: RunSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(RunHeader),
    Iteration(IterationRecord),
    Summary(RunSummary),
}

impl RunMetrics {
    /// One JSON document per line: header, iterations, summary.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&Line::Header(self.header.clone()))?);
        out.push('\n');
        for it in &self.iterations {
            out.push_str(&serde_json::to_string(&Line::Iteration(it.clone()))?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&Line::Summary(self.summary.clone()))?);
        out.push('\n');
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<RunMetrics> {
        let mut header = None;
        let mut iterations = Vec::new();
        let mut summary = None;
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Line>(line)? {
                Line::Header(h) => header = Some(h),
                Line::Iteration(it) => iterations.push(it),
                Line::Summary(s) => summary = Some(s),
            }
        }
        Ok(RunMetrics {
            header: header.ok_or_else(|| Error::InvalidParam("log has no header".into()))?,
            iterations,
            summary: summary.ok_or_else(|| Error::InvalidParam("log has no summary".into()))?,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<RunMetrics> {
        RunMetrics::from_jsonl(&std::fs::read_to_string(path)?)
    }

    /// Per-iteration suboptimality rows as CSV for plotting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,j_hat,best_j,csc_calls,episodes\n");
        for it in &self.iterations {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                it.t, it.j_hat, it.best_j, it.csc_calls_cum, it.episodes_cum
            ));
        }
        s
    }
}
