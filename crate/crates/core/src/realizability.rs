//! Brute-force enumeration of the Q-parameter sets, approximate G-optimal
//! designs, the range and design-range functions, and admissibility checks.
//! This is the verification substrate: it detects non-realizable inputs
//! instead of assuming exactness.

use nalgebra::{DMatrix, DVector};

use crate::dp;
use crate::error::{Error, Result};
use crate::linalg::SpdMatrix;
use crate::mdp::LayeredMdp;
use crate::policy::{d_tilde, Policy};

pub const DEDUPE_TOL: f64 = 1e-9;
pub const REALIZABLE_TOL: f64 = 1e-8;
pub const DEFAULT_POLICY_CAP: f64 = 1e6;

/// The set of per-policy Q-parameters at one layer.
#[derive(Clone, Debug)]
pub struct ThetaSet {
    pub layer: usize,
    /// Min-norm least-squares parameters, one per deterministic policy,
    /// deduplicated within `DEDUPE_TOL`.
    pub thetas: Vec<DVector<f64>>,
    /// Worst linear-fit error across policies.
    pub residual: f64,
    pub realizable: bool,
    /// Largest parameter norm; the realizability assumption needs <= H.
    pub max_theta_norm: f64,
}

impl ThetaSet {
    pub fn sup_abs_inner(&self, w: &DVector<f64>) -> f64 {
        self.thetas
            .iter()
            .map(|t| t.dot(w).abs())
            .fold(0.0, f64::max)
    }
}

/// All deterministic Markov policies, in lexicographic action order.
pub fn enumerate_policies(mdp: &LayeredMdp, cap: f64) -> Result<Vec<Policy>> {
    let count = mdp.policy_count();
    if count > cap {
        return Err(Error::PolicyCapExceeded { count, cap });
    }
    let slots: usize = mdp.layer_sizes().iter().sum();
    let mut assignment = vec![0usize; slots];
    let mut out = Vec::with_capacity(count as usize);
    loop {
        let mut actions = Vec::with_capacity(mdp.horizon());
        let mut i = 0usize;
        for h in 1..=mdp.horizon() {
            let n = mdp.layer_size(h);
            actions.push(assignment[i..i + n].to_vec());
            i += n;
        }
        out.push(Policy::Tabular { actions });
        // Odometer increment.
        let mut pos = 0usize;
        loop {
            if pos == slots {
                return Ok(out);
            }
            assignment[pos] += 1;
            if assignment[pos] < mdp.num_actions() {
                break;
            }
            assignment[pos] = 0;
            pos += 1;
        }
    }
}

fn feature_matrix(mdp: &LayeredMdp, h: usize) -> DMatrix<f64> {
    let rows = mdp.layer_size(h) * mdp.num_actions();
    let mut x_mat = DMatrix::zeros(rows, mdp.feature_dim());
    let mut r = 0usize;
    for x in 0..mdp.layer_size(h) {
        for a in 0..mdp.num_actions() {
            x_mat.row_mut(r).copy_from(&mdp.feature(h, x, a).transpose());
            r += 1;
        }
    }
    x_mat
}

/// Enumerate `Theta_h` for every layer with a single sweep over policies.
pub fn enumerate_theta_all(mdp: &LayeredMdp, tol: f64, cap: f64) -> Result<Vec<ThetaSet>> {
    let policies = enumerate_policies(mdp, cap)?;
    let mut pinvs = Vec::with_capacity(mdp.horizon());
    let mut mats = Vec::with_capacity(mdp.horizon());
    for h in 1..=mdp.horizon() {
        let x_mat = feature_matrix(mdp, h);
        let svd = x_mat.clone().svd(true, true);
        let pinv = svd
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::LpFailure(e.to_string()))?;
        pinvs.push(pinv);
        mats.push(x_mat);
    }
    let mut sets: Vec<ThetaSet> = (1..=mdp.horizon())
        .map(|h| ThetaSet {
            layer: h,
            thetas: Vec::new(),
            residual: 0.0,
            realizable: true,
            max_theta_norm: 0.0,
        })
        .collect();
    for pi in &policies {
        let table = dp::q_tables_for_rewards(mdp, pi, |h, x, a| mdp.reward(h, x, a))?;
        for h in 1..=mdp.horizon() {
            let rows = mdp.layer_size(h) * mdp.num_actions();
            let mut y = DVector::zeros(rows);
            let mut r = 0usize;
            for x in 0..mdp.layer_size(h) {
                for a in 0..mdp.num_actions() {
                    y[r] = table.0[h - 1][x][a];
                    r += 1;
                }
            }
            let theta = &pinvs[h - 1] * &y;
            let resid = (&mats[h - 1] * &theta - &y).abs().max();
            let set = &mut sets[h - 1];
            set.residual = set.residual.max(resid);
            set.max_theta_norm = set.max_theta_norm.max(theta.norm());
            if !set
                .thetas
                .iter()
                .any(|t| (t - &theta).norm() <= DEDUPE_TOL)
            {
                set.thetas.push(theta);
            }
        }
    }
    for set in &mut sets {
        set.realizable = set.residual <= tol;
    }
    Ok(sets)
}

pub fn enumerate_theta(mdp: &LayeredMdp, h: usize, tol: f64, cap: f64) -> Result<ThetaSet> {
    let mut all = enumerate_theta_all(mdp, tol, cap)?;
    Ok(all.swap_remove(h - 1))
}

/// An approximate optimal design over a finite vector family.
#[derive(Clone, Debug)]
pub struct ApproxDesign {
    /// `(vector index, weight)` pairs; weights are positive and sum to 1.
    pub support: Vec<(usize, f64)>,
    /// `G(rho) = sum_z rho(z) c_z c_z^T`.
    pub gram: SpdMatrix,
    /// `sup_z ||c_z||^2_{G(rho)^+}` over the whole family.
    pub sup_norm2: f64,
    /// Support cap that was enforced.
    pub dtilde: usize,
}

pub struct DesignOptions {
    pub target: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl DesignOptions {
    pub fn for_dim(d: usize) -> Self {
        DesignOptions {
            target: 2.0 * d as f64,
            max_iters: 20_000,
            tol: 1e-9,
        }
    }
}

fn gram_of(vectors: &[DVector<f64>], weights: &[f64]) -> SpdMatrix {
    let d = vectors[0].len();
    let mut g = DMatrix::zeros(d, d);
    for (c, &w) in vectors.iter().zip(weights) {
        if w > 0.0 {
            g += c * c.transpose() * w;
        }
    }
    SpdMatrix::new(crate::linalg::symmetrize(&g)).expect("gram matrix is PSD by construction")
}

fn sup_pinv_norm2(vectors: &[DVector<f64>], gram: &SpdMatrix) -> (usize, f64) {
    let pinv = gram.pinv(1e-12);
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, c) in vectors.iter().enumerate() {
        let v = crate::linalg::quad_form(c, pinv.matrix());
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn rank_of(vectors: &[DVector<f64>], indices: impl Iterator<Item = usize>) -> usize {
    let d = vectors[0].len();
    let mut g = DMatrix::zeros(d, d);
    for i in indices {
        g += &vectors[i] * vectors[i].transpose();
    }
    let eig = SpdMatrix::new(crate::linalg::symmetrize(&g)).expect("PSD");
    let cutoff = eig.max_eigenvalue() * 1e-10;
    eig.eigenvalues().iter().filter(|&&l| l > cutoff).count()
}

/// Frank-Wolfe on the log-det objective with a greedy spanning
/// initialization, run until `sup ||c||^2_{G+} <= 2d`, then the support is
/// pruned to at most `d~` atoms while the bound (and the span of the family)
/// is preserved.
pub fn approx_optimal_design(
    vectors: &[DVector<f64>],
    opts: &DesignOptions,
) -> Result<ApproxDesign> {
    if vectors.is_empty() {
        return Err(Error::InvalidParam("empty vector family".into()));
    }
    let d = vectors[0].len();
    if vectors.iter().all(|c| c.norm() == 0.0) {
        return Err(Error::InvalidParam(
            "all design vectors are zero".into(),
        ));
    }
    let dtilde = d_tilde(d);

    // Greedy spanning initialization: repeatedly take the vector with the
    // largest component orthogonal to the span of those already chosen.
    let mut chosen: Vec<usize> = Vec::new();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    loop {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in vectors.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let mut resid = c.clone();
            for b in &basis {
                let coef = resid.dot(b);
                resid -= b * coef;
            }
            let n = resid.norm();
            if n > 1e-10 && best.map_or(true, |(_, bn)| n > bn) {
                best = Some((i, n));
            }
        }
        match best {
            Some((i, _)) => {
                let mut resid = vectors[i].clone();
                for b in &basis {
                    let coef = resid.dot(b);
                    resid -= b * coef;
                }
                basis.push(resid.normalize());
                chosen.push(i);
            }
            None => break,
        }
    }
    let rank = chosen.len();
    let mut weights = vec![0.0; vectors.len()];
    for &i in &chosen {
        weights[i] = 1.0 / rank as f64;
    }

    let mut gram = gram_of(vectors, &weights);
    let mut sup;
    let mut iters = 0usize;
    loop {
        let (z_star, kappa) = sup_pinv_norm2(vectors, &gram);
        sup = kappa;
        if kappa <= opts.target + opts.tol {
            break;
        }
        if iters >= opts.max_iters {
            return Err(Error::DesignIterationCap {
                iters,
                sup: kappa,
            });
        }
        // Optimal single-atom step for the log-det objective.
        let r = rank as f64;
        let step = ((kappa / r - 1.0) / (kappa - 1.0)).clamp(1e-12, 1.0 - 1e-12);
        for w in weights.iter_mut() {
            *w *= 1.0 - step;
        }
        weights[z_star] += step;
        gram = gram_of(vectors, &weights);
        iters += 1;
    }

    // Drop numerically dead atoms.
    let floor = 1e-12;
    let mut support: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > floor)
        .map(|(i, &w)| (i, w))
        .collect();
    normalize_support(&mut support);

    // Greedy pruning: drop the lightest atom whose removal keeps the bound
    // and the span.
    while support.len() > dtilde {
        let mut order: Vec<usize> = (0..support.len()).collect();
        order.sort_by(|&i, &j| support[i].1.partial_cmp(&support[j].1).unwrap());
        let mut pruned = None;
        for &k in &order {
            let mut candidate = support.clone();
            candidate.remove(k);
            if rank_of(vectors, candidate.iter().map(|&(i, _)| i)) < rank {
                continue;
            }
            normalize_support(&mut candidate);
            let w: Vec<f64> = {
                let mut w = vec![0.0; vectors.len()];
                for &(i, wi) in &candidate {
                    w[i] = wi;
                }
                w
            };
            let g = gram_of(vectors, &w);
            let (_, s) = sup_pinv_norm2(vectors, &g);
            if s <= opts.target + opts.tol {
                pruned = Some((candidate, g, s));
                break;
            }
        }
        match pruned {
            Some((candidate, g, s)) => {
                support = candidate;
                gram = g;
                sup = s;
            }
            None => return Err(Error::DesignPrune { target: dtilde }),
        }
    }

    Ok(ApproxDesign {
        support,
        gram,
        sup_norm2: sup,
        dtilde,
    })
}

fn normalize_support(support: &mut [(usize, f64)]) {
    let total: f64 = support.iter().map(|&(_, w)| w).sum();
    for (_, w) in support.iter_mut() {
        *w /= total;
    }
}

/// `Rg(x)`: largest Q-gap between two actions at `x` over all enumerated
/// policy parameters.
pub fn range(mdp: &LayeredMdp, theta_set: &ThetaSet, x: usize) -> f64 {
    let h = theta_set.layer;
    let mut best = 0.0f64;
    for a in 0..mdp.num_actions() {
        for a2 in 0..mdp.num_actions() {
            let diff = mdp.feature(h, x, a) - mdp.feature(h, x, a2);
            for t in &theta_set.thetas {
                best = best.max(diff.dot(t));
            }
        }
    }
    best
}

/// `Rg^D(x)`: range restricted to the support of the design.
pub fn design_range(
    mdp: &LayeredMdp,
    theta_set: &ThetaSet,
    design: &ApproxDesign,
    x: usize,
) -> f64 {
    let h = theta_set.layer;
    let mut best = 0.0f64;
    for a in 0..mdp.num_actions() {
        for a2 in 0..mdp.num_actions() {
            let diff = mdp.feature(h, x, a) - mdp.feature(h, x, a2);
            for &(i, _) in &design.support {
                best = best.max(diff.dot(&theta_set.thetas[i]));
            }
        }
    }
    best
}

/// Per-state range data for one layer.
#[derive(Clone, Debug)]
pub struct RangeProfile {
    pub layer: usize,
    pub rg: Vec<f64>,
    pub rg_design: Vec<f64>,
    pub gamma: f64,
    pub alpha: f64,
}

pub fn range_profile(
    mdp: &LayeredMdp,
    theta_set: &ThetaSet,
    design: &ApproxDesign,
    gamma: f64,
    alpha: f64,
) -> RangeProfile {
    let h = theta_set.layer;
    let rg = (0..mdp.layer_size(h))
        .map(|x| range(mdp, theta_set, x))
        .collect();
    let rg_design = (0..mdp.layer_size(h))
        .map(|x| design_range(mdp, theta_set, design, x))
        .collect();
    RangeProfile {
        layer: h,
        rg,
        rg_design,
        gamma,
        alpha,
    }
}

/// `f` is alpha-admissible iff `f(x) <= Rg^D(x) / alpha` at every state.
pub fn check_admissible(f: &[f64], alpha: f64, profile: &RangeProfile) -> bool {
    f.iter()
        .zip(&profile.rg_design)
        .all(|(&fv, &rd)| fv <= rd / alpha + 1e-12)
}

/// Build the fixed approximate design for `Theta_h` used throughout a run.
pub fn design_for_theta(theta_set: &ThetaSet) -> Result<ApproxDesign> {
    let d = theta_set.thetas[0].len();
    approx_optimal_design(&theta_set.thetas, &DesignOptions::for_dim(d))
}
