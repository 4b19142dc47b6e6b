//! Valid preconditioning state, its invariant checker, and the standalone
//! fit-or-precondition primitive.
//!
//! A preconditioner is the matrix `W = (H^-2 I + sum_i w_i w_i^T)^{-1/2}`
//! together with the witness vectors that built it. `W` is always recomputed
//! from the stored vector list so the defining form stays exact.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expectation::PathSet;
use crate::linalg::{self, SpdMatrix, Tensor3};
use crate::mdp::LayeredMdp;
use crate::policy::{compose_arc, varphi, Policy};
use crate::realizability::ThetaSet;
use std::sync::Arc;

#[derive(Clone, Debug)]
pub struct Preconditioner {
    layer: usize,
    horizon: usize,
    nu: f64,
    ws: Vec<DVector<f64>>,
    w_mat: SpdMatrix,
}

impl Preconditioner {
    /// The k = 0 base of the preconditioning form: `W = (H^-2 I)^{-1/2} = H I`.
    pub fn initial(layer: usize, horizon: usize, dim: usize, nu: f64) -> Result<Self> {
        if nu <= 0.0 {
            return Err(Error::InvalidParam(format!("nu must be positive, got {nu}")));
        }
        Ok(Preconditioner {
            layer,
            horizon,
            nu,
            ws: Vec::new(),
            w_mat: SpdMatrix::scaled_identity(dim, horizon as f64)?,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn len(&self) -> usize {
        self.ws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ws.is_empty()
    }

    pub fn witnesses(&self) -> &[DVector<f64>] {
        &self.ws
    }

    /// The preconditioning matrix `W`.
    pub fn w(&self) -> &SpdMatrix {
        &self.w_mat
    }

    /// `W^{-2} = H^-2 I + sum_i w_i w_i^T`.
    pub fn w_inv_sq(&self) -> DMatrix<f64> {
        inv_sq_of(self.w_mat.dim(), self.horizon, &self.ws)
    }

    /// `d_nu = 5 d ln(1 + 16 H^4 nu^-4)`.
    pub fn d_nu(&self) -> f64 {
        d_nu(self.w_mat.dim(), self.horizon, self.nu)
    }

    /// Maximum number of witness vectors a valid preconditioning can carry.
    pub fn budget(&self) -> f64 {
        extend_budget(self.w_mat.dim(), self.horizon, self.nu)
    }

    /// Append a witness vector; a zero vector is a no-op. `W` is recomputed
    /// from scratch.
    pub fn extend(&self, w: &DVector<f64>) -> Result<Self> {
        if w.norm() == 0.0 {
            return Ok(self.clone());
        }
        if w.len() != self.w_mat.dim() {
            return Err(Error::DimensionMismatch(format!(
                "witness dim {} vs {}",
                w.len(),
                self.w_mat.dim()
            )));
        }
        let mut ws = self.ws.clone();
        ws.push(w.clone());
        let m = inv_sq_of(self.w_mat.dim(), self.horizon, &ws);
        let w_mat = SpdMatrix::new(linalg::symmetrize(&m))?.inv_sqrt(linalg::EIG_FLOOR)?;
        Ok(Preconditioner {
            layer: self.layer,
            horizon: self.horizon,
            nu: self.nu,
            ws,
            w_mat,
        })
    }

    /// Rebuild from a stored witness list (used when reloading run logs).
    pub fn from_witnesses(
        layer: usize,
        horizon: usize,
        dim: usize,
        nu: f64,
        ws: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let mut p = Preconditioner::initial(layer, horizon, dim, nu)?;
        for w in &ws {
            p = p.extend(w)?;
        }
        Ok(p)
    }

    /// Evaluate every validity condition against an enumerated parameter set,
    /// reporting the margin of each (margin >= 0 means satisfied).
    pub fn validate(&self, thetas: &ThetaSet) -> ValidationReport {
        let mut conditions = Vec::new();
        let d = self.w_mat.dim();
        for (i, w) in self.ws.iter().enumerate() {
            let inner = thetas.sup_abs_inner(w);
            conditions.push(Condition {
                name: format!("witness_inner_bound[{i}]"),
                value: inner,
                bound: 1.0,
                margin: 1.0 - inner,
            });
            // ||(H^-2 I + sum_{j<i} w_j w_j^T)^{-1/2} w_i||^2 >= 1/2.
            let prefix = inv_sq_of(d, self.horizon, &self.ws[..i]);
            let half = SpdMatrix::new(linalg::symmetrize(&prefix))
                .and_then(|m| m.inv_sqrt(linalg::EIG_FLOOR));
            let gain = match half {
                Ok(m) => (m.matrix() * w).norm_squared(),
                Err(_) => 0.0,
            };
            conditions.push(Condition {
                name: format!("witness_gain[{i}]"),
                value: gain,
                bound: 0.5,
                margin: gain - 0.5,
            });
            let norm = w.norm();
            conditions.push(Condition {
                name: format!("witness_norm[{i}]"),
                value: norm,
                bound: 1.0 / self.nu,
                margin: 1.0 / self.nu - norm,
            });
        }
        let budget = self.budget();
        conditions.push(Condition {
            name: "length_budget".into(),
            value: self.ws.len() as f64,
            bound: budget,
            margin: budget - self.ws.len() as f64,
        });
        let w_inv = self
            .w_mat
            .inv(linalg::EIG_FLOOR)
            .expect("W is positive definite by construction");
        let sup_ellipsoid = thetas
            .thetas
            .iter()
            .map(|t| (w_inv.matrix() * t).norm_squared())
            .fold(0.0, f64::max);
        let dn = self.d_nu();
        conditions.push(Condition {
            name: "theta_ellipsoid".into(),
            value: sup_ellipsoid,
            bound: dn,
            margin: dn - sup_ellipsoid,
        });
        let tol = 1e-9;
        let valid = conditions.iter().all(|c| c.margin >= -tol);
        ValidationReport { conditions, valid }
    }
}

fn inv_sq_of(dim: usize, horizon: usize, ws: &[DVector<f64>]) -> DMatrix<f64> {
    let mut m = DMatrix::identity(dim, dim) / (horizon as f64 * horizon as f64);
    for w in ws {
        m += w * w.transpose();
    }
    m
}

pub fn d_nu(dim: usize, horizon: usize, nu: f64) -> f64 {
    let h4 = (horizon as f64).powi(4);
    5.0 * dim as f64 * (1.0 + 16.0 * h4 * nu.powi(-4)).ln()
}

pub fn extend_budget(dim: usize, horizon: usize, nu: f64) -> f64 {
    let h4 = (horizon as f64).powi(4);
    4.0 * dim as f64 * (1.0 + 16.0 * nu.powi(-4) * h4).ln()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub margin: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationReport {
    pub conditions: Vec<Condition>,
    pub valid: bool,
}

/// Outcome of one fit-or-precondition pass.
#[derive(Clone, Debug)]
pub enum FitOrPrecondition {
    /// The truncated function fit linearly: all discrepancies within the
    /// threshold.
    Fit { theta: DVector<f64>, max_delta: f64 },
    /// A witness of non-admissibility: extending with `w` keeps the
    /// preconditioning valid.
    Precondition {
        w: DVector<f64>,
        theta: DVector<f64>,
        max_delta: f64,
    },
}

/// The fit-or-precondition threshold with every constant from the statement:
/// `eps' = 8 c sqrt(lambda) d d~ H / (sqrt(zeta) mu) + 8 c d nu L / (mu lambda)`
/// with `c = 20 d ln(1 + 16 H^4 nu^-4)`, `d~ = 5 d ln ln(1 + 16 H^4 nu^-4)`,
/// `zeta = 1 / (8 d)`.
pub fn fit_threshold(d: usize, horizon: usize, mu: f64, nu: f64, lambda: f64, l_bound: f64) -> f64 {
    let df = d as f64;
    let h = horizon as f64;
    let inner = 1.0 + 16.0 * h.powi(4) * nu.powi(-4);
    let c = 20.0 * df * inner.ln();
    let dt = 5.0 * df * inner.ln().ln();
    let zeta = 1.0 / (8.0 * df);
    8.0 * c * lambda.sqrt() * df * dt * h / (zeta.sqrt() * mu)
        + 8.0 * c * df * nu * l_bound / (mu * lambda)
}

/// Inputs for one fit-or-precondition pass at layers `(h, l)` with `h < l`.
pub struct FitInputs<'a> {
    pub mdp: &'a LayeredMdp,
    pub fit_layer: usize,
    pub target_layer: usize,
    /// Target values per state of the target layer.
    pub f: &'a [f64],
    /// Bound on |f|.
    pub l_bound: f64,
    /// Rollout policies mixed into the regression.
    pub psi: &'a [Arc<Policy>],
    /// Continuation played from `fit_layer + 1` on.
    pub continuation: Arc<Policy>,
    pub precond: &'a Preconditioner,
    pub mu: f64,
    pub lambda: f64,
    /// Overrides the theoretical threshold when set.
    pub eps_prime: Option<f64>,
    pub path_cap: f64,
}

/// One fit-check-precondition pass in exact-expectation mode.
///
/// Fits the gated target `f(x_l) 1{||varphi(x_l; W)|| >= mu}` against the
/// features at `fit_layer` by ridge regression over the rollout mixture; if
/// some rollout policy exposes a discrepancy above the threshold, computes a
/// new non-zero preconditioning witness via the tensor fit, eigen step and
/// eigen-subspace projection.
pub fn linear_fit_or_precondition(inputs: &FitInputs<'_>) -> Result<FitOrPrecondition> {
    let mdp = inputs.mdp;
    let h = inputs.fit_layer;
    let l = inputs.target_layer;
    if h >= l || l > mdp.horizon() {
        return Err(Error::InvalidParam(format!(
            "fit layer {h} must precede target layer {l} within the horizon"
        )));
    }
    if inputs.f.len() != mdp.layer_size(l) {
        return Err(Error::DimensionMismatch(format!(
            "target function has {} entries, layer {l} has {}",
            inputs.f.len(),
            mdp.layer_size(l)
        )));
    }
    let d = mdp.feature_dim();
    let nu = inputs.precond.nu();
    let eps_prime = inputs.eps_prime.unwrap_or_else(|| {
        fit_threshold(d, mdp.horizon(), inputs.mu, nu, inputs.lambda, inputs.l_bound)
    });

    let w_mat = inputs.precond.w().matrix().clone();
    // Gated target per state of the target layer.
    let gated: Vec<f64> = (0..mdp.layer_size(l))
        .map(|x| {
            if varphi(mdp, l, x, &w_mat).norm() >= inputs.mu {
                inputs.f[x]
            } else {
                0.0
            }
        })
        .collect();
    let gate_open: Vec<bool> = (0..mdp.layer_size(l))
        .map(|x| varphi(mdp, l, x, &w_mat).norm() >= inputs.mu)
        .collect();

    // Exact rollout paths per mixture policy.
    let mut paths: Vec<PathSet> = Vec::with_capacity(inputs.psi.len());
    for pi in inputs.psi {
        let rollout = compose_arc(mdp, pi.clone(), h + 1, inputs.continuation.clone())?;
        paths.push(crate::expectation::exact_paths(mdp, &rollout, inputs.path_cap)?);
    }

    // Ridge statistics.
    let mut sigma = DMatrix::identity(d, d) * inputs.lambda;
    let mut moment = DVector::zeros(d);
    for ps in &paths {
        for (w, t) in &ps.paths {
            let phi = mdp.feature(h, t.state(h), t.action(h));
            sigma += phi * phi.transpose() * *w;
            moment += phi * (*w * gated[t.state(l)]);
        }
    }
    let sigma_inv = SpdMatrix::new(linalg::symmetrize(&sigma))?.inv(0.0)?;
    let theta = sigma_inv.matrix() * &moment;

    // Per-policy discrepancies.
    let deltas: Vec<f64> = paths
        .iter()
        .map(|ps| {
            ps.mean(|t| gated[t.state(l)] - mdp.feature(h, t.state(h), t.action(h)).dot(&theta))
        })
        .collect();
    let (argmax, max_delta) = deltas
        .iter()
        .enumerate()
        .map(|(i, v)| (i, v.abs()))
        .fold((0usize, 0.0f64), |acc, cur| if cur.1 > acc.1 { cur } else { acc });

    if max_delta <= eps_prime {
        return Ok(FitOrPrecondition::Fit { theta, max_delta });
    }

    // Witness construction. `F(x) = gated(x) * varphi varphi^T / ||varphi||^2`.
    let f_mats: Vec<Option<DMatrix<f64>>> = (0..mdp.layer_size(l))
        .map(|x| {
            if !gate_open[x] || gated[x] == 0.0 {
                return None;
            }
            let v = varphi(mdp, l, x, &w_mat);
            let n2 = v.norm_squared();
            if n2 == 0.0 {
                None
            } else {
                Some(&v * v.transpose() * (gated[x] / n2))
            }
        })
        .collect();

    let mut raw_tensor = Tensor3::zeros(d, d, d);
    for ps in &paths {
        for (w, t) in &ps.paths {
            if let Some(fm) = &f_mats[t.state(l)] {
                let phi = mdp.feature(h, t.state(h), t.action(h));
                raw_tensor.add_scaled_outer(phi, fm, *w);
            }
        }
    }
    let vartheta = raw_tensor.premultiply_first(sigma_inv.matrix())?;

    // Quadratic form for the eigen step, under the worst rollout policy:
    // z -> E[z^T F(x_l) z - vartheta[phi(x_h, a_h), z, z]].
    let worst = &paths[argmax];
    let mut m = DMatrix::zeros(d, d);
    let mut mean_phi = DVector::zeros(d);
    for (w, t) in &worst.paths {
        if let Some(fm) = &f_mats[t.state(l)] {
            m += fm * *w;
        }
        mean_phi += mdp.feature(h, t.state(h), t.action(h)) * *w;
    }
    m -= vartheta.contract_first(&mean_phi)?;
    let (z, _) = linalg::top_abs_quadratic(&m)?;
    let proj = inputs.precond.w().eig_subspace_projection(nu);
    let z_tilde = &proj * z;
    let w_inv = inputs.precond.w().inv(linalg::EIG_FLOOR)?;
    let witness = w_inv.matrix() * z_tilde;
    Ok(FitOrPrecondition::Precondition {
        w: witness,
        theta,
        max_delta,
    })
}

/// Loop-until-fit mode: repeat the pass, extending the preconditioner each
/// time the check fails, until the fit succeeds or the extension budget is
/// spent. Returns the final fit, the final preconditioner, and every witness
/// applied along the way.
pub fn linear_fit_loop(
    inputs: &FitInputs<'_>,
) -> Result<(DVector<f64>, Preconditioner, Vec<DVector<f64>>)> {
    let mut precond = inputs.precond.clone();
    let mut extensions = Vec::new();
    loop {
        let pass = FitInputs {
            precond: &precond,
            ..FitInputs {
                mdp: inputs.mdp,
                fit_layer: inputs.fit_layer,
                target_layer: inputs.target_layer,
                f: inputs.f,
                l_bound: inputs.l_bound,
                psi: inputs.psi,
                continuation: inputs.continuation.clone(),
                precond: &precond,
                mu: inputs.mu,
                lambda: inputs.lambda,
                eps_prime: inputs.eps_prime,
                path_cap: inputs.path_cap,
            }
        };
        match linear_fit_or_precondition(&pass)? {
            FitOrPrecondition::Fit { theta, .. } => return Ok((theta, precond, extensions)),
            FitOrPrecondition::Precondition { w, .. } => {
                if w.norm() == 0.0 {
                    return Err(Error::Contract(
                        "precondition branch produced a zero witness".into(),
                    ));
                }
                if (precond.len() + 1) as f64 > precond.budget() {
                    return Err(Error::PrecondBudgetExceeded {
                        layer: precond.layer(),
                        count: precond.len() + 1,
                        budget: precond.budget(),
                    });
                }
                extensions.push(w.clone());
                precond = precond.extend(&w)?;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::realizability::{enumerate_theta_all, DEFAULT_POLICY_CAP, REALIZABLE_TOL};
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;

    #[test]
    fn initial_is_h_times_identity() {
        let p = Preconditioner::initial(1, 2, 3, 0.5).unwrap();
        assert_abs_diff_eq!(
            p.w().matrix(),
            &(DMatrix::identity(3, 3) * 2.0),
            epsilon = 1e-12
        );
        let inv_sq = p.w_inv_sq();
        assert_abs_diff_eq!(&inv_sq, &(DMatrix::identity(3, 3) * 0.25), epsilon = 1e-12);
    }

    #[test]
    fn extend_with_zero_is_noop() {
        let p = Preconditioner::initial(1, 2, 3, 0.5).unwrap();
        let q = p.extend(&DVector::zeros(3)).unwrap();
        assert_eq!(q.len(), 0);
        assert_abs_diff_eq!(q.w().matrix(), p.w().matrix(), epsilon = 1e-15);
    }

    #[test]
    fn extend_diagonal_closed_form() {
        // H = 1, w = e1: W = (I + e1 e1^T)^{-1/2} = diag(1/sqrt(2), 1, ...).
        let p = Preconditioner::initial(1, 1, 3, 0.5).unwrap();
        let q = p.extend(&dvector![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(q.len(), 1);
        let expected = DMatrix::from_diagonal(&dvector![1.0 / 2.0f64.sqrt(), 1.0, 1.0]);
        assert_abs_diff_eq!(q.w().matrix(), &expected, epsilon = 1e-10);
    }

    #[test]
    fn extend_round_trip_keeps_form() {
        let p = Preconditioner::initial(2, 2, 4, 0.5).unwrap();
        let w1 = dvector![0.5, 0.1, 0.0, -0.2];
        let w2 = dvector![-0.3, 0.7, 0.2, 0.1];
        let q = p.extend(&w1).unwrap().extend(&w2).unwrap();
        let rebuilt =
            Preconditioner::from_witnesses(2, 2, 4, 0.5, vec![w1.clone(), w2.clone()]).unwrap();
        assert_abs_diff_eq!(q.w().matrix(), rebuilt.w().matrix(), epsilon = 1e-12);
        // W^{-2} increases by w w^T at each extend.
        let direct = DMatrix::identity(4, 4) * 0.25 + &w1 * w1.transpose() + &w2 * w2.transpose();
        assert_abs_diff_eq!(&q.w_inv_sq(), &direct, epsilon = 1e-8);
    }

    #[test]
    fn eigenvalues_never_increase_under_extend() {
        let mut p = Preconditioner::initial(1, 3, 4, 0.5).unwrap();
        let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(9);
        for _ in 0..10 {
            let w = DVector::from_fn(4, |_, _| {
                rand::Rng::random_range(&mut rng, -1.0..1.0f64)
            });
            let q = p.extend(&w).unwrap();
            for i in 0..4 {
                assert!(q.w().eigenvalues()[i] <= p.w().eigenvalues()[i] + 1e-10);
            }
            p = q;
        }
    }

    #[test]
    fn empty_preconditioner_validates() {
        let mdp = fixtures::t1();
        let sets = enumerate_theta_all(&mdp, REALIZABLE_TOL, DEFAULT_POLICY_CAP).unwrap();
        let p = Preconditioner::initial(2, mdp.horizon(), mdp.feature_dim(), 0.5).unwrap();
        let report = p.validate(&sets[1]);
        assert!(report.valid, "{:?}", report.conditions);
    }

    #[test]
    fn violating_witness_is_reported_with_margin() {
        let mdp = fixtures::t1();
        let sets = enumerate_theta_all(&mdp, REALIZABLE_TOL, DEFAULT_POLICY_CAP).unwrap();
        let nu = 0.5;
        let p = Preconditioner::initial(2, mdp.horizon(), mdp.feature_dim(), nu).unwrap();
        // Norm 3 > 1/nu = 2.
        let mut w = DVector::zeros(mdp.feature_dim());
        w[0] = 3.0;
        let q = p.extend(&w).unwrap();
        let report = q.validate(&sets[1]);
        assert!(!report.valid);
        let norm_cond = report
            .conditions
            .iter()
            .find(|c| c.name == "witness_norm[0]")
            .unwrap();
        assert!(norm_cond.margin < 0.0);
        assert_abs_diff_eq!(norm_cond.value, 3.0, epsilon = 1e-12);
    }

    /// A realizable MDP that is not a linear MDP: the two layer-2 states have
    /// zero range (every policy values them identically) but distinct
    /// per-action features, so a function that separates them is not
    /// admissible and its conditional expectation is not linear.
    fn low_range_trap() -> LayeredMdp {
        let phi = |v: Vec<f64>| DVector::from_vec(v);
        LayeredMdp::new(
            2,
            vec![1, 2],
            2,
            2,
            vec![1.0],
            vec![vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]]],
            vec![vec![vec![0.0, 0.0]], vec![vec![0.5, 0.5], vec![0.25, 0.25]]],
            vec![
                vec![vec![phi(vec![0.5, 0.0]), phi(vec![0.25, 0.0])]],
                vec![
                    vec![phi(vec![0.5, 0.5]), phi(vec![0.5, -0.5])],
                    vec![phi(vec![0.25, 0.5]), phi(vec![0.25, -0.5])],
                ],
            ],
        )
        .unwrap()
    }

    #[test]
    fn trap_fixture_is_realizable() {
        let mdp = low_range_trap();
        let sets = enumerate_theta_all(&mdp, REALIZABLE_TOL, DEFAULT_POLICY_CAP).unwrap();
        for set in &sets {
            assert!(set.realizable, "residual {}", set.residual);
        }
        // Layer-2 range is zero at every state.
        for x in 0..2 {
            assert!(crate::realizability::range(&mdp, &sets[1], x) < 1e-9);
        }
    }

    #[test]
    fn zero_function_fits_with_zero_delta() {
        let mdp = fixtures::t1();
        let p = Preconditioner::initial(2, mdp.horizon(), mdp.feature_dim(), 0.5).unwrap();
        let psi = vec![Arc::new(Policy::Uniform)];
        let f = vec![0.0; mdp.layer_size(2)];
        let out = linear_fit_or_precondition(&FitInputs {
            mdp: &mdp,
            fit_layer: 1,
            target_layer: 2,
            f: &f,
            l_bound: 1.0,
            psi: &psi,
            continuation: Arc::new(Policy::Uniform),
            precond: &p,
            mu: 1e-3,
            lambda: 1e-6,
            eps_prime: Some(1e-9),
            path_cap: 1e7,
        })
        .unwrap();
        match out {
            FitOrPrecondition::Fit { theta, max_delta } => {
                assert!(theta.norm() < 1e-12);
                assert!(max_delta < 1e-12);
            }
            _ => panic!("expected fit branch"),
        }
    }

    #[test]
    fn one_hot_admissible_function_fits() {
        let mdp = fixtures::t1();
        let p = Preconditioner::initial(2, mdp.horizon(), mdp.feature_dim(), 0.5).unwrap();
        let psi = vec![Arc::new(Policy::Uniform)];
        // Any bounded function is linearly representable on one-hot features.
        let f: Vec<f64> = vec![0.3, -0.3];
        let out = linear_fit_or_precondition(&FitInputs {
            mdp: &mdp,
            fit_layer: 1,
            target_layer: 2,
            f: &f,
            l_bound: 1.0,
            psi: &psi,
            continuation: Arc::new(Policy::Uniform),
            precond: &p,
            mu: 1e-3,
            lambda: 1e-6,
            eps_prime: Some(1e-4),
            path_cap: 1e7,
        })
        .unwrap();
        match out {
            FitOrPrecondition::Fit { max_delta, .. } => {
                assert!(max_delta <= 1e-6, "delta {max_delta}");
            }
            _ => panic!("expected fit branch"),
        }
    }

    #[test]
    fn precondition_branch_fires_and_witness_validates() {
        let mdp = low_range_trap();
        let sets = enumerate_theta_all(&mdp, REALIZABLE_TOL, DEFAULT_POLICY_CAP).unwrap();
        let nu = 0.5;
        let p = Preconditioner::initial(2, mdp.horizon(), mdp.feature_dim(), nu).unwrap();
        // f separates the two zero-range states; its conditional expectation
        // is not linear in the layer-1 features.
        let f = vec![1.0, 0.0];
        let psi: Vec<Arc<Policy>> = vec![
            Arc::new(Policy::Tabular {
                actions: vec![vec![0], vec![0, 0]],
            }),
            Arc::new(Policy::Tabular {
                actions: vec![vec![1], vec![0, 0]],
            }),
        ];
        let inputs = FitInputs {
            mdp: &mdp,
            fit_layer: 1,
            target_layer: 2,
            f: &f,
            l_bound: 1.0,
            psi: &psi,
            continuation: Arc::new(Policy::Uniform),
            precond: &p,
            mu: 0.4,
            lambda: 1e-6,
            eps_prime: Some(0.05),
            path_cap: 1e7,
        };
        let out = linear_fit_or_precondition(&inputs).unwrap();
        let FitOrPrecondition::Precondition { w, max_delta, .. } = out else {
            panic!("expected precondition branch");
        };
        assert!(max_delta > 0.05);
        assert!(w.norm() > 0.0);
        // Lemma-style post-checks via validate.
        let q = p.extend(&w).unwrap();
        let report = q.validate(&sets[1]);
        assert!(report.valid, "{:#?}", report.conditions);
        let norm_in_w = (p.w().matrix() * &w).norm();
        assert!(norm_in_w >= 0.5 - 1e-8, "||W w|| = {norm_in_w}");
        assert!(w.norm() <= 1.0 / nu + 1e-9);
    }

    #[test]
    fn loop_mode_aborts_when_budget_exhausted() {
        // Fill the witness list up to the length budget with tiny vectors
        // (which barely change W), then let the loop find a real witness:
        // applying it would exceed the budget, so the run aborts.
        let mdp = low_range_trap();
        let nu = 0.9;
        let mut p = Preconditioner::initial(2, mdp.horizon(), mdp.feature_dim(), nu).unwrap();
        let budget = p.budget();
        while (p.len() as f64) <= budget {
            p = p.extend(&dvector![1e-9, 0.0]).unwrap();
        }
        let f = vec![1.0, 0.0];
        let psi: Vec<Arc<Policy>> = vec![
            Arc::new(Policy::Tabular {
                actions: vec![vec![0], vec![0, 0]],
            }),
            Arc::new(Policy::Tabular {
                actions: vec![vec![1], vec![0, 0]],
            }),
        ];
        let inputs = FitInputs {
            mdp: &mdp,
            fit_layer: 1,
            target_layer: 2,
            f: &f,
            l_bound: 1.0,
            psi: &psi,
            continuation: Arc::new(Policy::Uniform),
            precond: &p,
            mu: 0.4,
            lambda: 1e-6,
            eps_prime: Some(0.05),
            path_cap: 1e7,
        };
        assert!(matches!(
            linear_fit_loop(&inputs),
            Err(Error::PrecondBudgetExceeded { .. })
        ));
    }

    #[test]
    fn loop_mode_reaches_fit_within_budget() {
        let mdp = low_range_trap();
        let nu = 0.5;
        let p = Preconditioner::initial(2, mdp.horizon(), mdp.feature_dim(), nu).unwrap();
        let f = vec![1.0, 0.0];
        let psi: Vec<Arc<Policy>> = vec![
            Arc::new(Policy::Tabular {
                actions: vec![vec![0], vec![0, 0]],
            }),
            Arc::new(Policy::Tabular {
                actions: vec![vec![1], vec![0, 0]],
            }),
        ];
        let inputs = FitInputs {
            mdp: &mdp,
            fit_layer: 1,
            target_layer: 2,
            f: &f,
            l_bound: 1.0,
            psi: &psi,
            continuation: Arc::new(Policy::Uniform),
            precond: &p,
            mu: 0.4,
            lambda: 1e-6,
            eps_prime: Some(0.05),
            path_cap: 1e7,
        };
        let (theta, final_p, extensions) = linear_fit_loop(&inputs).unwrap();
        assert!(!extensions.is_empty());
        assert!((final_p.len() as f64) <= final_p.budget());
        // After the gate closes, the gated function is zero, so the fit is
        // exact and theta is near zero.
        assert!(theta.norm() < 1e-6, "theta norm {}", theta.norm());
        // Every intermediate preconditioner validates.
        let sets = enumerate_theta_all(&mdp, REALIZABLE_TOL, DEFAULT_POLICY_CAP).unwrap();
        let mut acc = Preconditioner::initial(2, mdp.horizon(), mdp.feature_dim(), nu).unwrap();
        for w in &extensions {
            acc = acc.extend(w).unwrap();
            assert!(acc.validate(&sets[1]).valid);
        }
    }
}
