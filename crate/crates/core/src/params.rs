//! Algorithm parameters: the theoretical schedule and a desk-scale profile.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::LayeredMdp;
use crate::policy::d_tilde;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Empirical averages over sampled trajectories.
    Sampled,
    /// All expectations computed exactly by forward enumeration.
    Exact,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "sampled" => Ok(Mode::Sampled),
            "exact" | "exact-expectation" => Ok(Mode::Exact),
            other => Err(Error::InvalidParam(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub eps: f64,
    pub delta: f64,
    pub t_iters: usize,
    /// Trajectories per estimator; kept as f64 because the theoretical
    /// schedule is astronomically large.
    pub n_traj: f64,
    /// Bonus gate threshold on the preconditioned feature gap.
    pub mu: f64,
    /// Preconditioning scale.
    pub nu: f64,
    /// Ridge regularizer.
    pub lambda: f64,
    /// Design-matrix regularizer.
    pub beta: f64,
    /// Polylog slack constant in the schedule.
    pub c_polylog: f64,
    pub mode: Mode,
    /// Overrides the fit-discrepancy threshold of the value-fitting step;
    /// `None` uses the theoretical formula.
    pub eps_prime: Option<f64>,
    /// Gate vectors per benchmark policy in the oracle (`None` = feature dim).
    pub gate_vectors: Option<usize>,
    /// Cap for exact path enumeration.
    pub path_cap: f64,
    /// Record the per-iteration design-domination audit (costs extra exact
    /// expectations; intended for verification runs).
    pub audit: bool,
}

impl Params {
    /// The theoretical schedule. The trajectory count is far beyond anything
    /// runnable; this profile exists to document the formulas and for tests
    /// of the formulas themselves.
    pub fn theory(eps: f64, delta: f64, mdp: &LayeredMdp) -> Result<Params> {
        if !(0.0 < eps && eps < 1.0) || !(0.0 < delta && delta < 1.0) {
            return Err(Error::InvalidParam(
                "eps and delta must lie in (0, 1)".into(),
            ));
        }
        let d = mdp.feature_dim() as f64;
        let a = mdp.num_actions() as f64;
        let h = mdp.horizon() as f64;
        let c = (d * a * h / (eps * delta)).ln().max(1.0);
        Ok(Params {
            eps,
            delta,
            t_iters: (32.0 * d * h * h * c).ceil() as usize,
            n_traj: a.powi(8) * d.powi(70) * h.powi(80) * c / eps.powi(24),
            mu: eps / (h * c),
            nu: eps.powi(6) / (a.powi(3) * h.powi(20) * d.powi(19) * c),
            lambda: eps.powi(4) / (a.powi(2) * d.powi(14) * h.powi(11)),
            beta: eps.powi(12) / (a.powi(4) * d.powi(24) * h.powi(40)),
            c_polylog: c,
            mode: Mode::Sampled,
            eps_prime: None,
            gate_vectors: None,
            path_cap: crate::expectation::DEFAULT_PATH_CAP,
            audit: false,
        })
    }

    /// Desk-scale defaults used for the end-to-end checks.
    pub fn desk() -> Params {
        Params {
            eps: 0.1,
            delta: 0.05,
            t_iters: 200,
            n_traj: 2e4,
            mu: 1e-3,
            nu: 1e-3,
            lambda: 1e-6,
            beta: 1.0,
            c_polylog: 1.0,
            mode: Mode::Exact,
            eps_prime: Some(0.01),
            gate_vectors: None,
            path_cap: crate::expectation::DEFAULT_PATH_CAP,
            audit: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("eps", self.eps),
            ("delta", self.delta),
            ("n_traj", self.n_traj),
            ("mu", self.mu),
            ("nu", self.nu),
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("c_polylog", self.c_polylog),
        ];
        for (name, v) in pos {
            if !(v > 0.0) {
                return Err(Error::InvalidParam(format!("{name} must be positive, got {v}")));
            }
        }
        if self.t_iters == 0 {
            return Err(Error::InvalidParam("t_iters must be positive".into()));
        }
        Ok(())
    }

    /// Number of trajectories per estimator, checked against what can
    /// actually be sampled.
    pub fn sample_count(&self) -> Result<usize> {
        if self.n_traj > 1e9 {
            return Err(Error::TrajectoryCountTooLarge(self.n_traj));
        }
        Ok(self.n_traj.max(1.0) as usize)
    }

    /// Apply a `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_f = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::InvalidParam(format!("cannot parse {v:?} as a number")))
        };
        match key {
            "eps" => self.eps = parse_f(value)?,
            "delta" => self.delta = parse_f(value)?,
            "T" | "t_iters" => {
                self.t_iters = value
                    .parse()
                    .map_err(|_| Error::InvalidParam(format!("cannot parse {value:?}")))?
            }
            "n_traj" => self.n_traj = parse_f(value)?,
            "mu" => self.mu = parse_f(value)?,
            "nu" => self.nu = parse_f(value)?,
            "lambda" => self.lambda = parse_f(value)?,
            "beta" => self.beta = parse_f(value)?,
            "c" | "c_polylog" => self.c_polylog = parse_f(value)?,
            "eps_prime" => self.eps_prime = Some(parse_f(value)?),
            "gate_vectors" => {
                self.gate_vectors = Some(value.parse().map_err(|_| {
                    Error::InvalidParam(format!("cannot parse {value:?}"))
                })?)
            }
            "path_cap" => self.path_cap = parse_f(value)?,
            "mode" => self.mode = value.parse()?,
            "audit" => {
                self.audit = value
                    .parse()
                    .map_err(|_| Error::InvalidParam(format!("cannot parse {value:?}")))?
            }
            other => {
                return Err(Error::InvalidParam(format!("unknown parameter {other:?}")));
            }
        }
        Ok(())
    }

    /// The fit-discrepancy threshold of the value-fitting step, with every
    /// constant from the statement; terms that vanish as the sample count
    /// grows are dropped in exact mode.
    pub fn fit_eps_prime(&self, mdp: &LayeredMdp, psi_len: usize) -> f64 {
        if let Some(v) = self.eps_prime {
            return v;
        }
        let d = mdp.feature_dim() as f64;
        let a = mdp.num_actions() as f64;
        let h = mdp.horizon() as f64;
        let c = 20.0 * d * (1.0 + 16.0 * h.powi(4) * self.nu.powi(-4)).ln();
        let reg = self.eps_reg_bonus(mdp, psi_len);
        2.0 * d * c * reg + 8.0 * c * d * self.nu * h * a / (self.mu * self.lambda)
    }

    /// Diagnostic: the concentration half-width of the design-direction
    /// estimates, `2 sqrt(2 ln(4 H^3 d T / delta) / n)`; zero in exact mode.
    pub fn eps_hoff(&self, mdp: &LayeredMdp) -> f64 {
        if self.mode == Mode::Exact {
            return 0.0;
        }
        let h = mdp.horizon() as f64;
        let d = mdp.feature_dim() as f64;
        2.0 * (2.0 * (4.0 * h.powi(3) * d * self.t_iters as f64 / self.delta).ln() / self.n_traj)
            .sqrt()
    }

    /// Diagnostic: the policy-evaluation deviation bound
    /// `H sqrt(2 ln(1/delta') / n)`; zero in exact mode.
    pub fn eps_eval(&self, mdp: &LayeredMdp, delta_prime: f64) -> f64 {
        if self.mode == Mode::Exact {
            return 0.0;
        }
        mdp.horizon() as f64 * (2.0 * (1.0 / delta_prime).ln() / self.n_traj).sqrt()
    }

    /// The bonus-regression error bound entering the threshold. Sampled mode
    /// evaluates the full expression at `n = n_traj`; exact mode keeps only
    /// the non-vanishing bias terms.
    pub fn eps_reg_bonus(&self, mdp: &LayeredMdp, psi_len: usize) -> f64 {
        let d = mdp.feature_dim() as f64;
        let a = mdp.num_actions() as f64;
        let h = mdp.horizon() as f64;
        let psi = psi_len.max(1) as f64;
        let dt = d_tilde(mdp.feature_dim()) as f64;
        let d_nu = 5.0 * d * (1.0 + 16.0 * h.powi(4) * self.nu.powi(-4)).ln();
        let mut out = self.eps / (256.0 * psi * d_nu * d.powi(3) * h.powi(5))
            + 8.0 * a * dt * h * h / self.mu * (2.0 * d * self.lambda * psi).sqrt();
        if self.mode == Mode::Sampled {
            let n = self.n_traj;
            let delta_p = self.delta / (6.0 * h * self.t_iters as f64);
            out += 2.0 * a * (d * (2.0 / (delta_p * self.lambda)).ln() / n).sqrt();
            let ln_growth = crate::csc::growth_bound_ln(
                n.min(1e18) as usize,
                mdp.feature_dim(),
                mdp.num_actions(),
            );
            let ln_term = (2f64.powi(12) * d.powi(3) * d_nu * h.powi(6) * psi * psi / self.eps)
                .ln()
                + ln_growth
                + (1.0 / delta_p).ln();
            out += 16.0 * h * h * a * dt * d / self.mu * (2.0 * ln_term / n).sqrt();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn theory_schedule_formulas() {
        let mdp = fixtures::t1();
        let p = Params::theory(0.1, 0.05, &mdp).unwrap();
        let d = 8.0f64;
        let a = 2.0f64;
        let h = 2.0f64;
        let c = p.c_polylog;
        assert_eq!(p.t_iters, (32.0 * d * h * h * c).ceil() as usize);
        approx::assert_relative_eq!(p.mu, 0.1 / (h * c), epsilon = 1e-12);
        approx::assert_relative_eq!(
            p.nu,
            0.1f64.powi(6) / (a.powi(3) * h.powi(20) * d.powi(19) * c),
            max_relative = 1e-12
        );
        approx::assert_relative_eq!(
            p.lambda,
            0.1f64.powi(4) / (a.powi(2) * d.powi(14) * h.powi(11)),
            max_relative = 1e-12
        );
        approx::assert_relative_eq!(
            p.beta,
            0.1f64.powi(12) / (a.powi(4) * d.powi(24) * h.powi(40)),
            max_relative = 1e-12
        );
        // The trajectory schedule is astronomically large and refuses to be
        // used for actual sampling.
        assert!(p.n_traj > 1e40);
        assert!(p.sample_count().is_err());
    }

    #[test]
    fn desk_profile_is_valid_and_overridable() {
        let mut p = Params::desk();
        p.validate().unwrap();
        p.set("T", "50").unwrap();
        p.set("mode", "sampled").unwrap();
        p.set("eps_prime", "0.5").unwrap();
        assert_eq!(p.t_iters, 50);
        assert_eq!(p.mode, Mode::Sampled);
        assert_eq!(p.eps_prime, Some(0.5));
        assert!(p.set("bogus", "1").is_err());
        assert!(p.sample_count().is_ok());
    }

    #[test]
    fn fit_threshold_positive_and_monotone_in_psi() {
        let mdp = fixtures::t1();
        let mut p = Params::desk();
        p.eps_prime = None;
        let e1 = p.fit_eps_prime(&mdp, 1);
        let e4 = p.fit_eps_prime(&mdp, 4);
        assert!(e1 > 0.0);
        assert!(e4 > 0.0);
        // The lambda-bias term grows with the mixture size.
        assert!(e4 > e1 * 0.5);
    }

    #[test]
    fn diagnostics_vanish_in_exact_mode() {
        let mdp = fixtures::t1();
        let mut p = Params::desk();
        assert_eq!(p.eps_hoff(&mdp), 0.0);
        assert_eq!(p.eps_eval(&mdp, 0.05), 0.0);
        p.mode = Mode::Sampled;
        assert!(p.eps_hoff(&mdp) > 0.0);
        assert!(p.eps_eval(&mdp, 0.05) > 0.0);
    }
}
