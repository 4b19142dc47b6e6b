//! Homogeneous-halfspace feasibility via a small dense two-phase simplex.
//!
//! The only LP shape needed by the cell enumeration is
//!
//! ```text
//!   maximize s
//!   s.t.  theta^T v_j >= s   for strict constraints,
//!         theta^T v_j >= 0   for closed constraints,
//!         ||theta||_inf <= 1,  s <= 1.
//! ```
//!
//! A strict system is feasible iff the optimum exceeds `strict_tol`; with no
//! strict constraints the origin is always feasible. The maximizer doubles as
//! the cell representative.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// One homogeneous halfspace: `theta^T normal >= 0`, or `> 0` when strict.
#[derive(Clone, Debug)]
pub struct Constraint {
    pub normal: DVector<f64>,
    pub strict: bool,
}

impl Constraint {
    pub fn closed(normal: DVector<f64>) -> Self {
        Constraint {
            normal,
            strict: false,
        }
    }

    pub fn strict(normal: DVector<f64>) -> Self {
        Constraint {
            normal,
            strict: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Feasibility {
    pub feasible: bool,
    /// LP maximizer; meaningful whenever the system is feasible.
    pub representative: DVector<f64>,
    /// Optimal margin `s*` of the strict constraints (1 when none exist).
    pub margin: f64,
}

pub const DEFAULT_STRICT_TOL: f64 = 1e-9;

/// Decide feasibility of a homogeneous constraint system and return a
/// representative point.
pub fn lp_feasible(constraints: &[Constraint], strict_tol: f64) -> Result<Feasibility> {
    lp_feasible_opts(constraints, strict_tol, true)
}

/// Same, optionally skipping the representative polish stage (cheaper when
/// the caller needs only the feasibility verdict).
pub fn lp_feasible_opts(
    constraints: &[Constraint],
    strict_tol: f64,
    polish: bool,
) -> Result<Feasibility> {
    let dim = constraints
        .iter()
        .map(|c| c.normal.len())
        .max()
        .unwrap_or(0);
    if dim == 0 {
        return Ok(Feasibility {
            feasible: true,
            representative: DVector::zeros(0),
            margin: 1.0,
        });
    }
    let mut rows: Vec<(DVector<f64>, bool)> = Vec::new();
    for c in constraints {
        if c.normal.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "constraint dim {} vs {}",
                c.normal.len(),
                dim
            )));
        }
        let norm = c.normal.norm();
        if norm == 0.0 {
            if c.strict {
                // 0 > 0 is empty.
                return Ok(Feasibility {
                    feasible: false,
                    representative: DVector::zeros(dim),
                    margin: f64::NEG_INFINITY,
                });
            }
            continue; // 0 >= 0 always holds.
        }
        rows.push((&c.normal / norm, c.strict));
    }
    let any_strict = rows.iter().any(|(_, s)| *s);
    if rows.is_empty() {
        return Ok(Feasibility {
            feasible: true,
            representative: DVector::zeros(dim),
            margin: 1.0,
        });
    }

    // Variables y = (p_1..p_dim, q) with p = theta + 1 in [0, 2], q = s + 1 in
    // [0, 2]. Constraints in `A y <= b` form:
    //   strict row j:   -v^T p + q <= 1 - sum(v)
    //   closed row j:   -v^T p     <= -sum(v)
    //   p_i <= 2, q <= 2.
    let n_vars = dim + 1;
    let mut a: Vec<Vec<f64>> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    for (v, strict) in &rows {
        let mut row = vec![0.0; n_vars];
        for i in 0..dim {
            row[i] = -v[i];
        }
        let vsum: f64 = v.iter().sum();
        if *strict {
            row[dim] = 1.0;
            b.push(1.0 - vsum);
        } else {
            b.push(-vsum);
        }
        a.push(row);
    }
    for i in 0..n_vars {
        let mut row = vec![0.0; n_vars];
        row[i] = 1.0;
        a.push(row);
        b.push(2.0);
    }
    let mut c = vec![0.0; n_vars];
    c[dim] = 1.0;

    let solution = simplex_max(&a, &b, &c)?;
    let Some((y, _)) = solution else {
        // The box always contains y = 1 (theta = 0, s = 0) when no strict
        // rows exist, so infeasibility can only be reported for strict ones.
        return Ok(Feasibility {
            feasible: false,
            representative: DVector::zeros(dim),
            margin: f64::NEG_INFINITY,
        });
    };
    let theta = DVector::from_fn(dim, |i, _| y[i] - 1.0);
    let s = y[dim] - 1.0;
    let feasible = if any_strict { s > strict_tol } else { s >= 0.0 };
    if !feasible {
        return Ok(Feasibility {
            feasible,
            representative: theta,
            margin: if any_strict { s } else { 1.0 },
        });
    }

    if !polish {
        return Ok(Feasibility {
            feasible,
            representative: theta,
            margin: if any_strict { s } else { 1.0 },
        });
    }

    // Polish stage: the feasibility optimum only controls the strict rows, so
    // the theta part can land exactly on a closed boundary and round-off then
    // flips its sign. Re-solve maximizing the worst margin over all rows while
    // holding the strict rows above half the achieved margin; cells with
    // interior get a representative bounded away from every boundary.
    let polished = polish_representative(&rows, dim, s, any_strict)?;
    let representative = polished.unwrap_or(theta);
    Ok(Feasibility {
        feasible,
        representative,
        margin: if any_strict { s } else { 1.0 },
    })
}

fn polish_representative(
    rows: &[(DVector<f64>, bool)],
    dim: usize,
    strict_margin: f64,
    any_strict: bool,
) -> Result<Option<DVector<f64>>> {
    let n_vars = dim + 1; // p and the common margin q
    let tau = if any_strict {
        (strict_margin.min(1.0)) * 0.5
    } else {
        0.0
    };
    let mut a: Vec<Vec<f64>> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    for (v, strict) in rows {
        // -v^T p + q <= 1 - sum(v): common margin on every row.
        let mut row = vec![0.0; n_vars];
        for i in 0..dim {
            row[i] = -v[i];
        }
        row[dim] = 1.0;
        let vsum: f64 = v.iter().sum();
        a.push(row);
        b.push(1.0 - vsum);
        if *strict {
            // v^T theta >= tau, i.e. -v^T p <= -tau - sum(v).
            let mut hard = vec![0.0; n_vars];
            for i in 0..dim {
                hard[i] = -v[i];
            }
            a.push(hard);
            b.push(-tau - vsum);
        }
    }
    for i in 0..n_vars {
        let mut row = vec![0.0; n_vars];
        row[i] = 1.0;
        a.push(row);
        b.push(2.0);
    }
    let mut c = vec![0.0; n_vars];
    c[dim] = 1.0;
    match simplex_max(&a, &b, &c)? {
        Some((y, _)) => Ok(Some(DVector::from_fn(dim, |i, _| y[i] - 1.0))),
        None => Ok(None),
    }
}

const PIVOT_TOL: f64 = 1e-9;
const MAX_PIVOTS: usize = 50_000;

/// Dense two-phase simplex for `maximize c^T x, A x <= b, x >= 0`.
/// Returns `None` when infeasible. Bland's rule keeps it from cycling.
pub fn simplex_max(
    a: &[Vec<f64>],
    b: &[f64],
    c: &[f64],
) -> Result<Option<(Vec<f64>, f64)>> {
    let m = a.len();
    let n = c.len();
    // Columns: n structural, m slack, up to m artificial, then rhs.
    let mut need_art: Vec<bool> = b.iter().map(|&bi| bi < 0.0).collect();
    let n_art = need_art.iter().filter(|&&x| x).count();
    let total = n + m + n_art;
    let mut t = vec![vec![0.0; total + 1]; m];
    let mut basis = vec![0usize; m];
    let mut art_idx = 0usize;
    for i in 0..m {
        let flip = if need_art[i] { -1.0 } else { 1.0 };
        for j in 0..n {
            t[i][j] = flip * a[i][j];
        }
        t[i][n + i] = flip; // slack
        t[i][total] = flip * b[i];
        if need_art[i] {
            t[i][n + m + art_idx] = 1.0;
            basis[i] = n + m + art_idx;
            art_idx += 1;
        } else {
            basis[i] = n + i;
        }
    }

    if n_art > 0 {
        // Phase 1: maximize -sum(artificials).
        let mut obj = vec![0.0; total + 1];
        for j in n + m..total {
            obj[j] = -1.0;
        }
        price_out(&mut obj, &t, &basis);
        run_simplex(&mut t, &mut obj, &mut basis, total)?;
        let phase1 = -obj[total];
        if phase1 > 1e-7 {
            return Ok(None);
        }
        // Pivot remaining artificials out of the basis where possible.
        for i in 0..m {
            if basis[i] >= n + m {
                let mut entered = false;
                for j in 0..n + m {
                    if t[i][j].abs() > PIVOT_TOL {
                        pivot(&mut t, &mut basis, i, j, total);
                        entered = true;
                        break;
                    }
                }
                if !entered {
                    // Redundant row; leave the (zero-valued) artificial basic.
                    need_art[i] = true;
                }
            }
        }
    }

    // Phase 2.
    let mut obj = vec![0.0; total + 1];
    obj[..n].copy_from_slice(c);
    // Forbid re-entering artificials.
    price_out(&mut obj, &t, &basis);
    run_simplex_restricted(&mut t, &mut obj, &mut basis, total, n + m)?;
    let mut x = vec![0.0; n];
    for i in 0..m {
        if basis[i] < n {
            x[basis[i]] = t[i][total];
        }
    }
    let value = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    Ok(Some((x, value)))
}

fn price_out(obj: &mut [f64], t: &[Vec<f64>], basis: &[usize]) {
    let total = obj.len() - 1;
    for (i, &bi) in basis.iter().enumerate() {
        let coef = obj[bi];
        if coef.abs() > 0.0 {
            for j in 0..=total {
                obj[j] -= coef * t[i][j];
            }
        }
    }
}

fn run_simplex(
    t: &mut [Vec<f64>],
    obj: &mut [f64],
    basis: &mut [usize],
    total: usize,
) -> Result<()> {
    run_simplex_restricted(t, obj, basis, total, total)
}

fn run_simplex_restricted(
    t: &mut [Vec<f64>],
    obj: &mut [f64],
    basis: &mut [usize],
    total: usize,
    allowed_cols: usize,
) -> Result<()> {
    for _ in 0..MAX_PIVOTS {
        // Bland: smallest improving column.
        let mut entering = None;
        for (j, &oj) in obj.iter().enumerate().take(allowed_cols) {
            if oj > PIVOT_TOL {
                entering = Some(j);
                break;
            }
        }
        let Some(col) = entering else {
            return Ok(());
        };
        // Ratio test, ties to the smallest basis index.
        let mut leaving: Option<(usize, f64)> = None;
        for (i, row) in t.iter().enumerate() {
            if row[col] > PIVOT_TOL {
                let ratio = row[total] / row[col];
                match leaving {
                    None => leaving = Some((i, ratio)),
                    Some((li, lr)) => {
                        if ratio < lr - 1e-12
                            || ((ratio - lr).abs() <= 1e-12 && basis[i] < basis[li])
                        {
                            leaving = Some((i, ratio));
                        }
                    }
                }
            }
        }
        let Some((row, _)) = leaving else {
            return Err(Error::LpFailure("objective unbounded".into()));
        };
        pivot_with_obj(t, obj, basis, row, col, total);
    }
    Err(Error::LpFailure("pivot limit reached".into()))
}

fn pivot(t: &mut [Vec<f64>], basis: &mut [usize], row: usize, col: usize, total: usize) {
    let p = t[row][col];
    for j in 0..=total {
        t[row][j] /= p;
    }
    for i in 0..t.len() {
        if i != row && t[i][col].abs() > 0.0 {
            let f = t[i][col];
            for j in 0..=total {
                t[i][j] -= f * t[row][j];
            }
        }
    }
    basis[row] = col;
}

fn pivot_with_obj(
    t: &mut [Vec<f64>],
    obj: &mut [f64],
    basis: &mut [usize],
    row: usize,
    col: usize,
    total: usize,
) {
    pivot(t, basis, row, col, total);
    let f = obj[col];
    if f.abs() > 0.0 {
        for j in 0..=total {
            obj[j] -= f * t[row][j];
        }
    }
}
