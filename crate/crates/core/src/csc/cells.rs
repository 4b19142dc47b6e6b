//! Breadth-first enumeration of the sign regions of a family of linear
//! functionals `theta -> v_i^T theta`.
//!
//! Each region (cell) is the set of parameters realizing one feasible sign
//! tuple, where the non-negative branch is the closed halfspace
//! `{v_i^T theta >= 0}` and the negative branch is the open halfspace
//! `{v_i^T theta < 0}`. Storing the negative branch as a *strict* constraint
//! is a deliberate tightening of the construction: with a closed complement a
//! representative sitting exactly on the boundary would reproduce the wrong
//! sign for its own cell.

use nalgebra::DVector;

use crate::csc::lp::{lp_feasible, lp_feasible_opts, Constraint, Feasibility};
use crate::error::{Error, Result};

pub const DEFAULT_CELL_CAP: usize = 2_000_000;

#[derive(Clone, Debug)]
pub struct Cell {
    /// Branch taken for each input vector: `true` is the closed non-negative
    /// side, `false` the strict negative side.
    pub signs: Vec<bool>,
    /// A point satisfying every branch constraint with the stated strictness.
    pub representative: DVector<f64>,
    /// Margin of the strict constraints at the representative.
    pub margin: f64,
}

#[derive(Clone, Debug)]
pub struct CellSet {
    pub dim: usize,
    pub cells: Vec<Cell>,
}

impl CellSet {
    /// The sign tuple realized by an arbitrary parameter point.
    pub fn signs_of(vectors: &[DVector<f64>], theta: &DVector<f64>) -> Vec<bool> {
        vectors.iter().map(|v| v.dot(theta) >= 0.0).collect()
    }

    /// Sign tuple of a cell representative. Cells whose closed constraints
    /// are forced tight (such as a hyperplane cell from vectors v and -v)
    /// place the representative exactly on the boundary, where the dot
    /// product is a forced zero computed with round-off; `tol` absorbs it.
    pub fn signs_of_representative(
        vectors: &[DVector<f64>],
        theta: &DVector<f64>,
        tol: f64,
    ) -> Vec<bool> {
        vectors.iter().map(|v| v.dot(theta) >= -tol).collect()
    }

    pub fn contains_signs(&self, signs: &[bool]) -> bool {
        self.cells.iter().any(|c| c.signs == signs)
    }
}

/// Enumerate all feasible sign regions of `vectors`.
pub fn bfs_sign_regions(vectors: &[DVector<f64>], cap: usize, strict_tol: f64) -> Result<CellSet> {
    bfs_sign_regions_seeded(&[], vectors, cap, strict_tol)
}

/// Same, but every cell additionally satisfies the `seed` constraints (which
/// do not contribute to the sign tuple). Used to restrict the enumeration to
/// a halfspace such as `gamma > 0`.
pub fn bfs_sign_regions_seeded(
    seed: &[Constraint],
    vectors: &[DVector<f64>],
    cap: usize,
    strict_tol: f64,
) -> Result<CellSet> {
    if vectors.is_empty() {
        return Err(Error::InvalidParam("no input vectors".into()));
    }
    let dim = vectors[0].len();
    for v in vectors {
        if v.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "vector dim {} vs {}",
                v.len(),
                dim
            )));
        }
    }
    // Frontier of partial cells; each entry is the branch list so far with a
    // witness point proving feasibility.
    let mut frontier: Vec<(Vec<bool>, Feasibility)> = Vec::new();
    {
        let mut base = lp_feasible(seed, strict_tol)?;
        if !base.feasible {
            return Ok(CellSet {
                dim,
                cells: Vec::new(),
            });
        }
        if base.representative.len() != dim {
            base.representative = DVector::zeros(dim);
        }
        frontier.push((Vec::new(), base));
    }
    // A witness comfortably off a hyperplane certifies that side's branch
    // without a solver call; only the other side (and the final level, which
    // needs polished representatives) goes through the LP.
    const CERT_MARGIN: f64 = 1e-7;
    for (i, v) in vectors.iter().enumerate() {
        let last = i + 1 == vectors.len();
        let v_norm = v.norm();
        let mut next = Vec::with_capacity(frontier.len() + 8);
        for (branches, feas) in &frontier {
            let val = if v_norm > 0.0 {
                v.dot(&feas.representative) / v_norm
            } else {
                0.0
            };
            for positive in [true, false] {
                let certified = if v_norm == 0.0 {
                    // Zero normal: the closed side is everything, the strict
                    // side empty.
                    if positive {
                        true
                    } else {
                        continue;
                    }
                } else if positive {
                    val > CERT_MARGIN
                } else {
                    val < -CERT_MARGIN
                };
                let mut b = branches.clone();
                b.push(positive);
                if certified && !last {
                    next.push((b, feas.clone()));
                    continue;
                }
                let mut cons: Vec<Constraint> = seed.to_vec();
                for (j, &pos) in b.iter().enumerate() {
                    cons.push(branch_constraint(&vectors[j], pos));
                }
                let solved = lp_feasible_opts(&cons, strict_tol, last)?;
                if solved.feasible {
                    next.push((b, solved));
                }
            }
        }
        if next.len() > cap {
            return Err(Error::CellCapExceeded { cap });
        }
        frontier = next;
    }
    let cells = frontier
        .into_iter()
        .map(|(signs, feas)| Cell {
            signs,
            representative: feas.representative,
            margin: feas.margin,
        })
        .collect();
    Ok(CellSet { dim, cells })
}

fn branch_constraint(v: &DVector<f64>, positive: bool) -> Constraint {
    if positive {
        Constraint::closed(v.clone())
    } else {
        Constraint::strict(-v)
    }
}

/// `ln` of the sign-pattern bound `(8 e N / K)^K` for N linear functionals in
/// K variables (N >= K).
pub fn cell_count_bound_ln(n: usize, k: usize) -> f64 {
    let k_f = k as f64;
    k_f * (8.0 * std::f64::consts::E * n as f64 / k_f).ln()
}
