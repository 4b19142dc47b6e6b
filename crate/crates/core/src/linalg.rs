//! Dense symmetric linear algebra with explicit tolerance contracts.
//!
//! Everything here operates on small matrices (d up to a few dozen), so all
//! routines go through a full symmetric eigendecomposition rather than
//! iterative solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default floor below which an eigenvalue is treated as zero in `inv_sqrt`.
pub const EIG_FLOOR: f64 = 1e-12;
/// Asymmetry tolerated on construction of an [`SpdMatrix`].
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues in `[-PSD_CLAMP, 0)` are clamped to zero; anything below is an error.
pub const PSD_CLAMP: f64 = 1e-10;

/// A symmetric positive semi-definite matrix with a cached eigendecomposition.
///
/// Eigenvalues are stored in descending order; negative values larger than
/// `-PSD_CLAMP` are clamped to zero on construction.
#[derive(Clone, Debug)]
pub struct SpdMatrix {
    mat: DMatrix<f64>,
    eigvals: DVector<f64>,
    eigvecs: DMatrix<f64>,
}

impl SpdMatrix {
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "expected square matrix, got {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        let asym = (&mat - mat.transpose()).abs().max();
        if asym > SYMMETRY_TOL {
            return Err(Error::NotSymmetric(asym));
        }
        let sym = symmetrize(&mat);
        let eig = sym.clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&i, &j| {
            eig.eigenvalues[j]
                .partial_cmp(&eig.eigenvalues[i])
                .unwrap()
                .then(i.cmp(&j))
        });
        let n = sym.nrows();
        let mut eigvals = DVector::zeros(n);
        let mut eigvecs = DMatrix::zeros(n, n);
        for (k, &i) in order.iter().enumerate() {
            let mut lambda = eig.eigenvalues[i];
            if lambda < 0.0 {
                if lambda < -PSD_CLAMP {
                    return Err(Error::NotPsd(lambda));
                }
                lambda = 0.0;
            }
            eigvals[k] = lambda;
            eigvecs.set_column(k, &eig.eigenvectors.column(i));
        }
        Ok(SpdMatrix {
            mat: sym,
            eigvals,
            eigvecs,
        })
    }

    pub fn identity(dim: usize) -> Self {
        SpdMatrix {
            mat: DMatrix::identity(dim, dim),
            eigvals: DVector::from_element(dim, 1.0),
            eigvecs: DMatrix::identity(dim, dim),
        }
    }

    /// `s * I`, requires `s >= 0`.
    pub fn scaled_identity(dim: usize, s: f64) -> Result<Self> {
        if s < 0.0 {
            return Err(Error::NotPsd(s));
        }
        Ok(SpdMatrix {
            mat: DMatrix::identity(dim, dim) * s,
            eigvals: DVector::from_element(dim, s),
            eigvecs: DMatrix::identity(dim, dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    /// Eigenvalues in descending order (clamped to be non-negative).
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigvals
    }

    /// Orthonormal eigenvectors; column `k` matches `eigenvalues()[k]`.
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigvecs
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigvals[self.dim() - 1]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigvals[0]
    }

    fn map_eigenvalues(&self, f: impl Fn(f64) -> f64) -> SpdMatrix {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for k in 0..n {
            let v = self.eigvecs.column(k);
            out += v * v.transpose() * f(self.eigvals[k]);
        }
        // Rebuild symmetric and reuse the spectrum we already know.
        let mut vals = DVector::zeros(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            f(self.eigvals[j])
                .partial_cmp(&f(self.eigvals[i]))
                .unwrap()
                .then(i.cmp(&j))
        });
        let mut vecs = DMatrix::zeros(n, n);
        for (k, &i) in order.iter().enumerate() {
            vals[k] = f(self.eigvals[i]);
            vecs.set_column(k, &self.eigvecs.column(i));
        }
        SpdMatrix {
            mat: symmetrize(&out),
            eigvals: vals,
            eigvecs: vecs,
        }
    }

    /// Inverse square root `V diag(lambda_i^{-1/2}) V^T`.
    ///
    /// Errors if the smallest eigenvalue is below `eig_floor`; the contract is
    /// `(result)^2 * M = I` within 1e-8 in operator norm.
    pub fn inv_sqrt(&self, eig_floor: f64) -> Result<SpdMatrix> {
        if self.min_eigenvalue() < eig_floor {
            return Err(Error::Singular {
                value: self.min_eigenvalue(),
                floor: eig_floor,
            });
        }
        Ok(self.map_eigenvalues(|l| l.powf(-0.5)))
    }

    /// Inverse; same floor contract as [`SpdMatrix::inv_sqrt`].
    pub fn inv(&self, eig_floor: f64) -> Result<SpdMatrix> {
        if self.min_eigenvalue() < eig_floor {
            return Err(Error::Singular {
                value: self.min_eigenvalue(),
                floor: eig_floor,
            });
        }
        Ok(self.map_eigenvalues(|l| 1.0 / l))
    }

    /// Moore-Penrose pseudo-inverse: eigenvalues below `tol * lambda_max` are zeroed.
    pub fn pinv(&self, tol: f64) -> SpdMatrix {
        let cutoff = tol * self.max_eigenvalue();
        self.map_eigenvalues(|l| if l > cutoff && l > 0.0 { 1.0 / l } else { 0.0 })
    }

    /// Orthogonal projector onto the span of eigenvectors with eigenvalue >= c.
    pub fn eig_subspace_projection(&self, c: f64) -> DMatrix<f64> {
        let n = self.dim();
        let mut p = DMatrix::zeros(n, n);
        for k in 0..n {
            if self.eigvals[k] >= c {
                let v = self.eigvecs.column(k);
                p += v * v.transpose();
            }
        }
        symmetrize(&p)
    }

    /// `sqrt(x^T M x)` (the `||x||_M` norm). Negative round-off is clamped.
    pub fn mahalanobis(&self, x: &DVector<f64>) -> f64 {
        quad_form(x, &self.mat).max(0.0).sqrt()
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn quad_form(x: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (x.transpose() * m * x)[(0, 0)]
}

pub fn outer(x: &DVector<f64>) -> DMatrix<f64> {
    x * x.transpose()
}

/// Maximize `|z^T M z|` over the unit ball.
///
/// `M` need not be symmetric: the quadratic form only sees `(M + M^T)/2`, so
/// the maximizer is the eigenvector of the symmetric part whose eigenvalue has
/// the largest magnitude. The returned vector has its first component of
/// magnitude above 1e-12 made positive to pin the sign.
pub fn top_abs_quadratic(m: &DMatrix<f64>) -> Result<(DVector<f64>, f64)> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "expected square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let sym = symmetrize(m);
    let eig = sym.symmetric_eigen();
    let mut best = 0usize;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i].abs() > eig.eigenvalues[best].abs() {
            best = i;
        }
    }
    let mut z: DVector<f64> = eig.eigenvectors.column(best).into_owned();
    for i in 0..z.len() {
        if z[i].abs() > 1e-12 {
            if z[i] < 0.0 {
                z = -z;
            }
            break;
        }
    }
    let norm = z.norm();
    if norm > 0.0 {
        z /= norm;
    }
    Ok((z, eig.eigenvalues[best].abs()))
}

/// Dense order-3 tensor in R^{d1 x d2 x d3}, stored row-major.
#[derive(Clone, Debug)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d1: usize, d2: usize, d3: usize) -> Self {
        Tensor3 {
            dims: (d1, d2, d3),
            data: vec![0.0; d1 * d2 * d3],
        }
    }

    /// `(v (x) m)_{ijk} = v_i m_{jk}`.
    pub fn from_outer(v: &DVector<f64>, m: &DMatrix<f64>) -> Self {
        let (d1, d2, d3) = (v.len(), m.nrows(), m.ncols());
        let mut t = Tensor3::zeros(d1, d2, d3);
        for i in 0..d1 {
            for j in 0..d2 {
                for k in 0..d3 {
                    *t.get_mut(i, j, k) = v[i] * m[(j, k)];
                }
            }
        }
        t
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.dims.1 + j) * self.dims.2 + k]
    }

    pub fn get_mut(&mut self, i: usize, j: usize, k: usize) -> &mut f64 {
        &mut self.data[(i * self.dims.1 + j) * self.dims.2 + k]
    }

    pub fn add_scaled_outer(&mut self, v: &DVector<f64>, m: &DMatrix<f64>, scale: f64) {
        for i in 0..self.dims.0 {
            for j in 0..self.dims.1 {
                for k in 0..self.dims.2 {
                    *self.get_mut(i, j, k) += scale * v[i] * m[(j, k)];
                }
            }
        }
    }

    /// Contract the first index against `u`, yielding the matrix `sum_i u_i T[i,:,:]`.
    pub fn contract_first(&self, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        if u.len() != self.dims.0 {
            return Err(Error::DimensionMismatch(format!(
                "tensor first dim {} vs vector {}",
                self.dims.0,
                u.len()
            )));
        }
        let mut out = DMatrix::zeros(self.dims.1, self.dims.2);
        for i in 0..self.dims.0 {
            for j in 0..self.dims.1 {
                for k in 0..self.dims.2 {
                    out[(j, k)] += u[i] * self.get(i, j, k);
                }
            }
        }
        Ok(out)
    }

    /// Apply a matrix to the first index: `T'_{ijk} = sum_m A_{im} T_{mjk}`.
    pub fn premultiply_first(&self, a: &DMatrix<f64>) -> Result<Tensor3> {
        if a.ncols() != self.dims.0 {
            return Err(Error::DimensionMismatch(format!(
                "matrix {}x{} vs tensor first dim {}",
                a.nrows(),
                a.ncols(),
                self.dims.0
            )));
        }
        let mut t = Tensor3::zeros(a.nrows(), self.dims.1, self.dims.2);
        for i in 0..a.nrows() {
            for m in 0..self.dims.0 {
                let w = a[(i, m)];
                if w == 0.0 {
                    continue;
                }
                for j in 0..self.dims.1 {
                    for k in 0..self.dims.2 {
                        *t.get_mut(i, j, k) += w * self.get(m, j, k);
                    }
                }
            }
        }
        Ok(t)
    }
}

/// `theta[u, z, y] = sum_{ijk} theta_{ijk} u_i z_j y_k`.
pub fn tensor_contract(
    t: &Tensor3,
    u: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    let (d1, d2, d3) = t.dims();
    if u.len() != d1 || z.len() != d2 || y.len() != d3 {
        return Err(Error::DimensionMismatch(format!(
            "tensor {:?} vs vectors ({}, {}, {})",
            t.dims(),
            u.len(),
            z.len(),
            y.len()
        )));
    }
    let m = t.contract_first(u)?;
    Ok((z.transpose() * m * y)[(0, 0)])
}

/// `sqrt(x^T A x)` for a plain symmetric matrix.
pub fn mahalanobis(x: &DVector<f64>, a: &SpdMatrix) -> Result<f64> {
    if x.len() != a.dim() {
        return Err(Error::DimensionMismatch(format!(
            "vector {} vs matrix {}",
            x.len(),
            a.dim()
        )));
    }
    Ok(a.mahalanobis(x))
}

/// Minimum-norm least squares `argmin ||X theta - y||` via SVD.
///
/// Returns the solution together with the maximum absolute residual, which the
/// realizability checks use to detect non-realizable inputs.
pub fn least_squares_min_norm(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "design matrix rows {} vs targets {}",
            x.nrows(),
            y.len()
        )));
    }
    let svd = x.clone().svd(true, true);
    let pinv = svd
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::LpFailure(e.to_string()))?;
    let theta = &pinv * y;
    let resid = (x * &theta - y).abs().max();
    Ok((theta, resid))
}
