//! Dense symmetric-positive-definite kernels: Cholesky factors, matrix
//! functions of symmetric matrices through the eigendecomposition, spectral
//! norms and the `I_2 (x) M` block embedding.
//!
//! Everything here is a pure function over immutable values. Symmetry is not
//! trusted from the caller: [`SymMatrix::new`] averages with the transpose,
//! and every operation returning a matrix re-symmetrizes, so asymmetry cannot
//! drift through long recursions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative eigenvalue threshold below which a matrix is treated as not
/// positive definite (guards log and negative powers against round-off).
const PD_EIG_RTOL: f64 = 1e-13;

/// Symmetric eigendecomposition by cyclic Jacobi rotations: returns
/// `(values, q)` with `m = q diag(values) q^T`, values unordered.
///
/// Jacobi keeps both the orthogonality of `q` and the reconstruction
/// residual at round-off level, which the matrix-function tolerances
/// downstream rely on; general-purpose tridiagonal solvers can leave
/// residuals orders of magnitude above round-off. The matrices here are
/// small and dense, so the extra sweeps cost nothing that matters.
fn jacobi_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let mut a = m.clone();
    let mut q = DMatrix::<f64>::identity(n, n);
    // The Frobenius norm is rotation-invariant, so the initial norm scales
    // the off-diagonal convergence test for the whole iteration.
    let tol = f64::EPSILON * a.norm();
    if n <= 1 || tol == 0.0 {
        return (a.diagonal().into_owned(), q);
    }
    for _ in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n - 1 {
            for r in p + 1..n {
                let apq = a[(p, r)];
                if apq.abs() <= 1e-2 * tol {
                    continue;
                }
                let theta = (a[(r, r)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                let tau = s / (1.0 + c);
                let (app, arr) = (a[(p, p)], a[(r, r)]);
                a[(p, p)] = app - t * apq;
                a[(r, r)] = arr + t * apq;
                a[(p, r)] = 0.0;
                a[(r, p)] = 0.0;
                for i in 0..n {
                    if i != p && i != r {
                        let g = a[(i, p)];
                        let h = a[(i, r)];
                        a[(i, p)] = g - s * (h + g * tau);
                        a[(p, i)] = a[(i, p)];
                        a[(i, r)] = h + s * (g - h * tau);
                        a[(r, i)] = a[(i, r)];
                    }
                    let g = q[(i, p)];
                    let h = q[(i, r)];
                    q[(i, p)] = g - s * (h + g * tau);
                    q[(i, r)] = h + s * (g - h * tau);
                }
            }
        }
    }
    (a.diagonal().into_owned(), q)
}

/// A real symmetric matrix. `entries[i][j] == entries[j][i]` holds exactly:
/// construction averages with the transpose, which is bit-stable for inputs
/// that are already symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    entries: DMatrix<f64>,
}

/// Scalar function applied to the spectrum by [`SymMatrix::matrix_function`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatrixFunction {
    /// `m^alpha`. Requires a strictly positive spectrum unless `alpha` is a
    /// non-negative integer.
    Power(f64),
    Exp,
    /// Requires a strictly positive spectrum.
    Log,
    /// Requires a spectrum bounded away from zero.
    Inverse,
}

impl MatrixFunction {
    fn name(&self) -> &'static str {
        match self {
            MatrixFunction::Power(_) => "power",
            MatrixFunction::Exp => "exp",
            MatrixFunction::Log => "log",
            MatrixFunction::Inverse => "inverse",
        }
    }

    /// Whether the spectrum must stay within the function's domain.
    fn needs_positive_spectrum(&self) -> bool {
        match self {
            MatrixFunction::Power(a) => !(*a >= 0.0 && a.fract() == 0.0),
            MatrixFunction::Exp => false,
            MatrixFunction::Log => true,
            MatrixFunction::Inverse => true,
        }
    }

    fn eval(&self, x: f64) -> f64 {
        match self {
            MatrixFunction::Power(a) => x.powf(*a),
            MatrixFunction::Exp => x.exp(),
            MatrixFunction::Log => x.ln(),
            MatrixFunction::Inverse => 1.0 / x,
        }
    }
}

impl SymMatrix {
    /// Build from a square matrix, enforcing symmetry by averaging with the
    /// transpose.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 || m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "symmetric matrix must be square and non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let sym = 0.5 * (&m + m.transpose());
        Ok(SymMatrix { entries: sym })
    }

    /// Build from row-major nested arrays.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch(
                "rows must form a non-empty square matrix".to_string(),
            ));
        }
        let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        SymMatrix::new(m)
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix {
            entries: DMatrix::identity(n, n),
        }
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix {
            entries: DMatrix::zeros(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    pub fn diagonal(&self) -> DVector<f64> {
        self.entries.diagonal()
    }

    /// Eigenvalues of the matrix (unordered).
    pub fn eigenvalues(&self) -> DVector<f64> {
        jacobi_eigen(&self.entries).0
    }

    /// Lower-triangular Cholesky factor `L` with `L L^T = self`.
    ///
    /// Fails with [`Error::NotPositiveDefinite`] on a non-positive pivot,
    /// which callers surface as a degenerate covariance.
    pub fn cholesky(&self) -> Result<SpdFactor> {
        let chol = self
            .entries
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite {
                context: format!("{0}x{0} Cholesky pivot <= 0", self.dim()),
            })?;
        Ok(SpdFactor {
            lower: chol.unpack(),
        })
    }

    /// `Q f(Lambda) Q^T` through the symmetric eigendecomposition,
    /// re-symmetrized.
    pub fn matrix_function(&self, f: MatrixFunction) -> Result<SymMatrix> {
        let (values, q) = jacobi_eigen(&self.entries);
        let op_norm = values.amax();
        if f.needs_positive_spectrum() {
            let tol = PD_EIG_RTOL * op_norm;
            if let Some(bad) = values.iter().find(|&&l| l <= tol) {
                return Err(Error::SpectrumOutOfDomain {
                    function: f.name(),
                    eigenvalue: *bad,
                });
            }
        }
        let mapped = values.map(|l| f.eval(l));
        let out = &q * DMatrix::from_diagonal(&mapped) * q.transpose();
        SymMatrix::new(out)
    }

    /// Spectral norm: the largest absolute eigenvalue.
    pub fn operator_norm(&self) -> f64 {
        self.eigenvalues().amax()
    }

    /// Smallest eigenvalue, used for semidefiniteness checks.
    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().min()
    }

    /// The 2n x 2n block diagonal `[[self, 0], [0, self]]`.
    pub fn kron_i2(&self) -> SymMatrix {
        let n = self.dim();
        let mut out = DMatrix::zeros(2 * n, 2 * n);
        out.view_mut((0, 0), (n, n)).copy_from(&self.entries);
        out.view_mut((n, n), (n, n)).copy_from(&self.entries);
        SymMatrix { entries: out }
    }

    /// Inverse through the Cholesky factor. Requires positive definiteness.
    pub fn spd_inverse(&self) -> Result<SymMatrix> {
        let chol = self.cholesky()?;
        let inv = chol.solve_matrix(&DMatrix::identity(self.dim(), self.dim()));
        SymMatrix::new(inv)
    }

    /// A symmetric square root of a positive semidefinite matrix, with
    /// eigenvalues inside `[-tol, 0)` clamped to zero. Fails if the matrix
    /// is indefinite beyond round-off.
    pub fn psd_sqrt(&self) -> Result<DMatrix<f64>> {
        let (mut vals, q) = jacobi_eigen(&self.entries);
        let tol = PD_EIG_RTOL.sqrt() * vals.amax().max(1.0);
        for v in vals.iter_mut() {
            if *v < -tol {
                return Err(Error::NotPositiveDefinite {
                    context: format!("square root of indefinite matrix (eigenvalue {v})"),
                });
            }
            *v = v.max(0.0).sqrt();
        }
        Ok(&q * DMatrix::from_diagonal(&vals) * q.transpose())
    }
}

/// Lower-triangular Cholesky factor of an SPD matrix; the diagonal is
/// strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdFactor {
    lower: DMatrix<f64>,
}

impl SpdFactor {
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// `L L^T`, reconstructing the factored matrix.
    pub fn reconstruct(&self) -> SymMatrix {
        SymMatrix {
            entries: &self.lower * self.lower.transpose(),
        }
    }

    /// `L^T L`, the Gram matrix of the factor (shares the spectrum of
    /// `L L^T`).
    pub fn gram(&self) -> SymMatrix {
        SymMatrix {
            entries: self.lower.transpose() * &self.lower,
        }
    }

    /// Solve `L L^T x = b` by two triangular solves.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self
            .lower
            .solve_lower_triangular(b)
            .expect("strictly positive Cholesky diagonal");
        self.lower
            .transpose()
            .solve_upper_triangular(&y)
            .expect("strictly positive Cholesky diagonal")
    }

    /// Solve `L L^T x = b` for a vector right-hand side.
    pub fn solve_vector(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self
            .lower
            .solve_lower_triangular(b)
            .expect("strictly positive Cholesky diagonal");
        self.lower
            .transpose()
            .solve_upper_triangular(&y)
            .expect("strictly positive Cholesky diagonal")
    }

    /// `log det (L L^T) = 2 sum_i log L_ii`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}
