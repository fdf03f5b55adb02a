//! The tau-divergence family between Gaussian densities, the budget function
//! `gamma_tau`, the least-favorable covariance inflation, and the bisection
//! solver that matches a divergence budget `c` to its multiplier `theta`.
//!
//! The family interpolates between a Kullback-Leibler-type form at `tau = 0`
//! and a log-regularized form at `tau = 1`; branch selection compares `tau`
//! exactly against the endpoints, with no crossfade.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::spd::{MatrixFunction, SymMatrix};

/// Interpolation parameter of the divergence family, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tau(f64);

impl Tau {
    pub const ZERO: Tau = Tau(0.0);
    pub const ONE: Tau = Tau(1.0);

    pub fn new(value: f64) -> Result<Tau> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidModel(format!(
                "tau out of [0,1]: got {value}"
            )));
        }
        Ok(Tau(value))
    }

    pub fn value(&self) -> f64 {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0 == 0.0
    }

    pub fn is_one(&self) -> bool {
        self.0 == 1.0
    }
}

/// A nominal/actual pair of Gaussian densities of common dimension, both
/// with strictly positive definite covariance (checked on construction).
#[derive(Debug, Clone)]
pub struct GaussianPair {
    nominal_mean: DVector<f64>,
    nominal_cov: SymMatrix,
    actual_mean: DVector<f64>,
    actual_cov: SymMatrix,
}

impl GaussianPair {
    pub fn new(
        nominal_mean: DVector<f64>,
        nominal_cov: SymMatrix,
        actual_mean: DVector<f64>,
        actual_cov: SymMatrix,
    ) -> Result<Self> {
        let dim = nominal_mean.len();
        if nominal_cov.dim() != dim || actual_mean.len() != dim || actual_cov.dim() != dim {
            return Err(Error::DimensionMismatch(format!(
                "Gaussian pair dimensions disagree: means {}/{}, covariances {}/{}",
                nominal_mean.len(),
                actual_mean.len(),
                nominal_cov.dim(),
                actual_cov.dim()
            )));
        }
        nominal_cov.cholesky()?;
        actual_cov.cholesky()?;
        Ok(GaussianPair {
            nominal_mean,
            nominal_cov,
            actual_mean,
            actual_cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.nominal_mean.len()
    }

    pub fn nominal_mean(&self) -> &DVector<f64> {
        &self.nominal_mean
    }

    pub fn nominal_cov(&self) -> &SymMatrix {
        &self.nominal_cov
    }

    pub fn actual_mean(&self) -> &DVector<f64> {
        &self.actual_mean
    }

    pub fn actual_cov(&self) -> &SymMatrix {
        &self.actual_cov
    }
}

/// Largest admissible `theta` for a covariance with the given spectral norm:
/// `1 / ((1 - tau) * norm)` below one, unbounded at `tau = 1`.
pub fn theta_limit(p_norm: f64, tau: Tau) -> f64 {
    if tau.is_one() {
        f64::INFINITY
    } else {
        1.0 / ((1.0 - tau.value()) * p_norm)
    }
}

/// Divergence between the pair's actual and nominal densities.
///
/// Returns `+inf` at `tau = 1` whenever the means differ (the mean term is an
/// exact indicator there); otherwise a finite value `>= 0`, zero only for an
/// identical pair.
pub fn tau_divergence(pair: &GaussianPair, tau: Tau) -> Result<f64> {
    let chol = pair.nominal_cov.cholesky()?;
    let l = chol.lower();
    let delta = pair.actual_mean() - pair.nominal_mean();

    if tau.is_one() && delta.iter().any(|&d| d != 0.0) {
        return Ok(f64::INFINITY);
    }

    // M = L^-1 K_actual L^-T shares its spectrum with K_actual K_nominal^-1
    // and is symmetric, so the trace terms reduce to scalar functions of its
    // eigenvalues mu.
    let half = l
        .solve_lower_triangular(pair.actual_cov.as_matrix())
        .expect("positive Cholesky diagonal");
    let m = l
        .solve_lower_triangular(&half.transpose())
        .expect("positive Cholesky diagonal");
    let mu = SymMatrix::new(m)?.eigenvalues();

    let whitened = l
        .solve_lower_triangular(&delta)
        .expect("positive Cholesky diagonal");
    let mean_sq = whitened.norm_squared();

    let t = tau.value();
    let (mean_term, trace_term) = if tau.is_zero() {
        let s = mu.iter().map(|&u| (-u.ln() + u - 1.0).max(0.0)).sum::<f64>();
        (mean_sq, s)
    } else if tau.is_one() {
        let s = mu.iter().map(|&u| (u * u.ln() - u + 1.0).max(0.0)).sum::<f64>();
        (0.0, s)
    } else {
        let s = mu
            .iter()
            .map(|&u| (-u.powf(t) / (t * (1.0 - t)) + u / (1.0 - t) + 1.0 / t).max(0.0))
            .sum::<f64>();
        (mean_sq / (1.0 - t), s)
    };
    Ok(mean_term + trace_term)
}

/// Eigenvalues of `N = L_P^T L_P` (identical to the spectrum of `p`), the
/// common input of the budget and inflation branches.
fn spectrum_of_gram(p: &SymMatrix) -> Result<DVector<f64>> {
    Ok(p.cholesky()?.gram().eigenvalues())
}

fn check_admissible(theta: f64, lambda: &DVector<f64>, tau: Tau) -> Result<()> {
    let limit = theta_limit(lambda.amax(), tau);
    if !(theta >= 0.0) || theta >= limit {
        return Err(Error::ThetaOutOfRange { theta, limit });
    }
    Ok(())
}

/// Budget used by a multiplier `theta` on a prediction covariance `p`:
/// the divergence between the inflated and nominal covariance, as a scalar
/// spectral sum. Exactly `0` at `theta = 0`; strictly increasing in `theta`
/// on the admissible interval.
pub fn gamma_tau(p: &SymMatrix, theta: f64, tau: Tau) -> Result<f64> {
    if theta == 0.0 {
        return Ok(0.0);
    }
    let lambda = spectrum_of_gram(p)?;
    check_admissible(theta, &lambda, tau)?;
    let t = tau.value();
    let total: f64 = if tau.is_zero() {
        lambda
            .iter()
            .map(|&l| {
                let u = 1.0 - theta * l;
                (u.ln() + 1.0 / u - 1.0).max(0.0)
            })
            .sum()
    } else if tau.is_one() {
        lambda
            .iter()
            .map(|&l| {
                let x = theta * l;
                (x.exp() * (x - 1.0) + 1.0).max(0.0)
            })
            .sum()
    } else {
        lambda
            .iter()
            .map(|&l| {
                let u = 1.0 - theta * (1.0 - t) * l;
                let v = u.powf(1.0 / (t - 1.0));
                (-v.powf(t) / (t * (1.0 - t)) + v / (1.0 - t) + 1.0 / t).max(0.0)
            })
            .sum()
    };
    Ok(total)
}

/// Least-favorable inflation of a prediction covariance: `p` itself at
/// `theta = 0`, otherwise `L (I - theta (1-tau) N)^{1/(tau-1)} L^T` below
/// `tau = 1` and `L exp(theta N) L^T` at `tau = 1`, with `N = L^T L`.
pub fn least_favorable_cov(p: &SymMatrix, theta: f64, tau: Tau) -> Result<SymMatrix> {
    if theta == 0.0 {
        return Ok(p.clone());
    }
    let chol = p.cholesky()?;
    let n_mat = chol.gram();
    check_admissible(theta, &n_mat.eigenvalues(), tau)?;
    let n = p.dim();
    let core = if tau.is_one() {
        SymMatrix::new(theta * n_mat.as_matrix())?.matrix_function(MatrixFunction::Exp)?
    } else {
        let shifted = SymMatrix::new(
            DMatrix::identity(n, n) - theta * (1.0 - tau.value()) * n_mat.as_matrix(),
        )?;
        shifted.matrix_function(MatrixFunction::Power(1.0 / (tau.value() - 1.0)))?
    };
    SymMatrix::new(chol.lower() * core.as_matrix() * chol.lower().transpose())
}

const SOLVE_THETA_MAX_ITERS: usize = 200;

/// Absolute solver tolerance on `|gamma - c|`.
pub fn budget_tolerance(c: f64) -> f64 {
    (1e-9 * c).max(1e-12)
}

/// The multiplier `theta >= 0` with `gamma_tau(p, theta) = c` up to
/// [`budget_tolerance`], by bisection on the admissible interval.
/// `c = 0` returns exactly `0`.
pub fn solve_theta(p: &SymMatrix, c: f64, tau: Tau) -> Result<f64> {
    if !(c >= 0.0) {
        return Err(Error::InvalidModel(format!(
            "divergence budget must be nonnegative, got {c}"
        )));
    }
    if c == 0.0 {
        return Ok(0.0);
    }
    let lambda = spectrum_of_gram(p)?;
    let norm = lambda.amax();
    let tol = budget_tolerance(c);

    let gamma_at = |theta: f64| -> f64 {
        let t = tau.value();
        lambda
            .iter()
            .map(|&l| {
                if tau.is_zero() {
                    let u = 1.0 - theta * l;
                    (u.ln() + 1.0 / u - 1.0).max(0.0)
                } else if tau.is_one() {
                    let x = theta * l;
                    (x.exp() * (x - 1.0) + 1.0).max(0.0)
                } else {
                    let u = 1.0 - theta * (1.0 - t) * l;
                    let v = u.powf(1.0 / (t - 1.0));
                    (-v.powf(t) / (t * (1.0 - t)) + v / (1.0 - t) + 1.0 / t).max(0.0)
                }
            })
            .sum()
    };

    // Bracket: below tau = 1 the budget blows up at the admissibility
    // boundary, so an endpoint just inside it must exceed any reachable c.
    // At tau = 1 the domain is unbounded and the bracket grows by doubling.
    let mut hi = if tau.is_one() {
        let mut hi = 1.0 / norm;
        let mut doublings = 0;
        while gamma_at(hi) < c {
            hi *= 2.0;
            doublings += 1;
            if doublings > 64 || !hi.is_finite() {
                return Err(Error::NoConvergence {
                    iterations: doublings,
                    residual: c - gamma_at(hi.min(f64::MAX)),
                });
            }
        }
        hi
    } else {
        let hi = (1.0 - 1e-9) * theta_limit(norm, tau);
        let reached = gamma_at(hi);
        if !(reached >= c) {
            return Err(Error::BudgetUnreachable { c, reached });
        }
        hi
    };

    let mut lo = 0.0_f64;
    let mut residual = f64::INFINITY;
    for _ in 0..SOLVE_THETA_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        let g = gamma_at(mid);
        residual = (g - c).abs();
        if residual <= tol {
            return Ok(mid);
        }
        if g < c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::NoConvergence {
        iterations: SOLVE_THETA_MAX_ITERS,
        residual,
    })
}
