//! Robust static estimation of `x` from `y` for a jointly Gaussian pair
//! `z = [x; y]`: the affine Bayes estimator together with the least-favorable
//! joint density over a divergence ball of radius `c` (or a fixed multiplier
//! `theta`). Only the `x` covariance block of the joint is perturbed; the
//! gain itself is budget-independent.

use nalgebra::{DMatrix, DVector};

use crate::divergence::{least_favorable_cov, solve_theta, Tau};
use crate::error::{Error, Result};
use crate::spd::SymMatrix;

/// Joint Gaussian for `z = [x; y]` with an `(n, p)` partition. The full
/// covariance and its `y` block are both strictly positive definite
/// (validated on construction).
#[derive(Debug, Clone)]
pub struct JointGaussian {
    mean: DVector<f64>,
    cov: SymMatrix,
    state_dim: usize,
    obs_dim: usize,
}

impl JointGaussian {
    pub fn new(mean: DVector<f64>, cov: SymMatrix, state_dim: usize, obs_dim: usize) -> Result<Self> {
        if state_dim == 0 || obs_dim == 0 {
            return Err(Error::DimensionMismatch(
                "state and observation dimensions must be positive".to_string(),
            ));
        }
        let dim = state_dim + obs_dim;
        if mean.len() != dim || cov.dim() != dim {
            return Err(Error::DimensionMismatch(format!(
                "joint of partition ({state_dim}, {obs_dim}) needs dimension {dim}, got mean {} and covariance {}",
                mean.len(),
                cov.dim()
            )));
        }
        cov.cholesky()?;
        let joint = JointGaussian {
            mean,
            cov,
            state_dim,
            obs_dim,
        };
        joint.obs_cov()?;
        Ok(joint)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &SymMatrix {
        &self.cov
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn state_mean(&self) -> DVector<f64> {
        self.mean.rows(0, self.state_dim).into_owned()
    }

    pub fn obs_mean(&self) -> DVector<f64> {
        self.mean.rows(self.state_dim, self.obs_dim).into_owned()
    }

    /// Upper-left `n x n` covariance block of `x`.
    pub fn state_cov(&self) -> SymMatrix {
        let block = self
            .cov
            .as_matrix()
            .view((0, 0), (self.state_dim, self.state_dim))
            .into_owned();
        SymMatrix::new(block).expect("diagonal block of a symmetric matrix")
    }

    /// Cross-covariance block of `x` against `y` (`n x p`).
    pub fn cross_cov(&self) -> DMatrix<f64> {
        self.cov
            .as_matrix()
            .view((0, self.state_dim), (self.state_dim, self.obs_dim))
            .into_owned()
    }

    /// Lower-right `p x p` covariance block of `y`; must be SPD since it is
    /// inverted by the estimator.
    pub fn obs_cov(&self) -> Result<SymMatrix> {
        let block = self
            .cov
            .as_matrix()
            .view((self.state_dim, self.state_dim), (self.obs_dim, self.obs_dim))
            .into_owned();
        let sym = SymMatrix::new(block)?;
        sym.cholesky().map_err(|_| Error::NotPositiveDefinite {
            context: "observation covariance block".to_string(),
        })?;
        Ok(sym)
    }
}

/// Solution of the static problem: affine estimator data plus the nominal
/// and least-favorable posterior covariances and the perturbed joint.
#[derive(Debug, Clone)]
pub struct StaticSolution {
    /// Bayes gain `K_xy K_y^-1`; does not depend on the budget.
    pub gain: DMatrix<f64>,
    /// `m_x - gain * m_y`; the estimate is `gain * y + intercept`.
    pub intercept: DVector<f64>,
    /// Schur complement `P = K_x - K_xy K_y^-1 K_yx`.
    pub nominal_posterior_cov: SymMatrix,
    /// Inflated posterior `V`, `V - P` positive semidefinite.
    pub least_favorable_posterior_cov: SymMatrix,
    /// The nominal joint with only its `x` block replaced by `V + K_xy K_y^-1 K_yx`.
    pub least_favorable_joint: JointGaussian,
    pub theta: f64,
}

impl StaticSolution {
    /// Apply the affine estimator to an observation.
    pub fn estimate(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.gain * y + &self.intercept
    }
}

struct BayesParts {
    gain: DMatrix<f64>,
    correction: DMatrix<f64>,
    posterior: SymMatrix,
}

/// Gain, posterior Schur complement and the correction `K_xy K_y^-1 K_yx`
/// shared by both solver entry points.
fn bayes_parts(model: &JointGaussian) -> Result<BayesParts> {
    let ky = model.obs_cov()?;
    let ky_chol = ky.cholesky()?;
    let kxy = model.cross_cov();
    // G = K_xy K_y^-1 = (K_y^-1 K_yx)^T.
    let ky_inv_kyx = ky_chol.solve_matrix(&kxy.transpose());
    let gain = ky_inv_kyx.transpose();
    let correction = &kxy * &ky_inv_kyx;
    let posterior = SymMatrix::new(model.state_cov().as_matrix() - &correction)?;
    Ok(BayesParts {
        gain,
        correction,
        posterior,
    })
}

fn assemble(model: &JointGaussian, parts: BayesParts, theta: f64, tau: Tau) -> Result<StaticSolution> {
    let v = least_favorable_cov(&parts.posterior, theta, tau)?;
    let intercept = model.state_mean() - &parts.gain * model.obs_mean();
    // theta = 0 leaves the joint untouched; copying it keeps the zero-budget
    // case bit-identical instead of within round-off of x - c + c.
    let least_favorable_joint = if theta == 0.0 {
        model.clone()
    } else {
        let n = model.state_dim();
        let perturbed_x = SymMatrix::new(v.as_matrix() + &parts.correction)?;
        let mut cov = model.cov().as_matrix().clone();
        cov.view_mut((0, 0), (n, n)).copy_from(perturbed_x.as_matrix());
        JointGaussian::new(
            model.mean().clone(),
            SymMatrix::new(cov)?,
            n,
            model.obs_dim(),
        )?
    };
    Ok(StaticSolution {
        gain: parts.gain,
        intercept,
        nominal_posterior_cov: parts.posterior,
        least_favorable_posterior_cov: v,
        least_favorable_joint,
        theta,
    })
}

/// Minimax estimator for a divergence budget `c`: solves for the multiplier,
/// inflates the posterior, and returns the (budget-independent) Bayes gain.
pub fn solve_static(model: &JointGaussian, c: f64, tau: Tau) -> Result<StaticSolution> {
    let parts = bayes_parts(model)?;
    let theta = solve_theta(&parts.posterior, c, tau)?;
    assemble(model, parts, theta, tau)
}

/// Same construction with the multiplier fixed a priori instead of solved
/// from a budget.
pub fn solve_static_fixed_theta(model: &JointGaussian, theta: f64, tau: Tau) -> Result<StaticSolution> {
    if !(theta > 0.0) {
        return Err(Error::ThetaOutOfRange {
            theta,
            limit: f64::INFINITY,
        });
    }
    let parts = bayes_parts(model)?;
    assemble(model, parts, theta, tau)
}
