//! Synthesis of the least-favorable state-space model for a policy, exact
//! evaluation of arbitrary gain-schedule filters against it, and a Monte
//! Carlo cross-check.
//!
//! The adversary's model is assembled in two sweeps. A forward sweep
//! ([`crate::filter::run_gain_schedule`]) produces the source filter's gains
//! `G_t` and inflation weights `Phi_t`. A backward sweep from
//! `Omega_{T+1}^-1 = 0` then produces, per step, the noise reweighting
//! `Kv_t = (I - J^T W J)^-1` and feedback `H_t = Kv_t J^T W F` with
//! `J = B - G D`, `F = A - G C`, `W = Omega_{t+1}^-1 + Phi_t`, and the
//! recursion `Omega_t^-1 = F^T W F + H^T Kv_t^-1 H`. The augmented model over
//! `[x; e]` (state and source-filter error) is
//!
//! ```text
//! A~ = [A  B H ]   B~ = [B] L    C~ = [C  D H]   D~ = D L
//!      [0  F+JH]        [J]
//! ```
//!
//! with `L` the Cholesky factor of `Kv_t`, so unit-variance white noise
//! drives the augmented system.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filter::{run_gain_schedule, GainSchedule, RobustPolicy, StateSpaceModel};
use crate::spd::SymMatrix;

/// The adversary's augmented model for one policy on one nominal model,
/// over `t = 0..=horizon`, plus the backward-sweep artifacts.
#[derive(Debug, Clone)]
pub struct LeastFavorableModel {
    horizon: usize,
    state_dim: usize,
    obs_dim: usize,
    a_tilde: Vec<DMatrix<f64>>,
    b_tilde: Vec<DMatrix<f64>>,
    c_tilde: Vec<DMatrix<f64>>,
    d_tilde: Vec<DMatrix<f64>>,
    h: Vec<DMatrix<f64>>,
    kv_tilde: Vec<SymMatrix>,
    /// `Omega_t^-1` for `t = 0..=horizon+1`; the last entry is zero.
    omega_inv: Vec<SymMatrix>,
    schedule: GainSchedule,
    x0_cov: SymMatrix,
    source_label: String,
}

impl LeastFavorableModel {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.state_dim + self.obs_dim
    }

    pub fn a_tilde(&self, t: usize) -> &DMatrix<f64> {
        &self.a_tilde[t]
    }

    pub fn b_tilde(&self, t: usize) -> &DMatrix<f64> {
        &self.b_tilde[t]
    }

    pub fn c_tilde(&self, t: usize) -> &DMatrix<f64> {
        &self.c_tilde[t]
    }

    pub fn d_tilde(&self, t: usize) -> &DMatrix<f64> {
        &self.d_tilde[t]
    }

    pub fn h(&self, t: usize) -> &DMatrix<f64> {
        &self.h[t]
    }

    pub fn kv_tilde(&self, t: usize) -> &SymMatrix {
        &self.kv_tilde[t]
    }

    /// `Omega_t^-1`, defined for `t = 0..=horizon+1`.
    pub fn omega_inv(&self, t: usize) -> &SymMatrix {
        &self.omega_inv[t]
    }

    /// The forward sweep this model was built against (source gains and
    /// inflation weights).
    pub fn schedule(&self) -> &GainSchedule {
        &self.schedule
    }

    pub fn x0_cov(&self) -> &SymMatrix {
        &self.x0_cov
    }

    pub fn source_label(&self) -> &str {
        &self.source_label
    }
}

/// Exact second moments of the error pair `[e'; e]` (evaluated filter's
/// error and source filter's error) under a least-favorable model, plus the
/// per-component variances read off the diagonal blocks.
#[derive(Debug, Clone)]
pub struct PerformanceReport {
    /// `Pi_t` for `t = 0..=horizon+1`, starting from the block-diagonal
    /// embedding of the prior covariance.
    pub pi: Vec<SymMatrix>,
    /// Diagonal of the upper-left block: the evaluated filter's error
    /// variances per component.
    pub variance_primary: Vec<DVector<f64>>,
    /// Diagonal of the lower-right block: the source filter's error
    /// variances per component.
    pub variance_reference: Vec<DVector<f64>>,
}

/// Build the least-favorable model for a policy by the forward/backward
/// sweep described in the module docs. Fails with the step index when
/// `I - J^T W J` loses positive definiteness, which means the per-step
/// budget is too large to sustain over this horizon.
pub fn build_least_favorable(
    model: &StateSpaceModel,
    policy: &RobustPolicy,
) -> Result<LeastFavorableModel> {
    let schedule = run_gain_schedule(model, policy)?;
    let horizon = model.horizon();
    let (n, m) = (model.state_dim(), model.noise_dim());

    let mut kv_rev = Vec::with_capacity(horizon + 1);
    let mut h_rev = Vec::with_capacity(horizon + 1);
    let mut omega_rev = vec![SymMatrix::zeros(n)];
    for t in (0..=horizon).rev() {
        let (a, b, c, d) = (model.a_at(t), model.b_at(t), model.c_at(t), model.d_at(t));
        let g = &schedule.steps[t].gain;
        let j = b - g * d;
        let f = a - g * c;
        let w = SymMatrix::new(
            omega_rev.last().expect("seeded with the terminal zero").as_matrix()
                + schedule.steps[t].phi.as_matrix(),
        )?;
        // R = Kv^-1 directly; reusing it below avoids a second inversion.
        let r = SymMatrix::new(
            DMatrix::identity(m, m) - j.transpose() * w.as_matrix() * &j,
        )?;
        let r_chol = r.cholesky().map_err(|_| {
            Error::NotPositiveDefinite {
                context: format!(
                    "noise reweighting I - J^T W J at t={t}: \
                     the distortion budget is too large for this horizon"
                ),
            }
            .at_step(t)
        })?;
        let kv = SymMatrix::new(r_chol.solve_matrix(&DMatrix::identity(m, m)))?;
        let h_t = r_chol.solve_matrix(&(j.transpose() * w.as_matrix() * &f));
        let omega_prev = SymMatrix::new(
            f.transpose() * w.as_matrix() * &f
                + h_t.transpose() * r.as_matrix() * &h_t,
        )?;
        kv_rev.push(kv);
        h_rev.push(h_t);
        omega_rev.push(omega_prev);
    }
    kv_rev.reverse();
    h_rev.reverse();
    omega_rev.reverse();

    let mut a_tilde = Vec::with_capacity(horizon + 1);
    let mut b_tilde = Vec::with_capacity(horizon + 1);
    let mut c_tilde = Vec::with_capacity(horizon + 1);
    let mut d_tilde = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let (a, b, c, d) = (model.a_at(t), model.b_at(t), model.c_at(t), model.d_at(t));
        let g = &schedule.steps[t].gain;
        let j = b - g * d;
        let f = a - g * c;
        let h_t = &h_rev[t];
        let l = kv_rev[t].cholesky()?.lower().clone();

        let mut at = DMatrix::zeros(2 * n, 2 * n);
        at.view_mut((0, 0), (n, n)).copy_from(a);
        at.view_mut((0, n), (n, n)).copy_from(&(b * h_t));
        at.view_mut((n, n), (n, n)).copy_from(&(&f + &j * h_t));

        let mut bt = DMatrix::zeros(2 * n, m);
        bt.view_mut((0, 0), (n, m)).copy_from(&(b * &l));
        bt.view_mut((n, 0), (n, m)).copy_from(&(&j * &l));

        let p = model.obs_dim();
        let mut ct = DMatrix::zeros(p, 2 * n);
        ct.view_mut((0, 0), (p, n)).copy_from(c);
        ct.view_mut((0, n), (p, n)).copy_from(&(d * h_t));

        a_tilde.push(at);
        b_tilde.push(bt);
        c_tilde.push(ct);
        d_tilde.push(d * &l);
    }

    Ok(LeastFavorableModel {
        horizon,
        state_dim: n,
        obs_dim: model.obs_dim(),
        a_tilde,
        b_tilde,
        c_tilde,
        d_tilde,
        h: h_rev,
        kv_tilde: kv_rev,
        omega_inv: omega_rev,
        schedule,
        x0_cov: model.x0_cov().clone(),
        source_label: model.label().to_string(),
    })
}

fn check_gains(lfm: &LeastFavorableModel, gains: &[DMatrix<f64>]) -> Result<()> {
    if gains.len() != lfm.horizon + 1 {
        return Err(Error::DimensionMismatch(format!(
            "gain schedule needs {} entries for horizon {}, got {}",
            lfm.horizon + 1,
            lfm.horizon,
            gains.len()
        )));
    }
    if let Some(g) = gains
        .iter()
        .find(|g| g.shape() != (lfm.state_dim, lfm.obs_dim))
    {
        return Err(Error::DimensionMismatch(format!(
            "gains must be {}x{}, got {}x{}",
            lfm.state_dim,
            lfm.obs_dim,
            g.nrows(),
            g.ncols()
        )));
    }
    Ok(())
}

/// Closed-loop transition/input pair for the error pair `[e'; e]` when a
/// filter with gain `g` is run against the least-favorable model:
/// `A~ - [g; 0] C~` and `B~ - [g; 0] D~`.
fn closed_loop(
    lfm: &LeastFavorableModel,
    g: &DMatrix<f64>,
    t: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = lfm.state_dim;
    let mut stacked = DMatrix::zeros(2 * n, lfm.obs_dim);
    stacked.view_mut((0, 0), g.shape()).copy_from(g);
    let m_t = lfm.a_tilde(t) - &stacked * lfm.c_tilde(t);
    let n_t = lfm.b_tilde(t) - &stacked * lfm.d_tilde(t);
    (m_t, n_t)
}

/// Propagate the exact second moment of `[e'; e]` under the least-favorable
/// model for a filter defined by `gains`, starting from the block-diagonal
/// prior embedding.
pub fn evaluate_filter(
    lfm: &LeastFavorableModel,
    gains: &[DMatrix<f64>],
    model: &StateSpaceModel,
) -> Result<PerformanceReport> {
    if model.horizon() != lfm.horizon
        || model.state_dim() != lfm.state_dim
        || model.obs_dim() != lfm.obs_dim
    {
        return Err(Error::DimensionMismatch(
            "model and least-favorable model shapes disagree".to_string(),
        ));
    }
    check_gains(lfm, gains)?;
    let n = lfm.state_dim;
    let mut pi = Vec::with_capacity(lfm.horizon + 2);
    pi.push(model.x0_cov().kron_i2());
    for (t, g) in gains.iter().enumerate() {
        let (m_t, n_t) = closed_loop(lfm, g, t);
        let prev = pi.last().expect("seeded with the prior embedding");
        let next = SymMatrix::new(
            &m_t * prev.as_matrix() * m_t.transpose() + &n_t * n_t.transpose(),
        )?;
        pi.push(next);
    }
    let variance_primary = pi
        .iter()
        .map(|p| DVector::from_fn(n, |i, _| p.get(i, i)))
        .collect();
    let variance_reference = pi
        .iter()
        .map(|p| DVector::from_fn(n, |i, _| p.get(n + i, n + i)))
        .collect();
    Ok(PerformanceReport {
        pi,
        variance_primary,
        variance_reference,
    })
}

/// Box-Muller standard normals over a cached pair, so each draw consumes a
/// deterministic number of uniforms from the underlying generator.
struct NormalSource<R: Rng> {
    rng: R,
    spare: Option<f64>,
}

impl<R: Rng> NormalSource<R> {
    fn new(rng: R) -> Self {
        NormalSource { rng, spare: None }
    }

    fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite; u2 in [0, 1).
        let u1 = 1.0 - self.rng.gen::<f64>();
        let u2 = self.rng.gen::<f64>();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

/// Monte Carlo second moments of the error pair `[e'; e]` under the
/// least-favorable model, for the filter defined by `gains`.
///
/// The initial pair is drawn from the same block-diagonal covariance the
/// moment recursion in [`evaluate_filter`] starts from (two independent
/// `N(0, x0_cov)` draws), so the empirical moments estimate the exact ones
/// at every step, transient included. Each path consumes its own
/// counter-based stream (`set_stream(path + 1)` on a fixed-seed ChaCha
/// generator, normals via Box-Muller), so results are reproducible across
/// platforms and independent of any path-level parallelism.
pub fn simulate_lfm(
    lfm: &LeastFavorableModel,
    gains: &[DMatrix<f64>],
    seed: u64,
    num_paths: usize,
) -> Result<Vec<SymMatrix>> {
    if num_paths == 0 {
        return Err(Error::InvalidModel(
            "Monte Carlo needs at least one path".to_string(),
        ));
    }
    check_gains(lfm, gains)?;
    let n = lfm.state_dim;
    let m = lfm.noise_dim();
    let dim = 2 * n;
    let steps: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..=lfm.horizon)
        .map(|t| closed_loop(lfm, &gains[t], t))
        .collect();
    let l0 = lfm.x0_cov.cholesky()?.lower().clone();

    let mut acc = vec![DMatrix::<f64>::zeros(dim, dim); lfm.horizon + 2];
    let mut z = DVector::<f64>::zeros(dim);
    let mut next = DVector::<f64>::zeros(dim);
    let mut v = DVector::<f64>::zeros(m);
    for path in 0..num_paths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path as u64 + 1);
        let mut noise = NormalSource::new(rng);

        let e0_eval = &l0 * DVector::from_fn(n, |_, _| noise.next_normal());
        let e0_ref = &l0 * DVector::from_fn(n, |_, _| noise.next_normal());
        z.rows_mut(0, n).copy_from(&e0_eval);
        z.rows_mut(n, n).copy_from(&e0_ref);
        acc[0].ger(1.0, &z, &z, 1.0);
        for (t, (m_t, n_t)) in steps.iter().enumerate() {
            for entry in v.iter_mut() {
                *entry = noise.next_normal();
            }
            next.gemv(1.0, m_t, &z, 0.0);
            next.gemv(1.0, n_t, &v, 1.0);
            std::mem::swap(&mut z, &mut next);
            acc[t + 1].ger(1.0, &z, &z, 1.0);
        }
    }
    acc.into_iter()
        .map(|s| SymMatrix::new(s / num_paths as f64))
        .collect()
}
