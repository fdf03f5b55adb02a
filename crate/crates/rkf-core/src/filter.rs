//! Time-varying robust Kalman recursion. Each step runs the standard
//! prediction update on the current distorted covariance, then inflates the
//! one-step prediction covariance according to the policy: per-step budget
//! (robust mode), fixed multiplier (risk-sensitive mode), or none (standard
//! mode, the textbook filter).

use nalgebra::{DMatrix, DVector};

use crate::divergence::{least_favorable_cov, solve_theta, Tau};
use crate::error::{Error, Result};
use crate::spd::SymMatrix;

/// Condition-number bound above which the stacked noise map `[B; D]` is
/// treated as non-invertible.
pub const GAMMA_COND_LIMIT: f64 = 1e12;

/// A matrix per time step, stored once when time-invariant.
#[derive(Debug, Clone)]
pub enum MatSeq {
    Invariant(DMatrix<f64>),
    Varying(Vec<DMatrix<f64>>),
}

impl MatSeq {
    pub fn at(&self, t: usize) -> &DMatrix<f64> {
        match self {
            MatSeq::Invariant(m) => m,
            MatSeq::Varying(seq) => &seq[t],
        }
    }

    fn is_invariant(&self) -> bool {
        matches!(self, MatSeq::Invariant(_))
    }

    /// All entries must share a shape; returns it.
    fn shape(&self, name: &str, horizon: usize) -> Result<(usize, usize)> {
        match self {
            MatSeq::Invariant(m) => Ok(m.shape()),
            MatSeq::Varying(seq) => {
                if seq.len() != horizon + 1 {
                    return Err(Error::DimensionMismatch(format!(
                        "time-varying {name} needs {} entries for horizon {horizon}, got {}",
                        horizon + 1,
                        seq.len()
                    )));
                }
                let shape = seq[0].shape();
                if seq.iter().any(|m| m.shape() != shape) {
                    return Err(Error::DimensionMismatch(format!(
                        "time-varying {name} entries must share one shape"
                    )));
                }
                Ok(shape)
            }
        }
    }
}

/// Nominal linear Gauss-Markov model
/// `x_{t+1} = A_t x_t + B_t v_t`, `y_t = C_t x_t + D_t v_t`
/// with unit-variance white noise `v_t`, prior mean `x0_mean` and prior
/// covariance `x0_cov`, over `t = 0..=horizon`.
///
/// The stacked map `[B_t; D_t]` must be square (`m = n + p`) and invertible
/// at every step; this makes the joint covariance of `(x_{t+1}, y_t)` given
/// `x_t` strictly positive definite.
#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    label: String,
    horizon: usize,
    state_dim: usize,
    obs_dim: usize,
    a: MatSeq,
    b: MatSeq,
    c: MatSeq,
    d: MatSeq,
    x0_mean: DVector<f64>,
    x0_cov: SymMatrix,
}

impl StateSpaceModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        label: impl Into<String>,
        horizon: usize,
        a: MatSeq,
        b: MatSeq,
        c: MatSeq,
        d: MatSeq,
        x0_mean: DVector<f64>,
        x0_cov: SymMatrix,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidModel("horizon must be positive".to_string()));
        }
        let (an, an2) = a.shape("A", horizon)?;
        let (bn, bm) = b.shape("B", horizon)?;
        let (cp, cn) = c.shape("C", horizon)?;
        let (dp, dm) = d.shape("D", horizon)?;
        if an != an2 {
            return Err(Error::DimensionMismatch(format!(
                "A must be square, got {an}x{an2}"
            )));
        }
        let (n, p) = (an, cp);
        if bn != n || cn != n {
            return Err(Error::DimensionMismatch(format!(
                "B has {bn} rows and C has {cn} columns; both must match state dimension {n}"
            )));
        }
        if bm != dm {
            return Err(Error::DimensionMismatch(format!(
                "B and D must share a column count, got {bm} and {dm}"
            )));
        }
        let m = bm;
        if m != n + p {
            return Err(Error::InvalidModel(format!(
                "stacked noise map [B; D] must be square and invertible: \
                 B is {n}x{m}, D is {dp}x{m}, need m = n + p = {}",
                n + p
            )));
        }
        if x0_mean.len() != n || x0_cov.dim() != n {
            return Err(Error::DimensionMismatch(format!(
                "prior mean/covariance must have dimension {n}, got {} and {}",
                x0_mean.len(),
                x0_cov.dim()
            )));
        }
        x0_cov.cholesky().map_err(|_| Error::NotPositiveDefinite {
            context: "prior covariance".to_string(),
        })?;

        let model = StateSpaceModel {
            label: label.into(),
            horizon,
            state_dim: n,
            obs_dim: p,
            a,
            b,
            c,
            d,
            x0_mean,
            x0_cov,
        };
        let steps_to_check = if model.b.is_invariant() && model.d.is_invariant() {
            1
        } else {
            horizon + 1
        };
        for t in 0..steps_to_check {
            let gamma = model.stacked_noise_map(t);
            let sv = gamma.svd(false, false).singular_values;
            let (max, min) = (sv.max(), sv.min());
            if !(min > 0.0) || max / min > GAMMA_COND_LIMIT {
                return Err(Error::InvalidModel(format!(
                    "stacked noise map [B; D] must be square and invertible: \
                     condition number {:.3e} at t={t} exceeds {GAMMA_COND_LIMIT:.0e}",
                    if min > 0.0 { max / min } else { f64::INFINITY }
                )));
            }
        }
        Ok(model)
    }

    /// Time-invariant convenience constructor.
    #[allow(clippy::too_many_arguments)]
    pub fn time_invariant(
        label: impl Into<String>,
        horizon: usize,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        x0_mean: DVector<f64>,
        x0_cov: SymMatrix,
    ) -> Result<Self> {
        StateSpaceModel::new(
            label,
            horizon,
            MatSeq::Invariant(a),
            MatSeq::Invariant(b),
            MatSeq::Invariant(c),
            MatSeq::Invariant(d),
            x0_mean,
            x0_cov,
        )
    }

    pub fn label(&self) -> &str {
        &self.label
    }

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

    pub fn a_at(&self, t: usize) -> &DMatrix<f64> {
        self.a.at(t)
    }

    pub fn b_at(&self, t: usize) -> &DMatrix<f64> {
        self.b.at(t)
    }

    pub fn c_at(&self, t: usize) -> &DMatrix<f64> {
        self.c.at(t)
    }

    pub fn d_at(&self, t: usize) -> &DMatrix<f64> {
        self.d.at(t)
    }

    pub fn x0_mean(&self) -> &DVector<f64> {
        &self.x0_mean
    }

    pub fn x0_cov(&self) -> &SymMatrix {
        &self.x0_cov
    }

    /// `[B_t; D_t]`, the square map from the unit-variance noise to
    /// `(state increment, output)`.
    pub fn stacked_noise_map(&self, t: usize) -> DMatrix<f64> {
        let b = self.b.at(t);
        let d = self.d.at(t);
        let mut gamma = DMatrix::zeros(b.nrows() + d.nrows(), b.ncols());
        gamma.view_mut((0, 0), b.shape()).copy_from(b);
        gamma.view_mut((b.nrows(), 0), d.shape()).copy_from(d);
        gamma
    }
}

/// Per-step divergence budget.
#[derive(Debug, Clone)]
pub enum ToleranceSchedule {
    Constant(f64),
    PerStep(Vec<f64>),
}

impl ToleranceSchedule {
    pub fn constant(c: f64) -> Result<Self> {
        if !(c >= 0.0) {
            return Err(Error::InvalidModel(format!(
                "tolerance must be nonnegative, got {c}"
            )));
        }
        Ok(ToleranceSchedule::Constant(c))
    }

    pub fn per_step(c: Vec<f64>) -> Result<Self> {
        if let Some(bad) = c.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidModel(format!(
                "tolerance must be nonnegative, got {bad}"
            )));
        }
        Ok(ToleranceSchedule::PerStep(c))
    }

    pub fn at(&self, t: usize) -> Result<f64> {
        match self {
            ToleranceSchedule::Constant(c) => Ok(*c),
            ToleranceSchedule::PerStep(seq) => seq.get(t).copied().ok_or_else(|| {
                Error::DimensionMismatch(format!(
                    "tolerance schedule has {} entries, none for t={t}",
                    seq.len()
                ))
            }),
        }
    }

    fn check_horizon(&self, horizon: usize) -> Result<()> {
        if let ToleranceSchedule::PerStep(seq) = self {
            if seq.len() != horizon + 1 {
                return Err(Error::DimensionMismatch(format!(
                    "tolerance schedule needs {} entries for horizon {horizon}, got {}",
                    horizon + 1,
                    seq.len()
                )));
            }
        }
        Ok(())
    }
}

/// How the prediction covariance is inflated at each step.
#[derive(Debug, Clone)]
pub enum PolicyMode {
    /// No inflation; the textbook Kalman filter.
    Standard,
    /// Multiplier solved per step so the inflation spends exactly the budget.
    Robust(ToleranceSchedule),
    /// Fixed multiplier; requires the prediction covariance to stay inside
    /// the admissible region at every step.
    RiskSensitive { theta: f64 },
}

/// Divergence-family parameter plus inflation mode.
#[derive(Debug, Clone)]
pub struct RobustPolicy {
    tau: Tau,
    mode: PolicyMode,
}

impl RobustPolicy {
    pub fn new(tau: Tau, mode: PolicyMode) -> Result<Self> {
        if let PolicyMode::RiskSensitive { theta } = &mode {
            if !(*theta > 0.0) {
                return Err(Error::ThetaOutOfRange {
                    theta: *theta,
                    limit: f64::INFINITY,
                });
            }
        }
        Ok(RobustPolicy { tau, mode })
    }

    pub fn standard() -> Self {
        RobustPolicy {
            tau: Tau::ZERO,
            mode: PolicyMode::Standard,
        }
    }

    pub fn robust_constant(tau: Tau, c: f64) -> Result<Self> {
        RobustPolicy::new(tau, PolicyMode::Robust(ToleranceSchedule::constant(c)?))
    }

    pub fn risk_sensitive(tau: Tau, theta: f64) -> Result<Self> {
        RobustPolicy::new(tau, PolicyMode::RiskSensitive { theta })
    }

    pub fn tau(&self) -> Tau {
        self.tau
    }

    pub fn mode(&self) -> &PolicyMode {
        &self.mode
    }

    fn check_horizon(&self, horizon: usize) -> Result<()> {
        if let PolicyMode::Robust(sched) = &self.mode {
            sched.check_horizon(horizon)?;
        }
        Ok(())
    }
}

/// Observation-independent bookkeeping of one step: gain, nominal and
/// distorted one-step prediction covariances, multiplier, and the inflation
/// weight `phi = P^-1 - V^-1`.
#[derive(Debug, Clone)]
pub struct GainStep {
    pub gain: DMatrix<f64>,
    pub nominal_cov: SymMatrix,
    pub distorted_cov: SymMatrix,
    pub theta: f64,
    pub phi: SymMatrix,
}

/// One full filter step: the covariance bookkeeping plus the predicted state.
#[derive(Debug, Clone)]
pub struct FilterStep {
    pub gain: DMatrix<f64>,
    pub state_pred: DVector<f64>,
    pub nominal_cov: SymMatrix,
    pub distorted_cov: SymMatrix,
    pub theta: f64,
    pub phi: SymMatrix,
}

/// Log of a full filter run over `t = 0..=horizon`.
#[derive(Debug, Clone)]
pub struct FilterTrace {
    pub steps: Vec<FilterStep>,
    pub model_ref: String,
    pub policy: RobustPolicy,
}

impl FilterTrace {
    pub fn gains(&self) -> Vec<DMatrix<f64>> {
        self.steps.iter().map(|s| s.gain.clone()).collect()
    }
}

/// Observation-free schedule of a policy on a model.
#[derive(Debug, Clone)]
pub struct GainSchedule {
    pub steps: Vec<GainStep>,
    pub model_ref: String,
    pub policy: RobustPolicy,
}

impl GainSchedule {
    pub fn gains(&self) -> Vec<DMatrix<f64>> {
        self.steps.iter().map(|s| s.gain.clone()).collect()
    }
}

/// The covariance half of a step, shared verbatim by [`filter_step`] and
/// [`run_gain_schedule`] so their outputs are bit-identical.
fn cov_step(
    model: &StateSpaceModel,
    t: usize,
    v: &SymMatrix,
    policy: &RobustPolicy,
) -> Result<GainStep> {
    cov_step_inner(model, t, v, policy).map_err(|e| e.at_step(t))
}

fn cov_step_inner(
    model: &StateSpaceModel,
    t: usize,
    v: &SymMatrix,
    policy: &RobustPolicy,
) -> Result<GainStep> {
    let (a, b, c, d) = (model.a_at(t), model.b_at(t), model.c_at(t), model.d_at(t));
    let s = SymMatrix::new(c * v.as_matrix() * c.transpose() + d * d.transpose())?;
    let s_chol = s.cholesky().map_err(|_| Error::NotPositiveDefinite {
        context: "innovation covariance".to_string(),
    })?;
    let cross = a * v.as_matrix() * c.transpose() + b * d.transpose();
    // G = cross * S^-1, via the factor of the symmetric S.
    let gain = s_chol.solve_matrix(&cross.transpose()).transpose();
    let p_next = SymMatrix::new(
        a * v.as_matrix() * a.transpose() - &gain * s.as_matrix() * gain.transpose()
            + b * b.transpose(),
    )?;
    let tau = policy.tau();
    let (theta, v_next) = match policy.mode() {
        PolicyMode::Standard => (0.0, p_next.clone()),
        PolicyMode::Robust(sched) => {
            let budget = sched.at(t)?;
            let theta = solve_theta(&p_next, budget, tau)?;
            (theta, least_favorable_cov(&p_next, theta, tau)?)
        }
        PolicyMode::RiskSensitive { theta } => {
            (*theta, least_favorable_cov(&p_next, *theta, tau)?)
        }
    };
    // theta = 0 leaves the covariance alone, so phi is exactly zero rather
    // than a round-off difference of two equal inverses.
    let phi = if theta == 0.0 {
        SymMatrix::zeros(model.state_dim())
    } else {
        SymMatrix::new(p_next.spd_inverse()?.as_matrix() - v_next.spd_inverse()?.as_matrix())?
    };
    Ok(GainStep {
        gain,
        nominal_cov: p_next,
        distorted_cov: v_next,
        theta,
        phi,
    })
}

/// One step of the recursion at time `t` from the current estimate and
/// distorted covariance, given the observation `y_t`.
pub fn filter_step(
    model: &StateSpaceModel,
    t: usize,
    x_hat: &DVector<f64>,
    v: &SymMatrix,
    y: &DVector<f64>,
    policy: &RobustPolicy,
) -> Result<FilterStep> {
    if t > model.horizon() {
        return Err(Error::DimensionMismatch(format!(
            "step t={t} beyond horizon {}",
            model.horizon()
        )));
    }
    if x_hat.len() != model.state_dim() || v.dim() != model.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "estimate/covariance must have state dimension {}",
            model.state_dim()
        )));
    }
    if y.len() != model.obs_dim() {
        return Err(Error::DimensionMismatch(format!(
            "observation must have dimension {}, got {}",
            model.obs_dim(),
            y.len()
        )));
    }
    let cov = cov_step(model, t, v, policy)?;
    let innovation = y - model.c_at(t) * x_hat;
    let state_pred = model.a_at(t) * x_hat + &cov.gain * innovation;
    Ok(FilterStep {
        gain: cov.gain,
        state_pred,
        nominal_cov: cov.nominal_cov,
        distorted_cov: cov.distorted_cov,
        theta: cov.theta,
        phi: cov.phi,
    })
}

/// Fold [`filter_step`] over a full observation record of length
/// `horizon + 1`. Deterministic: identical inputs give bit-identical traces.
pub fn run_filter(
    model: &StateSpaceModel,
    policy: &RobustPolicy,
    observations: &[DVector<f64>],
) -> Result<FilterTrace> {
    policy.check_horizon(model.horizon())?;
    if observations.len() != model.horizon() + 1 {
        return Err(Error::DimensionMismatch(format!(
            "need {} observations for horizon {}, got {}",
            model.horizon() + 1,
            model.horizon(),
            observations.len()
        )));
    }
    let mut x_hat = model.x0_mean().clone();
    let mut v = model.x0_cov().clone();
    let mut steps = Vec::with_capacity(model.horizon() + 1);
    for (t, y) in observations.iter().enumerate() {
        let step = filter_step(model, t, &x_hat, &v, y, policy)?;
        x_hat = step.state_pred.clone();
        v = step.distorted_cov.clone();
        steps.push(step);
    }
    Ok(FilterTrace {
        steps,
        model_ref: model.label().to_string(),
        policy: policy.clone(),
    })
}

/// The observation-independent covariance/gain schedule of a policy: the
/// same fold as [`run_filter`] without state updates.
pub fn run_gain_schedule(model: &StateSpaceModel, policy: &RobustPolicy) -> Result<GainSchedule> {
    policy.check_horizon(model.horizon())?;
    let mut v = model.x0_cov().clone();
    let mut steps = Vec::with_capacity(model.horizon() + 1);
    for t in 0..=model.horizon() {
        let step = cov_step(model, t, &v, policy)?;
        v = step.distorted_cov.clone();
        steps.push(step);
    }
    Ok(GainSchedule {
        steps,
        model_ref: model.label().to_string(),
        policy: policy.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::{budget_tolerance, gamma_tau};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_model(rng: &mut StdRng, horizon: usize) -> StateSpaceModel {
        let n = rng.gen_range(1..=4);
        let p = rng.gen_range(1..=2);
        random_model_dims(rng, n, p, horizon)
    }

    fn random_model_dims(rng: &mut StdRng, n: usize, p: usize, horizon: usize) -> StateSpaceModel {
        let m = n + p;
        loop {
            let mut a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let rho = a
                .complex_eigenvalues()
                .iter()
                .map(|z| z.norm())
                .fold(0.0_f64, f64::max);
            if rho > 0.0 {
                a *= rng.gen_range(0.3..0.95) / rho;
            }
            let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
            let d = DMatrix::from_fn(p, m, |_, _| rng.gen_range(-1.0..1.0));
            let c = DMatrix::from_fn(p, n, |_, _| rng.gen_range(-1.0..1.0));
            let q = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let v0 = SymMatrix::new(&q * q.transpose() + 0.1 * DMatrix::<f64>::identity(n, n))
                .unwrap();
            let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            match StateSpaceModel::time_invariant("test-model", horizon, a, b, c, d, x0, v0) {
                Ok(model) => {
                    let gamma = model.stacked_noise_map(0);
                    let sv = gamma.svd(false, false).singular_values;
                    if sv.max() / sv.min() <= 1e6 {
                        return model;
                    }
                }
                Err(_) => continue,
            }
        }
    }

    fn random_observations(rng: &mut StdRng, model: &StateSpaceModel) -> Vec<DVector<f64>> {
        (0..=model.horizon())
            .map(|_| DVector::from_fn(model.obs_dim(), |_, _| rng.gen_range(-2.0..2.0)))
            .collect()
    }

    #[test]
    fn rejects_non_square_noise_map() {
        // n = 1, p = 1 needs m = 2; give m = 3.
        let err = StateSpaceModel::time_invariant(
            "bad",
            10,
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 3, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 3, 1.0),
            DVector::zeros(1),
            SymMatrix::identity(1),
        )
        .unwrap_err();
        assert!(err.to_string().contains("square and invertible"));
    }

    #[test]
    fn rejects_singular_noise_map() {
        // B and D rows proportional: [B; D] singular.
        let err = StateSpaceModel::time_invariant(
            "bad",
            10,
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_row_slice(1, 2, &[2.0, 4.0]),
            DVector::zeros(1),
            SymMatrix::identity(1),
        )
        .unwrap_err();
        assert!(err.to_string().contains("condition number"));
    }

    #[test]
    fn standard_policy_with_zero_data_keeps_zero_state() {
        let mut rng = StdRng::seed_from_u64(41);
        let mut model = random_model(&mut rng, 20);
        model.x0_mean = DVector::zeros(model.state_dim());
        let obs: Vec<_> = (0..=20).map(|_| DVector::zeros(model.obs_dim())).collect();
        let trace = run_filter(&model, &RobustPolicy::standard(), &obs).unwrap();
        for step in &trace.steps {
            assert_eq!(step.state_pred.amax(), 0.0);
            assert_eq!(step.theta, 0.0);
            assert_eq!(step.phi.operator_norm(), 0.0);
            assert_eq!(step.distorted_cov.as_matrix(), step.nominal_cov.as_matrix());
        }
    }

    #[test]
    fn zero_budget_trace_equals_standard_trace_bitwise() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..5 {
            let model = random_model(&mut rng, 30);
            let obs = random_observations(&mut rng, &model);
            let std_trace = run_filter(&model, &RobustPolicy::standard(), &obs).unwrap();
            for tau in [0.0, 0.5, 1.0] {
                let zero = RobustPolicy::robust_constant(Tau::new(tau).unwrap(), 0.0).unwrap();
                let robust_trace = run_filter(&model, &zero, &obs).unwrap();
                for (s, r) in std_trace.steps.iter().zip(&robust_trace.steps) {
                    assert_eq!(s.gain, r.gain);
                    assert_eq!(s.state_pred, r.state_pred);
                    assert_eq!(s.nominal_cov.as_matrix(), r.nominal_cov.as_matrix());
                    assert_eq!(s.distorted_cov.as_matrix(), r.distorted_cov.as_matrix());
                    assert_eq!(s.theta, 0.0);
                }
            }
        }
    }

    #[test]
    fn budget_stays_active_each_step() {
        let mut rng = StdRng::seed_from_u64(43);
        for _ in 0..5 {
            let model = random_model(&mut rng, 25);
            for tau in [0.0, 0.5, 1.0] {
                let c = 10f64.powf(rng.gen_range(-3.0..-1.0));
                let policy = RobustPolicy::robust_constant(Tau::new(tau).unwrap(), c).unwrap();
                let schedule = run_gain_schedule(&model, &policy).unwrap();
                for step in &schedule.steps {
                    let g = gamma_tau(&step.nominal_cov, step.theta, policy.tau()).unwrap();
                    assert!((g - c).abs() <= budget_tolerance(c));
                    assert!(step.theta > 0.0);
                }
            }
        }
    }

    #[test]
    fn phi_is_positive_definite_under_positive_budget() {
        let mut rng = StdRng::seed_from_u64(44);
        let model = random_model(&mut rng, 25);
        let policy = RobustPolicy::robust_constant(Tau::new(0.5).unwrap(), 0.05).unwrap();
        let schedule = run_gain_schedule(&model, &policy).unwrap();
        for step in &schedule.steps {
            assert!(step.phi.min_eigenvalue() > 0.0);
            let gap = SymMatrix::new(
                step.distorted_cov.as_matrix() - step.nominal_cov.as_matrix(),
            )
            .unwrap();
            assert!(gap.min_eigenvalue() >= -1e-12 * step.nominal_cov.operator_norm());
        }
    }

    #[test]
    fn schedule_matches_filter_bookkeeping_bitwise() {
        let mut rng = StdRng::seed_from_u64(45);
        let model = random_model(&mut rng, 30);
        let obs = random_observations(&mut rng, &model);
        for tau in [0.0, 1.0] {
            let policy = RobustPolicy::robust_constant(Tau::new(tau).unwrap(), 0.02).unwrap();
            let trace = run_filter(&model, &policy, &obs).unwrap();
            let schedule = run_gain_schedule(&model, &policy).unwrap();
            assert_eq!(trace.steps.len(), schedule.steps.len());
            for (f, g) in trace.steps.iter().zip(&schedule.steps) {
                assert_eq!(f.gain, g.gain);
                assert_eq!(f.nominal_cov.as_matrix(), g.nominal_cov.as_matrix());
                assert_eq!(f.distorted_cov.as_matrix(), g.distorted_cov.as_matrix());
                assert_eq!(f.theta, g.theta);
                assert_eq!(f.phi.as_matrix(), g.phi.as_matrix());
            }
        }
    }

    #[test]
    fn risk_sensitive_matches_resolvent_form() {
        let mut rng = StdRng::seed_from_u64(46);
        for _ in 0..5 {
            let model = random_model(&mut rng, 20);
            // Keep theta inside the admissible region along the whole run:
            // size it from the standard-policy covariance ceiling.
            let std_schedule = run_gain_schedule(&model, &RobustPolicy::standard()).unwrap();
            let max_norm = std_schedule
                .steps
                .iter()
                .map(|s| s.nominal_cov.operator_norm())
                .fold(0.0_f64, f64::max);
            let theta = 0.2 / max_norm;
            let policy = RobustPolicy::risk_sensitive(Tau::ZERO, theta).unwrap();
            let schedule = run_gain_schedule(&model, &policy).unwrap();
            for step in &schedule.steps {
                let n = step.nominal_cov.dim();
                let want = SymMatrix::new(
                    step.nominal_cov.spd_inverse().unwrap().as_matrix()
                        - theta * DMatrix::<f64>::identity(n, n),
                )
                .unwrap()
                .spd_inverse()
                .unwrap();
                let rel = (step.distorted_cov.as_matrix() - want.as_matrix()).norm()
                    / want.as_matrix().norm();
                assert!(rel < 1e-10);
            }
        }
    }

    #[test]
    fn risk_sensitive_rejects_inadmissible_theta_with_step() {
        let mut rng = StdRng::seed_from_u64(47);
        let model = random_model_dims(&mut rng, 2, 1, 20);
        let policy = RobustPolicy::risk_sensitive(Tau::ZERO, 1e6).unwrap();
        let err = run_gain_schedule(&model, &policy).unwrap_err();
        assert!(err.step().is_some());
        assert!(matches!(
            err,
            Error::AtStep { source, .. } if matches!(*source, Error::ThetaOutOfRange { .. })
        ));
    }

    #[test]
    fn tolerance_schedule_length_is_checked() {
        let mut rng = StdRng::seed_from_u64(48);
        let model = random_model(&mut rng, 10);
        let sched = ToleranceSchedule::per_step(vec![0.1; 5]).unwrap();
        let policy = RobustPolicy::new(Tau::ZERO, PolicyMode::Robust(sched)).unwrap();
        assert!(matches!(
            run_gain_schedule(&model, &policy),
            Err(Error::DimensionMismatch(_))
        ));
        let obs = random_observations(&mut rng, &model);
        assert!(run_filter(&model, &policy, &obs).is_err());
        assert!(run_filter(&model, &RobustPolicy::standard(), &obs[..3]).is_err());
    }

    #[test]
    fn negative_tolerance_rejected() {
        assert!(ToleranceSchedule::constant(-0.1).is_err());
        assert!(ToleranceSchedule::per_step(vec![0.1, -0.2]).is_err());
        assert!(RobustPolicy::risk_sensitive(Tau::ZERO, 0.0).is_err());
    }

    #[test]
    fn larger_budgets_inflate_covariances_pointwise() {
        let mut rng = StdRng::seed_from_u64(49);
        let model = random_model(&mut rng, 30);
        let tau = Tau::new(0.5).unwrap();
        let budgets = [0.0, 1e-3, 1e-2, 1e-1];
        let traces: Vec<_> = budgets
            .iter()
            .map(|&c| {
                run_gain_schedule(&model, &RobustPolicy::robust_constant(tau, c).unwrap()).unwrap()
            })
            .collect();
        for w in traces.windows(2) {
            for (lo, hi) in w[0].steps.iter().zip(&w[1].steps) {
                let (lo_tr, hi_tr) = (lo.distorted_cov.trace(), hi.distorted_cov.trace());
                assert!(
                    hi_tr >= lo_tr - 1e-9 * lo_tr.abs(),
                    "trace fell from {lo_tr} to {hi_tr} as the budget grew"
                );
            }
        }
    }

    #[test]
    fn matches_independent_textbook_kalman() {
        // Plain dense-inverse implementation of the same recursion, written
        // against the model equations rather than the shared helpers.
        let mut rng = StdRng::seed_from_u64(50);
        for _ in 0..5 {
            let model = random_model(&mut rng, 40);
            let obs = random_observations(&mut rng, &model);
            let trace = run_filter(&model, &RobustPolicy::standard(), &obs).unwrap();

            let mut x = model.x0_mean().clone();
            let mut v = model.x0_cov().as_matrix().clone();
            for t in 0..=model.horizon() {
                let (a, b, c, d) = (model.a_at(t), model.b_at(t), model.c_at(t), model.d_at(t));
                let s = c * &v * c.transpose() + d * d.transpose();
                let s_inv = s.clone().try_inverse().unwrap();
                let g = (a * &v * c.transpose() + b * d.transpose()) * s_inv;
                let x_next = a * &x + &g * (&obs[t] - c * &x);
                let v_next = a * &v * a.transpose() - &g * &s * g.transpose() + b * b.transpose();
                let step = &trace.steps[t];
                let scale = 1.0 + v_next.norm();
                assert!((&step.gain - &g).norm() < 1e-12 * (1.0 + g.norm()));
                assert!((&step.state_pred - &x_next).norm() < 1e-12 * (1.0 + x_next.norm()));
                assert!((step.nominal_cov.as_matrix() - &v_next).norm() < 1e-12 * scale);
                x = x_next;
                v = 0.5 * (&v_next + v_next.transpose());
            }
        }
    }
}
