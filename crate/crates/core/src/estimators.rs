//! Fixed-interval smoothers, the constrained estimator, the predictor and a
//! moving-horizon driver.
//!
//! All epsilon-insensitive estimators share one route: solve the dual QP over
//! the split multipliers `(gamma, beta, xi) >= 0` with `Theta = gamma - beta`,
//! then run the costate recursion backward from `lambda_H = 0` and the state
//! recursion forward from `x_0 = xbar0 + P^-1 A' lambda_0`.

use nalgebra::{DMatrix, DVector};

use crate::error::EstimateError;
use crate::linalg;
use crate::model::{validate_model, SystemModel};
use crate::operators::{ConstraintSet, StackedOperators, WeightSpec};
use crate::qp::{self, QpProblem, QpStatus};
use crate::verify::objective_value;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorOptions {
    /// Absolute tolerance on the dual KKT residual.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            tol: qp::DEFAULT_TOL,
            max_iter: qp::DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    H2Smoother,
    EpsSmoother,
    EpsConstrained,
    EpsPredictor,
    /// Direct primal solve used as a reference.
    PrimalOracle,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::H2Smoother => "h2",
            Method::EpsSmoother => "eps",
            Method::EpsConstrained => "eps_constrained",
            Method::EpsPredictor => "eps_predict",
            Method::PrimalOracle => "primal_oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveDiagnostics {
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub ridge: f64,
}

/// Optimal multipliers of the dual problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    /// `theta_1..theta_N` stacked (`Nm`).
    pub theta: DVector<f64>,
    /// `|Theta|` at the optimum; here `gamma + beta`.
    pub zeta: DVector<f64>,
    /// Constraint multipliers (`p`, empty when unconstrained).
    pub xi: DVector<f64>,
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
    /// Value of the dual objective at the multipliers.
    pub dual_objective: f64,
    pub diagnostics: SolveDiagnostics,
}

impl DualSolution {
    /// `theta_k` for `k = 1..=N`.
    pub fn theta_k(&self, k: usize, m: usize) -> DVector<f64> {
        self.theta.rows((k - 1) * m, m).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub method: Method,
    /// `x_0..x_H`
    pub xhat: Vec<DVector<f64>>,
    /// `w_0..w_{H-1}`
    pub what: Vec<DVector<f64>>,
    /// `eta_1..eta_N`
    pub eta: Vec<DVector<f64>>,
    /// `lambda_0..lambda_H`
    pub lambda: Vec<DVector<f64>>,
    /// `y_k - C x_k` for `k = 1..N`
    pub vhat: Vec<DVector<f64>>,
    pub primal_objective: f64,
    /// Tube half-width in force (zero for the quadratic-loss smoother).
    pub tube: DVector<f64>,
    pub dual: Option<DualSolution>,
}

impl EstimateResult {
    pub fn n_meas(&self) -> usize {
        self.eta.len()
    }

    pub fn horizon(&self) -> usize {
        self.what.len()
    }

    pub fn converged(&self) -> bool {
        self.dual
            .as_ref()
            .is_none_or(|d| d.diagnostics.status == QpStatus::Converged)
    }

    /// Final state estimate `x_H`.
    pub fn terminal(&self) -> &DVector<f64> {
        self.xhat.last().expect("estimate has at least x_0")
    }

    /// `sum_k ||y_k - C x_k||^2`.
    pub fn residual_sum_of_squares(&self) -> f64 {
        self.vhat.iter().map(|v| v.norm_squared()).sum()
    }
}

/// Costate, disturbance and state trajectories from `Theta` and `xi`.
pub(crate) struct Reconstruction {
    pub xhat: Vec<DVector<f64>>,
    pub what: Vec<DVector<f64>>,
    pub lambda: Vec<DVector<f64>>,
}

pub(crate) fn reconstruct(
    model: &SystemModel,
    p_inv: &DMatrix<f64>,
    q_inv: &DMatrix<f64>,
    constraints: &ConstraintSet,
    n_meas: usize,
    theta: &DVector<f64>,
    xi: &DVector<f64>,
) -> Reconstruction {
    let horizon = constraints.horizon();
    let m = model.m();
    let at = model.a.transpose();
    let ct = model.c.transpose();
    let bt = model.b.transpose();

    let mut lambda = vec![DVector::zeros(model.n()); horizon + 1];
    for k in (1..=horizon).rev() {
        let mut prev = &at * &lambda[k] - constraints.u(k).transpose() * xi;
        if k <= n_meas {
            prev += &ct * theta.rows((k - 1) * m, m);
        }
        lambda[k - 1] = prev;
    }

    let what: Vec<DVector<f64>> = (0..horizon)
        .map(|k| q_inv * (&bt * &lambda[k] - constraints.v(k).transpose() * xi))
        .collect();
    let mut xhat = Vec::with_capacity(horizon + 1);
    xhat.push(&model.xbar0 + p_inv * (&at * &lambda[0]));
    for k in 0..horizon {
        let next = &model.a * &xhat[k] + &model.b * &what[k];
        xhat.push(next);
    }
    Reconstruction { xhat, what, lambda }
}

fn check_measurements(model: &SystemModel, measurements: &[DVector<f64>]) -> Result<(), EstimateError> {
    if measurements.is_empty() {
        return Err(EstimateError::NoMeasurements);
    }
    if let Some(bad) = measurements.iter().find(|y| y.len() != model.m()) {
        return Err(crate::error::ModelError::dims("y_k", model.m(), bad.len()).into());
    }
    Ok(())
}

fn residuals(model: &SystemModel, measurements: &[DVector<f64>], xhat: &[DVector<f64>]) -> Vec<DVector<f64>> {
    measurements
        .iter()
        .enumerate()
        .map(|(i, y)| y - &model.c * &xhat[i + 1])
        .collect()
}

/// Quadratic-loss fixed-interval smoother, `Theta = M^-1 Y` followed by the
/// costate/state recursions.
pub fn h2_smooth(
    model: &SystemModel,
    weights: &WeightSpec,
    measurements: &[DVector<f64>],
) -> Result<EstimateResult, EstimateError> {
    validate_model(model, weights)?;
    check_measurements(model, measurements)?;
    let n_meas = measurements.len();
    let empty = ConstraintSet::empty(n_meas, model.n(), model.l());
    let ops = StackedOperators::assemble(model, weights, measurements, &empty)?;
    let m_mat = ops.m();
    let chol = linalg::cholesky(&m_mat).ok_or(EstimateError::SingularM)?;
    let theta = chol.solve(&ops.y);
    let xi = DVector::zeros(0);
    let rec = reconstruct(model, &ops.p_inv, &ops.q_inv.block, &empty, n_meas, &theta, &xi);
    let vhat = residuals(model, measurements, &rec.xhat);
    let eta = vec![DVector::zeros(model.m()); n_meas];
    let dual_objective = -0.5 * theta.dot(&(&m_mat * &theta)) + theta.dot(&ops.y);
    let mut result = EstimateResult {
        method: Method::H2Smoother,
        xhat: rec.xhat,
        what: rec.what,
        eta,
        lambda: rec.lambda,
        vhat,
        primal_objective: 0.0,
        tube: DVector::zeros(model.m()),
        dual: Some(DualSolution {
            zeta: theta.abs(),
            gamma: theta.map(|x| x.max(0.0)),
            beta: theta.map(|x| (-x).max(0.0)),
            theta,
            xi,
            dual_objective,
            diagnostics: SolveDiagnostics {
                status: QpStatus::Converged,
                kkt_residual: 0.0,
                iterations: 0,
                ridge: 0.0,
            },
        }),
    };
    result.primal_objective = objective_value(model, weights, measurements, &result);
    Ok(result)
}

/// Epsilon-insensitive estimators with a fixed set of solver options.
#[derive(Debug, Clone)]
pub struct EpsEstimator<'a> {
    pub model: &'a SystemModel,
    pub weights: &'a WeightSpec,
    pub options: EstimatorOptions,
}

impl<'a> EpsEstimator<'a> {
    pub fn new(model: &'a SystemModel, weights: &'a WeightSpec) -> Self {
        Self {
            model,
            weights,
            options: EstimatorOptions::default(),
        }
    }

    pub fn with_options(mut self, options: EstimatorOptions) -> Self {
        self.options = options;
        self
    }

    pub fn smooth(&self, measurements: &[DVector<f64>]) -> Result<EstimateResult, EstimateError> {
        check_measurements(self.model, measurements)?;
        let empty = ConstraintSet::empty(measurements.len(), self.model.n(), self.model.l());
        self.solve(measurements, &empty, Method::EpsSmoother)
    }

    pub fn smooth_constrained(
        &self,
        measurements: &[DVector<f64>],
        constraints: &ConstraintSet,
    ) -> Result<EstimateResult, EstimateError> {
        check_measurements(self.model, measurements)?;
        if constraints.horizon() != measurements.len() {
            return Err(crate::error::ModelError::LengthMismatch(format!(
                "constraint horizon {} differs from {} measurements",
                constraints.horizon(),
                measurements.len()
            ))
            .into());
        }
        self.solve(measurements, constraints, Method::EpsConstrained)
    }

    /// Estimates `x_0..x_{N+j}`; `constraints` must span `N + j` steps when given.
    pub fn predict(
        &self,
        measurements: &[DVector<f64>],
        constraints: Option<&ConstraintSet>,
        j: usize,
    ) -> Result<EstimateResult, EstimateError> {
        check_measurements(self.model, measurements)?;
        if j == 0 {
            return Err(crate::error::ModelError::InvalidParameter(
                "prediction step j must be >= 1".into(),
            )
            .into());
        }
        let horizon = measurements.len() + j;
        let empty;
        let constraints = match constraints {
            Some(c) => c,
            None => {
                empty = ConstraintSet::empty(horizon, self.model.n(), self.model.l());
                &empty
            }
        };
        if constraints.horizon() != horizon {
            return Err(crate::error::ModelError::LengthMismatch(format!(
                "constraint horizon {} differs from N + j = {horizon}",
                constraints.horizon()
            ))
            .into());
        }
        self.solve(measurements, constraints, Method::EpsPredictor)
    }

    fn solve(
        &self,
        measurements: &[DVector<f64>],
        constraints: &ConstraintSet,
        method: Method,
    ) -> Result<EstimateResult, EstimateError> {
        let (model, weights) = (self.model, self.weights);
        validate_model(model, weights)?;
        let ops = StackedOperators::assemble(model, weights, measurements, constraints)?;
        let n_meas = ops.n_meas;
        let nm = ops.theta_len();
        let p = ops.rows();
        let d = 2 * nm + p;

        // Hessian S' T S for z = (gamma, beta, xi), Theta = gamma - beta
        let t = &ops.t;
        let mut hess = DMatrix::zeros(d, d);
        for (bi, si) in [(0usize, 1.0), (nm, -1.0)] {
            for (bj, sj) in [(0usize, 1.0), (nm, -1.0)] {
                hess.view_mut((bi, bj), (nm, nm))
                    .copy_from(&(t.view((0, 0), (nm, nm)) * (si * sj)));
            }
            hess.view_mut((bi, 2 * nm), (nm, p))
                .copy_from(&(t.view((0, nm), (nm, p)) * si));
            hess.view_mut((2 * nm, bi), (p, nm))
                .copy_from(&(t.view((nm, 0), (p, nm)) * si));
        }
        hess.view_mut((2 * nm, 2 * nm), (p, p))
            .copy_from(&t.view((nm, nm), (p, p)));
        let mut q = DVector::zeros(d);
        q.rows_mut(0, nm).copy_from(&(&ops.eps_stack - &ops.y));
        q.rows_mut(nm, nm).copy_from(&(&ops.eps_stack + &ops.y));
        q.rows_mut(2 * nm, p).copy_from(&ops.offset);

        let problem = QpProblem::new(hess, q);
        let mut sol = qp::solve_nonneg_qp(&problem, self.options.tol, self.options.max_iter)?;
        let xi = sol.z.rows(2 * nm, p).into_owned();
        if sol.status == QpStatus::Infeasible {
            return Err(EstimateError::Infeasible {
                xi_norm: xi.norm(),
            });
        }
        // For tiny eps, shifting gamma and beta together is nearly free, so the
        // solver may stop with both positive. The split with gamma_i beta_i = 0
        // keeps Theta and never costs more.
        let theta = sol.z.rows(0, nm) - sol.z.rows(nm, nm);
        let gamma = theta.map(|t| t.max(0.0));
        let beta = theta.map(|t| (-t).max(0.0));
        sol.z.rows_mut(0, nm).copy_from(&gamma);
        sol.z.rows_mut(nm, nm).copy_from(&beta);
        let grad = &problem.hessian * &sol.z + &problem.q;
        sol.objective = problem.objective(&sol.z);
        sol.kkt_residual = qp::nonneg_kkt_residual(&sol.z, &grad);
        let rec = reconstruct(model, &ops.p_inv, &ops.q_inv.block, constraints, n_meas, &theta, &xi);

        let m = model.m();
        let vhat = residuals(model, measurements, &rec.xhat);
        let eta: Vec<DVector<f64>> = vhat
            .iter()
            .enumerate()
            .map(|(i, v)| v - &ops.r_inv.block * theta.rows(i * m, m))
            .collect();

        if sol.status == QpStatus::Converged {
            let scale = 1.0 + linalg::inf_norm(&ops.y);
            let slack = 10.0 * self.options.tol + 1e-10 * scale;
            for (i, e) in eta.iter().enumerate() {
                for c in 0..m {
                    let violation = e[c].abs() - weights.eps[c];
                    if violation > slack {
                        return Err(EstimateError::TubeViolation {
                            k: i + 1,
                            channel: c,
                            violation,
                        });
                    }
                }
            }
        }

        let mut result = EstimateResult {
            method,
            xhat: rec.xhat,
            what: rec.what,
            eta,
            lambda: rec.lambda,
            vhat,
            primal_objective: 0.0,
            tube: weights.eps.clone(),
            dual: Some(DualSolution {
                zeta: &gamma + &beta,
                theta,
                xi,
                gamma,
                beta,
                dual_objective: -sol.objective,
                diagnostics: SolveDiagnostics {
                    status: sol.status,
                    kkt_residual: sol.kkt_residual,
                    iterations: sol.iterations,
                    ridge: sol.ridge,
                },
            }),
        };
        result.primal_objective = objective_value(model, weights, measurements, &result);
        Ok(result)
    }
}

/// Epsilon-insensitive fixed-interval smoother with default options.
pub fn eps_smooth(
    model: &SystemModel,
    weights: &WeightSpec,
    measurements: &[DVector<f64>],
) -> Result<EstimateResult, EstimateError> {
    EpsEstimator::new(model, weights).smooth(measurements)
}

/// Epsilon-insensitive smoother subject to `sum U_k x_k + sum V_k w_k <= a`.
pub fn eps_smooth_constrained(
    model: &SystemModel,
    weights: &WeightSpec,
    measurements: &[DVector<f64>],
    constraints: &ConstraintSet,
) -> Result<EstimateResult, EstimateError> {
    EpsEstimator::new(model, weights).smooth_constrained(measurements, constraints)
}

/// `j`-step-ahead prediction; the result's terminal state is `x_{N+j}`.
pub fn eps_predict(
    model: &SystemModel,
    weights: &WeightSpec,
    measurements: &[DVector<f64>],
    constraints: Option<&ConstraintSet>,
    j: usize,
) -> Result<EstimateResult, EstimateError> {
    EpsEstimator::new(model, weights).predict(measurements, constraints, j)
}

#[derive(Debug, Clone)]
pub struct MovingHorizonStep {
    /// Time `t` of the newest measurement in the window.
    pub time: usize,
    /// Estimate of `x_t`.
    pub filtered: DVector<f64>,
    /// Estimate of `x_{t+j}` when prediction is requested.
    pub predicted: Option<DVector<f64>>,
    pub result: EstimateResult,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MovingHorizonOptions {
    pub window: usize,
    pub predict_ahead: Option<usize>,
    pub estimator: EstimatorOptions,
}

impl MovingHorizonOptions {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            predict_ahead: None,
            estimator: EstimatorOptions::default(),
        }
    }
}

/// Repeatedly solves the batch problem on the latest `window` measurements.
///
/// The prior for each window is the previous window's estimate of the state
/// at the new window's start; the first window uses `model.xbar0`. `P` is
/// reused unchanged. `constraints` receives `(t, window measurements, horizon)`
/// and may return a constraint set spanning `horizon` steps.
pub fn moving_horizon<F>(
    model: &SystemModel,
    weights: &WeightSpec,
    stream: &[DVector<f64>],
    options: &MovingHorizonOptions,
    constraints: F,
) -> Result<Vec<MovingHorizonStep>, EstimateError>
where
    F: Fn(usize, &[DVector<f64>], usize) -> Option<ConstraintSet>,
{
    if options.window == 0 {
        return Err(crate::error::ModelError::InvalidParameter("window must be >= 1".into()).into());
    }
    if stream.is_empty() {
        return Err(EstimateError::NoMeasurements);
    }
    let window = options.window.min(stream.len());
    let mut steps: Vec<MovingHorizonStep> = Vec::with_capacity(stream.len() - window + 1);
    for t in window..=stream.len() {
        let prior = match steps.last() {
            Some(prev) => prev.result.xhat[1].clone(),
            None => model.xbar0.clone(),
        };
        let local = model.with_prior(prior);
        let est = EpsEstimator::new(&local, weights).with_options(options.estimator);
        let meas = &stream[t - window..t];
        let result = match options.predict_ahead {
            Some(j) => {
                let cs = constraints(t, meas, window + j);
                est.predict(meas, cs.as_ref(), j)?
            }
            None => match constraints(t, meas, window) {
                Some(cs) => est.smooth_constrained(meas, &cs)?,
                None => est.smooth(meas)?,
            },
        };
        let filtered = result.xhat[window].clone();
        let predicted = options.predict_ahead.map(|_| result.terminal().clone());
        steps.push(MovingHorizonStep {
            time: t,
            filtered,
            predicted,
            result,
        });
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::benchmark;
    use crate::verify::{check_kkt, primal_brute_force};

    fn scalar_model() -> SystemModel {
        let one = DMatrix::from_element(1, 1, 1.0);
        SystemModel::new(one.clone(), one.clone(), one, DVector::zeros(1)).unwrap()
    }

    fn scalar_weights(eps: f64) -> WeightSpec {
        let one = DMatrix::from_element(1, 1, 1.0);
        WeightSpec::new(one.clone(), one.clone(), one, DVector::from_element(1, eps))
    }

    fn vecs(xs: &[f64]) -> Vec<DVector<f64>> {
        xs.iter().map(|&x| DVector::from_element(1, x)).collect()
    }

    fn scalars(xs: &[DVector<f64>]) -> Vec<f64> {
        xs.iter().map(|x| x[0]).collect()
    }

    fn max_state_gap(a: &EstimateResult, b: &EstimateResult) -> f64 {
        a.xhat
            .iter()
            .zip(&b.xhat)
            .map(|(x, y)| linalg::inf_norm(&(x - y)))
            .fold(0.0, f64::max)
    }

    #[test]
    fn h2_scalar_example() {
        let est = h2_smooth(&scalar_model(), &scalar_weights(0.5), &vecs(&[1.0, 1.0])).unwrap();
        let dual = est.dual.as_ref().unwrap();
        assert!((dual.theta[0] - 0.25).abs() < 1e-14);
        assert!((dual.theta[1] - 0.125).abs() < 1e-14);
        let lambda = scalars(&est.lambda);
        for (got, want) in lambda.iter().zip([0.375, 0.125, 0.0]) {
            assert!((got - want).abs() < 1e-14);
        }
        for (got, want) in scalars(&est.xhat).iter().zip([0.375, 0.75, 0.875]) {
            assert!((got - want).abs() < 1e-14);
        }
        assert!(est.eta.iter().all(|e| e[0] == 0.0));
        assert_eq!(est.tube[0], 0.0);
    }

    #[test]
    fn h2_matches_conditional_mean() {
        // x_k and y_k are linear in z = (x0, w0, w1, v1, v2) with unit covariance
        let phi = [
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0, 0.0],
            [1.0, 1.0, 1.0, 0.0, 0.0],
        ];
        let x_map = DMatrix::from_fn(3, 5, |r, c| phi[r][c]);
        let y_map = DMatrix::from_row_slice(2, 5, &[1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, 1.0]);
        let gain = &x_map * y_map.transpose() * (&y_map * y_map.transpose()).try_inverse().unwrap();
        let expect = gain * y;
        let est = h2_smooth(&scalar_model(), &scalar_weights(0.5), &vecs(&[1.0, 1.0])).unwrap();
        for k in 0..3 {
            assert!((est.xhat[k][0] - expect[k]).abs() < 1e-13);
        }
    }

    #[test]
    fn h2_on_model_consistent_data() {
        let model = benchmark::model().with_prior(DVector::from_vec(vec![1.0, -0.5]));
        let ys: Vec<_> = (1..=6).map(|k| &model.c * model.open_loop_state(k)).collect();
        let est = h2_smooth(&model, &benchmark::weights(), &ys).unwrap();
        for k in 0..=6 {
            assert!(linalg::inf_norm(&(&est.xhat[k] - model.open_loop_state(k))) < 1e-12);
        }
        assert!(est.what.iter().all(|w| w.amax() < 1e-12));
        assert!(est.primal_objective.abs() < 1e-20);
    }

    #[test]
    fn h2_objective_equals_dual_value() {
        let est = h2_smooth(&scalar_model(), &scalar_weights(0.5), &vecs(&[1.0, 1.0])).unwrap();
        let dual = est.dual.unwrap().dual_objective;
        assert!((est.primal_objective - dual).abs() < 1e-14);
        // 1/2 (0.375^2 + 0.375^2 + 0.125^2 + 0.25^2 + 0.125^2)
        assert!((est.primal_objective - 0.1875).abs() < 1e-14);
    }

    #[test]
    fn wide_tube_gives_prior_trajectory() {
        let est = eps_smooth(&scalar_model(), &scalar_weights(2.0), &vecs(&[1.0, 1.0])).unwrap();
        let dual = est.dual.as_ref().unwrap();
        assert!(dual.theta.iter().all(|&t| t == 0.0));
        assert!(est.xhat.iter().all(|x| x[0] == 0.0));
        assert!(est.what.iter().all(|w| w[0] == 0.0));
        assert_eq!(est.primal_objective, 0.0);
        assert_eq!(scalars(&est.eta), vec![1.0, 1.0]);
    }

    #[test]
    fn vanishing_tube_reduces_to_h2() {
        let ys = vecs(&[1.0, 1.0]);
        let eps = eps_smooth(&scalar_model(), &scalar_weights(1e-12), &ys).unwrap();
        let h2 = h2_smooth(&scalar_model(), &scalar_weights(1e-12), &ys).unwrap();
        assert!(max_state_gap(&eps, &h2) < 1e-8);
    }

    #[test]
    fn half_unit_tube_matches_primal_oracle() {
        let ys = vecs(&[1.0, 1.0]);
        let (model, weights) = (scalar_model(), scalar_weights(0.5));
        let est = eps_smooth(&model, &weights, &ys).unwrap();
        let oracle = primal_brute_force(&model, &weights, &ys, None, 0).unwrap();
        assert!((est.xhat[0][0] - oracle.xhat[0][0]).abs() < 1e-6);
        for (a, b) in est.what.iter().zip(&oracle.what) {
            assert!((a[0] - b[0]).abs() < 1e-6);
        }
        for (a, b) in est.eta.iter().zip(&oracle.eta) {
            assert!((a[0] - b[0]).abs() < 1e-6);
        }
        let report = check_kkt(&model, &weights, &ys, None, &est, 1e-6).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn split_multipliers_are_complementary() {
        let run = benchmark::replay(3, benchmark::HORIZON);
        let weights = benchmark::weights().with_uniform_eps(0.7);
        let est = eps_smooth(&benchmark::model(), &weights, &run.measurements).unwrap();
        let dual = est.dual.unwrap();
        for i in 0..dual.theta.len() {
            assert!(dual.gamma[i] >= 0.0 && dual.beta[i] >= 0.0);
            assert!(dual.gamma[i] * dual.beta[i] <= 1e-9);
            assert!((dual.zeta[i] - dual.theta[i].abs()).abs() <= 1e-9);
        }
    }

    #[test]
    fn empty_constraints_match_unconstrained() {
        let run = benchmark::replay(1, benchmark::HORIZON);
        let (model, weights) = (benchmark::model(), benchmark::weights());
        let free = eps_smooth(&model, &weights, &run.measurements).unwrap();
        let empty = ConstraintSet::empty(benchmark::HORIZON, 2, 1);
        let cons = eps_smooth_constrained(&model, &weights, &run.measurements, &empty).unwrap();
        assert_eq!(free.xhat, cons.xhat);
    }

    #[test]
    fn slack_constraints_leave_estimate_unchanged() {
        let run = benchmark::replay(2, benchmark::HORIZON);
        let (model, weights) = (benchmark::model(), benchmark::weights());
        let free = eps_smooth(&model, &weights, &run.measurements).unwrap();
        let peak = free.xhat.iter().map(|x| x[1]).fold(f64::MIN, f64::max);
        let family = crate::operators::ConstraintFamily::StateBound {
            l: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            c: DVector::from_element(1, peak + 1.0),
        };
        let cs = crate::operators::encode_constraint_family(&family, &model, benchmark::HORIZON, &[]).unwrap();
        let cons = eps_smooth_constrained(&model, &weights, &run.measurements, &cs).unwrap();
        assert!(cons.dual.as_ref().unwrap().xi.iter().all(|&x| x.abs() < 1e-10));
        assert!(max_state_gap(&free, &cons) < 1e-8);
    }

    #[test]
    fn saturation_rows_are_respected() {
        let run = benchmark::replay(0, benchmark::HORIZON);
        let (model, weights) = (benchmark::model(), benchmark::weights());
        let cs = benchmark::saturation_constraints(benchmark::HORIZON);
        let est = eps_smooth_constrained(&model, &weights, &run.measurements, &cs).unwrap();
        let lhs = cs.lhs(&est.xhat, &est.what);
        assert_eq!(lhs.len(), benchmark::HORIZON);
        for j in 0..lhs.len() {
            assert!(lhs[j] <= cs.a()[j] + 1e-6);
        }
        let report = check_kkt(&model, &weights, &run.measurements, Some(&cs), &est, 1e-6).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn constrained_matches_oracle_on_truncated_benchmark() {
        let run = benchmark::replay(5, 8);
        let (model, weights) = (benchmark::model(), benchmark::weights());
        let cs = benchmark::saturation_constraints(8);
        let est = eps_smooth_constrained(&model, &weights, &run.measurements, &cs).unwrap();
        let oracle = primal_brute_force(&model, &weights, &run.measurements, Some(&cs), 0).unwrap();
        assert!(max_state_gap(&est, &oracle) < 1e-6);
    }

    #[test]
    fn wide_tube_prediction_is_open_loop() {
        let model = benchmark::model().with_prior(DVector::from_vec(vec![0.3, -0.2]));
        let ys = vecs(&[0.1, -0.2, 0.3]);
        let est = eps_predict(&model, &benchmark::weights(), &ys, None, 4).unwrap();
        assert_eq!(est.xhat.len(), 8);
        assert!(est.lambda.iter().all(|l| l.amax() == 0.0));
        for k in 0..=7 {
            assert!(linalg::inf_norm(&(&est.xhat[k] - model.open_loop_state(k))) < 1e-14);
        }
    }

    #[test]
    fn quadratic_prediction_propagates_smoothed_state() {
        let run = benchmark::replay(4, 12);
        let weights = benchmark::weights().with_uniform_eps(1e-12);
        let model = benchmark::model();
        let h2 = h2_smooth(&model, &weights, &run.measurements).unwrap();
        for j in 1..=3 {
            let est = eps_predict(&model, &weights, &run.measurements, None, j).unwrap();
            for k in 12..=12 + j {
                assert!(est.lambda[k].amax() < 1e-12);
            }
            let mut x = h2.xhat[12].clone();
            for _ in 0..j {
                x = &model.a * x;
            }
            assert!(linalg::inf_norm(&(est.terminal() - x)) < 1e-8);
        }
    }

    #[test]
    fn active_future_cap_matches_oracle() {
        let run = benchmark::replay(0, 6);
        let (model, weights) = (benchmark::model(), benchmark::weights().with_uniform_eps(0.3));
        let j = 2;
        let free = eps_predict(&model, &weights, &run.measurements, None, j).unwrap();
        let cap = free.terminal()[1] - 0.5;
        let mut u = vec![DMatrix::zeros(1, 2); 6 + j];
        u[6 + j - 1] = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let cs = ConstraintSet::new(6 + j, u, vec![DMatrix::zeros(1, 1); 6 + j], DVector::from_element(1, cap)).unwrap();
        let est = eps_predict(&model, &weights, &run.measurements, Some(&cs), j).unwrap();
        assert!(est.dual.as_ref().unwrap().xi[0] > 1e-6);
        assert!((est.terminal()[1] - cap).abs() < 1e-7);
        let oracle = primal_brute_force(&model, &weights, &run.measurements, Some(&cs), j).unwrap();
        assert!(max_state_gap(&est, &oracle) < 1e-6);
    }

    #[test]
    fn infeasible_constraints_are_reported() {
        // x_1 <= -1 and -x_1 <= -1 cannot both hold
        let model = scalar_model();
        let u = vec![DMatrix::from_row_slice(2, 1, &[1.0, -1.0]), DMatrix::zeros(2, 1)];
        let cs = ConstraintSet::new(2, u, vec![DMatrix::zeros(2, 1); 2], DVector::from_vec(vec![-1.0, -1.0])).unwrap();
        let err = eps_smooth_constrained(&model, &scalar_weights(0.5), &vecs(&[1.0, 1.0]), &cs).unwrap_err();
        assert!(matches!(err, EstimateError::Infeasible { .. }), "{err:?}");
    }

    #[test]
    fn iteration_cap_is_flagged() {
        let run = benchmark::replay(0, benchmark::HORIZON);
        let est = EpsEstimator::new(&benchmark::model(), &benchmark::weights().with_uniform_eps(0.5))
            .with_options(EstimatorOptions { tol: 1e-14, max_iter: 3 })
            .smooth(&run.measurements)
            .unwrap();
        assert!(!est.converged());
        assert_eq!(est.dual.unwrap().diagnostics.status, QpStatus::MaxIterations);
    }

    #[test]
    fn empty_measurements_are_rejected() {
        let err = eps_smooth(&scalar_model(), &scalar_weights(1.0), &[]).unwrap_err();
        assert_eq!(err, EstimateError::NoMeasurements);
    }

    #[test]
    fn single_window_matches_batch() {
        let run = benchmark::replay(0, benchmark::HORIZON);
        let (model, weights) = (benchmark::model(), benchmark::weights());
        let steps = moving_horizon(&model, &weights, &run.measurements, &MovingHorizonOptions::new(50), |_, _, _| None).unwrap();
        assert_eq!(steps.len(), 1);
        let batch = eps_smooth(&model, &weights, &run.measurements).unwrap();
        assert_eq!(&steps[0].filtered, batch.terminal());
    }

    #[test]
    fn window_of_ten_runs_eleven_solves() {
        let run = benchmark::replay(0, benchmark::HORIZON);
        let (model, weights) = (benchmark::model(), benchmark::weights());
        let mut options = MovingHorizonOptions::new(10);
        options.predict_ahead = Some(2);
        let steps = moving_horizon(&model, &weights, &run.measurements, &options, |_, _, h| {
            Some(benchmark::saturation_constraints(h))
        })
        .unwrap();
        assert_eq!(steps.len(), 11);
        for (i, step) in steps.iter().enumerate() {
            assert_eq!(step.time, 10 + i);
            let r = &step.result;
            assert_eq!(r.lambda[12].amax(), 0.0);
            for k in 0..12 {
                let gap = &r.xhat[k + 1] - &model.a * &r.xhat[k] - &model.b * &r.what[k];
                assert!(gap.amax() < 1e-9);
            }
            assert!(r.eta.iter().all(|e| e[0].abs() <= 5.0 + 1e-6));
            assert!(r.xhat.iter().skip(1).all(|x| x[1] <= 4.0 + 1e-6));
            assert_eq!(step.predicted.as_ref(), Some(r.terminal()));
        }
    }

    #[test]
    fn noiseless_stream_is_tracked() {
        let model = benchmark::model();
        let steps = 40;
        let w = vec![DVector::zeros(1); steps];
        let v = vec![DVector::zeros(1); steps];
        let x0 = DVector::from_vec(vec![3.0, -2.0]);
        let truth = crate::model::simulate(&model, &x0, &w, &v).unwrap();
        let weights = benchmark::weights().with_uniform_eps(1e-9);
        let out = moving_horizon(&model, &weights, &truth.measurements, &MovingHorizonOptions::new(5), |_, _, _| None).unwrap();
        let errors: Vec<f64> = out
            .iter()
            .map(|s| (&s.filtered - &truth.states[s.time]).norm())
            .collect();
        assert!(errors.last().unwrap() < &1e-3, "{errors:?}");
        assert!(errors.last().unwrap() < &(0.01 * errors[0]));
    }
}
