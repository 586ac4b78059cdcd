//! Independent checks: a direct primal solve, a KKT audit of any estimate and
//! a seeded generator of random problem instances.

use nalgebra::{DMatrix, DVector};

use crate::error::{ModelError, VerifyError};
use crate::estimators::{DualSolution, EstimateResult, Method, SolveDiagnostics};
use crate::linalg;
use crate::model::{simulate, validate_model, SystemModel};
use crate::operators::{ConstraintSet, StackedOperators, WeightSpec};
use crate::qp::{self, QpProblem, QpStatus};
use crate::rng::NormalStream;

/// Largest number of primal decision variables the oracle will accept.
pub const ORACLE_MAX_VARS: usize = 300;
const ORACLE_TOL: f64 = 1e-11;

/// Primal cost `1/2 |x0 - xbar0|_P^2 + 1/2 sum |w_k|_Q^2 + 1/2 sum |y_k - C x_k - eta_k|_R^2`.
pub fn objective_value(
    model: &SystemModel,
    weights: &WeightSpec,
    measurements: &[DVector<f64>],
    result: &EstimateResult,
) -> f64 {
    let dx = &result.xhat[0] - &model.xbar0;
    let mut total = dx.dot(&(&weights.p * &dx));
    for w in &result.what {
        total += w.dot(&(&weights.q * w));
    }
    for (i, y) in measurements.iter().enumerate() {
        let r = y - &model.c * &result.xhat[i + 1] - &result.eta[i];
        total += r.dot(&(&weights.r * &r));
    }
    0.5 * total
}

/// Solves the primal problem over `(x_0, w_0..w_{H-1}, eta_1..eta_N)` directly.
///
/// The returned estimate carries the inequality multipliers as its dual
/// variables and a costate sequence built from them, so it can be audited by
/// [`check_kkt`] like any other estimate. The horizon is `N + j`; `j = 0`
/// smooths, and `constraints` must span the horizon when given.
pub fn primal_brute_force(
    model: &SystemModel,
    weights: &WeightSpec,
    measurements: &[DVector<f64>],
    constraints: Option<&ConstraintSet>,
    j: usize,
) -> Result<EstimateResult, VerifyError> {
    validate_model(model, weights)?;
    let (n, l, m) = (model.n(), model.l(), model.m());
    let n_meas = measurements.len();
    if n_meas == 0 {
        return Err(ModelError::LengthMismatch("no measurements".into()).into());
    }
    let empty;
    let cs = match constraints {
        Some(c) => c,
        None => {
            empty = ConstraintSet::empty(n_meas + j, n, l);
            &empty
        }
    };
    cs.check_model(model)?;
    let horizon = n_meas + j;
    if cs.horizon() != horizon {
        return Err(ModelError::LengthMismatch(format!(
            "constraint horizon {} differs from N + j = {horizon}",
            cs.horizon()
        ))
        .into());
    }
    let vars = n + horizon * l + n_meas * m;
    if vars > ORACLE_MAX_VARS {
        return Err(VerifyError::ScaleGuard {
            vars,
            limit: ORACLE_MAX_VARS,
        });
    }
    let w_at = |k: usize| n + k * l;
    let eta_at = |k: usize| n + horizon * l + (k - 1) * m;

    // phi[k] maps the decision vector to x_k
    let mut phi = Vec::with_capacity(horizon + 1);
    let mut phi0 = DMatrix::zeros(n, vars);
    phi0.view_mut((0, 0), (n, n)).fill_with_identity();
    phi.push(phi0);
    for k in 0..horizon {
        let mut next = &model.a * &phi[k];
        let mut cols = next.view_mut((0, w_at(k)), (n, l));
        cols += &model.b;
        phi.push(next);
    }

    let mut hess = DMatrix::zeros(vars, vars);
    let mut lin = DVector::zeros(vars);
    hess.view_mut((0, 0), (n, n)).copy_from(&weights.p);
    lin.rows_mut(0, n).copy_from(&(-(&weights.p * &model.xbar0)));
    for k in 0..horizon {
        hess.view_mut((w_at(k), w_at(k)), (l, l)).copy_from(&weights.q);
    }
    for k in 1..=n_meas {
        let mut j = &model.c * &phi[k];
        let mut cols = j.view_mut((0, eta_at(k)), (m, m));
        for i in 0..m {
            cols[(i, i)] += 1.0;
        }
        let jt_r = j.transpose() * &weights.r;
        hess += &jt_r * &j;
        lin -= &jt_r * &measurements[k - 1];
    }
    hess = (&hess + hess.transpose()) * 0.5;

    let nm = n_meas * m;
    let p = cs.rows();
    let mut a_ineq = DMatrix::zeros(2 * nm + p, vars);
    let mut b = DVector::zeros(2 * nm + p);
    for k in 1..=n_meas {
        for i in 0..m {
            let row = (k - 1) * m + i;
            a_ineq[(row, eta_at(k) + i)] = 1.0;
            a_ineq[(nm + row, eta_at(k) + i)] = -1.0;
            b[row] = weights.eps[i];
            b[nm + row] = weights.eps[i];
        }
    }
    {
        let mut rows = a_ineq.rows_mut(2 * nm, p);
        for k in 1..=horizon {
            rows += cs.u(k) * &phi[k];
        }
        for k in 0..horizon {
            let mut cols = rows.view_mut((0, w_at(k)), (p, l));
            cols += cs.v(k);
        }
    }
    b.rows_mut(2 * nm, p).copy_from(cs.a());

    let problem = QpProblem::new(hess, lin).with_inequalities(a_ineq, b);
    let sol = qp::solve_ineq_qp(&problem, ORACLE_TOL, 10_000)?;
    match sol.status {
        QpStatus::Converged => {}
        QpStatus::Infeasible => return Err(VerifyError::Infeasible),
        QpStatus::MaxIterations => return Err(VerifyError::NotConverged(sol.kkt_residual)),
    }

    let z = &sol.z;
    let xhat: Vec<DVector<f64>> = phi.iter().map(|f| f * z).collect();
    let what: Vec<DVector<f64>> = (0..horizon).map(|k| z.rows(w_at(k), l).into_owned()).collect();
    let eta: Vec<DVector<f64>> = (1..=n_meas).map(|k| z.rows(eta_at(k), m).into_owned()).collect();
    let vhat: Vec<DVector<f64>> = (0..n_meas)
        .map(|i| &measurements[i] - &model.c * &xhat[i + 1])
        .collect();
    let gamma = sol.multipliers.rows(0, nm).into_owned();
    let beta = sol.multipliers.rows(nm, nm).into_owned();
    let xi = sol.multipliers.rows(2 * nm, p).into_owned();
    let theta = &gamma - &beta;

    let at = model.a.transpose();
    let mut lambda = vec![DVector::zeros(n); horizon + 1];
    for k in (1..=horizon).rev() {
        let mut prev = &at * &lambda[k] - cs.u(k).transpose() * &xi;
        if k <= n_meas {
            prev += model.c.transpose() * theta.rows((k - 1) * m, m);
        }
        lambda[k - 1] = prev;
    }

    let ops = StackedOperators::assemble(model, weights, measurements, cs)?;
    let mut stacked = DVector::zeros(nm + p);
    stacked.rows_mut(0, nm).copy_from(&theta);
    stacked.rows_mut(nm, p).copy_from(&xi);
    let zeta = &gamma + &beta;
    let dual_objective = -0.5 * stacked.dot(&(&ops.t * &stacked)) - ops.eps_stack.dot(&zeta)
        + theta.dot(&ops.y)
        - xi.dot(&ops.offset);

    let mut result = EstimateResult {
        method: Method::PrimalOracle,
        xhat,
        what,
        eta,
        lambda,
        vhat,
        primal_objective: 0.0,
        tube: weights.eps.clone(),
        dual: Some(DualSolution {
            theta,
            zeta,
            xi,
            gamma,
            beta,
            dual_objective,
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

#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    /// Largest absolute residual of each stationarity condition.
    pub stationarity_residuals: Vec<(&'static str, f64)>,
    pub complementary_slackness_max: f64,
    /// Largest violation of the tube and of the linear inequalities.
    pub primal_feasibility_max: f64,
    /// Smallest entry of `gamma`, `beta`, `xi` (zero when all are empty).
    pub dual_feasibility_min: f64,
    pub passed: bool,
}

impl KktReport {
    pub fn stationarity_max(&self) -> f64 {
        self.stationarity_residuals
            .iter()
            .fold(0.0, |acc, (_, r)| acc.max(*r))
    }

    /// Worst of all residuals, with negative multipliers counted as violations.
    pub fn worst(&self) -> f64 {
        self.stationarity_max()
            .max(self.complementary_slackness_max)
            .max(self.primal_feasibility_max)
            .max(-self.dual_feasibility_min)
    }
}

/// Audits an estimate against the optimality conditions of the primal problem.
///
/// The tube half-width is taken from `result.tube`. `constraints` defaults to
/// none over the estimate's horizon.
pub fn check_kkt(
    model: &SystemModel,
    weights: &WeightSpec,
    measurements: &[DVector<f64>],
    constraints: Option<&ConstraintSet>,
    result: &EstimateResult,
    tol: f64,
) -> Result<KktReport, VerifyError> {
    let dual = result.dual.as_ref().ok_or(VerifyError::MissingDual)?;
    let (n, l, m) = (model.n(), model.l(), model.m());
    let horizon = result.horizon();
    let n_meas = measurements.len();
    if result.n_meas() != n_meas || result.xhat.len() != horizon + 1 || result.lambda.len() != horizon + 1 {
        return Err(ModelError::LengthMismatch("estimate does not match the measurements".into()).into());
    }
    let empty;
    let cs = match constraints {
        Some(c) => c,
        None => {
            empty = ConstraintSet::empty(horizon, n, l);
            &empty
        }
    };
    if cs.horizon() != horizon {
        return Err(ModelError::LengthMismatch(format!(
            "constraint horizon {} differs from estimate horizon {horizon}",
            cs.horizon()
        ))
        .into());
    }
    let xi = &dual.xi;
    let theta_k = |k: usize| dual.theta.rows((k - 1) * m, m);
    let at = model.a.transpose();
    let ct = model.c.transpose();
    let r = &weights.r;

    let mut costate = 0.0f64;
    for k in 1..=horizon {
        let mut rhs = &at * &result.lambda[k] - cs.u(k).transpose() * xi;
        if k <= n_meas {
            let y = &measurements[k - 1];
            rhs += &ct * (r * (y - &result.eta[k - 1])) - &ct * (r * (&model.c * &result.xhat[k]));
        }
        costate = costate.max(linalg::inf_norm(&(&result.lambda[k - 1] - rhs)));
    }
    let terminal = linalg::inf_norm(&result.lambda[horizon]);
    let initial = linalg::inf_norm(
        &(&weights.p * (&result.xhat[0] - &model.xbar0) - &at * &result.lambda[0]),
    );
    let mut disturbance = 0.0f64;
    let mut dynamics = 0.0f64;
    for k in 0..horizon {
        let res = &weights.q * &result.what[k] - model.b.transpose() * &result.lambda[k]
            + cs.v(k).transpose() * xi;
        disturbance = disturbance.max(linalg::inf_norm(&res));
        let step = &result.xhat[k + 1] - &model.a * &result.xhat[k] - &model.b * &result.what[k];
        dynamics = dynamics.max(linalg::inf_norm(&step));
    }
    let mut noise = 0.0f64;
    for k in 1..=n_meas {
        let y = &measurements[k - 1];
        let res = r * &result.eta[k - 1] - r * (y - &model.c * &result.xhat[k]) + theta_k(k);
        noise = noise.max(linalg::inf_norm(&res));
    }
    let split = linalg::inf_norm(&(&dual.theta - (&dual.gamma - &dual.beta)));

    let mut comp = 0.0f64;
    let mut primal = 0.0f64;
    for k in 1..=n_meas {
        for c in 0..m {
            let i = (k - 1) * m + c;
            let (eta, eps) = (result.eta[k - 1][c], result.tube[c]);
            comp = comp
                .max((dual.gamma[i] * (eps - eta)).abs())
                .max((dual.beta[i] * (eps + eta)).abs())
                .max(2.0 * dual.gamma[i].min(dual.beta[i]).max(0.0));
            primal = primal.max(eta.abs() - eps);
        }
    }
    if !cs.is_empty() {
        let slack = cs.a() - cs.lhs(&result.xhat, &result.what);
        for j in 0..cs.rows() {
            comp = comp.max((xi[j] * slack[j]).abs());
            primal = primal.max(-slack[j]);
        }
    }
    let dual_min = dual
        .gamma
        .iter()
        .chain(dual.beta.iter())
        .chain(xi.iter())
        .fold(f64::INFINITY, |acc, &x| acc.min(x));
    let dual_min = if dual_min.is_finite() { dual_min } else { 0.0 };

    let stationarity_residuals = vec![
        ("costate", costate),
        ("terminal_costate", terminal),
        ("initial_state", initial),
        ("disturbance", disturbance),
        ("noise", noise),
        ("dynamics", dynamics),
        ("theta_split", split),
    ];
    let mut report = KktReport {
        stationarity_residuals,
        complementary_slackness_max: comp,
        primal_feasibility_max: primal.max(0.0),
        dual_feasibility_min: dual_min,
        passed: false,
    };
    report.passed = report.worst() <= tol;
    Ok(report)
}

/// Shape of randomly generated test problems.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceSpec {
    pub max_n: usize,
    pub max_l: usize,
    pub max_m: usize,
    pub min_meas: usize,
    pub max_meas: usize,
    /// Number of constraint rows; zero for an unconstrained instance.
    pub constraint_rows: usize,
    /// Prediction steps beyond the last measurement.
    pub predict_ahead: usize,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self {
            max_n: 3,
            max_l: 2,
            max_m: 2,
            min_meas: 3,
            max_meas: 8,
            constraint_rows: 0,
            predict_ahead: 0,
        }
    }
}

/// A random problem together with the trajectory that generated it.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub model: SystemModel,
    pub weights: WeightSpec,
    pub measurements: Vec<DVector<f64>>,
    /// Spans `N + predict_ahead` steps when present.
    pub constraints: Option<ConstraintSet>,
    pub true_states: Vec<DVector<f64>>,
    pub true_disturbances: Vec<DVector<f64>>,
}

impl RandomInstance {
    pub fn n_meas(&self) -> usize {
        self.measurements.len()
    }

    pub fn horizon(&self) -> usize {
        self.true_disturbances.len()
    }
}

fn pick(rng: &mut NormalStream, lo: usize, hi: usize) -> usize {
    lo + ((rng.uniform() * (hi - lo + 1) as f64) as usize).min(hi - lo)
}

fn normal_matrix(rng: &mut NormalStream, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.standard_normal())
}

fn normal_vector(rng: &mut NormalStream, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.standard_normal())
}

/// `G'G + 0.1 I` for a random square `G`.
fn random_spd(rng: &mut NormalStream, dim: usize) -> DMatrix<f64> {
    let g = normal_matrix(rng, dim, dim);
    g.transpose() * &g + DMatrix::identity(dim, dim) * 0.1
}

/// Draws a random instance; the same seed and spec always give the same problem.
///
/// When constraint rows are requested, half of them hold with equality on the
/// generating trajectory and the rest with positive slack, so the constrained
/// problem is always feasible.
pub fn random_instance(seed: u64, spec: &InstanceSpec) -> RandomInstance {
    let mut rng = NormalStream::new(seed);
    let n = pick(&mut rng, 1, spec.max_n);
    let l = pick(&mut rng, 1, spec.max_l);
    let m = pick(&mut rng, 1, spec.max_m);
    let n_meas = pick(&mut rng, spec.min_meas, spec.max_meas);
    let horizon = n_meas + spec.predict_ahead;

    let raw = normal_matrix(&mut rng, n, n);
    let a = &raw * (0.95 / linalg::mat_inf_norm(&raw).max(0.95));
    let b = normal_matrix(&mut rng, n, l);
    let c = normal_matrix(&mut rng, m, n);
    let xbar0 = normal_vector(&mut rng, n);
    let model = SystemModel::new(a, b, c, xbar0.clone()).expect("consistent random dimensions");
    let eps = DVector::from_fn(m, |_, _| 0.1 + 1.9 * rng.uniform());
    let weights = WeightSpec::new(
        random_spd(&mut rng, n),
        random_spd(&mut rng, l),
        random_spd(&mut rng, m),
        eps,
    );

    let x0 = &xbar0 + normal_vector(&mut rng, n);
    let w: Vec<DVector<f64>> = (0..horizon).map(|_| normal_vector(&mut rng, l)).collect();
    let v: Vec<DVector<f64>> = (0..horizon)
        .map(|_| normal_vector(&mut rng, m) * 1.5)
        .collect();
    let traj = simulate(&model, &x0, &w, &v).expect("consistent random inputs");
    let measurements = traj.measurements[..n_meas].to_vec();

    let constraints = (spec.constraint_rows > 0).then(|| {
        let p = spec.constraint_rows;
        let mut u = vec![DMatrix::zeros(p, n); horizon];
        let mut vv = vec![DMatrix::zeros(p, l); horizon];
        for row in 0..p {
            let k = pick(&mut rng, 1, horizon);
            u[k - 1].set_row(row, &normal_matrix(&mut rng, 1, n).row(0));
            if rng.uniform() < 0.5 {
                let kw = pick(&mut rng, 0, horizon - 1);
                vv[kw].set_row(row, &normal_matrix(&mut rng, 1, l).row(0));
            }
        }
        let draft = ConstraintSet::new(horizon, u.clone(), vv.clone(), DVector::zeros(p))
            .expect("consistent constraint blocks");
        let lhs = draft.lhs(&traj.states, &traj.disturbances);
        let a = DVector::from_fn(p, |row, _| {
            if row % 2 == 0 {
                lhs[row]
            } else {
                lhs[row] + 0.1 + 0.9 * rng.uniform()
            }
        });
        ConstraintSet::new(horizon, u, vv, a).expect("consistent constraint blocks")
    });

    RandomInstance {
        model,
        weights,
        measurements,
        constraints,
        true_states: traj.states,
        true_disturbances: traj.disturbances,
    }
}
