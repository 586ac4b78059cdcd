//! Dense convex quadratic programs.
//!
//! Two solvers over `min 1/2 z'Hz + q'z`:
//!
//! * [`solve_nonneg_qp`] for `z >= 0` with `H` positive semidefinite. Monotone
//!   FISTA with function-value restart, interleaved with a subspace polish
//!   that solves the equality system on the current support.
//! * [`solve_ineq_qp`] for `A z <= b` with `H` positive definite, a dual
//!   active-set method (Goldfarb–Idnani) that needs no feasible start and
//!   certifies infeasibility.

use nalgebra::{DMatrix, DVector};

use crate::error::QpError;
use crate::linalg;

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 200_000;
/// Multiplier norm above which a still-decreasing nonnegative QP is declared unbounded.
pub const DIVERGENCE_NORM: f64 = 1e8;

const POLISH_EVERY: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub q: DVector<f64>,
    /// `r x d`; empty for the nonnegative form.
    pub a_ineq: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl QpProblem {
    pub fn new(hessian: DMatrix<f64>, q: DVector<f64>) -> Self {
        let d = q.len();
        Self {
            hessian,
            q,
            a_ineq: DMatrix::zeros(0, d),
            b: DVector::zeros(0),
        }
    }

    pub fn with_inequalities(mut self, a_ineq: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_ineq = a_ineq;
        self.b = b;
        self
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.q.dot(z)
    }

    fn check(&self) -> Result<(), QpError> {
        let d = self.q.len();
        if self.hessian.shape() != (d, d) {
            return Err(QpError::DimensionMismatch(format!(
                "Hessian is {}x{} but q has length {d}",
                self.hessian.nrows(),
                self.hessian.ncols()
            )));
        }
        if self.a_ineq.ncols() != d || self.a_ineq.nrows() != self.b.len() {
            return Err(QpError::DimensionMismatch(format!(
                "inequality matrix is {}x{} with {} right-hand sides",
                self.a_ineq.nrows(),
                self.a_ineq.ncols(),
                self.b.len()
            )));
        }
        let asym = linalg::asymmetry(&self.hessian);
        if asym > 1e-10 * (1.0 + linalg::mat_inf_norm(&self.hessian)) {
            return Err(QpError::NonSymmetric(asym));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Converged,
    MaxIterations,
    /// Empty feasible set, or for the nonnegative form an objective that is
    /// unbounded below (which makes the primal problem it came from infeasible).
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: QpStatus,
    /// Constraint multipliers: `Hz + q` for the nonnegative form, one per row of `A` otherwise.
    pub multipliers: DVector<f64>,
    /// Ridge added to a Hessian block that failed to factor (0 when none was needed).
    pub ridge: f64,
    /// Objective of the accepted iterate after every iteration.
    pub history: Vec<f64>,
}

impl QpSolution {
    pub fn converged(&self) -> bool {
        self.status == QpStatus::Converged
    }
}

/// `max_i |min(z_i, g_i)|`, zero exactly at a KKT point of the nonnegative QP.
pub fn nonneg_kkt_residual(z: &DVector<f64>, grad: &DVector<f64>) -> f64 {
    z.iter()
        .zip(grad.iter())
        .fold(0.0_f64, |acc, (&zi, &gi)| acc.max(zi.min(gi).abs()))
}

/// Largest eigenvalue estimate of a PSD matrix by power iteration.
fn lipschitz_estimate(h: &DMatrix<f64>) -> f64 {
    let d = h.nrows();
    if d == 0 {
        return 1.0;
    }
    let mut v = DVector::from_fn(d, |i, _| 1.0 + (i as f64 * 0.618_033_988_75).fract());
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..500 {
        let hv = h * &v;
        let norm = hv.norm();
        if norm == 0.0 {
            return 1.0;
        }
        let next = v.dot(&hv);
        v = hv / norm;
        if (next - lambda).abs() <= 1e-10 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    // Gershgorin caps the estimate from above
    let gersh = (0..d)
        .map(|i| h.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    (1.05 * lambda).min(gersh).max(f64::MIN_POSITIVE)
}

struct Iterate {
    z: DVector<f64>,
    grad: DVector<f64>,
    obj: f64,
}

impl Iterate {
    fn at(problem: &QpProblem, z: DVector<f64>) -> Self {
        let hz = &problem.hessian * &z;
        let obj = 0.5 * z.dot(&hz) + problem.q.dot(&z);
        let grad = hz + &problem.q;
        Self { z, grad, obj }
    }

    /// Like [`Iterate::at`], but the objective is carried over from `prev` plus
    /// the exactly evaluated change, so nearby points compare without cancellation.
    fn moved_from(problem: &QpProblem, prev: &Iterate, z: DVector<f64>) -> Self {
        let grad = &problem.hessian * &z + &problem.q;
        let dz = &z - &prev.z;
        // f(z) - f(prev) = 1/2 dz'(grad(z) + grad(prev)) for a quadratic
        let change = 0.5 * dz.dot(&(&grad + &prev.grad));
        Self {
            obj: prev.obj + change,
            z,
            grad,
        }
    }

    fn residual(&self) -> f64 {
        nonneg_kkt_residual(&self.z, &self.grad)
    }
}

/// Solves the equality system on a support set, pruning negative entries.
///
/// Returns the candidate point and the ridge used (0 when the plain block factored).
fn polish(problem: &QpProblem, current: &Iterate, step: f64) -> Option<(DVector<f64>, f64)> {
    let d = problem.dim();
    let mut free: Vec<usize> = (0..d)
        .filter(|&i| current.z[i] - step * current.grad[i] > 0.0)
        .collect();
    let mut ridge_used = 0.0;
    for _ in 0..(d + 1) {
        if free.is_empty() {
            return Some((DVector::zeros(d), ridge_used));
        }
        let k = free.len();
        let sub = DMatrix::from_fn(k, k, |r, c| problem.hessian[(free[r], free[c])]);
        let rhs = DVector::from_fn(k, |r, _| -problem.q[free[r]]);
        let sol = match linalg::cholesky(&sub) {
            Some(ch) => ch.solve(&rhs),
            None => {
                let ridge = 1e-10 * sub.trace().max(f64::MIN_POSITIVE) / k as f64;
                let mut reg = sub.clone();
                for i in 0..k {
                    reg[(i, i)] += ridge;
                }
                ridge_used = ridge_used.max(ridge);
                linalg::cholesky(&reg)?.solve(&rhs)
            }
        };
        if sol.iter().all(|x| *x >= 0.0) {
            let mut z = DVector::zeros(d);
            for (r, &i) in free.iter().enumerate() {
                z[i] = sol[r];
            }
            return Some((z, ridge_used));
        }
        // drop the most negative coordinate and retry
        let (worst, _) = sol
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (r, &x)| if x < acc.1 { (r, x) } else { acc });
        free.remove(worst);
    }
    None
}

/// Minimizes `1/2 z'Hz + q'z` over `z >= 0`.
///
/// Terminates when `max_i |min(z_i, (Hz+q)_i)| <= tol`.
pub fn solve_nonneg_qp(problem: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    problem.check()?;
    if !(tol > 0.0) {
        return Err(QpError::BadTolerance);
    }
    let d = problem.dim();
    let mut lip = lipschitz_estimate(&problem.hessian);
    let mut best = Iterate::at(problem, DVector::zeros(d));
    let mut history = vec![best.obj];
    let mut ridge = 0.0;
    let mut y = best.z.clone();
    let mut t = 1.0_f64;
    let mut rejected_in_row = 0;
    let mut iterations = 0;

    let finish = |it: Iterate, iterations, status, ridge, history| QpSolution {
        objective: it.obj,
        kkt_residual: it.residual(),
        multipliers: it.grad.clone(),
        z: it.z,
        iterations,
        status,
        ridge,
        history,
    };

    if d == 0 || best.residual() <= tol {
        return Ok(finish(best, 0, QpStatus::Converged, ridge, history));
    }

    while iterations < max_iter {
        iterations += 1;
        let step = 1.0 / lip;
        let gy = &problem.hessian * &y + &problem.q;
        let cand = (&y - gy * step).map(|x| x.max(0.0));
        let cand = Iterate::moved_from(problem, &best, cand);
        if cand.obj <= best.obj {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let prev = std::mem::replace(&mut best, cand).z;
            y = &best.z + (&best.z - &prev) * ((t - 1.0) / t_next);
            t = t_next;
            rejected_in_row = 0;
        } else {
            // restart momentum from the last accepted point
            t = 1.0;
            y = best.z.clone();
            rejected_in_row += 1;
            if rejected_in_row >= 2 {
                lip *= 2.0;
            }
        }

        if iterations % POLISH_EVERY == 0 {
            if let Some((z, used)) = polish(problem, &best, step) {
                let cand = Iterate::moved_from(problem, &best, z);
                if cand.obj <= best.obj
                    && cand.residual() < best.residual()
                {
                    ridge = f64::max(ridge, used);
                    best = cand;
                    y = best.z.clone();
                    t = 1.0;
                }
            }
        }
        history.push(best.obj);

        if best.residual() <= tol {
            return Ok(finish(best, iterations, QpStatus::Converged, ridge, history));
        }
        // accepted iterates never increase the objective, so a huge iterate means a descent ray
        if linalg::inf_norm(&best.z) > DIVERGENCE_NORM {
            return Ok(finish(best, iterations, QpStatus::Infeasible, ridge, history));
        }
    }
    Ok(finish(best, iterations, QpStatus::MaxIterations, ridge, history))
}

/// KKT residual of `min 1/2 z'Hz + q'z s.t. Az <= b` at `(z, u)`: the largest of
/// stationarity, primal infeasibility, negative multipliers and complementarity.
pub fn ineq_kkt_residual(problem: &QpProblem, z: &DVector<f64>, u: &DVector<f64>) -> f64 {
    let station = &problem.hessian * z + &problem.q + problem.a_ineq.transpose() * u;
    let slack = &problem.b - &problem.a_ineq * z;
    let mut worst = linalg::inf_norm(&station);
    for i in 0..u.len() {
        worst = worst
            .max((-slack[i]).max(0.0))
            .max((-u[i]).max(0.0))
            .max((u[i] * slack[i]).abs());
    }
    worst
}

/// Minimizes `1/2 z'Hz + q'z` subject to `A z <= b` for positive definite `H`.
///
/// Constraints enter one at a time (lowest-index violated row first); ties
/// when dropping are broken by lowest constraint index.
pub fn solve_ineq_qp(problem: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    problem.check()?;
    if !(tol > 0.0) {
        return Err(QpError::BadTolerance);
    }
    let d = problem.dim();
    let r = problem.b.len();
    let mut ridge = 0.0;
    let chol = match linalg::cholesky(&problem.hessian) {
        Some(c) => c,
        None => {
            ridge = 1e-10 * problem.hessian.trace().max(f64::MIN_POSITIVE) / d.max(1) as f64;
            let mut reg = problem.hessian.clone();
            for i in 0..d {
                reg[(i, i)] += ridge;
            }
            linalg::cholesky(&reg).ok_or(QpError::Factorization)?
        }
    };
    let h_inv = chol.inverse();
    let mut z = -(&h_inv * &problem.q);
    let mut u = DVector::zeros(r);
    // active constraint indices, kept sorted
    let mut active: Vec<usize> = Vec::new();
    let mut history = vec![problem.objective(&z)];
    let mut iterations = 0;

    let row = |i: usize| problem.a_ineq.row(i).transpose();
    let feas_tol = |i: usize| tol * (1.0 + problem.b[i].abs());

    let result = |z: DVector<f64>, u: DVector<f64>, iterations, status, history| {
        let residual = ineq_kkt_residual(problem, &z, &u);
        QpSolution {
            objective: problem.objective(&z),
            kkt_residual: residual,
            z,
            iterations,
            status,
            multipliers: u,
            ridge,
            history,
        }
    };

    'outer: loop {
        let Some(p) = (0..r).find(|&i| {
            !active.contains(&i) && row(i).dot(&z) - problem.b[i] > feas_tol(i)
        }) else {
            return Ok(result(z, u, iterations, QpStatus::Converged, history));
        };
        let ap = row(p);
        let mut up = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                u[p] = up;
                return Ok(result(z, u, iterations, QpStatus::MaxIterations, history));
            }
            let j_ap = &h_inv * &ap;
            let (s, dual_dir) = if active.is_empty() {
                (j_ap.clone(), DVector::zeros(0))
            } else {
                let k = active.len();
                let n_act = DMatrix::from_fn(d, k, |i, c| problem.a_ineq[(active[c], i)]);
                let jn = &h_inv * &n_act;
                let ntjn = n_act.transpose() * &jn;
                let rhs = n_act.transpose() * &j_ap;
                let dual_dir = match linalg::cholesky(&ntjn) {
                    Some(c) => c.solve(&rhs),
                    None => ntjn.clone().lu().solve(&rhs).ok_or(QpError::Factorization)?,
                };
                (&j_ap - &jn * &dual_dir, dual_dir)
            };
            let s_is_zero = linalg::inf_norm(&s) <= 1e-12 * linalg::inf_norm(&j_ap).max(f64::MIN_POSITIVE);

            // largest step keeping active multipliers nonnegative
            let mut t_dual = f64::INFINITY;
            let mut drop_at = None;
            for (c, &i) in active.iter().enumerate() {
                if dual_dir[c] > 0.0 {
                    let ratio = u[i] / dual_dir[c];
                    if ratio < t_dual {
                        t_dual = ratio;
                        drop_at = Some(c);
                    }
                }
            }
            let violation = ap.dot(&z) - problem.b[p];
            let t_primal = if s_is_zero {
                f64::INFINITY
            } else {
                violation / ap.dot(&s)
            };
            if t_primal.is_infinite() && t_dual.is_infinite() {
                u[p] = up;
                return Ok(result(z, u, iterations, QpStatus::Infeasible, history));
            }
            let step = t_primal.min(t_dual);
            if !s_is_zero {
                z -= &s * step;
            }
            for (c, &i) in active.iter().enumerate() {
                u[i] -= step * dual_dir[c];
            }
            up += step;
            history.push(problem.objective(&z));
            if t_primal <= t_dual {
                u[p] = up;
                let pos = active.partition_point(|&i| i < p);
                active.insert(pos, p);
                continue 'outer;
            }
            let c = drop_at.expect("finite dual step has a blocking constraint");
            u[active[c]] = 0.0;
            active.remove(c);
        }
    }
}
