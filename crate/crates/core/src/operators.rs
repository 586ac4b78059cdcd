//! Stacked operators of the dual problems and encoders for common constraint families.
//!
//! With `N` measurements and a total horizon `H >= N` (`H = N + j` when
//! predicting `j` steps ahead) the builders produce:
//!
//! * `F` (`Nm x Hl`): block `(i, k)` is `C A^(i-1-k) B` for `k < i`, zero otherwise
//!   (rows `i = 1..N`, disturbance columns `k = 0..H-1`);
//! * `Y` (`Nm`): block `k` is `y_k - C A^k xbar0`;
//! * `M = F Q_inv F' + R_inv + O P^-1 O'` with `O = [CA; ...; CA^N]`;
//! * `G` (`Hl x p`): block row `k` is `sum_{i>k} B' A'^(i-k-1) U_i'`;
//! * `V = [V_0 ... V_{H-1}]`, `H = [O; -sum_i U_i A^i]`;
//! * `T = K Q_inv K' + diag(R_inv, 0) + H P^-1 H'` with `K = [F; -(G' + V)]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{ModelError, WeightName};
use crate::linalg::{self, BlockDiag};
use crate::model::SystemModel;

/// Weights on the initial-state error, disturbances and measurement residuals,
/// plus the per-channel tube half-width `eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSpec {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub eps: DVector<f64>,
}

impl WeightSpec {
    pub fn new(p: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>, eps: DVector<f64>) -> Self {
        Self { p, q, r, eps }
    }

    pub fn with_eps(&self, eps: DVector<f64>) -> Self {
        Self {
            eps,
            ..self.clone()
        }
    }

    pub fn with_uniform_eps(&self, eps: f64) -> Self {
        self.with_eps(DVector::from_element(self.r.nrows(), eps))
    }

    /// `(cP, cQ, cR)` with the same tube.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            p: &self.p * c,
            q: &self.q * c,
            r: &self.r * c,
            eps: self.eps.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct WeightInverses {
    pub p_inv: DMatrix<f64>,
    pub q_inv: DMatrix<f64>,
    pub r_inv: DMatrix<f64>,
}

pub(crate) fn weight_inverses(weights: &WeightSpec) -> Result<WeightInverses, ModelError> {
    let inv = |m: &DMatrix<f64>, name| {
        linalg::spd_inverse(m).ok_or(ModelError::NotPositiveDefinite(name))
    };
    Ok(WeightInverses {
        p_inv: inv(&weights.p, WeightName::P)?,
        q_inv: inv(&weights.q, WeightName::Q)?,
        r_inv: inv(&weights.r, WeightName::R)?,
    })
}

/// Linear inequalities `sum_{k=1}^{H} U_k x_k + sum_{k=0}^{H-1} V_k w_k <= a`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    horizon: usize,
    /// `U_1..U_H`, stored at index `k - 1`.
    u: Vec<DMatrix<f64>>,
    /// `V_0..V_{H-1}`.
    v: Vec<DMatrix<f64>>,
    a: DVector<f64>,
}

impl ConstraintSet {
    pub fn new(
        horizon: usize,
        u: Vec<DMatrix<f64>>,
        v: Vec<DMatrix<f64>>,
        a: DVector<f64>,
    ) -> Result<Self, ModelError> {
        if u.len() != horizon || v.len() != horizon {
            return Err(ModelError::LengthMismatch(format!(
                "constraint horizon {horizon} but {} U blocks and {} V blocks",
                u.len(),
                v.len()
            )));
        }
        let p = a.len();
        if let Some(bad) = u.iter().chain(&v).find(|m| m.nrows() != p) {
            return Err(ModelError::dims("constraint block rows", p, bad.nrows()));
        }
        if let Some(first) = u.first() {
            if u.iter().any(|m| m.ncols() != first.ncols()) {
                return Err(ModelError::dims("U_k columns", first.ncols(), "mixed"));
            }
        }
        if let Some(first) = v.first() {
            if v.iter().any(|m| m.ncols() != first.ncols()) {
                return Err(ModelError::dims("V_k columns", first.ncols(), "mixed"));
            }
        }
        Ok(Self { horizon, u, v, a })
    }

    /// No constraints (`p = 0`).
    pub fn empty(horizon: usize, n: usize, l: usize) -> Self {
        Self {
            horizon,
            u: vec![DMatrix::zeros(0, n); horizon],
            v: vec![DMatrix::zeros(0, l); horizon],
            a: DVector::zeros(0),
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Number of inequality rows `p`.
    pub fn rows(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows() == 0
    }

    /// `U_k` for `k = 1..=H`.
    pub fn u(&self, k: usize) -> &DMatrix<f64> {
        &self.u[k - 1]
    }

    /// `V_k` for `k = 0..H`.
    pub fn v(&self, k: usize) -> &DMatrix<f64> {
        &self.v[k]
    }

    pub fn a(&self) -> &DVector<f64> {
        &self.a
    }

    pub fn check_model(&self, model: &SystemModel) -> Result<(), ModelError> {
        if let Some(bad) = self.u.iter().find(|m| m.ncols() != model.n()) {
            return Err(ModelError::dims("U_k columns", model.n(), bad.ncols()));
        }
        if let Some(bad) = self.v.iter().find(|m| m.ncols() != model.l()) {
            return Err(ModelError::dims("V_k columns", model.l(), bad.ncols()));
        }
        Ok(())
    }

    /// Stacks the rows of `other` below these rows.
    pub fn append(&self, other: &ConstraintSet) -> Result<ConstraintSet, ModelError> {
        if other.horizon != self.horizon {
            return Err(ModelError::LengthMismatch(format!(
                "cannot stack constraint sets with horizons {} and {}",
                self.horizon, other.horizon
            )));
        }
        let vstack = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
            let cols = if x.nrows() == 0 { y.ncols() } else { x.ncols() };
            let mut out = DMatrix::zeros(x.nrows() + y.nrows(), cols);
            out.rows_mut(0, x.nrows()).copy_from(x);
            out.rows_mut(x.nrows(), y.nrows()).copy_from(y);
            out
        };
        let u = self.u.iter().zip(&other.u).map(|(x, y)| vstack(x, y)).collect();
        let v = self.v.iter().zip(&other.v).map(|(x, y)| vstack(x, y)).collect();
        let a = linalg::stack(&[self.a.clone(), other.a.clone()]);
        ConstraintSet::new(self.horizon, u, v, a)
    }

    /// Same rows over a longer horizon; the extra blocks are zero.
    pub fn extended(&self, horizon: usize, n: usize, l: usize) -> ConstraintSet {
        assert!(horizon >= self.horizon);
        let p = self.rows();
        let mut u = self.u.clone();
        let mut v = self.v.clone();
        u.resize(horizon, DMatrix::zeros(p, n));
        v.resize(horizon, DMatrix::zeros(p, l));
        ConstraintSet {
            horizon,
            u,
            v,
            a: self.a.clone(),
        }
    }

    /// Left-hand side `sum U_k x_k + sum V_k w_k` for `x_0..x_H` and `w_0..w_{H-1}`.
    pub fn lhs(&self, states: &[DVector<f64>], disturbances: &[DVector<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.rows());
        for k in 1..=self.horizon {
            out += self.u(k) * &states[k];
        }
        for k in 0..self.horizon {
            out += self.v(k) * &disturbances[k];
        }
        out
    }
}

/// `O = [CA; CA^2; ...; CA^N]`.
pub fn build_observability(model: &SystemModel, n_meas: usize) -> DMatrix<f64> {
    let (n, m) = (model.n(), model.m());
    let mut out = DMatrix::zeros(n_meas * m, n);
    let mut ca = &model.c * &model.a;
    for i in 0..n_meas {
        out.view_mut((i * m, 0), (m, n)).copy_from(&ca);
        ca = &ca * &model.a;
    }
    out
}

/// `F` padded with zero columns out to `horizon` disturbance blocks.
pub fn build_f_padded(model: &SystemModel, n_meas: usize, horizon: usize) -> DMatrix<f64> {
    let (m, l) = (model.m(), model.l());
    let mut out = DMatrix::zeros(n_meas * m, horizon * l);
    // markov[d] = C A^d B
    let mut markov = Vec::with_capacity(n_meas);
    let mut ab = model.b.clone();
    for _ in 0..n_meas {
        markov.push(&model.c * &ab);
        ab = &model.a * ab;
    }
    for i in 1..=n_meas {
        for k in 0..i {
            out.view_mut(((i - 1) * m, k * l), (m, l))
                .copy_from(&markov[i - 1 - k]);
        }
    }
    out
}

/// Block lower-triangular `F` (`Nm x Nl`).
pub fn build_f(model: &SystemModel, n_meas: usize) -> DMatrix<f64> {
    build_f_padded(model, n_meas, n_meas)
}

/// `Y`, the measurements minus their open-loop prediction from the prior.
pub fn build_y(model: &SystemModel, measurements: &[DVector<f64>]) -> DVector<f64> {
    let m = model.m();
    let mut out = DVector::zeros(measurements.len() * m);
    let mut x = model.xbar0.clone();
    for (i, y) in measurements.iter().enumerate() {
        x = &model.a * x;
        out.rows_mut(i * m, m).copy_from(&(y - &model.c * &x));
    }
    out
}

/// `eps` repeated `n_meas` times.
pub fn build_eps_stack(weights: &WeightSpec, n_meas: usize) -> DVector<f64> {
    let m = weights.eps.len();
    DVector::from_fn(n_meas * m, |i, _| weights.eps[i % m])
}

pub fn build_m(
    model: &SystemModel,
    weights: &WeightSpec,
    n_meas: usize,
) -> Result<DMatrix<f64>, ModelError> {
    let inv = weight_inverses(weights)?;
    let f = build_f(model, n_meas);
    let obs = build_observability(model, n_meas);
    let q_inv = BlockDiag::new(inv.q_inv, n_meas);
    let r_inv = BlockDiag::new(inv.r_inv, n_meas);
    let mut m = q_inv.right_mul(&f) * f.transpose();
    m += r_inv.to_dense();
    m += &obs * &inv.p_inv * obs.transpose();
    Ok(symmetrize(m))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `G`, `V` and `H` for a constraint set whose horizon may exceed the measurement count.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintOperators {
    /// `Hl x p`
    pub g: DMatrix<f64>,
    /// `p x Hl`
    pub v_stack: DMatrix<f64>,
    /// `(Nm + p) x n`
    pub h: DMatrix<f64>,
    /// `sum_{i=1}^{H} U_i A^i` (`p x n`)
    pub u_powers: DMatrix<f64>,
}

fn constraint_operators(
    model: &SystemModel,
    constraints: &ConstraintSet,
    n_meas: usize,
) -> Result<ConstraintOperators, ModelError> {
    constraints.check_model(model)?;
    let horizon = constraints.horizon();
    if horizon < n_meas {
        return Err(ModelError::LengthMismatch(format!(
            "constraint horizon {horizon} shorter than {n_meas} measurements"
        )));
    }
    let (n, l, m, p) = (model.n(), model.l(), model.m(), constraints.rows());
    let at = model.a.transpose();
    let bt = model.b.transpose();
    // acc_k = sum_{i=k+1}^{H} A'^(i-k-1) U_i', swept backward from k = H-1.
    let mut g = DMatrix::zeros(horizon * l, p);
    let mut acc = DMatrix::zeros(n, p);
    for k in (0..horizon).rev() {
        acc = &at * &acc + constraints.u(k + 1).transpose();
        g.view_mut((k * l, 0), (l, p)).copy_from(&(&bt * &acc));
    }
    // after the sweep acc = sum_i A'^(i-1) U_i', so (A' acc)' = sum_i U_i A^i
    let u_powers = (&at * &acc).transpose();

    let mut v_stack = DMatrix::zeros(p, horizon * l);
    for k in 0..horizon {
        v_stack.view_mut((0, k * l), (p, l)).copy_from(constraints.v(k));
    }

    let obs = build_observability(model, n_meas);
    let mut h = DMatrix::zeros(n_meas * m + p, n);
    h.rows_mut(0, n_meas * m).copy_from(&obs);
    h.rows_mut(n_meas * m, p).copy_from(&(-&u_powers));
    Ok(ConstraintOperators {
        g,
        v_stack,
        h,
        u_powers,
    })
}

/// `G`, `V` and `H` for a constraint set over exactly `n_meas` steps.
pub fn build_gvh(
    model: &SystemModel,
    constraints: &ConstraintSet,
    n_meas: usize,
) -> Result<ConstraintOperators, ModelError> {
    if constraints.horizon() != n_meas {
        return Err(ModelError::LengthMismatch(format!(
            "constraint horizon {} differs from {} measurements",
            constraints.horizon(),
            n_meas
        )));
    }
    constraint_operators(model, constraints, n_meas)
}

fn assemble_t(
    f_bar: &DMatrix<f64>,
    ops: &ConstraintOperators,
    inv: &WeightInverses,
    n_meas: usize,
    horizon: usize,
) -> DMatrix<f64> {
    let nm = f_bar.nrows();
    let p = ops.v_stack.nrows();
    let hl = f_bar.ncols();
    let mut k = DMatrix::zeros(nm + p, hl);
    k.rows_mut(0, nm).copy_from(f_bar);
    k.rows_mut(nm, p)
        .copy_from(&(-(ops.g.transpose() + &ops.v_stack)));
    let q_inv = BlockDiag::new(inv.q_inv.clone(), horizon);
    let mut t = q_inv.right_mul(&k) * k.transpose();
    let r_inv = BlockDiag::new(inv.r_inv.clone(), n_meas).to_dense();
    let mut top = t.view_mut((0, 0), (nm, nm));
    top += &r_inv;
    t += &ops.h * &inv.p_inv * ops.h.transpose();
    symmetrize(t)
}

pub fn build_t(
    model: &SystemModel,
    weights: &WeightSpec,
    constraints: &ConstraintSet,
    n_meas: usize,
) -> Result<DMatrix<f64>, ModelError> {
    let ops = build_gvh(model, constraints, n_meas)?;
    let inv = weight_inverses(weights)?;
    let f = build_f(model, n_meas);
    Ok(assemble_t(&f, &ops, &inv, n_meas, n_meas))
}

/// Operators of the `j`-step-ahead prediction problem.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOperators {
    pub f_bar: DMatrix<f64>,
    pub g_bar: DMatrix<f64>,
    pub v_bar: DMatrix<f64>,
    pub h_bar: DMatrix<f64>,
    pub q_inv_bar: BlockDiag,
    pub t_bar: DMatrix<f64>,
}

pub fn build_prediction_operators(
    model: &SystemModel,
    weights: &WeightSpec,
    constraints: &ConstraintSet,
    n_meas: usize,
    j: usize,
) -> Result<PredictionOperators, ModelError> {
    if j == 0 {
        return Err(ModelError::InvalidParameter("prediction step j must be >= 1".into()));
    }
    if constraints.horizon() != n_meas + j {
        return Err(ModelError::LengthMismatch(format!(
            "constraint horizon {} differs from N + j = {}",
            constraints.horizon(),
            n_meas + j
        )));
    }
    let inv = weight_inverses(weights)?;
    let ops = constraint_operators(model, constraints, n_meas)?;
    let f_bar = build_f_padded(model, n_meas, n_meas + j);
    let t_bar = assemble_t(&f_bar, &ops, &inv, n_meas, n_meas + j);
    Ok(PredictionOperators {
        f_bar,
        g_bar: ops.g,
        v_bar: ops.v_stack,
        h_bar: ops.h,
        q_inv_bar: BlockDiag::new(inv.q_inv, n_meas + j),
        t_bar,
    })
}

/// Everything the dual solve and the reconstruction need, for `N` measurements
/// and a horizon of `N + j` steps (`j = 0` for smoothing).
#[derive(Debug, Clone)]
pub struct StackedOperators {
    pub n_meas: usize,
    pub horizon: usize,
    /// `F` (or `F` padded to the horizon)
    pub f: DMatrix<f64>,
    pub y: DVector<f64>,
    pub r_inv: BlockDiag,
    pub q_inv: BlockDiag,
    pub eps_stack: DVector<f64>,
    pub g: DMatrix<f64>,
    pub v_stack: DMatrix<f64>,
    pub h: DMatrix<f64>,
    /// `T` (equal to `M` when there are no constraints)
    pub t: DMatrix<f64>,
    /// `a - sum_i U_i A^i xbar0`
    pub offset: DVector<f64>,
    pub p_inv: DMatrix<f64>,
}

impl StackedOperators {
    pub fn assemble(
        model: &SystemModel,
        weights: &WeightSpec,
        measurements: &[DVector<f64>],
        constraints: &ConstraintSet,
    ) -> Result<Self, ModelError> {
        let n_meas = measurements.len();
        let horizon = constraints.horizon();
        if let Some(bad) = measurements.iter().find(|y| y.len() != model.m()) {
            return Err(ModelError::dims("y_k", model.m(), bad.len()));
        }
        let inv = weight_inverses(weights)?;
        let ops = constraint_operators(model, constraints, n_meas)?;
        let f = build_f_padded(model, n_meas, horizon);
        let t = assemble_t(&f, &ops, &inv, n_meas, horizon);
        let offset = constraints.a() - &ops.u_powers * &model.xbar0;
        Ok(Self {
            n_meas,
            horizon,
            y: build_y(model, measurements),
            r_inv: BlockDiag::new(inv.r_inv, n_meas),
            q_inv: BlockDiag::new(inv.q_inv, horizon),
            eps_stack: build_eps_stack(weights, n_meas),
            g: ops.g,
            v_stack: ops.v_stack,
            h: ops.h,
            t,
            offset,
            f,
            p_inv: inv.p_inv,
        })
    }

    /// Length of the stacked `Theta`.
    pub fn theta_len(&self) -> usize {
        self.y.len()
    }

    pub fn rows(&self) -> usize {
        self.offset.len()
    }

    /// The `Theta` block of `T`, i.e. `M`.
    pub fn m(&self) -> DMatrix<f64> {
        let nm = self.theta_len();
        self.t.view((0, 0), (nm, nm)).into_owned()
    }
}

/// A measurement-dependent bound `gain * ybar + offset`, where `ybar` is
/// the mean measurement (average bounds) or a measurement difference
/// (increment bounds).
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementAffine {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl MeasurementAffine {
    pub fn constant(offset: DVector<f64>, m: usize) -> Self {
        Self {
            gain: DMatrix::zeros(offset.len(), m),
            offset,
        }
    }

    fn eval(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.gain * y + &self.offset
    }

    fn uses_measurements(&self) -> bool {
        self.gain.iter().any(|g| *g != 0.0)
    }
}

/// Constraint families with a known `(U_k, V_k, a)` encoding.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintFamily {
    /// `L x_k <= c` for every `k = 1..H`.
    StateBound { l: DMatrix<f64>, c: DVector<f64> },
    /// `lower <= (1/N) sum_{i=1}^{N} L x_i <= upper`, bounds affine in the mean measurement.
    AverageBound {
        l: DMatrix<f64>,
        lower: Option<MeasurementAffine>,
        upper: Option<MeasurementAffine>,
    },
    /// `|y_k - C x_k| <= c` for every measured `k`, as the row pair
    /// `-C x_k <= c - y_k`, `C x_k <= c + y_k`.
    NoiseBound { c: DVector<f64> },
    /// `L (x_{i+lag} - x_i) <= gain (y_{i+lag} - y_i) + offset`, written through
    /// the dynamics as `L (A^lag - I) x_i + sum_j L A^(lag-j-1) B w_{i+j}`.
    IncrementBound {
        l: DMatrix<f64>,
        lag: usize,
        bound: MeasurementAffine,
    },
}

impl ConstraintFamily {
    pub fn kind(&self) -> &'static str {
        match self {
            ConstraintFamily::StateBound { .. } => "state_bound",
            ConstraintFamily::AverageBound { .. } => "average_bound",
            ConstraintFamily::NoiseBound { .. } => "noise_bound",
            ConstraintFamily::IncrementBound { .. } => "increment_bound",
        }
    }
}

/// Row builder over a fixed horizon.
struct Rows {
    horizon: usize,
    n: usize,
    l: usize,
    u: Vec<Vec<DVector<f64>>>,
    v: Vec<Vec<DVector<f64>>>,
    a: Vec<f64>,
}

impl Rows {
    fn new(horizon: usize, n: usize, l: usize) -> Self {
        Self {
            horizon,
            n,
            l,
            u: Vec::new(),
            v: Vec::new(),
            a: Vec::new(),
        }
    }

    /// Starts a zero row with right-hand side `rhs` and returns its index.
    fn push(&mut self, rhs: f64) -> usize {
        self.u.push(vec![DVector::zeros(self.n); self.horizon]);
        self.v.push(vec![DVector::zeros(self.l); self.horizon]);
        self.a.push(rhs);
        self.a.len() - 1
    }

    fn add_u(&mut self, row: usize, k: usize, coeffs: impl Iterator<Item = f64>) {
        for (dst, c) in self.u[row][k - 1].iter_mut().zip(coeffs) {
            *dst += c;
        }
    }

    fn add_v(&mut self, row: usize, k: usize, coeffs: impl Iterator<Item = f64>) {
        for (dst, c) in self.v[row][k].iter_mut().zip(coeffs) {
            *dst += c;
        }
    }

    fn finish(self) -> ConstraintSet {
        let p = self.a.len();
        let u = (0..self.horizon)
            .map(|k| DMatrix::from_fn(p, self.n, |r, c| self.u[r][k][c]))
            .collect();
        let v = (0..self.horizon)
            .map(|k| DMatrix::from_fn(p, self.l, |r, c| self.v[r][k][c]))
            .collect();
        ConstraintSet {
            horizon: self.horizon,
            u,
            v,
            a: DVector::from_vec(self.a),
        }
    }
}

fn check_rows(l: &DMatrix<f64>, n: usize, what: &str, rhs_len: usize) -> Result<(), ModelError> {
    if l.ncols() != n {
        return Err(ModelError::dims(format!("{what} L columns"), n, l.ncols()));
    }
    if rhs_len != l.nrows() {
        return Err(ModelError::dims(format!("{what} bound length"), l.nrows(), rhs_len));
    }
    Ok(())
}

/// Encodes a constraint family as `(U_k, V_k, a)` over `horizon` steps.
///
/// Measurement-dependent right-hand sides are evaluated from `measurements`
/// (`y_1..y_N`, with `N <= horizon`).
pub fn encode_constraint_family(
    family: &ConstraintFamily,
    model: &SystemModel,
    horizon: usize,
    measurements: &[DVector<f64>],
) -> Result<ConstraintSet, ModelError> {
    let (n, l, m) = (model.n(), model.l(), model.m());
    let n_meas = measurements.len();
    if n_meas > horizon {
        return Err(ModelError::LengthMismatch(format!(
            "{n_meas} measurements exceed constraint horizon {horizon}"
        )));
    }
    let mut rows = Rows::new(horizon, n, l);
    match family {
        ConstraintFamily::StateBound { l: lm, c } => {
            check_rows(lm, n, "state_bound", c.len())?;
            for k in 1..=horizon {
                for r in 0..lm.nrows() {
                    let row = rows.push(c[r]);
                    rows.add_u(row, k, lm.row(r).iter().copied());
                }
            }
        }
        ConstraintFamily::AverageBound { l: lm, lower, upper } => {
            if n_meas == 0 {
                return Err(ModelError::LengthMismatch("average bound needs measurements".into()));
            }
            let mean = measurements.iter().fold(DVector::zeros(m), |acc, y| acc + y) / n_meas as f64;
            let scale = 1.0 / n_meas as f64;
            for (bound, sign) in [(upper, 1.0), (lower, -1.0)] {
                let Some(bound) = bound else { continue };
                check_rows(lm, n, "average_bound", bound.offset.len())?;
                if bound.gain.shape() != (lm.nrows(), m) {
                    return Err(ModelError::dims(
                        "average_bound gain",
                        format!("{}x{}", lm.nrows(), m),
                        format!("{}x{}", bound.gain.nrows(), bound.gain.ncols()),
                    ));
                }
                let rhs = bound.eval(&mean);
                for r in 0..lm.nrows() {
                    let row = rows.push(sign * rhs[r]);
                    for k in 1..=n_meas {
                        rows.add_u(row, k, lm.row(r).iter().map(|x| sign * scale * x));
                    }
                }
            }
        }
        ConstraintFamily::NoiseBound { c } => {
            if c.len() != m {
                return Err(ModelError::dims("noise_bound c", m, c.len()));
            }
            for (idx, y) in measurements.iter().enumerate() {
                let k = idx + 1;
                for i in 0..m {
                    let row = rows.push(c[i] - y[i]);
                    rows.add_u(row, k, model.c.row(i).iter().map(|x| -x));
                }
                for i in 0..m {
                    let row = rows.push(c[i] + y[i]);
                    rows.add_u(row, k, model.c.row(i).iter().copied());
                }
            }
        }
        ConstraintFamily::IncrementBound { l: lm, lag, bound } => {
            let lag = *lag;
            if lag == 0 {
                return Err(ModelError::InvalidParameter("increment lag must be >= 1".into()));
            }
            check_rows(lm, n, "increment_bound", bound.offset.len())?;
            if bound.gain.shape() != (lm.nrows(), m) {
                return Err(ModelError::dims(
                    "increment_bound gain",
                    format!("{}x{}", lm.nrows(), m),
                    format!("{}x{}", bound.gain.nrows(), bound.gain.ncols()),
                ));
            }
            let last = if bound.uses_measurements() { n_meas } else { horizon };
            let pw = linalg::powers(&model.a, lag);
            let state_coeff = lm * (&pw[lag] - DMatrix::identity(n, n));
            let dist_coeff: Vec<DMatrix<f64>> =
                (0..lag).map(|j| lm * &pw[lag - j - 1] * &model.b).collect();
            let mut i = 1;
            while i + lag <= last {
                let rhs = if bound.uses_measurements() {
                    bound.eval(&(&measurements[i + lag - 1] - &measurements[i - 1]))
                } else {
                    bound.offset.clone()
                };
                for r in 0..lm.nrows() {
                    let row = rows.push(rhs[r]);
                    rows.add_u(row, i, state_coeff.row(r).iter().copied());
                    for (j, dc) in dist_coeff.iter().enumerate() {
                        rows.add_v(row, i + j, dc.row(r).iter().copied());
                    }
                }
                i += 1;
            }
        }
    }
    Ok(rows.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{benchmark, simulate};

    fn scalar_model() -> SystemModel {
        let one = DMatrix::from_element(1, 1, 1.0);
        SystemModel::new(one.clone(), one.clone(), one, DVector::zeros(1)).unwrap()
    }

    fn scalar_weights() -> WeightSpec {
        let one = DMatrix::from_element(1, 1, 1.0);
        WeightSpec::new(one.clone(), one.clone(), one, DVector::from_element(1, 0.5))
    }

    fn vecs(xs: &[f64]) -> Vec<DVector<f64>> {
        xs.iter().map(|&x| DVector::from_element(1, x)).collect()
    }

    #[test]
    fn f_for_unit_system() {
        let f = build_f(&scalar_model(), 2);
        assert_eq!(f, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]));
        assert_eq!(build_f(&scalar_model(), 1), DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn f_for_benchmark_system() {
        // C A^k B for k = 0, 1, 2: 0.5, 2.5, 3.2 (A B = (2.5, 0.7))
        let f = build_f(&benchmark::model(), 3);
        let expect = DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, 2.5, 0.5, 0.0, 3.2, 2.5, 0.5]);
        assert!((f - expect).amax() < 1e-13);
    }

    #[test]
    fn y_subtracts_open_loop_prior() {
        let model = scalar_model().with_prior(DVector::from_element(1, 1.0));
        assert_eq!(build_y(&model, &vecs(&[3.0, 5.0])), DVector::from_vec(vec![2.0, 4.0]));
        let ys = vecs(&[0.3, -2.0, 7.0]);
        assert_eq!(build_y(&scalar_model(), &ys), linalg::stack(&ys));
    }

    #[test]
    fn m_for_unit_system() {
        let m = build_m(&scalar_model(), &scalar_weights(), 2).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[3.0, 2.0, 2.0, 4.0]));
    }

    #[test]
    fn doubling_r_halves_only_r_inv_part() {
        let model = benchmark::model();
        let w = benchmark::weights();
        let mut w2 = w.clone();
        w2.r *= 2.0;
        let diff = build_m(&model, &w, 6).unwrap() - build_m(&model, &w2, 6).unwrap();
        assert!((diff - DMatrix::identity(6, 6) * 0.5).amax() < 1e-12);
    }

    #[test]
    fn benchmark_m_is_spd() {
        let m = build_m(&benchmark::model(), &benchmark::weights(), 20).unwrap();
        assert_eq!(m.shape(), (20, 20));
        assert_eq!(linalg::asymmetry(&m), 0.0);
        let eig = m.symmetric_eigenvalues();
        assert!(eig.min() > 0.0);
    }

    #[test]
    fn eps_stack_repeats() {
        let w = WeightSpec::new(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![0.1, 0.2]),
        );
        assert_eq!(
            build_eps_stack(&w, 3),
            DVector::from_vec(vec![0.1, 0.2, 0.1, 0.2, 0.1, 0.2])
        );
    }

    #[test]
    fn gvh_scalar_example() {
        let model = scalar_model();
        let cs = ConstraintSet::new(
            2,
            vec![DMatrix::from_element(1, 1, 1.0), DMatrix::zeros(1, 1)],
            vec![DMatrix::zeros(1, 1); 2],
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let ops = build_gvh(&model, &cs, 2).unwrap();
        assert_eq!(ops.g, DMatrix::from_column_slice(2, 1, &[1.0, 0.0]));
        assert_eq!(ops.h, DMatrix::from_column_slice(3, 1, &[1.0, 1.0, -1.0]));
        assert_eq!(ops.v_stack, DMatrix::zeros(1, 2));
    }

    #[test]
    fn gvh_without_constraints_reduces_to_observability() {
        let model = benchmark::model();
        let cs = ConstraintSet::empty(5, 2, 1);
        let ops = build_gvh(&model, &cs, 5).unwrap();
        assert_eq!(ops.g.shape(), (5, 0));
        assert_eq!(ops.v_stack.shape(), (0, 5));
        assert_eq!(ops.h, build_observability(&model, 5));
    }

    #[test]
    fn t_scalar_example_matches_termwise_evaluation() {
        let model = scalar_model();
        let cs = ConstraintSet::new(
            2,
            vec![DMatrix::from_element(1, 1, 1.0), DMatrix::zeros(1, 1)],
            vec![DMatrix::zeros(1, 1); 2],
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let t = build_t(&model, &scalar_weights(), &cs, 2).unwrap();
        // K = [[1,0],[1,1],[-1,0]], K K' + diag(1,1,0) + h h', h = (1,1,-1)
        let expect = DMatrix::from_row_slice(
            3,
            3,
            &[3.0, 2.0, -2.0, 2.0, 4.0, -2.0, -2.0, -2.0, 2.0],
        );
        assert!((t - expect).amax() < 1e-14);
    }

    #[test]
    fn t_equals_m_without_constraints() {
        let model = benchmark::model();
        let w = benchmark::weights();
        let t = build_t(&model, &w, &ConstraintSet::empty(7, 2, 1), 7).unwrap();
        assert!((t - build_m(&model, &w, 7).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn prediction_padding_for_unit_system() {
        let ops = build_prediction_operators(
            &scalar_model(),
            &scalar_weights(),
            &ConstraintSet::empty(2, 1, 1),
            1,
            1,
        )
        .unwrap();
        assert_eq!(ops.f_bar, DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        assert_eq!(ops.t_bar, build_m(&scalar_model(), &scalar_weights(), 1).unwrap());
    }

    #[test]
    fn prediction_rejects_wrong_horizon_and_zero_j() {
        let model = benchmark::model();
        let w = benchmark::weights();
        assert!(build_prediction_operators(&model, &w, &ConstraintSet::empty(20, 2, 1), 20, 0).is_err());
        assert!(build_prediction_operators(&model, &w, &ConstraintSet::empty(21, 2, 1), 20, 2).is_err());
    }

    #[test]
    fn benchmark_prediction_shapes() {
        let model = benchmark::model();
        let family = ConstraintFamily::StateBound {
            l: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            c: DVector::from_element(1, 4.0),
        };
        let cs = encode_constraint_family(&family, &model, 22, &[]).unwrap();
        let ops = build_prediction_operators(&model, &benchmark::weights(), &cs, 20, 2).unwrap();
        assert_eq!(ops.f_bar.shape(), (20, 22));
        assert_eq!(ops.g_bar.shape(), (22, 22));
        assert_eq!(ops.v_bar.shape(), (22, 22));
        assert_eq!(ops.h_bar.shape(), (42, 2));
        assert_eq!(ops.q_inv_bar.dim(), 22);
        assert_eq!(ops.t_bar.shape(), (42, 42));
        assert_eq!(linalg::asymmetry(&ops.t_bar), 0.0);
    }

    #[test]
    fn state_bound_encoding() {
        let model = benchmark::model();
        let family = ConstraintFamily::StateBound {
            l: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            c: DVector::from_element(1, 4.0),
        };
        let cs = encode_constraint_family(&family, &model, 20, &[]).unwrap();
        assert_eq!(cs.rows(), 20);
        assert_eq!(cs.a(), &DVector::from_element(20, 4.0));
        for k in 1..=20 {
            for r in 0..20 {
                let expect = if r == k - 1 { [0.0, 1.0] } else { [0.0, 0.0] };
                assert_eq!(cs.u(k).row(r).iter().copied().collect::<Vec<_>>(), expect);
            }
            assert_eq!(cs.v(k - 1), &DMatrix::zeros(20, 1));
        }
    }

    #[test]
    fn noise_bound_row_pairs() {
        let model = benchmark::model();
        let ys = vecs(&[1.5, -0.5]);
        let family = ConstraintFamily::NoiseBound { c: DVector::from_element(1, 2.0) };
        let cs = encode_constraint_family(&family, &model, 2, &ys).unwrap();
        assert_eq!(cs.rows(), 4);
        assert_eq!(cs.a(), &DVector::from_vec(vec![0.5, 3.5, 2.5, 1.5]));
        assert_eq!(cs.u(1).row(0).iter().copied().collect::<Vec<_>>(), vec![-1.0, 0.0]);
        assert_eq!(cs.u(1).row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert_eq!(cs.u(2).row(2).iter().copied().collect::<Vec<_>>(), vec![-1.0, 0.0]);
        assert_eq!(cs.u(1).row(2).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
    }

    #[test]
    fn average_bound_uses_mean_measurement() {
        let model = benchmark::model();
        let ys = vecs(&[1.0, 2.0, 6.0, 3.0]);
        let lm = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let family = ConstraintFamily::AverageBound {
            l: lm.clone(),
            lower: None,
            upper: Some(MeasurementAffine {
                gain: DMatrix::from_element(1, 1, 1.0),
                offset: DVector::from_element(1, 0.0),
            }),
        };
        let cs = encode_constraint_family(&family, &model, 4, &ys).unwrap();
        assert_eq!(cs.rows(), 1);
        assert_eq!(cs.a()[0], 3.0);
        for k in 1..=4 {
            assert_eq!(cs.u(k), &(&lm / 4.0));
        }
    }

    #[test]
    fn increment_encoding_matches_state_differences() {
        let model = benchmark::model();
        let (w, v) = crate::model::sinusoidal_gaussian_noise(&crate::model::NoiseSpec::default().with_seed(5), 8);
        let traj = simulate(&model, &benchmark::true_x0(), &w, &v).unwrap();
        let lm = DMatrix::from_row_slice(1, 2, &[0.3, -1.0]);
        for lag in 1..=3 {
            let family = ConstraintFamily::IncrementBound {
                l: lm.clone(),
                lag,
                bound: MeasurementAffine::constant(DVector::from_element(1, 0.0), 1),
            };
            let cs = encode_constraint_family(&family, &model, 8, &traj.measurements).unwrap();
            assert_eq!(cs.rows(), 8 - lag);
            let lhs = cs.lhs(&traj.states, &traj.disturbances);
            for i in 1..=(8 - lag) {
                let direct = (&lm * (&traj.states[i + lag] - &traj.states[i]))[0];
                assert!((lhs[i - 1] - direct).abs() < 1e-10, "lag {lag} i {i}");
            }
        }
    }

    #[test]
    fn append_and_extend_keep_rows() {
        let model = benchmark::model();
        let sb = ConstraintFamily::StateBound {
            l: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            c: DVector::from_element(1, 4.0),
        };
        let a = encode_constraint_family(&sb, &model, 3, &[]).unwrap();
        let b = ConstraintSet::empty(3, 2, 1);
        let both = a.append(&b).unwrap();
        assert_eq!(both, a);
        let ext = a.extended(5, 2, 1);
        assert_eq!(ext.horizon(), 5);
        assert_eq!(ext.u(5), &DMatrix::zeros(3, 2));
        assert!(ConstraintSet::new(2, vec![DMatrix::zeros(1, 2)], vec![], DVector::zeros(1)).is_err());
    }
}
