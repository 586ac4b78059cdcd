//! Linear time-invariant system model, simulation and exogenous signal generation.
//!
//! Index convention used throughout the crate: states `x_0..x_N`,
//! measurements `y_1..y_N` (stored at vector index `k - 1`), disturbances
//! `w_0..w_{N-1}` and measurement noises `v_1..v_N` (stored at `k - 1`).

use nalgebra::{DMatrix, DVector};

use crate::error::{ModelError, WeightName};
use crate::linalg;
use crate::operators::WeightSpec;
use crate::rng::NormalStream;

/// `x_{k+1} = A x_k + B w_k`, `y_k = C x_k + v_k`, with prior estimate `xbar0` of `x_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub xbar0: DVector<f64>,
}

impl SystemModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        xbar0: DVector<f64>,
    ) -> Result<Self, ModelError> {
        let model = Self { a, b, c, xbar0 };
        model.check_dims()?;
        Ok(model)
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Disturbance dimension.
    pub fn l(&self) -> usize {
        self.b.ncols()
    }

    /// Measurement dimension.
    pub fn m(&self) -> usize {
        self.c.nrows()
    }

    pub fn with_prior(&self, xbar0: DVector<f64>) -> Self {
        Self {
            xbar0,
            ..self.clone()
        }
    }

    pub fn check_dims(&self) -> Result<(), ModelError> {
        let n = self.a.nrows();
        if n == 0 {
            return Err(ModelError::dims("A", "n >= 1", "0x0"));
        }
        if self.a.ncols() != n {
            return Err(ModelError::dims(
                "A",
                format!("{n}x{n}"),
                format!("{}x{}", n, self.a.ncols()),
            ));
        }
        if self.b.nrows() != n || self.b.ncols() == 0 {
            return Err(ModelError::dims(
                "B",
                format!("{n}xl with l >= 1"),
                format!("{}x{}", self.b.nrows(), self.b.ncols()),
            ));
        }
        if self.c.ncols() != n || self.c.nrows() == 0 {
            return Err(ModelError::dims(
                "C",
                format!("mx{n} with m >= 1"),
                format!("{}x{}", self.c.nrows(), self.c.ncols()),
            ));
        }
        if self.xbar0.len() != n {
            return Err(ModelError::dims("xbar0", n, self.xbar0.len()));
        }
        Ok(())
    }

    /// `A^k xbar0`, the state predicted from the prior alone.
    pub fn open_loop_state(&self, k: usize) -> DVector<f64> {
        let mut x = self.xbar0.clone();
        for _ in 0..k {
            x = &self.a * x;
        }
        x
    }
}

fn check_spd(m: &DMatrix<f64>, dim: usize, name: WeightName) -> Result<(), ModelError> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(ModelError::dims(
            name.to_string(),
            format!("{dim}x{dim}"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    let scale = 1.0 + linalg::mat_inf_norm(m);
    if linalg::asymmetry(m) > 1e-12 * scale || linalg::cholesky(m).is_none() {
        return Err(ModelError::NotPositiveDefinite(name));
    }
    Ok(())
}

/// Checks every dimension and positive-definiteness requirement of a problem.
pub fn validate_model(model: &SystemModel, weights: &WeightSpec) -> Result<(), ModelError> {
    model.check_dims()?;
    check_spd(&weights.p, model.n(), WeightName::P)?;
    check_spd(&weights.q, model.l(), WeightName::Q)?;
    check_spd(&weights.r, model.m(), WeightName::R)?;
    if weights.eps.len() != model.m() {
        return Err(ModelError::dims("eps", model.m(), weights.eps.len()));
    }
    for (channel, &value) in weights.eps.iter().enumerate() {
        if !(value > 0.0) {
            return Err(ModelError::NonPositiveEpsilon { channel, value });
        }
    }
    Ok(())
}

/// A simulated run of the system.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `x_0..x_K`
    pub states: Vec<DVector<f64>>,
    /// `y_1..y_K`
    pub measurements: Vec<DVector<f64>>,
    /// `w_0..w_{K-1}`
    pub disturbances: Vec<DVector<f64>>,
    /// `v_1..v_K`
    pub noises: Vec<DVector<f64>>,
}

fn check_inputs(
    model: &SystemModel,
    x0: &DVector<f64>,
    w: &[DVector<f64>],
    v: &[DVector<f64>],
) -> Result<(), ModelError> {
    model.check_dims()?;
    if w.len() != v.len() {
        return Err(ModelError::LengthMismatch(format!(
            "{} disturbances but {} measurement noises",
            w.len(),
            v.len()
        )));
    }
    if w.is_empty() {
        return Err(ModelError::LengthMismatch("empty input sequences".into()));
    }
    if x0.len() != model.n() {
        return Err(ModelError::dims("x0", model.n(), x0.len()));
    }
    if let Some(bad) = w.iter().find(|wk| wk.len() != model.l()) {
        return Err(ModelError::dims("w_k", model.l(), bad.len()));
    }
    if let Some(bad) = v.iter().find(|vk| vk.len() != model.m()) {
        return Err(ModelError::dims("v_k", model.m(), bad.len()));
    }
    Ok(())
}

/// Runs the system forward from `x0` with the given disturbances and noises.
pub fn simulate(
    model: &SystemModel,
    x0: &DVector<f64>,
    w: &[DVector<f64>],
    v: &[DVector<f64>],
) -> Result<Trajectory, ModelError> {
    check_inputs(model, x0, w, v)?;
    let mut states = Vec::with_capacity(w.len() + 1);
    let mut measurements = Vec::with_capacity(w.len());
    states.push(x0.clone());
    for (wk, vk) in w.iter().zip(v) {
        let next = &model.a * states.last().unwrap() + &model.b * wk;
        measurements.push(&model.c * &next + vk);
        states.push(next);
    }
    Ok(Trajectory {
        states,
        measurements,
        disturbances: w.to_vec(),
        noises: v.to_vec(),
    })
}

/// One-sided saturation `row' x_k <= limit` enforced on the true system.
#[derive(Debug, Clone, PartialEq)]
pub struct Saturation {
    pub row: DVector<f64>,
    pub limit: f64,
}

/// Simulates a system whose states saturate at `row' x <= limit`.
///
/// Whenever `row' (A x_k + B w_k)` would exceed the limit the disturbance is
/// replaced by the minimum-norm correction that lands exactly on the limit,
/// so the returned trajectory still obeys the linear recursion with the
/// recorded (effective) disturbances.
pub fn simulate_saturated(
    model: &SystemModel,
    x0: &DVector<f64>,
    w: &[DVector<f64>],
    v: &[DVector<f64>],
    saturation: &Saturation,
) -> Result<Trajectory, ModelError> {
    check_inputs(model, x0, w, v)?;
    if saturation.row.len() != model.n() {
        return Err(ModelError::dims("saturation row", model.n(), saturation.row.len()));
    }
    let lb = model.b.transpose() * &saturation.row;
    let lb_norm2 = lb.norm_squared();
    if lb_norm2 == 0.0 {
        return Err(ModelError::InvalidParameter(
            "saturated direction is not driven by the disturbance".into(),
        ));
    }
    let mut states = vec![x0.clone()];
    let mut disturbances = Vec::with_capacity(w.len());
    let mut measurements = Vec::with_capacity(w.len());
    for (wk, vk) in w.iter().zip(v) {
        let x = states.last().unwrap();
        let free = &model.a * x;
        let excess = saturation.row.dot(&(&free + &model.b * wk)) - saturation.limit;
        let weff = if excess > 0.0 {
            wk - &lb * (excess / lb_norm2)
        } else {
            wk.clone()
        };
        let next = free + &model.b * &weff;
        measurements.push(&model.c * &next + vk);
        states.push(next);
        disturbances.push(weff);
    }
    Ok(Trajectory {
        states,
        measurements,
        disturbances,
        noises: v.to_vec(),
    })
}

/// Parameters of the Gaussian-plus-sinusoid exogenous signals
/// `w_k = gw r1_k + aw sin(pi k / 2)` and `v_k = gv r2_k + av sin(pi k / 2) + bias`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub gauss_scale_w: f64,
    pub sin_amp_w: f64,
    pub gauss_scale_v: f64,
    pub sin_amp_v: f64,
    pub bias_v: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            gauss_scale_w: 4.0,
            sin_amp_w: 4.0,
            gauss_scale_v: 4.0,
            sin_amp_v: 4.0,
            bias_v: -4.0,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// `sin(pi k / 2)` evaluated exactly for integer `k`.
pub fn quarter_wave(k: usize) -> f64 {
    [0.0, 1.0, 0.0, -1.0][k % 4]
}

/// Scalar disturbance `w_0..w_{K-1}` and noise `v_1..v_K` sequences.
///
/// Draw order: for step `i = 0..K`, first `r1_i` (used by `w_i`) and then
/// `r2_i` (used by `v_{i+1}`), both from one [`NormalStream`].
pub fn sinusoidal_gaussian_noise(
    spec: &NoiseSpec,
    steps: usize,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut stream = NormalStream::new(spec.seed);
    let mut w = Vec::with_capacity(steps);
    let mut v = Vec::with_capacity(steps);
    for i in 0..steps {
        let r1 = stream.standard_normal();
        let r2 = stream.standard_normal();
        w.push(DVector::from_element(
            1,
            spec.gauss_scale_w * r1 + spec.sin_amp_w * quarter_wave(i),
        ));
        v.push(DVector::from_element(
            1,
            spec.gauss_scale_v * r2 + spec.sin_amp_v * quarter_wave(i + 1) + spec.bias_v,
        ));
    }
    (w, v)
}

/// The two-state benchmark system with a saturating second state.
pub mod benchmark {
    use super::*;

    pub const HORIZON: usize = 20;
    pub const SATURATION_LIMIT: f64 = 4.0;

    pub fn model() -> SystemModel {
        SystemModel {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -0.2, 0.4]),
            b: DMatrix::from_row_slice(2, 1, &[0.5, 2.0]),
            c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            xbar0: DVector::zeros(2),
        }
    }

    pub fn true_x0() -> DVector<f64> {
        DVector::from_vec(vec![-1.0, 1.0])
    }

    /// `P = I`, `Q = 1`, `R = 1`, `eps = 5`.
    pub fn weights() -> WeightSpec {
        WeightSpec {
            p: DMatrix::identity(2, 2),
            q: DMatrix::identity(1, 1),
            r: DMatrix::identity(1, 1),
            eps: DVector::from_element(1, 5.0),
        }
    }

    pub fn saturation() -> Saturation {
        Saturation {
            row: DVector::from_vec(vec![0.0, 1.0]),
            limit: SATURATION_LIMIT,
        }
    }

    /// `[0 1] x_k <= 4` for `k = 1..horizon`.
    pub fn saturation_constraints(horizon: usize) -> crate::operators::ConstraintSet {
        let family = crate::operators::ConstraintFamily::StateBound {
            l: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            c: DVector::from_element(1, SATURATION_LIMIT),
        };
        crate::operators::encode_constraint_family(&family, &model(), horizon, &[])
            .expect("benchmark dimensions are consistent")
    }

    /// Simulates one replay of the saturating benchmark.
    pub fn replay(seed: u64, steps: usize) -> Trajectory {
        let (w, v) = sinusoidal_gaussian_noise(&NoiseSpec::default().with_seed(seed), steps);
        simulate_saturated(&model(), &true_x0(), &w, &v, &saturation())
            .expect("benchmark dimensions are consistent")
    }
}
