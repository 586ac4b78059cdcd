//! Mode dispatch, result documents and plot tables.

use std::collections::BTreeMap;
use std::path::PathBuf;

use epsmooth::{
    check_kkt, encode_constraint_family, moving_horizon, simulate, simulate_saturated, ConstraintFamily,
    ConstraintSet, EpsEstimator, EstimateError, EstimateResult, EstimatorOptions, MovingHorizonOptions,
    MovingHorizonStep, QpStatus, SystemModel, Trajectory, WeightSpec,
};
use nalgebra::DVector;
use serde::Serialize;

use crate::config::{Mode, RunConfig};
use crate::error::CliError;
use crate::io::{fmt17, measurements_csv, read_measurements, seq17, vec17, write_atomic, F17};

/// Tolerance of the KKT audit attached to every estimate.
pub const AUDIT_TOL: f64 = 1e-6;

/// Command-line values that take precedence over the config document.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub plot_table: Option<PathBuf>,
    pub measurements_out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(self, cfg: &mut RunConfig) {
        if self.mode.is_some() {
            cfg.mode = self.mode;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.tol.is_some() {
            cfg.tol = self.tol;
        }
        for (dst, src) in [
            (&mut cfg.input, self.input),
            (&mut cfg.output, self.output),
            (&mut cfg.plot_table, self.plot_table),
            (&mut cfg.measurements_out, self.measurements_out),
        ] {
            if src.is_some() {
                *dst = src;
            }
        }
    }
}

/// Everything a run produces, before anything is written.
#[derive(Debug, Clone)]
pub struct Artifacts {
    /// JSON result document.
    pub document: String,
    pub plot_table: String,
    /// Measurement CSV (simulate mode only).
    pub measurements: Option<String>,
}

#[derive(Serialize)]
struct DualDoc {
    theta: Vec<F17>,
    zeta: Vec<F17>,
    xi: Vec<F17>,
    gamma: Vec<F17>,
    beta: Vec<F17>,
    dual_objective: F17,
    kkt_residual: F17,
    iterations: usize,
    ridge: F17,
}

#[derive(Serialize)]
struct KktDoc {
    stationarity: BTreeMap<&'static str, F17>,
    complementary_slackness_max: F17,
    primal_feasibility_max: F17,
    dual_feasibility_min: F17,
    tol: F17,
    passed: bool,
}

#[derive(Serialize)]
struct EstimateDoc {
    method: &'static str,
    status: &'static str,
    xhat: Vec<Vec<F17>>,
    what: Vec<Vec<F17>>,
    eta: Vec<Vec<F17>>,
    lambda: Vec<Vec<F17>>,
    vhat: Vec<Vec<F17>>,
    primal_objective: F17,
    dual: Option<DualDoc>,
    kkt: KktDoc,
}

#[derive(Serialize)]
struct MaeDoc {
    method: &'static str,
    /// Mean of `|xhat_k - x_k|` over `k = 1..N`, per state.
    per_state: Vec<F17>,
}

#[derive(Serialize)]
struct WindowDoc {
    time: usize,
    filtered: Vec<F17>,
    predicted: Option<Vec<F17>>,
    status: &'static str,
}

#[derive(Serialize)]
struct Document {
    mode: &'static str,
    seed: u64,
    tol: F17,
    n_meas: usize,
    measurements: Vec<Vec<F17>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    true_states: Option<Vec<Vec<F17>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    true_disturbances: Option<Vec<Vec<F17>>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    estimates: Vec<EstimateDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mae: Option<Vec<MaeDoc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    moving_horizon: Option<Vec<WindowDoc>>,
}

fn status_name(status: QpStatus) -> &'static str {
    match status {
        QpStatus::Converged => "converged",
        QpStatus::MaxIterations => "max_iterations",
        QpStatus::Infeasible => "infeasible",
    }
}

/// Measurements plus the generating trajectory when they were simulated.
pub struct Data {
    pub measurements: Vec<DVector<f64>>,
    pub truth: Option<Trajectory>,
}

pub fn simulate_from_config(cfg: &RunConfig, model: &SystemModel) -> Result<Trajectory, CliError> {
    let sim = cfg
        .simulation
        .as_ref()
        .ok_or_else(|| CliError::config("simulate", "missing simulation section"))?;
    let steps = cfg.horizon.unwrap_or(0);
    let (w, v) = cfg.noise(model, steps)?;
    let x0 = DVector::from_vec(sim.x0.clone());
    let run = match cfg.saturation() {
        Some(sat) => simulate_saturated(model, &x0, &w, &v, &sat),
        None => simulate(model, &x0, &w, &v),
    };
    run.map_err(|e| CliError::config("simulate", e.to_string()))
}

fn acquire(cfg: &RunConfig, model: &SystemModel) -> Result<Data, CliError> {
    match &cfg.input {
        Some(path) => {
            let measurements = read_measurements(path)?;
            if let Some(bad) = measurements.iter().find(|y| y.len() != model.m()) {
                return Err(CliError::config(
                    "input",
                    format!("measurements have {} channels but C has {} rows", bad.len(), model.m()),
                ));
            }
            Ok(Data {
                measurements,
                truth: None,
            })
        }
        None => {
            let truth = simulate_from_config(cfg, model)?;
            Ok(Data {
                measurements: truth.measurements.clone(),
                truth: Some(truth),
            })
        }
    }
}

/// Encodes and stacks all configured families over `horizon` steps.
pub fn build_constraints(
    families: &[ConstraintFamily],
    model: &SystemModel,
    horizon: usize,
    measurements: &[DVector<f64>],
) -> Result<Option<ConstraintSet>, CliError> {
    let mut out: Option<ConstraintSet> = None;
    for family in families {
        let set = encode_constraint_family(family, model, horizon, measurements)
            .map_err(|e| CliError::config("constraints", format!("{}: {e}", family.kind())))?;
        out = Some(match out {
            Some(prev) => prev
                .append(&set)
                .map_err(|e| CliError::config("constraints", e.to_string()))?,
            None => set,
        });
    }
    Ok(out)
}

struct Problem<'a> {
    model: &'a SystemModel,
    weights: &'a WeightSpec,
    options: EstimatorOptions,
    measurements: &'a [DVector<f64>],
}

impl Problem<'_> {
    fn estimator(&self) -> EpsEstimator<'_> {
        EpsEstimator::new(self.model, self.weights).with_options(self.options)
    }

    /// Checks convergence and attaches the KKT audit.
    fn document(
        &self,
        stage: &'static str,
        result: Result<EstimateResult, EstimateError>,
        constraints: Option<&ConstraintSet>,
    ) -> Result<(EstimateResult, EstimateDoc), CliError> {
        let est = result.map_err(|e| CliError::from_estimate(stage, e))?;
        let dual = est.dual.as_ref().expect("estimators return dual variables");
        if !est.converged() {
            return Err(CliError::NotConverged {
                stage,
                message: format!(
                    "{} after {} iterations, KKT residual {:e}",
                    status_name(dual.diagnostics.status),
                    dual.diagnostics.iterations,
                    dual.diagnostics.kkt_residual
                ),
            });
        }
        let report = check_kkt(self.model, self.weights, self.measurements, constraints, &est, AUDIT_TOL)
            .map_err(|e| CliError::config(stage, e.to_string()))?;
        let doc = EstimateDoc {
            method: est.method.name(),
            status: status_name(dual.diagnostics.status),
            xhat: seq17(&est.xhat),
            what: seq17(&est.what),
            eta: seq17(&est.eta),
            lambda: seq17(&est.lambda),
            vhat: seq17(&est.vhat),
            primal_objective: F17(est.primal_objective),
            dual: Some(DualDoc {
                theta: vec17(&dual.theta),
                zeta: vec17(&dual.zeta),
                xi: vec17(&dual.xi),
                gamma: vec17(&dual.gamma),
                beta: vec17(&dual.beta),
                dual_objective: F17(dual.dual_objective),
                kkt_residual: F17(dual.diagnostics.kkt_residual),
                iterations: dual.diagnostics.iterations,
                ridge: F17(dual.diagnostics.ridge),
            }),
            kkt: KktDoc {
                stationarity: report.stationarity_residuals.iter().map(|&(k, v)| (k, F17(v))).collect(),
                complementary_slackness_max: F17(report.complementary_slackness_max),
                primal_feasibility_max: F17(report.primal_feasibility_max),
                dual_feasibility_min: F17(report.dual_feasibility_min),
                tol: F17(AUDIT_TOL),
                passed: report.passed,
            },
        };
        Ok((est, doc))
    }

    fn h2(&self) -> Result<(EstimateResult, EstimateDoc), CliError> {
        self.document("smooth-h2", epsmooth::h2_smooth(self.model, self.weights, self.measurements), None)
    }

    fn eps(&self) -> Result<(EstimateResult, EstimateDoc), CliError> {
        self.document("smooth-eps", self.estimator().smooth(self.measurements), None)
    }

    fn constrained(&self, cs: &ConstraintSet) -> Result<(EstimateResult, EstimateDoc), CliError> {
        self.document(
            "estimate-constrained",
            self.estimator().smooth_constrained(self.measurements, cs),
            Some(cs),
        )
    }
}

/// A column-oriented table keyed by `k`.
struct PlotTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl PlotTable {
    fn new(rows: usize) -> Self {
        Self {
            header: vec!["k".into()],
            rows: (0..rows).map(|k| vec![k.to_string()]).collect(),
        }
    }

    /// Adds one column per component; `series[i]` lands on row `offset + i`.
    fn add(&mut self, prefix: &str, dim: usize, offset: usize, series: &[DVector<f64>]) {
        for c in 0..dim {
            self.header.push(format!("{prefix}{}", c + 1));
            for (k, row) in self.rows.iter_mut().enumerate() {
                let cell = k
                    .checked_sub(offset)
                    .and_then(|i| series.get(i))
                    .map_or(String::new(), |v| fmt17(v[c]));
                row.push(cell);
            }
        }
    }

    /// Places values at explicit rows.
    fn add_at(&mut self, prefix: &str, dim: usize, points: &[(usize, DVector<f64>)]) {
        for c in 0..dim {
            self.header.push(format!("{prefix}{}", c + 1));
            for row in self.rows.iter_mut() {
                row.push(String::new());
            }
            let col = self.header.len() - 1;
            for (k, v) in points {
                if let Some(row) = self.rows.get_mut(*k) {
                    row[col] = fmt17(v[c]);
                }
            }
        }
    }

    fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("ascii output")
    }
}

fn mae(est: &EstimateResult, truth: &Trajectory, n_meas: usize) -> Vec<F17> {
    let n = truth.states[0].len();
    (0..n)
        .map(|c| {
            let total: f64 = (1..=n_meas).map(|k| (est.xhat[k][c] - truth.states[k][c]).abs()).sum();
            F17(total / n_meas as f64)
        })
        .collect()
}

/// Runs the configured mode and renders its artifacts without touching the filesystem
/// beyond reading the input CSV.
pub fn execute(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let mode = cfg
        .mode
        .ok_or_else(|| CliError::config("config", "no mode given (config field or --mode)"))?;
    cfg.check_mode(mode)?;
    let model = cfg.system()?;
    let weights = cfg.weight_spec()?;
    epsmooth::validate_model(&model, &weights).map_err(|e| CliError::config("config", e.to_string()))?;
    let families = cfg.constraint_families(model.m())?;
    let options = EstimatorOptions {
        tol: cfg.tol.unwrap_or(EstimatorOptions::default().tol),
        max_iter: cfg.max_iter.unwrap_or(EstimatorOptions::default().max_iter),
    };
    if !(options.tol > 0.0) {
        return Err(CliError::config("config", "tol must be positive"));
    }
    let data = acquire(cfg, &model)?;
    let ys = &data.measurements;
    let n_meas = ys.len();
    let problem = Problem {
        model: &model,
        weights: &weights,
        options,
        measurements: ys,
    };

    let mut doc = Document {
        mode: mode.name(),
        seed: cfg.seed,
        tol: F17(options.tol),
        n_meas,
        measurements: seq17(ys),
        true_states: data.truth.as_ref().map(|t| seq17(&t.states)),
        true_disturbances: data.truth.as_ref().map(|t| seq17(&t.disturbances)),
        estimates: Vec::new(),
        mae: None,
        moving_horizon: None,
    };
    let mut estimates: Vec<EstimateResult> = Vec::new();
    let mut windows: Vec<MovingHorizonStep> = Vec::new();
    let mut predict_ahead = None;

    match mode {
        Mode::Simulate => {}
        Mode::SmoothH2 | Mode::SmoothEps | Mode::EstimateConstrained => {
            let (est, d) = match mode {
                Mode::SmoothH2 => problem.h2()?,
                Mode::SmoothEps => problem.eps()?,
                _ => {
                    let cs = build_constraints(&families, &model, n_meas, ys)?.expect("mode check requires constraints");
                    problem.constrained(&cs)?
                }
            };
            estimates.push(est);
            doc.estimates.push(d);
        }
        Mode::Predict => {
            let j = cfg.j.expect("mode check requires j");
            let cs = build_constraints(&families, &model, n_meas + j, ys)?;
            let result = problem.estimator().predict(ys, cs.as_ref(), j);
            let (est, d) = problem.document("predict", result, cs.as_ref())?;
            estimates.push(est);
            doc.estimates.push(d);
        }
        Mode::MovingHorizon => {
            let window = cfg.window.expect("mode check requires window").min(n_meas);
            predict_ahead = cfg.j;
            let horizon = window + predict_ahead.unwrap_or(0);
            // surface encoding errors before the sweep
            build_constraints(&families, &model, horizon, &ys[..window])?;
            let mut mh = MovingHorizonOptions::new(window);
            mh.predict_ahead = predict_ahead;
            mh.estimator = options;
            windows = moving_horizon(&model, &weights, ys, &mh, |_, meas, h| {
                build_constraints(&families, &model, h, meas).expect("constraints validated above")
            })
            .map_err(|e| CliError::from_estimate("moving-horizon", e))?;
            if let Some(bad) = windows.iter().find(|s| !s.result.converged()) {
                return Err(CliError::NotConverged {
                    stage: "moving-horizon",
                    message: format!("window ending at t = {} did not converge", bad.time),
                });
            }
            doc.moving_horizon = Some(
                windows
                    .iter()
                    .map(|s| WindowDoc {
                        time: s.time,
                        filtered: vec17(&s.filtered),
                        predicted: s.predicted.as_ref().map(vec17),
                        status: "converged",
                    })
                    .collect(),
            );
        }
        Mode::Compare => {
            let cs = build_constraints(&families, &model, n_meas, ys)?.expect("mode check requires constraints");
            let (h2, eps, cons) = std::thread::scope(|s| {
                let h2 = s.spawn(|| problem.h2());
                let eps = s.spawn(|| problem.eps());
                let cons = s.spawn(|| problem.constrained(&cs));
                (
                    h2.join().expect("h2 thread"),
                    eps.join().expect("eps thread"),
                    cons.join().expect("constrained thread"),
                )
            });
            for (est, d) in [h2?, eps?, cons?] {
                estimates.push(est);
                doc.estimates.push(d);
            }
            if let Some(truth) = &data.truth {
                doc.mae = Some(
                    estimates
                        .iter()
                        .map(|e| MaeDoc {
                            method: e.method.name(),
                            per_state: mae(e, truth, n_meas),
                        })
                        .collect(),
                );
            }
        }
    }

    let n = model.n();
    let last_row = estimates
        .iter()
        .map(|e| e.horizon())
        .chain(windows.iter().map(|w| w.time + predict_ahead.unwrap_or(0)))
        .chain(data.truth.iter().map(|t| t.states.len() - 1))
        .fold(n_meas, usize::max);
    let mut table = PlotTable::new(last_row + 1);
    table.add("y", model.m(), 1, ys);
    for est in &estimates {
        table.add(&format!("{}_x", est.method.name()), n, 0, &est.xhat);
    }
    if !windows.is_empty() {
        let filtered: Vec<_> = windows.iter().map(|w| (w.time, w.filtered.clone())).collect();
        table.add_at("filtered_x", n, &filtered);
        if let Some(j) = predict_ahead {
            let predicted: Vec<_> = windows
                .iter()
                .filter_map(|w| w.predicted.clone().map(|p| (w.time + j, p)))
                .collect();
            table.add_at("predicted_x", n, &predicted);
        }
    }
    if let Some(truth) = &data.truth {
        table.add("true_x", n, 0, &truth.states);
    }

    let document = serde_json::to_string_pretty(&doc).map_err(|e| CliError::io("output", e))?;
    Ok(Artifacts {
        document,
        plot_table: table.to_csv(),
        measurements: (mode == Mode::Simulate).then(|| measurements_csv(ys)),
    })
}

/// Executes the run and writes its outputs; returns the document when no
/// output path is configured.
pub fn run(cfg: &RunConfig) -> Result<Option<String>, CliError> {
    let artifacts = execute(cfg)?;
    if let Some(path) = &cfg.measurements_out {
        let csv = artifacts
            .measurements
            .as_ref()
            .ok_or_else(|| CliError::config("output", "measurements_out is only produced in simulate mode"))?;
        write_atomic(path, csv.as_bytes())?;
    }
    if let Some(path) = &cfg.plot_table {
        write_atomic(path, artifacts.plot_table.as_bytes())?;
    }
    match &cfg.output {
        Some(path) => {
            write_atomic(path, artifacts.document.as_bytes())?;
            Ok(None)
        }
        None => Ok(Some(artifacts.document)),
    }
}
