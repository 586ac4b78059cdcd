//! Run configuration read from a JSON document.
//!
//! Matrices are row-major nested arrays. See `docs/config.schema.json` for the
//! full schema.

use std::path::{Path, PathBuf};

use epsmooth::{ConstraintFamily, MeasurementAffine, NoiseSpec, Saturation, SystemModel, WeightSpec};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    SmoothH2,
    SmoothEps,
    EstimateConstrained,
    Predict,
    MovingHorizon,
    Compare,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::SmoothH2 => "smooth-h2",
            Mode::SmoothEps => "smooth-eps",
            Mode::EstimateConstrained => "estimate-constrained",
            Mode::Predict => "predict",
            Mode::MovingHorizon => "moving-horizon",
            Mode::Compare => "compare",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub xbar0: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineConfig {
    /// Defaults to zero.
    pub gain: Option<Vec<Vec<f64>>>,
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintConfig {
    StateBound {
        l: Vec<Vec<f64>>,
        c: Vec<f64>,
    },
    AverageBound {
        l: Vec<Vec<f64>>,
        lower: Option<AffineConfig>,
        upper: Option<AffineConfig>,
    },
    NoiseBound {
        c: Vec<f64>,
    },
    IncrementBound {
        l: Vec<Vec<f64>>,
        lag: usize,
        gain: Option<Vec<Vec<f64>>>,
        offset: Vec<f64>,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseConfig {
    #[default]
    Zero,
    /// Scalar systems only; the seed comes from the run.
    SinusoidalGaussian {
        gauss_scale_w: f64,
        sin_amp_w: f64,
        gauss_scale_v: f64,
        sin_amp_v: f64,
        bias_v: f64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaturationConfig {
    pub row: Vec<f64>,
    pub limit: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub x0: Vec<f64>,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub saturation: Option<SaturationConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub weights: WeightsConfig,
    #[serde(default)]
    pub constraints: Vec<ConstraintConfig>,
    pub mode: Option<Mode>,
    /// Number of simulated steps.
    pub horizon: Option<usize>,
    pub window: Option<usize>,
    pub j: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub plot_table: Option<PathBuf>,
    pub measurements_out: Option<PathBuf>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub simulation: Option<SimulationConfig>,
}

/// Disturbance and measurement-noise sequences.
pub type NoiseSequences = (Vec<DVector<f64>>, Vec<DVector<f64>>);

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config {
        stage: "config",
        message: msg.into(),
    }
}

pub fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(config_err(format!("{name}: rows have different lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            stage: "config",
            message: format!("{}: {e}", path.display()),
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        // relative paths inside the document are relative to the document
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.input, &mut cfg.output, &mut cfg.plot_table, &mut cfg.measurements_out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn system(&self) -> Result<SystemModel, CliError> {
        let m = &self.model;
        SystemModel::new(
            matrix("model.a", &m.a)?,
            matrix("model.b", &m.b)?,
            matrix("model.c", &m.c)?,
            DVector::from_vec(m.xbar0.clone()),
        )
        .map_err(|e| config_err(e.to_string()))
    }

    pub fn weight_spec(&self) -> Result<WeightSpec, CliError> {
        let w = &self.weights;
        Ok(WeightSpec::new(
            matrix("weights.p", &w.p)?,
            matrix("weights.q", &w.q)?,
            matrix("weights.r", &w.r)?,
            DVector::from_vec(w.eps.clone()),
        ))
    }

    pub fn constraint_families(&self, m: usize) -> Result<Vec<ConstraintFamily>, CliError> {
        let affine = |name: &str, a: &Option<AffineConfig>, rows: usize| -> Result<Option<MeasurementAffine>, CliError> {
            a.as_ref()
                .map(|a| {
                    let offset = DVector::from_vec(a.offset.clone());
                    Ok(match &a.gain {
                        Some(g) => MeasurementAffine {
                            gain: matrix(name, g)?,
                            offset,
                        },
                        None => MeasurementAffine::constant(offset, m),
                    })
                })
                .transpose()
                .and_then(|x: Option<MeasurementAffine>| {
                    if let Some(x) = &x {
                        if x.offset.len() != rows {
                            return Err(config_err(format!("{name}: offset length {} but {rows} rows", x.offset.len())));
                        }
                    }
                    Ok(x)
                })
        };
        self.constraints
            .iter()
            .map(|c| {
                Ok(match c {
                    ConstraintConfig::StateBound { l, c } => ConstraintFamily::StateBound {
                        l: matrix("state_bound.l", l)?,
                        c: DVector::from_vec(c.clone()),
                    },
                    ConstraintConfig::AverageBound { l, lower, upper } => ConstraintFamily::AverageBound {
                        l: matrix("average_bound.l", l)?,
                        lower: affine("average_bound.lower", lower, l.len())?,
                        upper: affine("average_bound.upper", upper, l.len())?,
                    },
                    ConstraintConfig::NoiseBound { c } => ConstraintFamily::NoiseBound {
                        c: DVector::from_vec(c.clone()),
                    },
                    ConstraintConfig::IncrementBound { l, lag, gain, offset } => {
                        let bound = affine(
                            "increment_bound",
                            &Some(AffineConfig {
                                gain: gain.clone(),
                                offset: offset.clone(),
                            }),
                            l.len(),
                        )?
                        .expect("bound is present");
                        ConstraintFamily::IncrementBound {
                            l: matrix("increment_bound.l", l)?,
                            lag: *lag,
                            bound,
                        }
                    }
                })
            })
            .collect()
    }

    pub fn noise(&self, model: &SystemModel, steps: usize) -> Result<NoiseSequences, CliError> {
        let sim = self.simulation.as_ref().ok_or_else(|| config_err("missing simulation section"))?;
        match &sim.noise {
            NoiseConfig::Zero => Ok((
                vec![DVector::zeros(model.l()); steps],
                vec![DVector::zeros(model.m()); steps],
            )),
            NoiseConfig::SinusoidalGaussian {
                gauss_scale_w,
                sin_amp_w,
                gauss_scale_v,
                sin_amp_v,
                bias_v,
            } => {
                if model.l() != 1 || model.m() != 1 {
                    return Err(config_err("sinusoidal_gaussian noise needs a single disturbance and a single output"));
                }
                let spec = NoiseSpec {
                    gauss_scale_w: *gauss_scale_w,
                    sin_amp_w: *sin_amp_w,
                    gauss_scale_v: *gauss_scale_v,
                    sin_amp_v: *sin_amp_v,
                    bias_v: *bias_v,
                    seed: self.seed,
                };
                Ok(epsmooth::sinusoidal_gaussian_noise(&spec, steps))
            }
        }
    }

    pub fn saturation(&self) -> Option<Saturation> {
        self.simulation.as_ref()?.saturation.as_ref().map(|s| Saturation {
            row: DVector::from_vec(s.row.clone()),
            limit: s.limit,
        })
    }

    /// Checks that the fields the mode needs are present.
    pub fn check_mode(&self, mode: Mode) -> Result<(), CliError> {
        let needs_data = mode != Mode::Simulate;
        if mode == Mode::Simulate || (needs_data && self.input.is_none()) {
            if self.simulation.is_none() {
                return Err(config_err(format!(
                    "mode {} needs an input CSV or a simulation section",
                    mode.name()
                )));
            }
            if self.horizon.unwrap_or(0) == 0 {
                return Err(config_err("simulation needs horizon >= 1"));
            }
        }
        match mode {
            Mode::Predict if self.j.unwrap_or(0) == 0 => Err(config_err("predict needs j >= 1")),
            Mode::MovingHorizon if self.window.unwrap_or(0) == 0 => Err(config_err("moving-horizon needs window >= 1")),
            Mode::MovingHorizon if self.j == Some(0) => Err(config_err("moving-horizon prediction needs j >= 1")),
            Mode::EstimateConstrained | Mode::Compare if self.constraints.is_empty() => Err(config_err(format!(
                "mode {} needs at least one constraint",
                mode.name()
            ))),
            _ => Ok(()),
        }
    }
}
