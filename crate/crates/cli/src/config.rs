//! Experiment descriptions, parsed strictly from JSON.

use std::path::{Path, PathBuf};

use policy_transport::flows::{FlowParams, InnerParams, MirrorMetric, Stepper};
use policy_transport::fokker_planck::{self, FPScheme, Flux, Method};
use policy_transport::langevin::{self, LangevinParams};
use policy_transport::measures::{make_grid, DiscreteMeasure, GridRef, RewardField};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

/// Reward catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    /// `−½ curvature (a − center)²`.
    Quadratic { center: f64, curvature: f64 },
    /// `Σ_k heights[k] exp(−(a − centers[k])² / (2 widths[k]²))`.
    Bimodal { centers: Vec<f64>, widths: Vec<f64>, heights: Vec<f64> },
    /// `slope · a`.
    Linear { slope: f64 },
    /// One value per cell.
    Custom { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    Uniform,
    /// Discretized normal density.
    Gaussian { mean: f64, std: f64 },
    /// All mass in the cell containing `at`.
    Point { at: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepperName {
    JkoMirror,
    JkoCoupling,
    KlTrustRegion,
    FokkerPlanck,
    Langevin,
}

impl StepperName {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepperName::JkoMirror => "jko-mirror",
            StepperName::JkoCoupling => "jko-coupling",
            StepperName::KlTrustRegion => "kl-trust-region",
            StepperName::FokkerPlanck => "fokker-planck",
            StepperName::Langevin => "langevin",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricName {
    #[default]
    Newton,
    Plain,
}

/// Settings of the proximal steppers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub tau: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub inner_tol: Option<f64>,
    #[serde(default)]
    pub inner_max_iter: Option<usize>,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub metric: MetricName,
    #[serde(default)]
    pub sinkhorn_tol: Option<f64>,
    #[serde(default)]
    pub sinkhorn_max_iter: Option<usize>,
}

fn default_eps() -> f64 {
    0.01
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    #[default]
    Explicit,
    SemiImplicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FluxName {
    #[default]
    ExponentialFitting,
    Upwind,
    Centered,
}

/// Settings of the Fokker–Planck solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSpec {
    pub t_end: f64,
    /// Defaults to 0.4 times the explicit stability bound.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub method: MethodName,
    #[serde(default)]
    pub flux: FluxName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangevinSpec {
    pub n_particles: usize,
    pub seed: u64,
    pub t_end: f64,
    #[serde(default)]
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// `0` picks the stepper default.
    #[serde(default)]
    pub stride: usize,
    #[serde(default)]
    pub intermediate_measures: bool,
    /// Regularization of the `w2eps_to_gibbs` column; `null` disables it.
    #[serde(default = "default_diagnostic_eps")]
    pub diagnostic_eps: Option<f64>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_diagnostic_eps() -> Option<f64> {
    Some(0.05)
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: default_dir(), stride: 0, intermediate_measures: false, diagnostic_eps: default_diagnostic_eps() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label used in comparison tables; defaults to the stepper name.
    #[serde(default)]
    pub name: Option<String>,
    pub grid: GridSpec,
    pub reward: RewardSpec,
    pub beta: f64,
    pub stepper: StepperName,
    #[serde(default = "default_initial")]
    pub initial: InitialSpec,
    #[serde(default)]
    pub flow: Option<FlowSpec>,
    #[serde(default)]
    pub scheme: Option<SchemeSpec>,
    #[serde(default)]
    pub langevin: Option<LangevinSpec>,
    #[serde(default)]
    pub output: OutputSpec,
    /// The run counts as converged when the terminal TV to the Gibbs policy is
    /// at most this.
    #[serde(default = "default_target_tv")]
    pub target_tv: f64,
}

fn default_initial() -> InitialSpec {
    InitialSpec::Uniform
}

fn default_target_tv() -> f64 {
    1e-2
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Everything needed to execute a config, validated.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub grid: GridRef,
    pub reward: RewardField,
    pub initial: DiscreteMeasure,
    pub params: FlowParams,
    pub stepper: Stepper,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| config_error(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => config_error(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.stepper.as_str().to_string())
    }

    pub fn build_grid(&self) -> Result<GridRef, CliError> {
        make_grid(self.grid.lo, self.grid.hi, self.grid.n).map_err(|e| config_error(format!("grid: {e}")))
    }

    pub fn build_reward(&self, grid: &GridRef) -> Result<RewardField, CliError> {
        let r = match &self.reward {
            RewardSpec::Quadratic { center, curvature } => {
                let (c, k) = (*center, *curvature);
                RewardField::from_fn(grid.clone(), |a| -0.5 * k * (a - c) * (a - c))
            }
            RewardSpec::Bimodal { centers, widths, heights } => {
                if centers.len() != widths.len() || centers.len() != heights.len() || centers.is_empty() {
                    return Err(config_error("reward.bimodal: centers, widths and heights must be nonempty and of equal length"));
                }
                if widths.iter().any(|w| !(*w > 0.0)) {
                    return Err(config_error("reward.bimodal: widths must be positive"));
                }
                RewardField::from_fn(grid.clone(), |a| {
                    centers
                        .iter()
                        .zip(widths)
                        .zip(heights)
                        .map(|((c, w), h)| h * (-(a - c) * (a - c) / (2.0 * w * w)).exp())
                        .sum()
                })
            }
            RewardSpec::Linear { slope } => {
                let s = *slope;
                RewardField::from_fn(grid.clone(), |a| s * a)
            }
            RewardSpec::Custom { values } => RewardField::new(grid.clone(), values.clone()),
        };
        r.map_err(|e| config_error(format!("reward: {e}")))
    }

    pub fn build_initial(&self, grid: &GridRef) -> Result<DiscreteMeasure, CliError> {
        let m = match self.initial {
            InitialSpec::Uniform => Ok(DiscreteMeasure::uniform(grid.clone())),
            InitialSpec::Gaussian { mean, std } => {
                if !(std > 0.0) {
                    return Err(config_error("initial.gaussian.std must be positive"));
                }
                DiscreteMeasure::from_density(grid.clone(), |a| (-(a - mean) * (a - mean) / (2.0 * std * std)).exp())
            }
            InitialSpec::Point { at } => {
                if !(grid.lo()..=grid.hi()).contains(&at) {
                    return Err(config_error(format!("initial.point.at = {at} lies outside the grid")));
                }
                DiscreteMeasure::point_mass(grid.clone(), grid.cell_of(at))
            }
        };
        m.map_err(|e| config_error(format!("initial: {e}")))
    }

    /// Validates the config and turns it into core objects. Failures here are
    /// configuration errors; the explicit stability bound is checked later, at
    /// run time.
    pub fn prepare(&self) -> Result<Prepared, CliError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(config_error(format!("beta must be positive and finite, got {}", self.beta)));
        }
        if !(self.target_tv >= 0.0) {
            return Err(config_error("target_tv must be nonnegative"));
        }
        if let Some(eps) = self.output.diagnostic_eps {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(config_error("output.diagnostic_eps must be positive"));
            }
        }
        let grid = self.build_grid()?;
        let reward = self.build_reward(&grid)?;
        let initial = self.build_initial(&grid)?;
        let need = |present: bool, section: &str| {
            if present {
                Ok(())
            } else {
                Err(config_error(format!("stepper {} requires a \"{section}\" section", self.stepper.as_str())))
            }
        };
        let (params, stepper) = match self.stepper {
            StepperName::JkoMirror | StepperName::JkoCoupling | StepperName::KlTrustRegion => {
                need(self.flow.is_some(), "flow")?;
                let f = self.flow.as_ref().expect("checked above");
                let defaults = InnerParams::default();
                let inner = InnerParams {
                    tol: f.inner_tol.unwrap_or(defaults.tol),
                    max_iter: f.inner_max_iter.unwrap_or(defaults.max_iter),
                    eta: f.eta,
                    metric: match f.metric {
                        MetricName::Newton => MirrorMetric::Newton,
                        MetricName::Plain => MirrorMetric::Plain,
                    },
                    sinkhorn_tol: f.sinkhorn_tol.unwrap_or(defaults.sinkhorn_tol),
                    sinkhorn_max_iter: f.sinkhorn_max_iter.unwrap_or(defaults.sinkhorn_max_iter),
                };
                let params = FlowParams::new(self.beta, f.tau, f.eps, f.n_steps).with_inner(inner);
                params.validate().map_err(|e| config_error(format!("flow: {e}")))?;
                let stepper = match self.stepper {
                    StepperName::JkoMirror => Stepper::JkoMirror,
                    StepperName::JkoCoupling => Stepper::JkoCoupling,
                    _ => Stepper::KlTrustRegion,
                };
                (params, stepper)
            }
            StepperName::FokkerPlanck => {
                need(self.scheme.is_some(), "scheme")?;
                let s = self.scheme.as_ref().expect("checked above");
                if !(s.t_end >= 0.0 && s.t_end.is_finite()) {
                    return Err(config_error("scheme.t_end must be finite and nonnegative"));
                }
                let dt = s.dt.unwrap_or_else(|| 0.4 * fokker_planck::stability_bound(&reward, self.beta));
                if !(dt > 0.0 && dt.is_finite()) {
                    return Err(config_error("scheme.dt must be positive"));
                }
                let n_steps = (s.t_end / dt).ceil() as usize;
                // Land exactly on t_end; the step only shrinks.
                let dt = if n_steps > 0 { s.t_end / n_steps as f64 } else { dt };
                let scheme = FPScheme::new(dt)
                    .with_method(match s.method {
                        MethodName::Explicit => Method::Explicit,
                        MethodName::SemiImplicit => Method::SemiImplicit,
                    })
                    .with_flux(match s.flux {
                        FluxName::ExponentialFitting => Flux::ExponentialFitting,
                        FluxName::Upwind => Flux::Upwind,
                        FluxName::Centered => Flux::Centered,
                    });
                (FlowParams::new(self.beta, 1.0, 1.0, n_steps), Stepper::FokkerPlanck(scheme))
            }
            StepperName::Langevin => {
                need(self.langevin.is_some(), "langevin")?;
                let l = self.langevin.as_ref().expect("checked above");
                if l.n_particles < 1 {
                    return Err(config_error("langevin.n_particles must be at least 1"));
                }
                if !(l.t_end >= 0.0 && l.t_end.is_finite()) {
                    return Err(config_error("langevin.t_end must be finite and nonnegative"));
                }
                let dt = l.dt.unwrap_or_else(|| langevin::default_dt(&reward, self.beta));
                if !(dt > 0.0 && dt.is_finite()) {
                    return Err(config_error("langevin.dt must be positive"));
                }
                let n_steps = (l.t_end / dt).ceil() as usize;
                let dt = if n_steps > 0 { l.t_end / n_steps as f64 } else { dt };
                let lp = LangevinParams { n_particles: l.n_particles, seed: l.seed, dt: Some(dt) };
                (FlowParams::new(self.beta, 1.0, 1.0, n_steps), Stepper::Langevin(lp))
            }
        };
        Ok(Prepared { grid, reward, initial, params, stepper })
    }

    /// Grid, reward and temperature, the fields experiments must share to be
    /// compared.
    pub fn shared_key(&self) -> (GridSpec, RewardSpec, f64) {
        (self.grid.clone(), self.reward.clone(), self.beta)
    }
}
