//! Config-driven experiment runner for the `policy-transport` flows.
//!
//! Every run writes into its own directory:
//!
//! * `trace.csv` with columns
//!   `step,time,free_energy,entropy,expected_reward,tv_to_gibbs,w2eps_to_gibbs,residual`,
//! * `measures.csv` with the terminal `center,weight` table,
//! * `measures_intermediate.csv` (`step,time,center,weight`) on request,
//! * `report.json`, a serialized [`RunReport`].

pub mod config;
pub mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use policy_transport::flows::run_flow_with;
use policy_transport::measures::{free_energy, gibbs_policy, total_variation, DiscreteMeasure};
use policy_transport::sinkhorn::{sinkhorn_log_domain, CostMatrix, SinkhornParams};
use policy_transport::trace::{FlowTrace, TraceOptions};
use serde::Serialize;

pub use config::ExperimentConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Io(_) => 3,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

fn numerical(e: policy_transport::Error) -> CliError {
    CliError::Numerical(e.to_string())
}

/// Command-line overrides applied on top of a config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub stride: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub version: String,
    pub name: String,
    pub stepper: String,
    pub grid_n: usize,
    pub beta: f64,
    pub tv_to_gibbs: f64,
    pub free_energy: f64,
    pub gibbs_free_energy: f64,
    pub steps_requested: usize,
    pub steps_executed: usize,
    pub final_time: f64,
    pub wall_time: f64,
    /// `tv_to_gibbs <= target_tv` and the run finished.
    pub converged: bool,
    pub target_tv: f64,
    pub complete: bool,
    pub failure: Option<String>,
    pub worst_free_energy_drop: Option<f64>,
    pub free_energy_violations: Option<usize>,
    pub clamp_count: usize,
    pub inner_unconverged: usize,
    pub max_inner_residual: f64,
    pub warnings: Vec<String>,
    pub output_dir: PathBuf,
}

/// Result of [`run_experiment`] kept in memory for callers that need more
/// than the report.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub trace: FlowTrace,
}

fn out_dir_for(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    opts.out_dir.clone().unwrap_or_else(|| cfg.output.dir.clone())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_report(dir: &Path, report: &RunReport) -> Result<(), CliError> {
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
}

/// Runs one experiment and writes its outputs.
///
/// A failure in the middle of the run still writes the partial trace and a
/// report with `complete = false`, then returns [`CliError::Numerical`].
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let prep = cfg.prepare()?;
    let dir = out_dir_for(cfg, opts);
    ensure_dir(&dir)?;
    let trace_opts = TraceOptions {
        stride: opts.stride.unwrap_or(cfg.output.stride),
        w2_eps: cfg.output.diagnostic_eps,
        keep_measures: cfg.output.intermediate_measures,
    };
    let start = Instant::now();
    let trace =
        run_flow_with(&prep.initial, &prep.reward, &prep.params, prep.stepper, &trace_opts).map_err(numerical)?;
    let wall_time = start.elapsed().as_secs_f64();

    output::write_trace(&dir.join("trace.csv"), &trace.diagnostics)?;
    output::write_measure(&dir.join("measures.csv"), &trace.final_measure)?;
    if cfg.output.intermediate_measures {
        output::write_intermediate(&dir.join("measures_intermediate.csv"), &trace.diagnostics, &trace.measures)?;
    }

    let gibbs = gibbs_policy(&prep.reward, cfg.beta).map_err(numerical)?;
    let last = *trace.last();
    let mut warnings = Vec::new();
    if trace.clamp_count > 0 {
        warnings.push(format!("{} negative cell masses clamped to zero", trace.clamp_count));
    }
    if trace.inner_unconverged > 0 {
        warnings.push(format!(
            "{} proximal steps stopped before the inner tolerance (max residual {:e})",
            trace.inner_unconverged, trace.max_inner_residual
        ));
    }
    if trace.monotonicity_tracked && trace.free_energy_violations > 0 {
        warnings.push(format!(
            "free energy decreased on {} steps (worst drop {:e})",
            trace.free_energy_violations, trace.worst_free_energy_drop
        ));
    }
    let complete = trace.is_complete();
    let report = RunReport {
        version: VERSION.to_string(),
        name: cfg.label(),
        stepper: prep.stepper.name().to_string(),
        grid_n: cfg.grid.n,
        beta: cfg.beta,
        tv_to_gibbs: last.tv_to_gibbs,
        free_energy: last.free_energy,
        gibbs_free_energy: free_energy(&gibbs, &prep.reward, cfg.beta).map_err(numerical)?.free_energy,
        steps_requested: prep.params.n_steps,
        steps_executed: trace.steps_executed,
        final_time: last.time,
        wall_time,
        converged: complete && last.tv_to_gibbs <= cfg.target_tv,
        target_tv: cfg.target_tv,
        complete,
        failure: trace.failure.as_ref().map(|e| e.to_string()),
        worst_free_energy_drop: trace.monotonicity_tracked.then_some(trace.worst_free_energy_drop),
        free_energy_violations: trace.monotonicity_tracked.then_some(trace.free_energy_violations),
        clamp_count: trace.clamp_count,
        inner_unconverged: trace.inner_unconverged,
        max_inner_residual: trace.max_inner_residual,
        warnings,
        output_dir: dir.clone(),
    };
    write_report(&dir, &report)?;
    if let Some(e) = &trace.failure {
        return Err(CliError::Numerical(format!(
            "{} failed after {} steps (partial outputs in {}): {e}",
            report.name,
            trace.steps_executed,
            dir.display()
        )));
    }
    Ok(RunOutcome { report, trace })
}

/// Debiased entropic transport cost
/// `S(a, b) = W(a, b) − ½ W(a, a) − ½ W(b, b)` with `W = ⟨C, γ⟩`; zero on
/// identical inputs.
pub fn sinkhorn_divergence(a: &DiscreteMeasure, b: &DiscreteMeasure, eps: f64) -> Result<f64, CliError> {
    let p = SinkhornParams::new(eps).with_tol(1e-10).with_max_iter(200_000);
    let w = |x: &DiscreteMeasure, y: &DiscreteMeasure| -> Result<f64, CliError> {
        let c = CostMatrix::quadratic(x.grid(), y.grid());
        let res = sinkhorn_log_domain(x, y, &c, &p).map_err(numerical)?;
        if !res.converged {
            return Err(CliError::Numerical(format!("Sinkhorn did not converge (marginal error {:e})", res.marginal_err)));
        }
        Ok(res.cost)
    };
    if a == b {
        return Ok(0.0);
    }
    Ok(w(a, b)? - 0.5 * w(a, a)? - 0.5 * w(b, b)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub a: String,
    pub b: String,
    pub tv: f64,
    pub sinkhorn_divergence: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    pub reports: Vec<RunReport>,
}

impl Comparison {
    /// Row for the ordered pair `(a, b)`.
    pub fn get(&self, a: &str, b: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.a == a && r.b == b)
    }
}

/// Regularization used for the distance column of the comparison table.
pub const COMPARE_EPS: f64 = 0.05;

/// Runs every config (concurrently) and tabulates terminal distances: every
/// ordered pair including self-pairs, then each run against the Gibbs policy.
///
/// Run `k` writes into `<out_dir>/<k>_<label>`; the table goes to
/// `<out_dir>/compare.csv`.
pub fn compare_dynamics(cfgs: &[ExperimentConfig], out_dir: &Path, stride: Option<usize>) -> Result<Comparison, CliError> {
    let first = cfgs.first().ok_or_else(|| CliError::Config("compare needs at least one config".into()))?;
    let key = first.shared_key();
    for (k, c) in cfgs.iter().enumerate().skip(1) {
        if c.shared_key() != key {
            return Err(CliError::Config(format!(
                "config {k} ({}) does not share grid, reward and beta with config 0 ({})",
                c.label(),
                first.label()
            )));
        }
    }
    for c in cfgs {
        c.prepare()?;
    }
    let mut labels: Vec<String> = cfgs.iter().map(ExperimentConfig::label).collect();
    for k in 0..labels.len() {
        if labels[..k].contains(&labels[k]) || labels[k + 1..].contains(&labels[k]) {
            labels[k] = format!("{}#{k}", labels[k]);
        }
    }
    ensure_dir(out_dir)?;
    let outcomes: Vec<Result<RunOutcome, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = cfgs
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let dir = out_dir.join(format!("{k}_{}", c.label()));
                let opts = RunOptions { out_dir: Some(dir), stride };
                s.spawn(move || run_experiment(c, &opts))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("experiment thread panicked")).collect()
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;

    let prep = first.prepare()?;
    let gibbs = gibbs_policy(&prep.reward, first.beta).map_err(numerical)?;
    let finals: Vec<&DiscreteMeasure> = outcomes.iter().map(|o| &o.trace.final_measure).collect();
    let mut rows = Vec::new();
    for (i, a) in finals.iter().enumerate() {
        for (j, b) in finals.iter().enumerate() {
            rows.push(CompareRow {
                a: labels[i].clone(),
                b: labels[j].clone(),
                tv: total_variation(a, b).map_err(numerical)?,
                sinkhorn_divergence: sinkhorn_divergence(a, b, COMPARE_EPS)?,
            });
        }
    }
    for (i, a) in finals.iter().enumerate() {
        rows.push(CompareRow {
            a: labels[i].clone(),
            b: "gibbs".into(),
            tv: total_variation(a, &gibbs).map_err(numerical)?,
            sinkhorn_divergence: sinkhorn_divergence(a, &gibbs, COMPARE_EPS)?,
        });
    }
    output::write_rows(
        &out_dir.join("compare.csv"),
        output::COMPARE_HEADER,
        rows.iter().map(|r| vec![r.a.clone(), r.b.clone(), output::fmt(r.tv), output::fmt(r.sinkhorn_divergence)]),
    )?;
    Ok(Comparison { rows, reports: outcomes.into_iter().map(|o| o.report).collect() })
}

/// Writes the closed-form optimal policy of a config to `<dir>/gibbs.csv`.
pub fn write_gibbs(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(DiscreteMeasure, PathBuf), CliError> {
    let prep = cfg.prepare()?;
    let gibbs = gibbs_policy(&prep.reward, cfg.beta).map_err(numerical)?;
    let dir = out_dir_for(cfg, opts);
    ensure_dir(&dir)?;
    let path = dir.join("gibbs.csv");
    output::write_measure(&path, &gibbs)?;
    Ok((gibbs, path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornSummary {
    pub cost: f64,
    pub reg_cost: f64,
    pub iterations: usize,
    pub marginal_err: f64,
    pub plan_path: PathBuf,
}

/// Entropic transport between two tabulated measures; writes the plan as
/// `source_center,target_center,mass` rows.
pub fn sinkhorn_between(mu_path: &Path, nu_path: &Path, eps: f64, out_dir: &Path) -> Result<SinkhornSummary, CliError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(CliError::Config(format!("--eps must be positive, got {eps}")));
    }
    let mu = output::read_measure(mu_path)?;
    let nu = output::read_measure(nu_path)?;
    let cost = CostMatrix::quadratic(mu.grid(), nu.grid());
    let p = SinkhornParams::new(eps).with_tol(1e-9).with_max_iter(1_000_000);
    let res = sinkhorn_log_domain(&mu, &nu, &cost, &p).map_err(numerical)?;
    if !res.converged {
        return Err(CliError::Numerical(format!(
            "Sinkhorn stopped after {} iterations with marginal error {:e}",
            res.iterations, res.marginal_err
        )));
    }
    ensure_dir(out_dir)?;
    let plan_path = out_dir.join("plan.csv");
    output::write_plan(&plan_path, &res.plan)?;
    Ok(SinkhornSummary {
        cost: res.cost,
        reg_cost: res.reg_cost,
        iterations: res.iterations,
        marginal_err: res.marginal_err,
        plan_path,
    })
}
