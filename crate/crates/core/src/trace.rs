//! Time series recorded along a flow, with per-step diagnostics.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fokker_planck::stationary_residual;
use crate::measures::{free_energy, gibbs_policy, total_variation, DiscreteMeasure, RewardField};
use crate::sinkhorn::{CostMatrix, Violation, WarmSinkhorn};

/// One recorded row of a [`FlowTrace`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    pub step: usize,
    pub time: f64,
    pub free_energy: f64,
    pub entropy: f64,
    pub expected_reward: f64,
    pub tv_to_gibbs: f64,
    /// Entropic transport cost `⟨C, γ⟩` to the Gibbs policy; `NaN` when
    /// disabled or when the solve did not converge.
    pub w2eps_to_gibbs: f64,
    /// [`stationary_residual`]; `NaN` when the measure has an empty cell.
    pub residual: f64,
}

/// What to record along a flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceOptions {
    /// Record every `stride`-th step; `0` picks a default per stepper.
    pub stride: usize,
    /// Regularization of the transport diagnostic; `None` skips it.
    pub w2_eps: Option<f64>,
    /// Keep every recorded measure, not just the last one.
    pub keep_measures: bool,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self { stride: 0, w2_eps: Some(0.05), keep_measures: true }
    }
}

/// Iterates of a flow plus diagnostics.
///
/// `diagnostics[k]` describes `measures[k]` when measures are kept. The first
/// and the last executed step are always recorded.
#[derive(Debug, Clone)]
pub struct FlowTrace {
    pub diagnostics: Vec<Diagnostics>,
    pub measures: Vec<DiscreteMeasure>,
    pub final_measure: DiscreteMeasure,
    pub steps_executed: usize,
    /// Largest single-step decrease `J_k − J_{k+1}` over every executed step,
    /// recorded or not. Zero or negative means `J` never decreased.
    pub worst_free_energy_drop: f64,
    /// Number of steps along which `J` dropped by more than `1e-9`.
    pub free_energy_violations: usize,
    /// Whether the two quantities above are meaningful for this stepper.
    pub monotonicity_tracked: bool,
    /// Negative cell masses clamped to zero by the PDE solver.
    pub clamp_count: usize,
    /// Proximal steps whose inner solver stopped before its tolerance.
    pub inner_unconverged: usize,
    pub max_inner_residual: f64,
    /// Set when a step failed; the trace then ends at the last good iterate.
    pub failure: Option<Error>,
}

impl FlowTrace {
    pub fn times(&self) -> Vec<f64> {
        self.diagnostics.iter().map(|d| d.time).collect()
    }

    pub fn last(&self) -> &Diagnostics {
        self.diagnostics.last().expect("a trace always records its initial state")
    }

    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }
}

/// Tolerance used to count free-energy decreases.
pub const MONOTONICITY_TOL: f64 = 1e-9;

pub(crate) struct Recorder<'a> {
    r: &'a RewardField,
    beta: f64,
    gibbs: DiscreteMeasure,
    w2: Option<WarmSinkhorn>,
    stride: usize,
    keep: bool,
    last_j: Option<f64>,
    last_recorded: Option<usize>,
    trace: FlowTrace,
}

impl<'a> Recorder<'a> {
    pub fn new(pi0: &DiscreteMeasure, r: &'a RewardField, beta: f64, opts: &TraceOptions, stride: usize, track: bool) -> Result<Self> {
        let gibbs = gibbs_policy(r, beta)?;
        let w2 = match opts.w2_eps {
            Some(eps) => {
                let cost = Arc::new(CostMatrix::quadratic(r.grid(), r.grid()));
                Some(WarmSinkhorn::new(cost, eps, 1e-9, 20_000, Violation::Absolute)?)
            }
            None => None,
        };
        Ok(Self {
            r,
            beta,
            gibbs,
            w2,
            stride: stride.max(1),
            keep: opts.keep_measures,
            last_j: None,
            last_recorded: None,
            trace: FlowTrace {
                diagnostics: Vec::new(),
                measures: Vec::new(),
                final_measure: pi0.clone(),
                steps_executed: 0,
                worst_free_energy_drop: f64::NEG_INFINITY,
                free_energy_violations: 0,
                monotonicity_tracked: track,
                clamp_count: 0,
                inner_unconverged: 0,
                max_inner_residual: 0.0,
                failure: None,
            },
        })
    }

    pub fn wants(&self, step: usize) -> bool {
        step % self.stride == 0
    }

    /// Registers the iterate after `step` steps; records it if the stride asks.
    pub fn observe(&mut self, step: usize, time: f64, pi: &DiscreteMeasure) -> Result<()> {
        let j = free_energy(pi, self.r, self.beta)?.free_energy;
        if self.trace.monotonicity_tracked {
            if let Some(prev) = self.last_j {
                let drop = prev - j;
                self.trace.worst_free_energy_drop = self.trace.worst_free_energy_drop.max(drop);
                if drop > MONOTONICITY_TOL {
                    self.trace.free_energy_violations += 1;
                }
            }
        }
        self.last_j = Some(j);
        self.trace.steps_executed = step;
        if self.wants(step) {
            self.record(step, time, pi)?;
        }
        self.trace.final_measure = pi.clone();
        Ok(())
    }

    fn record(&mut self, step: usize, time: f64, pi: &DiscreteMeasure) -> Result<()> {
        if self.last_recorded == Some(step) {
            return Ok(());
        }
        let fe = free_energy(pi, self.r, self.beta)?;
        let w2eps_to_gibbs = match self.w2.as_mut() {
            Some(s) => match s.solve(pi.weights(), self.gibbs.weights()) {
                Ok(res) if res.converged => res.cost,
                _ => f64::NAN,
            },
            None => f64::NAN,
        };
        let residual = stationary_residual(pi, self.r, self.beta).unwrap_or(f64::NAN);
        self.trace.diagnostics.push(Diagnostics {
            step,
            time,
            free_energy: fe.free_energy,
            entropy: fe.entropy,
            expected_reward: fe.expected_reward,
            tv_to_gibbs: total_variation(pi, &self.gibbs)?,
            w2eps_to_gibbs,
            residual,
        });
        if self.keep {
            self.trace.measures.push(pi.clone());
        }
        self.last_recorded = Some(step);
        Ok(())
    }

    pub fn note_inner(&mut self, converged: bool, residual: f64) {
        if !converged {
            self.trace.inner_unconverged += 1;
        }
        if residual.is_finite() {
            self.trace.max_inner_residual = self.trace.max_inner_residual.max(residual);
        }
    }

    pub fn note_clamps(&mut self, count: usize) {
        self.trace.clamp_count += count;
    }

    /// Records the final iterate (if the stride skipped it) and closes the trace.
    pub fn finish(mut self, time: f64, failure: Option<Error>) -> Result<FlowTrace> {
        let step = self.trace.steps_executed;
        let last = self.trace.final_measure.clone();
        self.record(step, time, &last)?;
        if self.trace.worst_free_energy_drop == f64::NEG_INFINITY {
            self.trace.worst_free_energy_drop = 0.0;
        }
        if !self.keep {
            self.trace.measures.clear();
        }
        self.trace.failure = failure;
        Ok(self.trace)
    }
}
