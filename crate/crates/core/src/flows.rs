//! Proximal (JKO) policy iteration in entropic Wasserstein geometry, a KL
//! trust-region comparison stepper, and the flow driver.
//!
//! A JKO step maximizes `J(π) − W_ε(π, π_k)/(2τ)` over the simplex, where
//! `W_ε` is the entropic transport objective with cost `½|x − y|²`. Since the
//! proximal term is `W/(2τ)` rather than `W/τ`, one step advances the
//! Fokker–Planck equation by `2τ` units of time, and traces report that time.
//!
//! With `ε > 0` the fixed point of the step is not exactly the Gibbs policy:
//! the entropic blur acts like extra temperature, roughly `β + ε/(4τ)`. Keep
//! `ε/τ` small relative to `β` when comparing against the Gibbs policy.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{param, Error, Result};
use crate::fokker_planck::{FPScheme, FpOperator};
use crate::langevin::{default_dt, ensemble_to_measure, init_particles, Drift, LangevinParams};
use crate::measures::{check_same, gibbs_policy, DiscreteMeasure, RewardField};
use crate::sinkhorn::{gibbs_kernel, log_sum_exp, CostMatrix, GibbsKernel, Violation, WarmSinkhorn};
use crate::trace::{FlowTrace, Recorder, TraceOptions};

/// Search direction of the mirror backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MirrorMetric {
    /// Exponentiated gradient `w ← w·exp(−η(g − ḡ))`.
    Plain,
    /// Newton direction of the proximal objective, built from the Hessian of
    /// `W_ε` that the current transport plan provides in closed form.
    #[default]
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerParams {
    /// Stop once `max |g − ḡ|` of the proximal gradient is at most this.
    pub tol: f64,
    pub max_iter: usize,
    /// Initial mirror step; `None` uses `0.5 τ/(1 + β)` for the plain metric
    /// and `1` for the Newton metric.
    pub eta: Option<f64>,
    pub metric: MirrorMetric,
    /// Relative marginal tolerance of the Sinkhorn solves inside a step.
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iter: usize,
}

impl Default for InnerParams {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 500, eta: None, metric: MirrorMetric::Newton, sinkhorn_tol: 1e-11, sinkhorn_max_iter: 200_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    pub beta: f64,
    pub tau: f64,
    pub eps: f64,
    pub n_steps: usize,
    pub inner: InnerParams,
}

impl FlowParams {
    pub fn new(beta: f64, tau: f64, eps: f64, n_steps: usize) -> Self {
        Self { beta, tau, eps, n_steps, inner: InnerParams::default() }
    }

    pub fn with_inner(mut self, inner: InnerParams) -> Self {
        self.inner = inner;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, x) in [("beta", self.beta), ("tau", self.tau), ("eps", self.eps)] {
            if !(x > 0.0 && x.is_finite()) {
                return param(format!("{name} must be positive and finite, got {x}"));
            }
        }
        let i = &self.inner;
        if !(i.tol > 0.0) || !(i.sinkhorn_tol > 0.0) {
            return param("inner tolerances must be positive");
        }
        if i.max_iter == 0 || i.sinkhorn_max_iter == 0 {
            return param("inner iteration limits must be at least 1");
        }
        if let Some(eta) = i.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return param(format!("mirror step must be positive, got {eta}"));
            }
        }
        Ok(())
    }
}

/// Output of one proximal step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub measure: DiscreteMeasure,
    /// Stopping quantity of the inner solver at exit.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn check_step_inputs(pi_k: &DiscreteMeasure, r: &RewardField, p: &FlowParams) -> Result<()> {
    p.validate()?;
    check_same(pi_k.grid(), r.grid())?;
    if !pi_k.is_strictly_positive() {
        return Err(Error::Domain("proximal steps need a strictly positive policy".into()));
    }
    Ok(())
}

/// Mirror-descent solver for the entropic JKO step, reusable across steps.
pub(crate) struct MirrorSolver {
    sink: WarmSinkhorn,
}

struct Eval {
    objective: f64,
    grad: Vec<f64>,
    residual: f64,
    plan: Vec<f64>,
}

impl MirrorSolver {
    pub fn new(pi_k: &DiscreteMeasure, p: &FlowParams) -> Result<Self> {
        let cost = Arc::new(CostMatrix::quadratic(pi_k.grid(), pi_k.grid()));
        let sink = WarmSinkhorn::new(cost, p.eps, p.inner.sinkhorn_tol, p.inner.sinkhorn_max_iter, Violation::Relative)?;
        Ok(Self { sink })
    }

    /// `W_ε(w, π_k)/(2τ) − J(w)` and its gradient `f/(2τ) − r + β(1 + log(w/h))`.
    fn evaluate(&mut self, w: &[f64], pi_k: &[f64], r: &[f64], h: f64, p: &FlowParams) -> Result<Eval> {
        let res = self.sink.solve(w, pi_k)?;
        if !res.converged {
            return Err(Error::Numerical(format!(
                "inner Sinkhorn solve stopped at relative marginal error {:e}",
                res.marginal_err
            )));
        }
        let two_tau = 2.0 * p.tau;
        let f = res.potential_mu();
        let mut objective = res.reg_cost / two_tau;
        let mut grad = Vec::with_capacity(w.len());
        for i in 0..w.len() {
            let log_p = (w[i] / h).ln();
            objective += -w[i] * r[i] + p.beta * w[i] * log_p;
            grad.push(f[i] / two_tau - r[i] + p.beta * (1.0 + log_p));
        }
        let mean = grad.iter().sum::<f64>() / grad.len() as f64;
        grad.iter_mut().for_each(|g| *g -= mean);
        let residual = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        Ok(Eval { objective, grad, residual, plan: res.plan.as_slice().to_vec() })
    }

    /// Newton direction on the simplex tangent space: `δ = M y` with
    /// `((ε/2τ) D + β M) y = −D g`, `D = diag(w)` and
    /// `M = diag(γ1) − γ diag(1/γᵀ1) γᵀ`.
    fn newton_direction(&self, w: &[f64], e: &Eval, p: &FlowParams) -> Result<Vec<f64>> {
        let n = w.len();
        let gamma = DMatrix::from_row_slice(n, n, &e.plan);
        let rows: Vec<f64> = (0..n).map(|i| gamma.row(i).sum()).collect();
        let cols: Vec<f64> = (0..n).map(|j| gamma.column(j).sum()).collect();
        let mut scaled = gamma.clone();
        for j in 0..n {
            let s = 1.0 / cols[j];
            scaled.column_mut(j).iter_mut().for_each(|x| *x *= s);
        }
        let mut m = -(&scaled * gamma.transpose());
        for i in 0..n {
            m[(i, i)] += rows[i];
        }
        let mut a = &m * p.beta;
        let c = p.eps / (2.0 * p.tau);
        for i in 0..n {
            a[(i, i)] += c * w[i];
        }
        let rhs = DVector::from_iterator(n, w.iter().zip(&e.grad).map(|(w, g)| -w * g));
        let y = a
            .cholesky()
            .ok_or_else(|| Error::Numerical("proximal Hessian is not positive definite".into()))?
            .solve(&rhs);
        Ok((&m * y).iter().copied().collect())
    }

    pub fn step(&mut self, pi_k: &DiscreteMeasure, r: &RewardField, p: &FlowParams) -> Result<StepReport> {
        let grid = pi_k.grid().clone();
        let h = grid.h();
        let target = pi_k.weights();
        let r = r.values();
        let mut w = target.to_vec();
        let mut cur = self.evaluate(&w, target, r, h, p)?;
        let mut eta = p.inner.eta.unwrap_or(match p.inner.metric {
            MirrorMetric::Plain => 0.5 * p.tau / (1.0 + p.beta),
            MirrorMetric::Newton => 1.0,
        });
        let mut iterations = 0;
        while cur.residual > p.inner.tol && iterations < p.inner.max_iter {
            iterations += 1;
            let direction = match p.inner.metric {
                MirrorMetric::Plain => cur.grad.iter().map(|g| -g).collect::<Vec<_>>(),
                MirrorMetric::Newton => {
                    let d = self.newton_direction(&w, &cur, p)?;
                    d.iter().zip(&w).map(|(d, w)| d / w).collect()
                }
            };
            if p.inner.metric == MirrorMetric::Newton {
                eta = p.inner.eta.unwrap_or(1.0);
            }
            let mut accepted = None;
            for _ in 0..60 {
                let logs: Vec<f64> = w.iter().zip(&direction).map(|(w, d)| w.ln() + eta * d).collect();
                let trial = DiscreteMeasure::from_log_weights(grid.clone(), &logs)?.into_weights();
                if trial.iter().all(|&x| x > 0.0) {
                    let e = self.evaluate(&trial, target, r, h, p)?;
                    let slack = 1e-13 * cur.objective.abs().max(1.0);
                    if e.objective < cur.objective || (e.objective <= cur.objective + slack && e.residual < cur.residual) {
                        accepted = Some((trial, e));
                        break;
                    }
                }
                eta *= 0.5;
            }
            match accepted {
                Some((trial, e)) => {
                    w = trial;
                    cur = e;
                }
                None => break,
            }
        }
        let converged = cur.residual <= p.inner.tol;
        Ok(StepReport { measure: DiscreteMeasure::new(grid, w)?, residual: cur.residual, iterations, converged })
    }
}

/// One entropic JKO step by mirror descent on the simplex.
///
/// Minimizes `W_ε(π, π_k)/(2τ) − J(π)`. The gradient combines the Sinkhorn
/// potential `f = ε log u` of the transport from `π` to `π_k` with the first
/// variation of `J`. Each trial point is accepted only if it lowers the
/// objective (backtracking by halving), and the loop stops when
/// `max |g − ḡ| ≤ p.inner.tol`. A step that runs out of iterations is
/// returned with `converged == false` and its residual.
pub fn jko_step_mirror(pi_k: &DiscreteMeasure, r: &RewardField, p: &FlowParams) -> Result<StepReport> {
    check_step_inputs(pi_k, r, p)?;
    MirrorSolver::new(pi_k, p)?.step(pi_k, r, p)
}

/// Generalized Sinkhorn for the coupling-space form of the JKO step,
/// reusable across steps.
pub(crate) struct CouplingSolver {
    cost: Arc<CostMatrix>,
    kernel: GibbsKernel,
    log_b: Option<Vec<f64>>,
    use_log: bool,
}

struct CouplingOutcome {
    nu: Vec<f64>,
    log_b: Vec<f64>,
    residual: f64,
    iterations: usize,
}

impl CouplingSolver {
    pub fn new(pi_k: &DiscreteMeasure, p: &FlowParams) -> Result<Self> {
        let cost = Arc::new(CostMatrix::quadratic(pi_k.grid(), pi_k.grid()));
        let kernel = gibbs_kernel(&cost, p.eps)?;
        Ok(Self { cost, kernel, log_b: None, use_log: false })
    }

    /// KL-prox of `σF`, `F = −J`: `argmin_ν KL(ν|z) + σF(ν)`, i.e.
    /// `ν ∝ (z e^{σr} h^{σβ})^{1/(1+σβ)}`, returned as logs.
    fn prox(log_z: &[f64], r: &[f64], sigma: f64, beta: f64) -> Vec<f64> {
        let k = 1.0 / (1.0 + sigma * beta);
        let raw: Vec<f64> = log_z.iter().zip(r).map(|(lz, r)| k * (lz + sigma * r)).collect();
        let z = log_sum_exp(raw.iter().copied());
        raw.into_iter().map(|x| x - z).collect()
    }

    fn run_plain(&self, pi: &[f64], r: &[f64], p: &FlowParams) -> Option<CouplingOutcome> {
        let n = pi.len();
        let k = self.kernel.as_slice();
        let sigma = 2.0 * p.tau / p.eps;
        let mut b: Vec<f64> = match &self.log_b {
            Some(lb) => lb.iter().map(|x| x.exp()).collect(),
            None => vec![1.0; n],
        };
        let mut a = vec![0.0; n];
        let mut nu = vec![1.0 / n as f64; n];
        let mut residual = f64::INFINITY;
        let tol = p.inner.tol.min(p.inner.sinkhorn_tol.max(1e-12));
        for it in 0..=p.inner.sinkhorn_max_iter {
            let kb: Vec<f64> = (0..n).map(|i| k[i * n..(i + 1) * n].iter().zip(&b).map(|(x, y)| x * y).sum()).collect();
            if kb.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                return None;
            }
            if it > 0 {
                residual = (0..n).map(|i| (a[i] * kb[i] / pi[i] - 1.0).abs()).fold(0.0, f64::max);
                if residual <= tol {
                    return Some(CouplingOutcome { nu, log_b: b.iter().map(|x| x.ln()).collect(), residual, iterations: it });
                }
                if it == p.inner.sinkhorn_max_iter {
                    break;
                }
            }
            for i in 0..n {
                a[i] = pi[i] / kb[i];
            }
            let mut kta = vec![0.0; n];
            for i in 0..n {
                let row = &k[i * n..(i + 1) * n];
                for j in 0..n {
                    kta[j] += row[j] * a[i];
                }
            }
            if kta.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                return None;
            }
            let log_z: Vec<f64> = kta.iter().map(|x| x.ln()).collect();
            let log_nu = Self::prox(&log_z, r, sigma, p.beta);
            for j in 0..n {
                nu[j] = log_nu[j].exp();
                b[j] = nu[j] / kta[j];
            }
            if b.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                return None;
            }
        }
        Some(CouplingOutcome {
            nu,
            log_b: b.iter().map(|x| x.ln()).collect(),
            residual,
            iterations: p.inner.sinkhorn_max_iter,
        })
    }

    fn run_log(&self, pi: &[f64], r: &[f64], p: &FlowParams) -> CouplingOutcome {
        let n = pi.len();
        let eps = p.eps;
        let c = self.cost.as_slice();
        let sigma = 2.0 * p.tau / eps;
        let log_pi: Vec<f64> = pi.iter().map(|x| x.ln()).collect();
        // f = ε log a, g = ε log b.
        let mut g: Vec<f64> = match &self.log_b {
            Some(lb) => lb.iter().map(|x| eps * x).collect(),
            None => vec![0.0; n],
        };
        let mut f = vec![0.0; n];
        let mut log_nu = vec![-(n as f64).ln(); n];
        let mut residual = f64::INFINITY;
        let tol = p.inner.tol.min(p.inner.sinkhorn_tol.max(1e-12));
        let row_lse = |g: &[f64], i: usize| log_sum_exp(g.iter().zip(&c[i * n..(i + 1) * n]).map(|(g, c)| (g - c) / eps));
        let mut iterations = p.inner.sinkhorn_max_iter;
        for it in 0..=p.inner.sinkhorn_max_iter {
            if it > 0 {
                residual = (0..n)
                    .map(|i| ((f[i] / eps + row_lse(&g, i) - log_pi[i]).exp() - 1.0).abs())
                    .fold(0.0, f64::max);
                if residual <= tol || it == p.inner.sinkhorn_max_iter {
                    iterations = it;
                    break;
                }
            }
            for i in 0..n {
                f[i] = eps * (log_pi[i] - row_lse(&g, i));
            }
            // l_j = log (Kᵀa)_j = LSE_i((f_i − C_ij)/ε).
            let l: Vec<f64> = (0..n)
                .map(|j| log_sum_exp((0..n).map(|i| (f[i] - c[i * n + j]) / eps)))
                .collect();
            log_nu = Self::prox(&l, r, sigma, p.beta);
            for j in 0..n {
                g[j] = eps * (log_nu[j] - l[j]);
            }
        }
        CouplingOutcome {
            nu: log_nu.iter().map(|x| x.exp()).collect(),
            log_b: g.iter().map(|x| x / eps).collect(),
            residual,
            iterations,
        }
    }

    pub fn step(&mut self, pi_k: &DiscreteMeasure, r: &RewardField, p: &FlowParams) -> Result<StepReport> {
        let pi = pi_k.weights();
        let out = match (!self.use_log).then(|| self.run_plain(pi, r.values(), p)).flatten() {
            Some(o) => o,
            None => {
                self.use_log = true;
                self.run_log(pi, r.values(), p)
            }
        };
        if out.nu.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("coupling-space JKO iteration diverged".into()));
        }
        self.log_b = Some(out.log_b);
        let tol = p.inner.tol.min(p.inner.sinkhorn_tol.max(1e-12));
        Ok(StepReport {
            measure: DiscreteMeasure::from_unnormalized(pi_k.grid().clone(), out.nu)?,
            residual: out.residual,
            iterations: out.iterations,
            converged: out.residual <= tol,
        })
    }
}

/// One entropic JKO step solved directly in coupling space.
///
/// With `σ = 2τ/ε` the step is
/// `γ* = argmin KL(γ | e^{−C/ε}) + σ F(γᵀ1)` subject to `γ1 = π_k`, with
/// `F = −J`, and returns `γ*ᵀ1`. Writing `γ = diag(a) K diag(b)`, the
/// iteration alternates the row scaling `a = π_k ⊘ K b` with the column
/// scaling `b = ν ⊘ Kᵀa`, where `ν = prox(Kᵀa)` is the KL-proximal map of
/// `σF`, `ν ∝ (Kᵀa · e^{σr} h^{σβ})^{1/(1+σβ)}`. It stops when the relative row-marginal error is at most
/// `min(inner.tol, inner.sinkhorn_tol)`.
pub fn jko_step_coupling(pi_k: &DiscreteMeasure, r: &RewardField, p: &FlowParams) -> Result<StepReport> {
    check_step_inputs(pi_k, r, p)?;
    CouplingSolver::new(pi_k, p)?.step(pi_k, r, p)
}

/// Closed-form step `argmax J(π) − KL(π | π_k)/(2τ)`.
///
/// Setting the derivative of `KL(π|π_k)/(2τ) − Σπr + βΣπ log(π/h)` to a
/// constant gives `(1/(2τ) + β) log π = log π_k/(2τ) + r + β log h + c`, i.e.
/// `π ∝ (π_k e^{2τr} h^{2τβ})^{1/(1+2τβ)}`.
pub fn kl_trust_region_step(pi_k: &DiscreteMeasure, r: &RewardField, beta: f64, tau: f64) -> Result<DiscreteMeasure> {
    check_same(pi_k.grid(), r.grid())?;
    if !(beta > 0.0 && beta.is_finite()) || !(tau > 0.0 && tau.is_finite()) {
        return param(format!("beta and tau must be positive and finite, got {beta} and {tau}"));
    }
    if !pi_k.is_strictly_positive() {
        return Err(Error::Domain("trust-region step needs a strictly positive policy".into()));
    }
    let k = 1.0 / (1.0 + 2.0 * tau * beta);
    let log_h = pi_k.grid().h().ln();
    let logs: Vec<f64> = pi_k
        .weights()
        .iter()
        .zip(r.values())
        .map(|(w, r)| k * (w.ln() + 2.0 * tau * r + 2.0 * tau * beta * log_h))
        .collect();
    DiscreteMeasure::from_log_weights(pi_k.grid().clone(), &logs)
}

/// Dynamics available to [`run_flow`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stepper {
    JkoMirror,
    JkoCoupling,
    KlTrustRegion,
    /// `n_steps` steps of the given scheme; `τ` and `ε` are unused.
    FokkerPlanck(FPScheme),
    /// `n_steps` Euler–Maruyama steps; iterates are particle histograms.
    Langevin(LangevinParams),
}

impl Stepper {
    pub fn name(&self) -> &'static str {
        match self {
            Stepper::JkoMirror => "jko-mirror",
            Stepper::JkoCoupling => "jko-coupling",
            Stepper::KlTrustRegion => "kl-trust-region",
            Stepper::FokkerPlanck(_) => "fokker-planck",
            Stepper::Langevin(_) => "langevin",
        }
    }

    fn default_stride(&self, n_steps: usize) -> usize {
        match self {
            Stepper::FokkerPlanck(_) | Stepper::Langevin(_) => n_steps.div_ceil(200).max(1),
            _ => 1,
        }
    }
}

/// Runs `p.n_steps` steps of `stepper` from `pi_0` with default recording.
pub fn run_flow(pi_0: &DiscreteMeasure, r: &RewardField, p: &FlowParams, stepper: Stepper) -> Result<FlowTrace> {
    run_flow_with(pi_0, r, p, stepper, &TraceOptions::default())
}

/// Runs a flow. Invalid parameters are reported as errors; a failure in the
/// middle of the run ends the trace early with `failure` set.
///
/// Time is `2τk` for the proximal steppers and `k·dt` for the PDE and the
/// particle simulation.
pub fn run_flow_with(
    pi_0: &DiscreteMeasure,
    r: &RewardField,
    p: &FlowParams,
    stepper: Stepper,
    opts: &TraceOptions,
) -> Result<FlowTrace> {
    check_same(pi_0.grid(), r.grid())?;
    let stride = if opts.stride > 0 { opts.stride } else { stepper.default_stride(p.n_steps) };
    match stepper {
        Stepper::JkoMirror | Stepper::JkoCoupling | Stepper::KlTrustRegion => {
            check_step_inputs(pi_0, r, p)?;
            let mut rec = Recorder::new(pi_0, r, p.beta, opts, stride, true)?;
            rec.observe(0, 0.0, pi_0)?;
            let mut mirror = if stepper == Stepper::JkoMirror { Some(MirrorSolver::new(pi_0, p)?) } else { None };
            let mut coupling = if stepper == Stepper::JkoCoupling { Some(CouplingSolver::new(pi_0, p)?) } else { None };
            let mut pi = pi_0.clone();
            let dt = 2.0 * p.tau;
            for k in 1..=p.n_steps {
                let next = match stepper {
                    Stepper::JkoMirror => mirror.as_mut().expect("mirror solver").step(&pi, r, p),
                    Stepper::JkoCoupling => coupling.as_mut().expect("coupling solver").step(&pi, r, p),
                    _ => kl_trust_region_step(&pi, r, p.beta, p.tau)
                        .map(|m| StepReport { measure: m, residual: 0.0, iterations: 0, converged: true }),
                };
                match next {
                    Ok(s) => {
                        rec.note_inner(s.converged, s.residual);
                        pi = s.measure;
                        rec.observe(k, k as f64 * dt, &pi)?;
                    }
                    Err(e) => return rec.finish((k - 1) as f64 * dt, Some(e)),
                }
            }
            rec.finish(p.n_steps as f64 * dt, None)
        }
        Stepper::FokkerPlanck(scheme) => {
            if !(p.beta > 0.0 && p.beta.is_finite()) {
                return param(format!("beta must be positive and finite, got {}", p.beta));
            }
            let op = FpOperator::new(r, p.beta, &scheme)?;
            let mut rec = Recorder::new(pi_0, r, p.beta, opts, stride, true)?;
            rec.observe(0, 0.0, pi_0)?;
            let mut w = pi_0.weights().to_vec();
            for k in 1..=p.n_steps {
                match op.apply(&mut w) {
                    Ok(c) => rec.note_clamps(c),
                    Err(e) => return rec.finish((k - 1) as f64 * scheme.dt, Some(e)),
                }
                let pi = DiscreteMeasure::new(pi_0.grid().clone(), w.clone())?;
                rec.observe(k, k as f64 * scheme.dt, &pi)?;
            }
            rec.finish(p.n_steps as f64 * scheme.dt, None)
        }
        Stepper::Langevin(lp) => {
            if !(p.beta > 0.0 && p.beta.is_finite()) {
                return param(format!("beta must be positive and finite, got {}", p.beta));
            }
            let dt = lp.dt.unwrap_or_else(|| default_dt(r, p.beta));
            if !(dt > 0.0 && dt.is_finite()) {
                return param(format!("time step must be positive, got {dt}"));
            }
            let grid = pi_0.grid();
            let drift = Drift::new(r);
            let mut e = init_particles(pi_0, lp.n_particles, lp.seed)?;
            let mut rec = Recorder::new(pi_0, r, p.beta, opts, stride, false)?;
            rec.observe(0, 0.0, &ensemble_to_measure(&e, grid)?)?;
            for k in 1..=p.n_steps {
                e.step(&drift, p.beta, dt);
                if rec.wants(k) || k == p.n_steps {
                    rec.observe(k, k as f64 * dt, &ensemble_to_measure(&e, grid)?)?;
                }
            }
            rec.finish(p.n_steps as f64 * dt, None)
        }
    }
}

/// Gibbs policy `π ∝ e^{r/β'}` at the effective temperature `β' = β + ε/(4τ)`
/// that approximates the fixed point of the entropic JKO step.
pub fn entropic_fixed_point_estimate(r: &RewardField, p: &FlowParams) -> Result<DiscreteMeasure> {
    gibbs_policy(r, p.beta + p.eps / (4.0 * p.tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{make_grid, total_variation};

    #[test]
    fn flat_reward_keeps_uniform() {
        let g = make_grid(0.0, 1.0, 12).unwrap();
        let r = RewardField::constant(g.clone(), 0.0).unwrap();
        let h = g.h();
        let pi = DiscreteMeasure::uniform(g);
        // Uniform is only a fixed point once the kernel is sharper than a cell.
        let p = FlowParams::new(1.0, 0.1, h * h / 60.0, 1);
        let out = jko_step_coupling(&pi, &r, &p).unwrap();
        assert!(total_variation(&out.measure, &pi).unwrap() < 1e-10);
        let out = kl_trust_region_step(&pi, &r, 1.0, 0.1).unwrap();
        assert!(total_variation(&out, &pi).unwrap() < 1e-15);
    }

    #[test]
    fn rejects_empty_cells() {
        let g = make_grid(0.0, 1.0, 4).unwrap();
        let r = RewardField::constant(g.clone(), 0.0).unwrap();
        let pi = DiscreteMeasure::point_mass(g, 0).unwrap();
        let p = FlowParams::new(1.0, 0.1, 0.05, 1);
        assert!(matches!(jko_step_mirror(&pi, &r, &p), Err(Error::Domain(_))));
        assert!(matches!(kl_trust_region_step(&pi, &r, 1.0, 0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn parameter_validation() {
        assert!(FlowParams::new(0.0, 1.0, 1.0, 1).validate().is_err());
        assert!(FlowParams::new(1.0, -1.0, 1.0, 1).validate().is_err());
        assert!(FlowParams::new(1.0, 1.0, f64::NAN, 1).validate().is_err());
        assert!(FlowParams::new(1.0, 1.0, 1.0, 0).validate().is_ok());
    }
}
