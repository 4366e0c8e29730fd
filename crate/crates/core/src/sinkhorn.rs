//! Entropic optimal transport by Sinkhorn matrix balancing.
//!
//! The regularized problem is
//!
//! ```text
//! W_ε(μ, ν) = min_{γ ∈ Γ(μ,ν)} ⟨C, γ⟩ + ε Σ γ_ij (log γ_ij − 1),   C_ij = ½ (x_i − y_j)²
//! ```
//!
//! whose minimizer is a diagonal scaling `γ = diag(u) K diag(v)` of the Gibbs
//! kernel `K = exp(−C/ε)`. Sinkhorn alternates `u ← μ ⊘ (K v)` and
//! `v ← ν ⊘ (Kᵀ u)` until both marginals are met. The dual potentials are
//! `f = ε log u`, `g = ε log v`; `f` is the gradient of `W_ε` with respect to
//! the first marginal, defined up to an additive constant.
//!
//! Rows with `μ_i = 0` are excluded from the iteration and come back as zero
//! rows (`u_i = 0`).

use std::sync::Arc;

use crate::error::{param, Error, Result};
use crate::measures::{check_same, DiscreteMeasure, GridRef};

/// `C_ij = ½ (x_i − y_j)²` between the centers of two grids.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    source: GridRef,
    target: GridRef,
    n: usize,
    m: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn quadratic(source: &GridRef, target: &GridRef) -> Self {
        let (n, m) = (source.len(), target.len());
        let mut data = Vec::with_capacity(n * m);
        for &x in source.centers() {
            for &y in target.centers() {
                data.push(0.5 * (x - y) * (x - y));
            }
        }
        Self { source: source.clone(), target: target.clone(), n, m, data }
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn source(&self) -> &GridRef {
        &self.source
    }

    pub fn target(&self) -> &GridRef {
        &self.target
    }
}

/// A transport plan `γ ∈ Γ(μ, ν)`, dense and row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    source: GridRef,
    target: GridRef,
    n: usize,
    m: usize,
    data: Vec<f64>,
}

impl Coupling {
    pub fn new(source: GridRef, target: GridRef, data: Vec<f64>) -> Self {
        let (n, m) = (source.len(), target.len());
        assert_eq!(data.len(), n * m, "coupling shape mismatch");
        Self { source, target, n, m, data }
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.m + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn source(&self) -> &GridRef {
        &self.source
    }

    pub fn target(&self) -> &GridRef {
        &self.target
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data.chunks(self.m).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for row in self.data.chunks(self.m) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out
    }

    pub fn transpose(&self) -> Coupling {
        let mut data = vec![0.0; self.n * self.m];
        for i in 0..self.n {
            for j in 0..self.m {
                data[j * self.n + i] = self.data[i * self.m + j];
            }
        }
        Coupling { source: self.target.clone(), target: self.source.clone(), n: self.m, m: self.n, data }
    }
}

/// `⟨C, γ⟩ + ε Σ γ (log γ − 1)`, i.e. `⟨C, γ⟩ − ε H̄(γ)`, evaluated verbatim.
pub fn entropic_objective(cost: &CostMatrix, plan: &Coupling, eps: f64) -> f64 {
    cost.as_slice()
        .iter()
        .zip(plan.as_slice())
        .map(|(&c, &g)| if g > 0.0 { c * g + eps * g * (g.ln() - 1.0) } else { 0.0 })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornParams {
    pub eps: f64,
    /// Stop once the largest marginal violation is at most `tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub log_domain: bool,
}

impl SinkhornParams {
    pub fn new(eps: f64) -> Self {
        Self { eps, tol: 1e-9, max_iter: 100_000, log_domain: false }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn log_domain(mut self, on: bool) -> Self {
        self.log_domain = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return param(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.tol > 0.0) {
            return param(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_iter == 0 {
            return param("max_iter must be at least 1");
        }
        Ok(())
    }
}

/// Gibbs kernel `K = exp(−C/ε)`, kept together with its transpose.
#[derive(Debug, Clone)]
pub struct GibbsKernel {
    eps: f64,
    n: usize,
    m: usize,
    k: Vec<f64>,
    kt: Vec<f64>,
}

/// `K_ij = exp(−C_ij / ε)`.
pub fn gibbs_kernel(cost: &CostMatrix, eps: f64) -> Result<GibbsKernel> {
    if !(eps > 0.0 && eps.is_finite()) {
        return param(format!("eps must be positive, got {eps}"));
    }
    let (n, m) = (cost.rows(), cost.cols());
    let k: Vec<f64> = cost.as_slice().iter().map(|c| (-c / eps).exp()).collect();
    let mut kt = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            kt[j * n + i] = k[i * m + j];
        }
    }
    Ok(GibbsKernel { eps, n, m, k, kt })
}

impl GibbsKernel {
    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.k[i * self.m + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.k
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log Σ_k exp(x_k)`, skipping `−∞` terms.
pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// How marginal violations are measured when deciding convergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Violation {
    /// `max |marginal − target|`.
    Absolute,
    /// `max |marginal / target − 1|` over the support; needed when the
    /// potentials of very light cells matter.
    Relative,
}

/// Natural logs of the scalings plus convergence bookkeeping.
#[derive(Debug, Clone)]
pub(crate) struct Scalings {
    pub log_u: Vec<f64>,
    pub log_v: Vec<f64>,
    pub iterations: usize,
    pub marginal_err: f64,
    pub converged: bool,
    pub log_domain: bool,
}

fn violation(actual: f64, target: f64, mode: Violation) -> f64 {
    match mode {
        Violation::Absolute => (actual - target).abs(),
        Violation::Relative => (actual / target - 1.0).abs(),
    }
}

pub(crate) struct Problem<'a> {
    pub cost: &'a CostMatrix,
    pub mu: &'a [f64],
    pub nu: &'a [f64],
    pub tol: f64,
    pub max_iter: usize,
    pub mode: Violation,
}

pub(crate) fn iterate_plain(kernel: &GibbsKernel, p: &Problem<'_>, init_log_v: Option<&[f64]>) -> Result<Scalings> {
    let (n, m) = (kernel.n, kernel.m);
    let underflow = Error::KernelUnderflow { eps: kernel.eps };
    let mut u = vec![0.0; n];
    let mut v: Vec<f64> = match init_log_v {
        Some(lv) => lv.iter().map(|x| x.exp()).collect(),
        None => vec![1.0; m],
    };
    for (vj, &nj) in v.iter_mut().zip(p.nu) {
        if nj <= 0.0 {
            *vj = 0.0;
        }
    }
    let mut marginal_err = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut kv = vec![0.0; n];

    for it in 1..=p.max_iter {
        iterations = it;
        for i in 0..n {
            if p.mu[i] > 0.0 {
                let s = dot(&kernel.k[i * m..(i + 1) * m], &v);
                let ui = p.mu[i] / s;
                if !(s > 0.0) || !ui.is_finite() {
                    return Err(underflow);
                }
                u[i] = ui;
            } else {
                u[i] = 0.0;
            }
        }
        for j in 0..m {
            if p.nu[j] > 0.0 {
                let s = dot(&kernel.kt[j * n..(j + 1) * n], &u);
                let vj = p.nu[j] / s;
                if !(s > 0.0) || !vj.is_finite() {
                    return Err(underflow);
                }
                v[j] = vj;
            }
        }
        if it % 10 == 0 || it == p.max_iter {
            let mut err: f64 = 0.0;
            for i in 0..n {
                kv[i] = dot(&kernel.k[i * m..(i + 1) * m], &v);
                if p.mu[i] > 0.0 {
                    err = err.max(violation(u[i] * kv[i], p.mu[i], p.mode));
                }
            }
            for j in 0..m {
                if p.nu[j] > 0.0 {
                    let s = v[j] * dot(&kernel.kt[j * n..(j + 1) * n], &u);
                    err = err.max(violation(s, p.nu[j], p.mode));
                }
            }
            marginal_err = err;
            if err <= p.tol {
                converged = true;
                break;
            }
        }
    }
    Ok(Scalings {
        log_u: u.iter().map(|x| x.ln()).collect(),
        log_v: v.iter().map(|x| x.ln()).collect(),
        iterations,
        marginal_err,
        converged,
        log_domain: false,
    })
}

pub(crate) fn iterate_log(eps: f64, p: &Problem<'_>, init_log_v: Option<&[f64]>) -> Result<Scalings> {
    let (n, m) = (p.cost.rows(), p.cost.cols());
    let c = p.cost.as_slice();
    let log_mu: Vec<f64> = p.mu.iter().map(|x| x.ln()).collect();
    let log_nu: Vec<f64> = p.nu.iter().map(|x| x.ln()).collect();
    // f = ε log u, g = ε log v; −∞ marks cells outside the support.
    let mut f = vec![f64::NEG_INFINITY; n];
    let mut g: Vec<f64> = match init_log_v {
        Some(lv) => lv.iter().map(|x| eps * x).collect(),
        None => vec![0.0; m],
    };
    for (gj, &nj) in g.iter_mut().zip(p.nu) {
        if nj <= 0.0 {
            *gj = f64::NEG_INFINITY;
        }
    }
    let mut ct = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            ct[j * n + i] = c[i * m + j];
        }
    }

    let mut marginal_err = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=p.max_iter {
        iterations = it;
        for i in 0..n {
            if p.mu[i] > 0.0 {
                let row = &c[i * m..(i + 1) * m];
                let lse = log_sum_exp(g.iter().zip(row).map(|(gj, cij)| (gj - cij) / eps));
                f[i] = eps * (log_mu[i] - lse);
            }
        }
        for j in 0..m {
            if p.nu[j] > 0.0 {
                let col = &ct[j * n..(j + 1) * n];
                let lse = log_sum_exp(f.iter().zip(col).map(|(fi, cij)| (fi - cij) / eps));
                g[j] = eps * (log_nu[j] - lse);
            }
        }
        if f.iter().chain(g.iter()).any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::Numerical(format!("log-domain Sinkhorn diverged at eps = {eps}")));
        }
        if it % 10 == 0 || it == p.max_iter {
            let mut err: f64 = 0.0;
            for i in 0..n {
                if p.mu[i] > 0.0 {
                    let row = &c[i * m..(i + 1) * m];
                    let s: f64 = g.iter().zip(row).map(|(gj, cij)| ((f[i] + gj - cij) / eps).exp()).sum();
                    err = err.max(violation(s, p.mu[i], p.mode));
                }
            }
            for j in 0..m {
                if p.nu[j] > 0.0 {
                    let col = &ct[j * n..(j + 1) * n];
                    let s: f64 = f.iter().zip(col).map(|(fi, cij)| ((fi + g[j] - cij) / eps).exp()).sum();
                    err = err.max(violation(s, p.nu[j], p.mode));
                }
            }
            marginal_err = err;
            if err <= p.tol {
                converged = true;
                break;
            }
        }
    }
    Ok(Scalings {
        log_u: f.iter().map(|x| x / eps).collect(),
        log_v: g.iter().map(|x| x / eps).collect(),
        iterations,
        marginal_err,
        converged,
        log_domain: true,
    })
}

/// Output of a Sinkhorn solve.
#[derive(Debug, Clone)]
pub struct SinkhornResult {
    /// Row scaling; zero on rows outside the support of `μ`. In log-domain
    /// solves these are `exp(log_u)` and may saturate.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub log_u: Vec<f64>,
    pub log_v: Vec<f64>,
    pub plan: Coupling,
    /// Linear transport cost `⟨C, γ⟩`.
    pub cost: f64,
    /// Regularized value `⟨C, γ⟩ − ε H̄(γ)`, computed through the dual
    /// `⟨f, μ⟩ + ⟨g, ν⟩ − ε Σ γ`, which agrees with the primal at convergence
    /// and is only second-order sensitive to the remaining marginal error.
    pub reg_cost: f64,
    pub iterations: usize,
    pub marginal_err: f64,
    pub converged: bool,
    pub eps: f64,
    pub log_domain: bool,
    mu: Vec<f64>,
    costs: Arc<CostMatrix>,
}

impl SinkhornResult {
    pub(crate) fn assemble(cost: Arc<CostMatrix>, mu: &[f64], nu: &[f64], eps: f64, s: Scalings) -> Self {
        let (n, m) = (cost.rows(), cost.cols());
        let u: Vec<f64> = s.log_u.iter().map(|x| x.exp()).collect();
        let v: Vec<f64> = s.log_v.iter().map(|x| x.exp()).collect();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            if s.log_u[i] == f64::NEG_INFINITY {
                continue;
            }
            for j in 0..m {
                let c = cost.get(i, j);
                data[i * m + j] = if s.log_domain {
                    (s.log_u[i] + s.log_v[j] - c / eps).exp()
                } else {
                    u[i] * (-c / eps).exp() * v[j]
                };
            }
        }
        let linear: f64 = data.iter().zip(cost.as_slice()).map(|(g, c)| g * c).sum();
        let mass: f64 = data.iter().sum();
        let fmu: f64 = mu.iter().zip(&s.log_u).filter(|(w, _)| **w > 0.0).map(|(w, lu)| w * eps * lu).sum();
        let gnu: f64 = nu.iter().zip(&s.log_v).filter(|(w, _)| **w > 0.0).map(|(w, lv)| w * eps * lv).sum();
        let plan = Coupling::new(cost.source().clone(), cost.target().clone(), data);
        Self {
            u,
            v,
            log_u: s.log_u,
            log_v: s.log_v,
            plan,
            cost: linear,
            reg_cost: fmu + gnu - eps * mass,
            iterations: s.iterations,
            marginal_err: s.marginal_err,
            converged: s.converged,
            eps,
            log_domain: s.log_domain,
            mu: mu.to_vec(),
            costs: cost,
        }
    }

    pub fn cost_matrix(&self) -> &CostMatrix {
        &self.costs
    }

    /// `ε log u`, the first dual potential (ungauged).
    pub fn potential_mu(&self) -> Vec<f64> {
        self.log_u.iter().map(|x| self.eps * x).collect()
    }

    pub fn potential_nu(&self) -> Vec<f64> {
        self.log_v.iter().map(|x| self.eps * x).collect()
    }
}

fn check_problem(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cost: &CostMatrix, p: &SinkhornParams) -> Result<()> {
    p.validate()?;
    check_same(mu.grid(), cost.source())?;
    check_same(nu.grid(), cost.target())?;
    Ok(())
}

/// Plain Sinkhorn balancing.
///
/// Exhausting `max_iter` is not an error: the result comes back with
/// `converged == false` and the achieved `marginal_err`. Loss of the scalings
/// to underflow is reported as [`Error::KernelUnderflow`]. With
/// `p.log_domain` set this delegates to [`sinkhorn_log_domain`].
pub fn sinkhorn(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cost: &CostMatrix, p: &SinkhornParams) -> Result<SinkhornResult> {
    if p.log_domain {
        return sinkhorn_log_domain(mu, nu, cost, p);
    }
    check_problem(mu, nu, cost, p)?;
    let kernel = gibbs_kernel(cost, p.eps)?;
    let problem = Problem { cost, mu: mu.weights(), nu: nu.weights(), tol: p.tol, max_iter: p.max_iter, mode: Violation::Absolute };
    let s = iterate_plain(&kernel, &problem, None)?;
    Ok(SinkhornResult::assemble(Arc::new(cost.clone()), mu.weights(), nu.weights(), p.eps, s))
}

/// Sinkhorn on the dual potentials with log-sum-exp reductions; usable for
/// any `ε > 0`.
pub fn sinkhorn_log_domain(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cost: &CostMatrix,
    p: &SinkhornParams,
) -> Result<SinkhornResult> {
    check_problem(mu, nu, cost, p)?;
    let problem = Problem { cost, mu: mu.weights(), nu: nu.weights(), tol: p.tol, max_iter: p.max_iter, mode: Violation::Absolute };
    let s = iterate_log(p.eps, &problem, None)?;
    Ok(SinkhornResult::assemble(Arc::new(cost.clone()), mu.weights(), nu.weights(), p.eps, s))
}

/// `Σ u_i (K ⊙ C)_ij v_j`. Check `res.converged` before trusting the value.
pub fn transport_cost(res: &SinkhornResult) -> f64 {
    let c = res.cost_matrix();
    let (n, m) = (c.rows(), c.cols());
    let mut total = 0.0;
    for i in 0..n {
        if res.log_u[i] == f64::NEG_INFINITY {
            continue;
        }
        let mut row = 0.0;
        for j in 0..m {
            let cij = c.get(i, j);
            row += (res.log_u[i] + res.log_v[j] - cij / res.eps).exp() * cij;
        }
        total += row;
    }
    total
}

/// `∂W_ε/∂μ = ε log u − mean(ε log u)`, tangent to the simplex.
pub fn gradient_wrt_first_marginal(res: &SinkhornResult) -> Result<Vec<f64>> {
    if !res.converged {
        return Err(Error::Contract(format!(
            "gradient requested from a non-converged Sinkhorn result (marginal error {:e})",
            res.marginal_err
        )));
    }
    if res.log_u.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("gradient needs a strictly positive first marginal".into()));
    }
    let f = res.potential_mu();
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    Ok(f.into_iter().map(|x| x - mean).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gauge {
    /// `Σ μ_i φ_μ[i] = 0`, with the opposite shift applied to `φ_ν`.
    MeanZeroUnderSource,
}

/// Kantorovich potentials. For the quadratic cost the induced map is
/// `T(x) = x − ∇φ_μ(x)` (blurred by the entropic regularization).
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialPair {
    pub phi_mu: Vec<f64>,
    pub phi_nu: Vec<f64>,
    pub gauge: Gauge,
}

/// Dual potentials of a converged solve, gauged so that `φ_μ` has zero mean
/// under `μ` while `φ_μ[i] + φ_ν[j]` is unchanged. Rows outside the support
/// of `μ` carry `−∞`.
pub fn extract_potentials(res: &SinkhornResult) -> Result<PotentialPair> {
    if !res.converged {
        return Err(Error::Contract("potentials requested from a non-converged Sinkhorn result".into()));
    }
    let f = res.potential_mu();
    let g = res.potential_nu();
    let shift: f64 = res.mu.iter().zip(&f).filter(|(w, _)| **w > 0.0).map(|(w, f)| w * f).sum();
    Ok(PotentialPair {
        phi_mu: f.iter().map(|x| x - shift).collect(),
        phi_nu: g.iter().map(|x| x + shift).collect(),
        gauge: Gauge::MeanZeroUnderSource,
    })
}

/// Repeated solves against a changing pair of marginals on a fixed cost,
/// warm-started from the previous column potential. Falls back to the
/// log-domain iteration as soon as the plain one underflows.
#[derive(Debug, Clone)]
pub(crate) struct WarmSinkhorn {
    cost: Arc<CostMatrix>,
    kernel: GibbsKernel,
    log_v: Option<Vec<f64>>,
    use_log: bool,
    tol: f64,
    max_iter: usize,
    mode: Violation,
}

impl WarmSinkhorn {
    pub fn new(cost: Arc<CostMatrix>, eps: f64, tol: f64, max_iter: usize, mode: Violation) -> Result<Self> {
        let kernel = gibbs_kernel(&cost, eps)?;
        Ok(Self { cost, kernel, log_v: None, use_log: false, tol, max_iter, mode })
    }

    pub fn solve(&mut self, mu: &[f64], nu: &[f64]) -> Result<SinkhornResult> {
        let problem = Problem { cost: &self.cost, mu, nu, tol: self.tol, max_iter: self.max_iter, mode: self.mode };
        let init = self.log_v.as_deref().filter(|lv| lv.iter().all(|x| x.is_finite()));
        let s = if self.use_log {
            iterate_log(self.kernel.eps, &problem, init)?
        } else {
            match iterate_plain(&self.kernel, &problem, init) {
                Ok(s) => s,
                Err(Error::KernelUnderflow { .. }) => {
                    self.use_log = true;
                    iterate_log(self.kernel.eps, &problem, init)?
                }
                Err(e) => return Err(e),
            }
        };
        if s.log_v.iter().all(|x| x.is_finite()) {
            self.log_v = Some(s.log_v.clone());
        }
        Ok(SinkhornResult::assemble(self.cost.clone(), mu, nu, self.kernel.eps, s))
    }
}
