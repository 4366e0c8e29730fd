//! Slow, trusted transport oracles used to validate the Sinkhorn solvers and
//! the flows: the closed-form 1-D quadratic transport, the Gaussian formula,
//! and a brute-force entropic solver for tiny instances.

use nalgebra::{DMatrix, DVector};

use crate::error::{param, Error, Result};
use crate::measures::DiscreteMeasure;
use crate::sinkhorn::{CostMatrix, Coupling};

/// Largest `n·m` accepted by [`brute_force_entropic_ot`].
pub const BRUTE_FORCE_MAX_CELLS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportTriple {
    pub source: usize,
    pub target: usize,
    pub mass: f64,
}

/// Co-monotone (north-west corner) transport plan in sparse form.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MonotoneCoupling {
    pub triples: Vec<TransportTriple>,
}

impl MonotoneCoupling {
    pub fn row_sums(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for t in &self.triples {
            out[t.source] += t.mass;
        }
        out
    }

    pub fn col_sums(&self, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; m];
        for t in &self.triples {
            out[t.target] += t.mass;
        }
        out
    }

    pub fn total_mass(&self) -> f64 {
        self.triples.iter().map(|t| t.mass).sum()
    }

    pub fn is_monotone(&self) -> bool {
        self.triples.windows(2).all(|p| p[1].source >= p[0].source && p[1].target >= p[0].target)
    }
}

/// Exact optimal transport on the line for `c = ½|x − y|²`.
///
/// The quantile coupling is optimal for convex costs, so the plan is built by
/// merging the two cumulative distributions. The measures may live on
/// different grids.
pub fn w2_exact_1d(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> (f64, MonotoneCoupling) {
    let x = mu.grid().centers();
    let y = nu.grid().centers();
    let a = mu.weights();
    let b = nu.weights();

    let mut triples = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0], b[0]);
    let mut cost = 0.0;
    while i < a.len() && j < b.len() {
        if ra <= 0.0 {
            i += 1;
            if i < a.len() {
                ra = a[i];
            }
            continue;
        }
        if rb <= 0.0 {
            j += 1;
            if j < b.len() {
                rb = b[j];
            }
            continue;
        }
        let m = ra.min(rb);
        triples.push(TransportTriple { source: i, target: j, mass: m });
        cost += 0.5 * m * (x[i] - y[j]).powi(2);
        // Exhaust exactly one side (both when equal) so that rounding never
        // leaves a phantom sliver of mass behind.
        if ra <= rb {
            rb -= m;
            ra = 0.0;
        } else {
            ra -= m;
            rb = 0.0;
        }
    }
    (cost, MonotoneCoupling { triples })
}

/// `½((m1 − m2)² + (s1 − s2)²)`: the ½-scaled squared W2 distance between
/// two 1-D Gaussians.
pub fn w2_gaussian_closed_form(m1: f64, s1: f64, m2: f64, s2: f64) -> Result<f64> {
    if !(s1 > 0.0 && s2 > 0.0) {
        return param(format!("standard deviations must be positive, got {s1} and {s2}"));
    }
    Ok(0.5 * ((m1 - m2).powi(2) + (s1 - s2).powi(2)))
}

/// Entropic transport by direct minimization of
/// `⟨C, γ⟩ + ε Σ γ (log γ − 1)` over the transport polytope.
///
/// The polytope is parameterized by its affine hull `γ = γ₀ + N z`, where the
/// columns of `N` span the matrices with zero row and column sums, and the
/// strictly convex objective is minimized by damped Newton steps until the
/// reduced gradient falls below `1e-12`. No diagonal-scaling structure is
/// assumed, which keeps this independent of the Sinkhorn iteration it checks.
pub fn brute_force_entropic_ot(mu: &DiscreteMeasure, nu: &DiscreteMeasure, eps: f64) -> Result<Coupling> {
    brute_force_entropic_ot_from(mu, nu, eps, None)
}

/// As [`brute_force_entropic_ot`], starting from a caller-supplied strictly
/// positive feasible coupling (row-major, `n × m`).
pub fn brute_force_entropic_ot_from(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    eps: f64,
    start: Option<&[f64]>,
) -> Result<Coupling> {
    let (n, m) = (mu.len(), nu.len());
    if n * m > BRUTE_FORCE_MAX_CELLS {
        return param(format!("brute-force oracle limited to n·m ≤ {BRUTE_FORCE_MAX_CELLS}, got {n}×{m}"));
    }
    if !(eps > 0.0) {
        return param(format!("eps must be positive, got {eps}"));
    }
    let cost = CostMatrix::quadratic(mu.grid(), nu.grid());

    let rows: Vec<usize> = (0..n).filter(|&i| mu.weights()[i] > 0.0).collect();
    let cols: Vec<usize> = (0..m).filter(|&j| nu.weights()[j] > 0.0).collect();
    let (p, q) = (rows.len(), cols.len());

    // Restricted problem, row-major p × q.
    let c: Vec<f64> = rows.iter().flat_map(|&i| cols.iter().map(move |&j| (i, j))).map(|(i, j)| cost.get(i, j)).collect();
    let mut gamma: Vec<f64> = match start {
        Some(s) => {
            if s.len() != n * m {
                return param("start coupling has the wrong shape");
            }
            rows.iter().flat_map(|&i| cols.iter().map(move |&j| s[i * m + j])).collect()
        }
        None => rows
            .iter()
            .flat_map(|&i| cols.iter().map(move |&j| mu.weights()[i] * nu.weights()[j]))
            .collect(),
    };
    if gamma.iter().any(|&g| !(g > 0.0)) {
        return param("start coupling must be strictly positive on the support");
    }

    let d = (p - 1) * (q - 1);
    if d > 0 {
        // Basis of the zero-marginal subspace: E_ab − E_a,q−1 − E_p−1,b + E_p−1,q−1.
        let mut basis = DMatrix::<f64>::zeros(p * q, d);
        for a in 0..p - 1 {
            for b in 0..q - 1 {
                let k = a * (q - 1) + b;
                basis[(a * q + b, k)] = 1.0;
                basis[(a * q + q - 1, k)] = -1.0;
                basis[((p - 1) * q + b, k)] = -1.0;
                basis[((p - 1) * q + q - 1, k)] = 1.0;
            }
        }
        let objective = |g: &[f64]| -> f64 { g.iter().zip(&c).map(|(&g, &c)| c * g + eps * g * (g.ln() - 1.0)).sum() };

        let mut converged = false;
        for _ in 0..500 {
            let grad_full = DVector::from_iterator(p * q, gamma.iter().zip(&c).map(|(&g, &c)| c + eps * g.ln()));
            let grad = basis.transpose() * &grad_full;
            if grad.amax() <= 1e-12 {
                converged = true;
                break;
            }
            let curvature = DMatrix::from_diagonal(&DVector::from_iterator(p * q, gamma.iter().map(|&g| eps / g)));
            let hessian = basis.transpose() * curvature * &basis;
            let step = hessian
                .cholesky()
                .ok_or_else(|| Error::Numerical("brute-force Hessian lost positive definiteness".into()))?
                .solve(&(-&grad));
            let dir = &basis * step;

            let f0 = objective(&gamma);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = gamma.iter().zip(dir.iter()).map(|(g, d)| g + t * d).collect();
                if trial.iter().all(|&g| g > 0.0) && objective(&trial) <= f0 + 1e-15 * f0.abs().max(1.0) {
                    gamma = trial;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                // Already at the rounding floor of the objective.
                converged = grad.amax() <= 1e-9;
                break;
            }
        }
        if !converged {
            return Err(Error::Numerical("brute-force entropic OT did not reach stationarity".into()));
        }
    }

    let mut data = vec![0.0; n * m];
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            data[i * m + j] = gamma[a * q + b];
        }
    }
    Ok(Coupling::new(mu.grid().clone(), nu.grid().clone(), data))
}
