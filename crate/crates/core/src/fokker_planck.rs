//! Finite-volume solver for `∂t π = −∂a(π ∂a r) + β ∂aa π` with no-flux walls.
//!
//! Unknowns are cell masses. Each interface carries a two-point flux
//! `F_{i+½} = a_i w_i − b_i w_{i+1}` and the update is
//! `w_i ← w_i + dt (F_{i−½} − F_{i+½})`, with `F = 0` at both walls, so mass
//! is conserved to rounding. Three choices of `(a, b)` are offered:
//!
//! * [`Flux::ExponentialFitting`] (Scharfetter–Gummel):
//!   `a_i = β/h² B(−Δ_i)`, `b_i = β/h² B(Δ_i)` with `B(x) = x/(eˣ − 1)` and
//!   `Δ_i = (r_{i+1} − r_i)/β`. The discrete Gibbs policy `w ∝ e^{r/β}`
//!   balances every interface exactly.
//! * [`Flux::Upwind`]: first-order upwind advection plus centered diffusion.
//! * [`Flux::Centered`]: centered advection plus centered diffusion.
//!
//! Under `dt ≤ ½h² / (β + h max|∂a r|)` the explicit update is a stochastic
//! matrix for the first two choices, so positivity holds and the relative
//! entropy to the stationary state is non-increasing.

use crate::error::{param, Error, Result};
use crate::measures::{check_same, first_variation, DiscreteMeasure, RewardField};
use crate::trace::{FlowTrace, Recorder, TraceOptions};

/// Masses in `[−NEGATIVITY_FLOOR, 0)` are clamped to zero after a step.
pub const NEGATIVITY_FLOOR: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Explicit,
    /// Backward Euler; unconditionally stable.
    SemiImplicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Flux {
    #[default]
    ExponentialFitting,
    Upwind,
    Centered,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FPScheme {
    pub dt: f64,
    pub method: Method,
    pub flux: Flux,
}

/// `½h² / (β + h max|∂a r|)`.
pub fn stability_bound(r: &RewardField, beta: f64) -> f64 {
    let h = r.grid().h();
    0.5 * h * h / (beta + h * r.max_abs_slope())
}

impl FPScheme {
    pub fn new(dt: f64) -> Self {
        Self { dt, method: Method::Explicit, flux: Flux::ExponentialFitting }
    }

    /// Explicit scheme at 0.4 times the stability bound.
    pub fn auto(r: &RewardField, beta: f64) -> Self {
        Self::new(0.4 * stability_bound(r, beta))
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_flux(mut self, flux: Flux) -> Self {
        self.flux = flux;
        self
    }

    pub fn validate(&self, r: &RewardField, beta: f64) -> Result<()> {
        if !(beta > 0.0 && beta.is_finite()) {
            return param(format!("temperature beta must be positive and finite, got {beta}"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return param(format!("time step must be positive, got {}", self.dt));
        }
        if self.method == Method::Explicit {
            let bound = stability_bound(r, beta);
            if self.dt > bound {
                return param(format!(
                    "explicit time step {} exceeds the stability bound 0.5*h^2/(beta + h*max|grad r|) = {bound}",
                    self.dt
                ));
            }
        }
        Ok(())
    }
}

/// `x / (eˣ − 1)`, continuous at 0.
fn bernoulli(x: f64) -> f64 {
    if x.abs() < 1e-6 {
        1.0 - 0.5 * x + x * x / 12.0
    } else {
        x / x.exp_m1()
    }
}

/// Interface coefficients `(a_i, b_i)` for `i = 0..n−1`.
pub(crate) fn interface_coefficients(r: &[f64], h: f64, beta: f64, flux: Flux) -> (Vec<f64>, Vec<f64>) {
    let d = beta / (h * h);
    r.windows(2)
        .map(|p| {
            let v = (p[1] - p[0]) / h;
            match flux {
                Flux::ExponentialFitting => {
                    let delta = (p[1] - p[0]) / beta;
                    (d * bernoulli(-delta), d * bernoulli(delta))
                }
                Flux::Upwind => (v.max(0.0) / h + d, (-v).max(0.0) / h + d),
                Flux::Centered => (v / (2.0 * h) + d, -v / (2.0 * h) + d),
            }
        })
        .unzip()
}

/// Precomputed operator for repeated steps on a fixed field.
#[derive(Debug, Clone)]
pub(crate) struct FpOperator {
    a: Vec<f64>,
    b: Vec<f64>,
    dt: f64,
    method: Method,
}

impl FpOperator {
    pub fn new(r: &RewardField, beta: f64, s: &FPScheme) -> Result<Self> {
        s.validate(r, beta)?;
        let (a, b) = interface_coefficients(r.values(), r.grid().h(), beta, s.flux);
        Ok(Self { a, b, dt: s.dt, method: s.method })
    }

    pub fn with_dt(&self, dt: f64) -> Self {
        Self { dt, ..self.clone() }
    }

    /// One step in place; returns the number of clamped cells.
    pub fn apply(&self, w: &mut [f64]) -> Result<usize> {
        let n = w.len();
        match self.method {
            Method::Explicit => {
                let flux: Vec<f64> = (0..n - 1).map(|i| self.a[i] * w[i] - self.b[i] * w[i + 1]).collect();
                for i in 0..n {
                    let inflow = if i > 0 { flux[i - 1] } else { 0.0 };
                    let outflow = if i + 1 < n { flux[i] } else { 0.0 };
                    w[i] += self.dt * (inflow - outflow);
                }
            }
            Method::SemiImplicit => self.backward_euler(w),
        }
        let mut clamped = 0;
        for (i, x) in w.iter_mut().enumerate() {
            if *x < 0.0 {
                if *x < -NEGATIVITY_FLOOR {
                    return Err(Error::Numerical(format!("negative mass {x:e} in cell {i} after a Fokker-Planck step")));
                }
                *x = 0.0;
                clamped += 1;
            }
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        Ok(clamped)
    }

    /// Solves `(I + dt L) w_new = w` with the Thomas algorithm.
    fn backward_euler(&self, w: &mut [f64]) {
        let n = w.len();
        let dt = self.dt;
        let diag: Vec<f64> = (0..n)
            .map(|i| {
                let out_right = if i + 1 < n { self.a[i] } else { 0.0 };
                let out_left = if i > 0 { self.b[i - 1] } else { 0.0 };
                1.0 + dt * (out_right + out_left)
            })
            .collect();
        // lower[i] multiplies w_{i−1} in row i, upper[i] multiplies w_{i+1}.
        let lower = |i: usize| -dt * self.a[i - 1];
        let upper = |i: usize| -dt * self.b[i];
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        c[0] = upper(0) / diag[0];
        d[0] = w[0] / diag[0];
        for i in 1..n {
            let m = diag[i] - lower(i) * c[i - 1];
            if i + 1 < n {
                c[i] = upper(i) / m;
            }
            d[i] = (w[i] - lower(i) * d[i - 1]) / m;
        }
        w[n - 1] = d[n - 1];
        for i in (0..n - 1).rev() {
            w[i] = d[i] - c[i] * w[i + 1];
        }
    }
}

/// One conservative step; see the module docs for the flux.
pub fn fp_step(pi: &DiscreteMeasure, r: &RewardField, beta: f64, s: &FPScheme) -> Result<DiscreteMeasure> {
    check_same(pi.grid(), r.grid())?;
    let op = FpOperator::new(r, beta, s)?;
    let mut w = pi.weights().to_vec();
    op.apply(&mut w)?;
    DiscreteMeasure::new(pi.grid().clone(), w)
}

/// Integrates to horizon `t_end` with steps of at most `s.dt`, recording
/// diagnostics every `stride` steps (default: about 200 rows).
pub fn fp_solve(pi0: &DiscreteMeasure, r: &RewardField, beta: f64, t_end: f64, s: &FPScheme) -> Result<FlowTrace> {
    fp_solve_with(pi0, r, beta, t_end, s, &TraceOptions::default())
}

pub fn fp_solve_with(
    pi0: &DiscreteMeasure,
    r: &RewardField,
    beta: f64,
    t_end: f64,
    s: &FPScheme,
    opts: &TraceOptions,
) -> Result<FlowTrace> {
    check_same(pi0.grid(), r.grid())?;
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return param(format!("horizon must be finite and nonnegative, got {t_end}"));
    }
    let op = FpOperator::new(r, beta, s)?;
    let n_steps = (t_end / s.dt).ceil() as usize;
    let dt = if n_steps > 0 { t_end / n_steps as f64 } else { s.dt };
    let op = op.with_dt(dt);
    let stride = if opts.stride > 0 { opts.stride } else { n_steps.div_ceil(200).max(1) };

    let mut rec = Recorder::new(pi0, r, beta, opts, stride, true)?;
    rec.observe(0, 0.0, pi0)?;
    let mut w = pi0.weights().to_vec();
    for k in 1..=n_steps {
        if let Err(e) = op.apply(&mut w) {
            return rec.finish((k - 1) as f64 * dt, Some(e));
        }
        let pi = DiscreteMeasure::new(pi0.grid().clone(), w.clone())?;
        rec.observe(k, k as f64 * dt, &pi)?;
    }
    rec.finish(n_steps as f64 * dt, None)
}

/// `‖∂a(π ∂a δJ/δπ)‖∞` on the grid, in density units.
///
/// The interface flux is `p̄_{i+½} (d_{i+1} − d_i)/h` with `d` the first
/// variation and `p̄` the arithmetic mean of the neighbouring densities; the
/// walls carry no flux. The Gibbs policy makes `d` constant, so the residual
/// vanishes there up to rounding.
pub fn stationary_residual(pi: &DiscreteMeasure, r: &RewardField, beta: f64) -> Result<f64> {
    let fv = first_variation(pi, r, beta)?;
    let h = pi.grid().h();
    let p = pi.densities();
    let d = &fv.density;
    let n = p.len();
    let flux: Vec<f64> = (0..n - 1).map(|i| 0.5 * (p[i] + p[i + 1]) * (d[i + 1] - d[i]) / h).collect();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let right = if i + 1 < n { flux[i] } else { 0.0 };
        let left = if i > 0 { flux[i - 1] } else { 0.0 };
        worst = worst.max(((right - left) / h).abs());
    }
    Ok(worst)
}
