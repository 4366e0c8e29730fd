//! Action grids, policies as discrete probability measures, reward fields and
//! the free-energy functional.
//!
//! A policy is stored as cell masses `w[i]` on a uniform grid of `n` cells of
//! width `h`. Wherever a density is needed (entropy, first variation) the
//! piecewise-constant density `p[i] = w[i] / h` is used, so that the entropy
//! `H(π) = Σ w log(w/h)` is the differential entropy of that density and the
//! Gibbs policy is the exact maximizer of the discrete free energy.

use std::sync::Arc;

use crate::error::{param, Error, Result};

/// Tolerance on `|Σ w − 1|` accepted by [`DiscreteMeasure::new`].
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Uniform partition of `[lo, hi]` into `n` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionGrid {
    lo: f64,
    hi: f64,
    n: usize,
    h: f64,
    centers: Vec<f64>,
}

/// Grids are shared between measures, rewards and couplings.
pub type GridRef = Arc<ActionGrid>;

/// Builds a shared grid on `[lo, hi]` with `n ≥ 2` cells.
pub fn make_grid(lo: f64, hi: f64, n: usize) -> Result<GridRef> {
    ActionGrid::new(lo, hi, n).map(Arc::new)
}

impl ActionGrid {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return param(format!("grid bounds must satisfy lo < hi, got [{lo}, {hi}]"));
        }
        if n < 2 {
            return param(format!("grid needs at least 2 cells, got {n}"));
        }
        let h = (hi - lo) / n as f64;
        let centers = (0..n).map(|i| lo + (i as f64 + 0.5) * h).collect();
        Ok(Self { lo, hi, n, h, centers })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Cell width.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Index of the cell containing `x`, clamped to the grid.
    pub fn cell_of(&self, x: f64) -> usize {
        let k = ((x - self.lo) / self.h).floor();
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.n - 1)
        }
    }

    /// Structural equality, used to check that two objects share a grid.
    pub fn same_as(&self, other: &ActionGrid) -> bool {
        std::ptr::eq(self, other) || (self.lo == other.lo && self.hi == other.hi && self.n == other.n)
    }
}

pub(crate) fn check_same(a: &ActionGrid, b: &ActionGrid) -> Result<()> {
    if a.same_as(b) {
        Ok(())
    } else {
        Err(Error::GridMismatch)
    }
}

/// Centered first differences in the interior, one-sided at the two ends.
pub fn grid_gradient(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    out[0] = (values[1] - values[0]) / h;
    out[n - 1] = (values[n - 1] - values[n - 2]) / h;
    for i in 1..n - 1 {
        out[i] = (values[i + 1] - values[i - 1]) / (2.0 * h);
    }
    out
}

/// A policy: nonnegative cell masses summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    grid: GridRef,
    w: Vec<f64>,
}

impl DiscreteMeasure {
    /// Validates `w` against the grid; the weights must already be normalized.
    pub fn new(grid: GridRef, w: Vec<f64>) -> Result<Self> {
        if w.len() != grid.len() {
            return param(format!("expected {} weights, got {}", grid.len(), w.len()));
        }
        if let Some(x) = w.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return param(format!("weights must be finite and nonnegative, found {x}"));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return param(format!("weights sum to {total}, expected 1"));
        }
        Ok(Self { grid, w })
    }

    /// Normalizes arbitrary nonnegative masses.
    pub fn from_unnormalized(grid: GridRef, mut w: Vec<f64>) -> Result<Self> {
        if w.len() != grid.len() {
            return param(format!("expected {} weights, got {}", grid.len(), w.len()));
        }
        if let Some(x) = w.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return param(format!("weights must be finite and nonnegative, found {x}"));
        }
        let total: f64 = w.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return param(format!("total mass must be positive and finite, got {total}"));
        }
        w.iter_mut().for_each(|x| *x /= total);
        Ok(Self { grid, w })
    }

    /// Normalized masses from log-weights, with max-subtraction.
    pub fn from_log_weights(grid: GridRef, log_w: &[f64]) -> Result<Self> {
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return param("log-weights must contain a finite maximum");
        }
        let w = log_w.iter().map(|l| (l - max).exp()).collect();
        Self::from_unnormalized(grid, w)
    }

    pub fn uniform(grid: GridRef) -> Self {
        let n = grid.len();
        Self { grid, w: vec![1.0 / n as f64; n] }
    }

    pub fn point_mass(grid: GridRef, cell: usize) -> Result<Self> {
        if cell >= grid.len() {
            return param(format!("cell {cell} outside a grid of {} cells", grid.len()));
        }
        let mut w = vec![0.0; grid.len()];
        w[cell] = 1.0;
        Ok(Self { grid, w })
    }

    /// Samples an unnormalized density at the cell centers.
    pub fn from_density(grid: GridRef, density: impl Fn(f64) -> f64) -> Result<Self> {
        let w = grid.centers().iter().map(|&x| density(x)).collect();
        Self::from_unnormalized(grid, w)
    }

    pub fn grid(&self) -> &GridRef {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Piecewise-constant density `w / h`.
    pub fn densities(&self) -> Vec<f64> {
        let h = self.grid.h();
        self.w.iter().map(|w| w / h).collect()
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.w.iter().all(|&w| w > 0.0)
    }

    pub fn mean(&self) -> f64 {
        self.grid.centers().iter().zip(&self.w).map(|(x, w)| x * w).sum()
    }

    /// Variance of the atomic measure placed at the cell centers.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.grid.centers().iter().zip(&self.w).map(|(x, w)| w * (x - m).powi(2)).sum()
    }
}

/// Deterministic reward sampled at the cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardField {
    grid: GridRef,
    r: Vec<f64>,
}

impl RewardField {
    pub fn new(grid: GridRef, r: Vec<f64>) -> Result<Self> {
        if r.len() != grid.len() {
            return param(format!("expected {} reward values, got {}", grid.len(), r.len()));
        }
        if r.iter().any(|x| !x.is_finite()) {
            return param("reward values must be finite");
        }
        Ok(Self { grid, r })
    }

    pub fn from_fn(grid: GridRef, f: impl Fn(f64) -> f64) -> Result<Self> {
        let r = grid.centers().iter().map(|&x| f(x)).collect();
        Self::new(grid, r)
    }

    pub fn constant(grid: GridRef, c: f64) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![c; n])
    }

    pub fn grid(&self) -> &GridRef {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.r
    }

    /// Action-gradient on the grid (centered, one-sided at the walls).
    pub fn gradient(&self) -> Vec<f64> {
        grid_gradient(&self.r, self.grid.h())
    }

    /// Largest difference quotient between neighbouring cells.
    pub fn max_abs_slope(&self) -> f64 {
        let h = self.grid.h();
        self.r.windows(2).map(|p| ((p[1] - p[0]) / h).abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeEnergyBreakdown {
    /// `K_r(π) = Σ w r`.
    pub expected_reward: f64,
    /// Convex-sign entropy `H(π) = Σ w log(w/h)`.
    pub entropy: f64,
    pub beta: f64,
    /// `J = K_r − β H`.
    pub free_energy: f64,
}

/// First variation `δJ/δπ` and its action-gradient (the transport velocity).
#[derive(Debug, Clone, PartialEq)]
pub struct FirstVariationField {
    pub grid: GridRef,
    pub density: Vec<f64>,
    pub velocity: Vec<f64>,
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        param(format!("temperature beta must be positive and finite, got {beta}"))
    }
}

/// Optimal policy `π* ∝ e^{r/β}`.
pub fn gibbs_policy(r: &RewardField, beta: f64) -> Result<DiscreteMeasure> {
    check_beta(beta)?;
    let logits: Vec<f64> = r.values().iter().map(|x| x / beta).collect();
    DiscreteMeasure::from_log_weights(r.grid().clone(), &logits)
}

pub fn expected_reward(pi: &DiscreteMeasure, r: &RewardField) -> Result<f64> {
    check_same(pi.grid(), r.grid())?;
    Ok(pi.weights().iter().zip(r.values()).map(|(w, r)| w * r).sum())
}

/// `Σ w log(w/h)` with `0 log 0 = 0`.
pub fn entropy(pi: &DiscreteMeasure) -> f64 {
    let h = pi.grid().h();
    pi.weights().iter().filter(|&&w| w > 0.0).map(|&w| w * (w / h).ln()).sum()
}

pub fn free_energy(pi: &DiscreteMeasure, r: &RewardField, beta: f64) -> Result<FreeEnergyBreakdown> {
    check_beta(beta)?;
    let expected_reward = expected_reward(pi, r)?;
    let entropy = entropy(pi);
    Ok(FreeEnergyBreakdown { expected_reward, entropy, beta, free_energy: expected_reward - beta * entropy })
}

/// `δJ/δπ = r − β(1 + log p)` per cell, together with its action-gradient.
///
/// Rejects policies with an empty cell instead of regularizing the logarithm.
pub fn first_variation(pi: &DiscreteMeasure, r: &RewardField, beta: f64) -> Result<FirstVariationField> {
    check_beta(beta)?;
    check_same(pi.grid(), r.grid())?;
    let h = pi.grid().h();
    if let Some(i) = pi.weights().iter().position(|&w| w <= 0.0) {
        return Err(Error::Domain(format!("first variation undefined: cell {i} has zero mass")));
    }
    let density: Vec<f64> = pi
        .weights()
        .iter()
        .zip(r.values())
        .map(|(&w, &r)| r - beta * (1.0 + (w / h).ln()))
        .collect();
    let velocity = grid_gradient(&density, h);
    Ok(FirstVariationField { grid: pi.grid().clone(), density, velocity })
}

/// `KL(p | q)`; returns `f64::INFINITY` when `p` is not absolutely continuous
/// with respect to `q`.
pub fn kl_divergence(p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<f64> {
    check_same(p.grid(), q.grid())?;
    let mut total = 0.0;
    for (&a, &b) in p.weights().iter().zip(q.weights()) {
        if a > 0.0 {
            if b <= 0.0 {
                return Ok(f64::INFINITY);
            }
            total += a * (a / b).ln();
        }
    }
    Ok(total.max(0.0))
}

pub fn total_variation(p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<f64> {
    check_same(p.grid(), q.grid())?;
    Ok(0.5 * p.weights().iter().zip(q.weights()).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_grid(n: usize) -> GridRef {
        make_grid(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn grid_centers_and_width() {
        let g = make_grid(0.0, 1.0, 4).unwrap();
        assert_eq!(g.centers(), &[0.125, 0.375, 0.625, 0.875]);
        assert_eq!(g.h(), 0.25);

        let g = make_grid(-2.0, 2.0, 2).unwrap();
        assert_eq!(g.centers(), &[-1.0, 1.0]);
        assert_eq!(g.h(), 2.0);
    }

    #[test]
    fn grid_rejects_bad_parameters() {
        assert!(matches!(make_grid(0.0, 1.0, 1), Err(Error::Parameter(_))));
        assert!(matches!(make_grid(1.0, 1.0, 8), Err(Error::Parameter(_))));
        assert!(matches!(make_grid(2.0, 1.0, 8), Err(Error::Parameter(_))));
    }

    #[test]
    fn cell_lookup_clamps() {
        let g = unit_grid(4);
        assert_eq!(g.cell_of(-3.0), 0);
        assert_eq!(g.cell_of(0.3), 1);
        assert_eq!(g.cell_of(1.0), 3);
        assert_eq!(g.cell_of(7.0), 3);
    }

    #[test]
    fn measure_validation() {
        let g = unit_grid(2);
        assert!(DiscreteMeasure::new(g.clone(), vec![0.5, 0.6]).is_err());
        assert!(DiscreteMeasure::new(g.clone(), vec![-0.5, 1.5]).is_err());
        assert!(DiscreteMeasure::new(g.clone(), vec![1.0]).is_err());
        assert!(DiscreteMeasure::from_unnormalized(g, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn gibbs_of_constant_reward_is_uniform() {
        let g = unit_grid(7);
        let r = RewardField::constant(g, 3.0).unwrap();
        for beta in [1e-3, 0.5, 10.0] {
            let pi = gibbs_policy(&r, beta).unwrap();
            for &w in pi.weights() {
                assert_abs_diff_eq!(w, 1.0 / 7.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn gibbs_two_cell_closed_form() {
        let beta = 0.3;
        let g = unit_grid(2);
        let r = RewardField::new(g, vec![0.0, beta * 2f64.ln()]).unwrap();
        let pi = gibbs_policy(&r, beta).unwrap();
        assert_abs_diff_eq!(pi.weights()[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pi.weights()[1], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn gibbs_argmax_follows_reward() {
        let g = unit_grid(128);
        let r = RewardField::from_fn(g.clone(), |a| -(a - 0.5).powi(2)).unwrap();
        let pi = gibbs_policy(&r, 0.1).unwrap();
        let argmax = pi
            .weights()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        // 0.5 sits on the boundary between cells 63 and 64; both contain it.
        assert!(argmax == 63 || argmax == 64, "argmax {argmax}");
        assert!(g.centers()[argmax] - 0.5 <= g.h());
    }

    #[test]
    fn gibbs_rejects_nonpositive_beta() {
        let r = RewardField::constant(unit_grid(3), 0.0).unwrap();
        assert!(gibbs_policy(&r, 0.0).is_err());
        assert!(gibbs_policy(&r, -1.0).is_err());
    }

    #[test]
    fn gibbs_survives_extreme_ratios() {
        let g = unit_grid(5);
        let r = RewardField::new(g, vec![700.0, -700.0, 0.0, 350.0, 700.0]).unwrap();
        let pi = gibbs_policy(&r, 1.0).unwrap();
        assert_abs_diff_eq!(pi.weights()[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(pi.weights()[4], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn expected_reward_examples() {
        let g = unit_grid(4);
        let r = RewardField::constant(g.clone(), 3.0).unwrap();
        assert_abs_diff_eq!(expected_reward(&DiscreteMeasure::uniform(g.clone()), &r).unwrap(), 3.0, epsilon = 1e-15);

        let r = RewardField::new(g.clone(), vec![1.0, 2.0, 5.0, 7.0]).unwrap();
        let delta = DiscreteMeasure::point_mass(g, 2).unwrap();
        assert_eq!(expected_reward(&delta, &r).unwrap(), 5.0);

        let g2 = unit_grid(2);
        let r = RewardField::new(g2.clone(), vec![0.0, 1.0]).unwrap();
        assert_eq!(expected_reward(&DiscreteMeasure::uniform(g2), &r).unwrap(), 0.5);
    }

    #[test]
    fn expected_reward_grid_mismatch() {
        let r = RewardField::constant(unit_grid(4), 1.0).unwrap();
        let pi = DiscreteMeasure::uniform(unit_grid(5));
        assert_eq!(expected_reward(&pi, &r), Err(Error::GridMismatch));
    }

    #[test]
    fn entropy_examples() {
        for n in [2, 3, 64, 1000] {
            assert_abs_diff_eq!(entropy(&DiscreteMeasure::uniform(unit_grid(n))), 0.0, epsilon = 1e-14);
            let g = make_grid(0.0, 2.0, n).unwrap();
            assert_abs_diff_eq!(entropy(&DiscreteMeasure::uniform(g)), -(2f64.ln()), epsilon = 1e-14);
        }
        let delta = DiscreteMeasure::point_mass(unit_grid(4), 1).unwrap();
        assert_abs_diff_eq!(entropy(&delta), 4f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn free_energy_examples() {
        let g = unit_grid(4);
        let r = RewardField::constant(g.clone(), 0.0).unwrap();
        let fe = free_energy(&DiscreteMeasure::uniform(g.clone()), &r, 0.7).unwrap();
        assert_abs_diff_eq!(fe.expected_reward, 0.0);
        assert_abs_diff_eq!(fe.entropy, 0.0, epsilon = 1e-15);
        assert_eq!(fe.beta, 0.7);
        assert_abs_diff_eq!(fe.free_energy, 0.0, epsilon = 1e-15);

        let delta = DiscreteMeasure::point_mass(g, 0).unwrap();
        let fe = free_energy(&delta, &r, 1.0).unwrap();
        assert_abs_diff_eq!(fe.free_energy, -(4f64.ln()), epsilon = 1e-15);
        assert_eq!(fe.free_energy, fe.expected_reward - fe.beta * fe.entropy);
    }

    #[test]
    fn first_variation_uniform_flat_reward() {
        let g = unit_grid(16);
        let r = RewardField::constant(g.clone(), 0.0).unwrap();
        let fv = first_variation(&DiscreteMeasure::uniform(g), &r, 1.0).unwrap();
        for (&d, &v) in fv.density.iter().zip(&fv.velocity) {
            assert_abs_diff_eq!(d, -1.0, epsilon = 1e-14);
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn first_variation_is_flat_at_gibbs() {
        let g = make_grid(-2.0, 2.0, 200).unwrap();
        let r = RewardField::from_fn(g, |a| (3.0 * a).sin() - 0.3 * a * a).unwrap();
        let pi = gibbs_policy(&r, 0.25).unwrap();
        let fv = first_variation(&pi, &r, 0.25).unwrap();
        let (lo, hi) = fv.density.iter().fold((f64::MAX, f64::MIN), |(a, b), &d| (a.min(d), b.max(d)));
        assert!(hi - lo <= 1e-10, "spread {}", hi - lo);
    }

    #[test]
    fn first_variation_rejects_empty_cells() {
        let g = unit_grid(4);
        let r = RewardField::constant(g.clone(), 0.0).unwrap();
        let delta = DiscreteMeasure::point_mass(g, 0).unwrap();
        assert!(matches!(first_variation(&delta, &r, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn kl_examples() {
        let g = unit_grid(2);
        let p = DiscreteMeasure::new(g.clone(), vec![1.0, 0.0]).unwrap();
        let q = DiscreteMeasure::uniform(g.clone());
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        assert_abs_diff_eq!(kl_divergence(&p, &q).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(kl_divergence(&q, &p).unwrap(), f64::INFINITY);
    }

    #[test]
    fn tv_examples() {
        let g = unit_grid(2);
        let p = DiscreteMeasure::new(g.clone(), vec![0.6, 0.4]).unwrap();
        let q = DiscreteMeasure::new(g.clone(), vec![0.4, 0.6]).unwrap();
        assert_eq!(total_variation(&p, &p).unwrap(), 0.0);
        assert_abs_diff_eq!(total_variation(&p, &q).unwrap(), 0.2, epsilon = 1e-15);
        let a = DiscreteMeasure::point_mass(g.clone(), 0).unwrap();
        let b = DiscreteMeasure::point_mass(g, 1).unwrap();
        assert_eq!(total_variation(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn gradient_stencil() {
        let v = [0.0, 1.0, 4.0, 9.0];
        assert_eq!(grid_gradient(&v, 1.0), vec![1.0, 2.0, 4.0, 5.0]);
    }
}
