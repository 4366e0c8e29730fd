//! Euler–Maruyama simulation of `dΠ = ∂a r(Π) dt + √(2β) dB` on `[lo, hi]`
//! with reflecting walls.
//!
//! Particles are split into fixed blocks of [`BLOCK`] particles, each with
//! its own ChaCha8 stream derived from the seed, so results depend only on the
//! seed and the particle count, never on thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{param, Result};
use crate::measures::{DiscreteMeasure, GridRef, RewardField};

pub const BLOCK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    #[default]
    Reflecting,
}

#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    positions: Vec<f64>,
    lo: f64,
    hi: f64,
    rngs: Vec<ChaCha8Rng>,
    pub boundary: Boundary,
}

impl ParticleEnsemble {
    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn sample_mean(&self) -> f64 {
        self.positions.iter().sum::<f64>() / self.len() as f64
    }

    /// Unbiased sample variance.
    pub fn sample_variance(&self) -> f64 {
        let m = self.sample_mean();
        self.positions.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (self.len() as f64 - 1.0).max(1.0)
    }

    /// Advances every particle by one step in place.
    pub fn step(&mut self, drift: &Drift, beta: f64, dt: f64) {
        let noise = (2.0 * beta * dt).sqrt();
        let (lo, hi) = (self.lo, self.hi);
        self.positions.par_chunks_mut(BLOCK).zip(self.rngs.par_iter_mut()).for_each(|(xs, rng)| {
            for x in xs {
                let z: f64 = if noise > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                *x = reflect(*x + drift.at(*x) * dt + noise * z, lo, hi);
            }
        });
    }
}

fn block_rngs(seed: u64, n: usize) -> Vec<ChaCha8Rng> {
    (0..n.div_ceil(BLOCK))
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            rng
        })
        .collect()
}

/// Folds `x` back into `[lo, hi]` by mirror reflection at the walls.
pub fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    if (lo..=hi).contains(&x) {
        return x;
    }
    let len = hi - lo;
    let y = (x - lo).rem_euclid(2.0 * len);
    let y = if y > len { 2.0 * len - y } else { y };
    (lo + y).clamp(lo, hi)
}

/// Off-grid reward gradient: the grid gradient at the cell centers,
/// interpolated linearly and held constant beyond the outer centers.
#[derive(Debug, Clone)]
pub struct Drift {
    centers: Vec<f64>,
    grad: Vec<f64>,
    lo: f64,
    h: f64,
}

impl Drift {
    pub fn new(r: &RewardField) -> Self {
        let g = r.grid();
        Self { centers: g.centers().to_vec(), grad: r.gradient(), lo: g.lo(), h: g.h() }
    }

    pub fn at(&self, x: f64) -> f64 {
        let n = self.centers.len();
        let s = (x - self.lo) / self.h - 0.5;
        if s <= 0.0 {
            return self.grad[0];
        }
        let k = s.floor() as usize;
        if k >= n - 1 {
            return self.grad[n - 1];
        }
        let t = s - k as f64;
        (1.0 - t) * self.grad[k] + t * self.grad[k + 1]
    }
}

/// `N` i.i.d. draws from the piecewise-constant density of `pi0`.
pub fn init_particles(pi0: &DiscreteMeasure, n_particles: usize, seed: u64) -> Result<ParticleEnsemble> {
    if n_particles < 1 {
        return param("need at least one particle");
    }
    let grid = pi0.grid();
    let (lo, h, n) = (grid.lo(), grid.h(), grid.len());
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &w in pi0.weights() {
        acc += w;
        cdf.push(acc);
    }
    let last_nonempty = pi0.weights().iter().rposition(|&w| w > 0.0).unwrap_or(n - 1);
    let mut positions = vec![0.0; n_particles];
    let mut rngs = block_rngs(seed, n_particles);
    positions.par_chunks_mut(BLOCK).zip(rngs.par_iter_mut()).for_each(|(xs, rng)| {
        for x in xs {
            let u: f64 = rng.random::<f64>() * acc;
            let k = cdf.partition_point(|&c| c <= u).min(last_nonempty);
            let frac: f64 = rng.random::<f64>() * (1.0 - 1e-12);
            *x = lo + (k as f64 + frac) * h;
        }
    });
    Ok(ParticleEnsemble { positions, lo, hi: grid.hi(), rngs, boundary: Boundary::Reflecting })
}

/// `x ← x + ∂a r(x) dt + √(2β dt) z` for every particle, then reflection.
/// `β = 0` gives deterministic gradient ascent.
pub fn langevin_step(mut e: ParticleEnsemble, r: &RewardField, beta: f64, dt: f64) -> Result<ParticleEnsemble> {
    if !(dt > 0.0 && dt.is_finite()) {
        return param(format!("time step must be positive, got {dt}"));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return param(format!("temperature must be nonnegative, got {beta}"));
    }
    e.step(&Drift::new(r), beta, dt);
    Ok(e)
}

/// Normalized cell-count histogram.
pub fn ensemble_to_measure(e: &ParticleEnsemble, grid: &GridRef) -> Result<DiscreteMeasure> {
    if e.is_empty() {
        return param("empty ensemble");
    }
    let mut counts = vec![0.0; grid.len()];
    for &x in &e.positions {
        counts[grid.cell_of(x)] += 1.0;
    }
    DiscreteMeasure::from_unnormalized(grid.clone(), counts)
}

/// `min(0.4 h²/β, 0.01 / max|∂a r|)`.
pub fn default_dt(r: &RewardField, beta: f64) -> f64 {
    let h = r.grid().h();
    let slope = r.max_abs_slope();
    let diffusive = if beta > 0.0 { 0.4 * h * h / beta } else { f64::INFINITY };
    let advective = if slope > 0.0 { 0.01 / slope } else { f64::INFINITY };
    let dt = diffusive.min(advective);
    if dt.is_finite() {
        dt
    } else {
        0.01
    }
}

/// Particle settings used by the flow driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LangevinParams {
    pub n_particles: usize,
    pub seed: u64,
    /// `None` selects [`default_dt`].
    pub dt: Option<f64>,
}
