//! Entropy-regularized policy optimization on a discretized continuous-action
//! bandit, treated as a Wasserstein-2 gradient flow of the free energy
//! `J(π) = E_π[r] − β ∫ π log π`.
//!
//! The same dynamics are realized four ways:
//!
//! * proximal (JKO) steps in entropic Wasserstein geometry, solved either by
//!   mirror descent on the simplex using the Sinkhorn gradient
//!   ([`flows::jko_step_mirror`]) or by generalized KL projections in
//!   coupling space ([`flows::jko_step_coupling`]);
//! * a finite-volume Fokker-Planck solver ([`fokker_planck`]);
//! * an Euler–Maruyama Langevin particle simulator ([`langevin`]).
//!
//! All of them are expected to converge to the Gibbs policy `π* ∝ e^{r/β}`
//! ([`measures::gibbs_policy`]).
//!
//! Transport costs use `c(x, y) = ½|x − y|²` throughout, so every reported
//! "W2²" value is half of the usual squared Wasserstein-2 distance.

pub mod error;
pub mod exact_ot;
pub mod flows;
pub mod fokker_planck;
pub mod langevin;
pub mod measures;
pub mod sinkhorn;
pub mod trace;

pub use error::{Error, Result};
pub use measures::{ActionGrid, DiscreteMeasure, RewardField};
