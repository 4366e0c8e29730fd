use approx::assert_relative_eq;
use policy_transport::measures::*;
use policy_transport::{DiscreteMeasure, RewardField};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Exponential spacings give a uniform draw on the simplex.
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn catalog(g: &GridRef) -> Vec<RewardField> {
    vec![
        RewardField::from_fn(g.clone(), |a| -0.5 * a * a).unwrap(),
        RewardField::from_fn(g.clone(), |a| {
            (-(a - 0.6) * (a - 0.6) / 0.405).exp() + 0.8 * (-(a + 0.6) * (a + 0.6) / 0.405).exp()
        })
        .unwrap(),
        RewardField::from_fn(g.clone(), |a| a).unwrap(),
    ]
}

#[test]
fn spec_grid_examples() {
    let g = make_grid(0.0, 1.0, 4).unwrap();
    assert_eq!(g.centers(), &[0.125, 0.375, 0.625, 0.875]);
    assert_eq!(g.h(), 0.25);
    let g = make_grid(-2.0, 2.0, 2).unwrap();
    assert_eq!(g.centers(), &[-1.0, 1.0]);
    assert_eq!(g.h(), 2.0);
    assert!(make_grid(0.0, 1.0, 1).is_err());
}

#[test]
fn quadratic_gibbs_peaks_at_the_maximizer() {
    let g = make_grid(0.0, 1.0, 128).unwrap();
    let r = RewardField::from_fn(g.clone(), |a| -(a - 0.5) * (a - 0.5)).unwrap();
    let pi = gibbs_policy(&r, 0.1).unwrap();
    let w = pi.weights();
    let best = w[g.cell_of(0.5)];
    assert!(w.iter().all(|&x| x <= best));
}

#[test]
fn point_mass_free_energy() {
    let g = make_grid(0.0, 1.0, 4).unwrap();
    let pi = DiscreteMeasure::point_mass(g.clone(), 2).unwrap();
    let r = RewardField::constant(g, 0.0).unwrap();
    let fe = free_energy(&pi, &r, 1.0).unwrap();
    assert_relative_eq!(entropy(&pi), 4f64.ln(), epsilon = 1e-15);
    assert_relative_eq!(fe.free_energy, -(4f64.ln()), epsilon = 1e-15);
}

#[test]
fn gibbs_beats_random_simplex_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = make_grid(-2.0, 2.0, 24).unwrap();
    for r in catalog(&g) {
        for beta in [0.1, 0.5] {
            let best = free_energy(&gibbs_policy(&r, beta).unwrap(), &r, beta).unwrap().free_energy;
            for _ in 0..1000 {
                let pi = DiscreteMeasure::new(g.clone(), random_simplex(&mut rng, 24)).unwrap();
                assert!(free_energy(&pi, &r, beta).unwrap().free_energy <= best + 1e-12);
            }
        }
    }
}

#[test]
fn gibbs_beats_local_perturbations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = make_grid(-2.0, 2.0, 40).unwrap();
    for r in catalog(&g) {
        let gibbs = gibbs_policy(&r, 0.3).unwrap();
        let best = free_energy(&gibbs, &r, 0.3).unwrap().free_energy;
        for _ in 0..100 {
            let w: Vec<f64> = gibbs.weights().iter().map(|w| w * (1.0 + 0.05 * (rng.random::<f64>() - 0.5))).collect();
            let pi = DiscreteMeasure::from_unnormalized(g.clone(), w).unwrap();
            assert!(free_energy(&pi, &r, 0.3).unwrap().free_energy < best);
        }
    }
}

/// Finite-difference oracle for the first variation: 50 random (π, ξ) pairs
/// per catalog field.
#[test]
fn first_variation_matches_gateaux_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let g = make_grid(-2.0, 2.0, 32).unwrap();
    for r in catalog(&g) {
        for _ in 0..50 {
            let beta = 0.05 + rng.random::<f64>();
            // Forward differences carry a t·Σξ²/π truncation term, so keep π
            // away from the simplex boundary.
            let p: Vec<f64> = random_simplex(&mut rng, 32).iter().map(|w| 0.5 * w + 0.5 / 32.0).collect();
            let q = random_simplex(&mut rng, 32);
            let pi = DiscreteMeasure::new(g.clone(), p.clone()).unwrap();
            let xi: Vec<f64> = q.iter().zip(&p).map(|(a, b)| a - b).collect();
            let t = 1e-6;
            let moved: Vec<f64> = p.iter().zip(&xi).map(|(a, x)| a + t * x).collect();
            let moved = DiscreteMeasure::new(g.clone(), moved).unwrap();
            let fd = (free_energy(&moved, &r, beta).unwrap().free_energy - free_energy(&pi, &r, beta).unwrap().free_energy) / t;
            let fv = first_variation(&pi, &r, beta).unwrap();
            let analytic: f64 = fv.density.iter().zip(&xi).map(|(d, x)| d * x).sum();
            assert!((fd - analytic).abs() <= 1e-4 * analytic.abs().max(1.0), "fd {fd} vs {analytic}");
        }
    }
}

#[test]
fn first_variation_velocity_is_the_gradient_of_the_density() {
    let g = make_grid(-1.0, 1.0, 16).unwrap();
    let r = RewardField::from_fn(g.clone(), |a| a * a * a).unwrap();
    let pi = DiscreteMeasure::from_density(g.clone(), |a| 1.0 + 0.5 * a).unwrap();
    let fv = first_variation(&pi, &r, 0.2).unwrap();
    assert_eq!(fv.velocity, grid_gradient(&fv.density, g.h()));
}

fn grid_strategy() -> impl Strategy<Value = (f64, f64, usize)> {
    (-5.0..5.0f64, 0.1..6.0f64, 2usize..80).prop_map(|(lo, len, n)| (lo, lo + len, n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn gibbs_is_a_valid_measure(
        (lo, hi, n) in grid_strategy(),
        log_beta in -6.0..6.0f64,
        seed in any::<u64>(),
        scale in 0.0..100.0f64,
    ) {
        let g = make_grid(lo, hi, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..n).map(|_| scale * (rng.random::<f64>() - 0.5)).collect();
        let r = RewardField::new(g.clone(), vals).unwrap();
        let pi = gibbs_policy(&r, 10f64.powf(log_beta)).unwrap();
        prop_assert!(pi.weights().iter().all(|w| *w >= 0.0 && w.is_finite()));
        prop_assert!((pi.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        // Rebuilding through the validating constructor must succeed.
        prop_assert!(DiscreteMeasure::new(g, pi.into_weights()).is_ok());
    }

    #[test]
    fn first_variation_is_constant_at_gibbs(
        (lo, hi, n) in grid_strategy(),
        beta in 0.05..5.0f64,
        seed in any::<u64>(),
    ) {
        let g = make_grid(lo, hi, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let r = RewardField::new(g, vals).unwrap();
        let fv = first_variation(&gibbs_policy(&r, beta).unwrap(), &r, beta).unwrap();
        let (mn, mx) = fv.density.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &d| (a.min(d), b.max(d)));
        prop_assert!(mx - mn <= 1e-10, "spread {}", mx - mn);
    }

    #[test]
    fn uniform_entropy_is_minus_log_length((lo, hi, n) in grid_strategy()) {
        let g = make_grid(lo, hi, n).unwrap();
        let h = entropy(&DiscreteMeasure::uniform(g));
        prop_assert!((h + (hi - lo).ln()).abs() <= 1e-12);
    }

    #[test]
    fn breakdown_is_consistent(
        n in 2usize..50,
        beta in 0.01..10.0f64,
        seed in any::<u64>(),
    ) {
        let g = make_grid(0.0, 1.0, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = DiscreteMeasure::new(g.clone(), random_simplex(&mut rng, n)).unwrap();
        let r = RewardField::from_fn(g, |a| (3.0 * a).sin()).unwrap();
        let fe = free_energy(&pi, &r, beta).unwrap();
        prop_assert_eq!(fe.free_energy, fe.expected_reward - beta * fe.entropy);
        prop_assert_eq!(fe.beta, beta);
    }

    #[test]
    fn divergences_behave(n in 2usize..40, seed in any::<u64>()) {
        let g = make_grid(0.0, 1.0, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = DiscreteMeasure::new(g.clone(), random_simplex(&mut rng, n)).unwrap();
        let q = DiscreteMeasure::new(g, random_simplex(&mut rng, n)).unwrap();
        let tv = total_variation(&p, &q).unwrap();
        prop_assert!((0.0..=1.0).contains(&tv));
        prop_assert_eq!(tv, total_variation(&q, &p).unwrap());
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-15);
        // Pinsker.
        prop_assert!(tv <= (0.5 * kl_divergence(&p, &q).unwrap()).sqrt() + 1e-12);
    }
}
