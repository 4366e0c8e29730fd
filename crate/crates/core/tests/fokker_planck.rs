use policy_transport::fokker_planck::*;
use policy_transport::measures::{free_energy, gibbs_policy, make_grid, total_variation, GridRef};
use policy_transport::trace::TraceOptions;
use policy_transport::{DiscreteMeasure, Error, RewardField};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bimodal(g: &GridRef) -> RewardField {
    RewardField::from_fn(g.clone(), |a| {
        (-(a - 0.6) * (a - 0.6) / 0.405).exp() + 0.8 * (-(a + 0.6) * (a + 0.6) / 0.405).exp()
    })
    .unwrap()
}

/// Cell averages of `e^{r(a)/β}` by 64-point Gauss-free midpoint refinement.
fn cell_averaged_gibbs(g: &GridRef, r: impl Fn(f64) -> f64, beta: f64) -> DiscreteMeasure {
    let sub = 64;
    let h = g.h();
    let w = g
        .centers()
        .iter()
        .map(|c| {
            (0..sub)
                .map(|k| {
                    let a = c - 0.5 * h + (k as f64 + 0.5) * h / sub as f64;
                    (r(a) / beta).exp()
                })
                .sum::<f64>()
        })
        .collect();
    DiscreteMeasure::from_unnormalized(g.clone(), w).unwrap()
}

#[test]
fn heat_flow_grows_variance_linearly() {
    let g = make_grid(-1.0, 1.0, 256).unwrap();
    let r = RewardField::constant(g.clone(), 0.0).unwrap();
    let (s0, beta, t) = (0.1, 0.05, 0.04);
    let pi0 = DiscreteMeasure::from_density(g, |a| (-a * a / (2.0 * s0 * s0)).exp()).unwrap();
    let expect = s0 * s0 + 2.0 * beta * t;
    for method in [Method::Explicit, Method::SemiImplicit] {
        let s = FPScheme::auto(&r, beta).with_method(method);
        let tr = fp_solve(&pi0, &r, beta, t, &s).unwrap();
        let var = tr.final_measure.variance();
        assert!((var - expect).abs() / expect < 0.02, "{method:?}: {var} vs {expect}");
        assert!((tr.last().time - t).abs() < 1e-15);
    }
}

#[test]
fn flat_reward_keeps_uniform() {
    let g = make_grid(-1.0, 1.0, 64).unwrap();
    let r = RewardField::constant(g.clone(), 0.0).unwrap();
    let pi = DiscreteMeasure::uniform(g);
    let tr = fp_solve(&pi, &r, 0.3, 1.0, &FPScheme::auto(&r, 0.3)).unwrap();
    for (a, b) in tr.final_measure.weights().iter().zip(pi.weights()) {
        assert!((a - b).abs() <= 1e-15);
    }
}

#[test]
fn gibbs_is_stationary_on_a_fine_grid() {
    let g = make_grid(-2.0, 2.0, 512).unwrap();
    let r = RewardField::from_fn(g.clone(), |a| -0.5 * a * a).unwrap();
    for beta in [0.1, 0.5] {
        let pi = gibbs_policy(&r, beta).unwrap();
        let s = FPScheme::auto(&r, beta);
        let next = fp_step(&pi, &r, beta, &s).unwrap();
        let change = next.weights().iter().zip(pi.weights()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / s.dt;
        let top = pi.weights().iter().cloned().fold(0.0, f64::max);
        assert!(change <= 1e-6 * top, "{change}");
    }
}

#[test]
fn bimodal_terminal_measure_matches_gibbs() {
    let g = make_grid(-2.0, 2.0, 128).unwrap();
    let r = bimodal(&g);
    let beta = 0.2;
    let s = FPScheme::new(0.002).with_method(Method::SemiImplicit);
    let tr = fp_solve(&DiscreteMeasure::uniform(g.clone()), &r, beta, 60.0, &s).unwrap();
    let last = tr.last();
    assert!(last.residual < 1e-8, "{}", last.residual);
    let gibbs = gibbs_policy(&r, beta).unwrap();
    assert!(total_variation(&tr.final_measure, &gibbs).unwrap() < 5e-3);
    // Two modes, the taller one on the right.
    let w = tr.final_measure.weights();
    let right = w[g.cell_of(0.6)];
    let left = w[g.cell_of(-0.6)];
    assert!(right > left && left > w[g.cell_of(0.0)]);
}

#[test]
fn hot_limit_is_near_uniform_and_matches_gibbs() {
    let g = make_grid(-1.0, 1.0, 64).unwrap();
    let r = RewardField::from_fn(g.clone(), |a| (2.0 * a).sin()).unwrap();
    let beta = 5.0;
    let s = FPScheme::new(0.01).with_method(Method::SemiImplicit);
    let tr = fp_solve(&DiscreteMeasure::point_mass(g.clone(), 3).unwrap(), &r, beta, 2.0, &s).unwrap();
    assert!(total_variation(&tr.final_measure, &gibbs_policy(&r, beta).unwrap()).unwrap() < 1e-3);
}

#[test]
fn zero_horizon_returns_the_start() {
    let g = make_grid(0.0, 1.0, 10).unwrap();
    let r = RewardField::from_fn(g.clone(), |a| a).unwrap();
    let pi = DiscreteMeasure::from_density(g, |a| 1.0 + a).unwrap();
    let tr = fp_solve(&pi, &r, 0.5, 0.0, &FPScheme::auto(&r, 0.5)).unwrap();
    assert_eq!(tr.diagnostics.len(), 1);
    assert_eq!(tr.final_measure, pi);
    assert_eq!(tr.measures, vec![pi]);
}

#[test]
fn unstable_step_is_rejected_with_the_bound() {
    let g = make_grid(0.0, 1.0, 50).unwrap();
    let r = RewardField::from_fn(g.clone(), |a| a).unwrap();
    let s = FPScheme::new(2.0 * stability_bound(&r, 0.1));
    match fp_step(&DiscreteMeasure::uniform(g), &r, 0.1, &s) {
        Err(Error::Parameter(msg)) => assert!(msg.contains("stability bound")),
        other => panic!("{other:?}"),
    }
}

fn refinement_study(f: impl Fn(f64) -> f64 + Copy, beta: f64) -> Vec<f64> {
    [64, 128, 256]
        .iter()
        .map(|&n| {
            let g = make_grid(-2.0, 2.0, n).unwrap();
            let r = RewardField::from_fn(g.clone(), f).unwrap();
            stationary_residual(&cell_averaged_gibbs(&g, f, beta), &r, beta).unwrap()
        })
        .collect()
}

#[test]
fn residual_of_cell_averaged_gibbs_is_second_order() {
    // r' and r''' vanish at the walls, so the averaging error is as smooth
    // there as inside.
    let res = refinement_study(|a| (std::f64::consts::FRAC_PI_2 * a).cos(), 0.5);
    for pair in res.windows(2) {
        let ratio = pair[0] / pair[1];
        assert!((3.5..4.5).contains(&ratio), "{res:?}");
    }
    let h = 4.0 / 256.0;
    println!("measured C = {:.3}", res[2] / (h * h));
}

#[test]
fn residual_degrades_to_first_order_at_walls_with_sloped_rewards() {
    // A reward sloped at the wall leaves an O(h²) interface flux next to a
    // zero wall flux, an O(h) divergence in the boundary cell.
    let res = refinement_study(|a| -0.5 * a * a, 0.5);
    assert!(res.windows(2).all(|p| p[0] / p[1] > 1.8), "{res:?}");
}

#[test]
fn residual_examples() {
    let g = make_grid(-2.0, 2.0, 128).unwrap();
    let r = RewardField::from_fn(g.clone(), |a| -0.5 * a * a).unwrap();
    let uniform = DiscreteMeasure::uniform(g.clone());
    assert!(stationary_residual(&uniform, &r, 0.5).unwrap() > 1e-2);
    let flat = RewardField::constant(g, 0.0).unwrap();
    assert!(stationary_residual(&uniform, &flat, 0.5).unwrap() <= 1e-15);
    assert!(stationary_residual(&gibbs_policy(&r, 0.5).unwrap(), &r, 0.5).unwrap() < 1e-10);
}

#[test]
fn upwind_stationary_error_shrinks_with_refinement() {
    let beta = 0.2;
    let tv: Vec<f64> = [32, 64, 128]
        .iter()
        .map(|&n| {
            let g = make_grid(-2.0, 2.0, n).unwrap();
            let r = bimodal(&g);
            let s = FPScheme::new(0.01).with_method(Method::SemiImplicit).with_flux(Flux::Upwind);
            let opts = TraceOptions { w2_eps: None, keep_measures: false, ..Default::default() };
            let tr = fp_solve_with(&DiscreteMeasure::uniform(g), &r, beta, 80.0, &s, &opts).unwrap();
            total_variation(&tr.final_measure, &gibbs_policy(&r, beta).unwrap()).unwrap()
        })
        .collect();
    assert!(tv[0] > tv[1] && tv[1] > tv[2], "{tv:?}");
}

#[test]
fn solution_at_fixed_time_converges_under_refinement() {
    // Compare coarse solutions with a fine one through cell-aggregated masses
    // on the coarsest grid.
    let beta = 0.2;
    let t = 0.5;
    let solve = |n: usize| {
        let g = make_grid(-2.0, 2.0, n).unwrap();
        let r = bimodal(&g);
        let pi0 = DiscreteMeasure::from_density(g.clone(), |a| (-(a + 1.2) * (a + 1.2) / 0.08).exp()).unwrap();
        let s = FPScheme::new(1e-4).with_method(Method::SemiImplicit);
        let opts = TraceOptions { w2_eps: None, keep_measures: false, ..Default::default() };
        fp_solve_with(&pi0, &r, beta, t, &s, &opts).unwrap().final_measure
    };
    let coarse = |pi: &DiscreteMeasure| -> Vec<f64> {
        let k = pi.len() / 16;
        pi.weights().chunks(k).map(|c| c.iter().sum()).collect()
    };
    let reference = coarse(&solve(512));
    let err: Vec<f64> = [64, 128]
        .iter()
        .map(|&n| coarse(&solve(n)).iter().zip(&reference).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .collect();
    assert!(err[1] < err[0], "{err:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn steps_conserve_mass_and_positivity(
        seed in any::<u64>(),
        n in 4usize..60,
        beta in 0.01..2.0f64,
        semi in any::<bool>(),
        upwind in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = make_grid(-1.0, 1.0, n).unwrap();
        let r = RewardField::new(g.clone(), (0..n).map(|_| 2.0 * rng.random::<f64>()).collect()).unwrap();
        let w: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random() }).chain([1.0]).collect();
        let w = w[1..].to_vec();
        let mut pi = DiscreteMeasure::from_unnormalized(g, w).unwrap();
        let s = FPScheme::auto(&r, beta)
            .with_method(if semi { Method::SemiImplicit } else { Method::Explicit })
            .with_flux(if upwind { Flux::Upwind } else { Flux::ExponentialFitting });
        for _ in 0..20 {
            pi = fp_step(&pi, &r, beta, &s).unwrap();
            prop_assert!((pi.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-14);
            prop_assert!(pi.weights().iter().all(|w| *w >= 0.0));
        }
    }

    #[test]
    fn free_energy_never_decreases(
        seed in any::<u64>(),
        n in 8usize..48,
        beta in 0.05..1.0f64,
        semi in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = make_grid(-2.0, 2.0, n).unwrap();
        let amp: Vec<f64> = (0..3).map(|_| rng.random::<f64>() - 0.5).collect();
        let r = RewardField::from_fn(g.clone(), |a| amp[0] * a + amp[1] * (2.0 * a).sin() + amp[2] * a * a).unwrap();
        let pi0 = DiscreteMeasure::from_unnormalized(g, (0..n).map(|_| rng.random::<f64>() + 0.01).collect()).unwrap();
        let s = FPScheme::auto(&r, beta).with_method(if semi { Method::SemiImplicit } else { Method::Explicit });
        let opts = TraceOptions { stride: 1, w2_eps: None, keep_measures: false };
        let tr = fp_solve_with(&pi0, &r, beta, 0.5, &s, &opts).unwrap();
        prop_assert!(tr.monotonicity_tracked);
        prop_assert!(tr.worst_free_energy_drop <= 1e-10, "drop {}", tr.worst_free_energy_drop);
        let j: Vec<f64> = tr.diagnostics.iter().map(|d| d.free_energy).collect();
        prop_assert!(j.windows(2).all(|p| p[1] >= p[0] - 1e-10));
        prop_assert!(free_energy(&tr.final_measure, &r, beta).unwrap().free_energy >= j[0] - 1e-10);
    }
}
