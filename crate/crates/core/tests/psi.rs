mod common;

use common::*;
use proptest::prelude::*;
use qedlab::phasetype::PhaseTypeParams;
use qedlab::psi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params_for(service: &PhaseTypeParams, alpha: f64) -> PsiParams {
    PsiParams::new(alpha, service.r().clone(), service.p().clone())
}

fn residual_of(input: &InputPath, params: &PsiParams, grid: &Grid) -> f64 {
    let out = psi(input, params, grid).unwrap();
    residual(&out, input, params, grid).unwrap()
}

#[test]
fn step_inputs_converge_at_first_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = params_for(&erlang2(), 0.7);
    for _ in 0..5 {
        let levels = piecewise_constant(2, 2.0, 8, &mut rng);
        let coarse = Grid::new(2.0, 1e-3).unwrap();
        let fine = coarse.refined();
        let r1 = residual_of(&sample_steps(&coarse, 2, &levels), &params, &coarse);
        let r2 = residual_of(&sample_steps(&fine, 2, &levels), &params, &fine);
        let factor = r1 / r2;
        assert!((1.8..=2.2).contains(&factor), "factor {factor}");
    }
}

#[test]
fn smooth_inputs_converge_at_least_at_first_order() {
    let params = params_for(&erlang2(), 0.7);
    let f = |t: f64| (1.0 + (2.0 * t).sin(), vec![0.5 * t.cos(), -0.5 * t.cos()]);
    let coarse = Grid::new(2.0, 1e-2).unwrap();
    let fine = coarse.refined();
    let r1 = residual_of(&InputPath::from_fn(&coarse, 2, f), &params, &coarse);
    let r2 = residual_of(&InputPath::from_fn(&fine, 2, f), &params, &fine);
    assert!(r1 / r2 >= 1.8, "factor {}", r1 / r2);
}

#[test]
fn schemes_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let service = PhaseTypeParams::random(3, &mut rng);
    let params = params_for(&service, 1.3);
    let grid = Grid::from_steps(params.default_dt(), 3000).unwrap();
    let levels = piecewise_constant(3, grid.t_end(), 6, &mut rng);
    let input = sample_steps(&grid, 3, &levels);
    let a = psi_with(&input, &params, &grid, Scheme::March).unwrap();
    let b = psi_with(&input, &params, &grid, Scheme::Sweep).unwrap();
    assert!(a.sup_distance(&b) <= 10.0 * grid.dt, "{}", a.sup_distance(&b));
}

#[test]
fn homogeneity_within_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let service = PhaseTypeParams::random(3, &mut rng);
    let params = params_for(&service, 0.9);
    let grid = Grid::from_steps(1e-3, 2000).unwrap();
    for _ in 0..20 {
        let input = sample_steps(&grid, 3, &piecewise_constant(3, grid.t_end(), 5, &mut rng));
        let out = psi(&input, &params, &grid).unwrap();
        let mag = magnitude(&input, &out);
        for b in [0.5, 2.0, 10.0] {
            let dev = check_homogeneity(&input, b, &params, &grid).unwrap();
            assert!(dev <= 10.0 * grid.dt * b * mag, "b = {b}: {dev}");
        }
    }
}

#[test]
fn scalar_lipschitz_below_gronwall() {
    let (r, p) = scalar_r(2.0);
    let params = PsiParams::new(1.5, r, p);
    for t_end in [1.0, 4.0] {
        let grid = Grid::new(t_end, 1e-3).unwrap();
        for (x0, eps) in [(1.0, 0.1), (-1.0, 0.3), (0.05, -0.1)] {
            let y1 = InputPath::from_fn(&grid, 1, |_| (x0, vec![0.0]));
            let y2 = InputPath::from_fn(&grid, 1, |_| (x0 + eps, vec![0.0]));
            let ratio = check_lipschitz(&y1, &y2, &params, &grid).unwrap();
            assert!(ratio <= (2.0f64 * t_end).exp() + 1e-2, "{ratio}");
        }
    }
}

#[test]
fn lipschitz_ratio_grows_with_horizon_and_is_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let params = params_for(&erlang2(), 0.5);
    let short = Grid::new(1.0, 2e-3).unwrap();
    let long = Grid::new(4.0, 2e-3).unwrap();
    let mut batch_max = [0.0f64; 2];
    for pair in 0..100 {
        let levels = piecewise_constant(2, 4.0, 8, &mut rng);
        let du = rng.random_range(-0.5..0.5);
        let dv = centered(2, 0.5, &mut rng);
        let shifted: Vec<_> = levels
            .iter()
            .map(|(s, u, v)| (*s, u + du, v.iter().zip(&dv).map(|(a, b)| a + b).collect()))
            .collect();
        let r1 = check_lipschitz(
            &sample_steps(&short, 2, &levels),
            &sample_steps(&short, 2, &shifted),
            &params,
            &short,
        )
        .unwrap();
        let r4 = check_lipschitz(&sample_steps(&long, 2, &levels), &sample_steps(&long, 2, &shifted), &params, &long).unwrap();
        assert!(r1 <= r4 + 1e-12, "pair {pair}: {r1} > {r4}");
        assert!(r4.is_finite());
        batch_max[pair / 50] = batch_max[pair / 50].max(r4);
    }
    let rel = (batch_max[0] - batch_max[1]).abs() / batch_max[0].max(batch_max[1]);
    assert!(rel <= 0.5, "{batch_max:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn outputs_stay_on_manifold(seed in 0u64..1000, alpha in 0.1f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let service = PhaseTypeParams::random(3, &mut rng);
        let params = params_for(&service, alpha);
        let grid = Grid::from_steps(2e-3, 500).unwrap();
        let input = sample_steps(&grid, 3, &piecewise_constant(3, grid.t_end(), 4, &mut rng));
        let out = psi(&input, &params, &grid).unwrap();
        let rn = qedlab::linalg::abs_sum(service.r());
        let bound = 10.0 * grid.dt * rn * (1.0 + out.sup_norm());
        prop_assert!(out.manifold_defect() <= bound);
    }

    #[test]
    fn march_is_causal(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = params_for(&erlang2(), 1.0);
        let grid = Grid::from_steps(1e-2, 200).unwrap();
        let mut input = sample_steps(&grid, 2, &piecewise_constant(2, grid.t_end(), 4, &mut rng));
        let before = psi(&input, &params, &grid).unwrap();
        for u in &mut input.u[150..] {
            *u += 1.0;
        }
        let after = psi(&input, &params, &grid).unwrap();
        prop_assert_eq!(&before.x[..150], &after.x[..150]);
    }
}
