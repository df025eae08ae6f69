mod common;

use nalgebra::DVector;
use proptest::prelude::*;
use qedlab::des::SamplingPlan;
use qedlab::diffusion::{self, DiffusionCoeffs};
use qedlab::fluid::{FluidModel, Method};
use qedlab::linalg;
use qedlab::phasetype::PhaseTypeParams;
use qedlab::psi::Grid;
use qedlab::rng_stream;
use qedlab::stats;

#[test]
fn zero_noise_reproduces_the_fluid_path() {
    let service = common::erlang2();
    let model = FluidModel::new(&service, 0.5, 0.5);
    let grid = Grid::new(3.0, 1e-3).unwrap();
    let zero = DiffusionCoeffs::zero(2);
    let noisy = diffusion::simulate_pou(1.5, &[0.2, -0.2], &zero, &model, &grid, 4).unwrap();
    let fluid = model.integrate(1.5, &[0.2, -0.2], &grid, Method::ViaPsi).unwrap();
    assert_eq!(noisy.x, fluid.x);
    assert_eq!(noisy.z, fluid.z);
}

#[test]
fn one_phase_stationary_law_matches_quadrature() {
    let service = PhaseTypeParams::exponential(1.0).unwrap();
    let model = FluidModel::new(&service, 0.5, 0.5);
    let c = diffusion::derive_covariance(&service, 1.0, 0.5).unwrap();
    let plan = SamplingPlan {
        burn_in: 50.0,
        samples: 20_000,
        spacing: 2.0,
    };
    let run = diffusion::estimate_stationary_pou(0.0, &[0.0], &c, &model, plan, 0.01, 3).unwrap();
    let oracle = diffusion::pou_1d_density_oracle(0.5, 0.5, 1.0, 2.0, 20_001);
    let ks = stats::ks_table(&run.dist.x_marginal(), &oracle).unwrap();
    assert!(ks < 0.02, "ks {ks}");
}

#[test]
fn oracle_special_cases() {
    // beta = 0 with alpha = mu: centered Gaussian of variance var_u / (2 mu)
    let t = diffusion::pou_1d_density_oracle(0.0, 2.0, 2.0, 1.0, 8001);
    assert!(t.mean().abs() < 1e-6);
    assert!((t.variance() - 0.25).abs() < 1e-5);
    // beta = 0: two half-Gaussians, mass below zero sqrt(alpha) / (sqrt(alpha) + sqrt(mu))
    let t = diffusion::pou_1d_density_oracle(0.0, 0.2, 1.0, 2.0, 8001);
    let want = 0.2f64.sqrt() / (0.2f64.sqrt() + 1.0);
    assert!((t.cdf(0.0) - want).abs() < 1e-6);
    assert!((t.total_mass() - 1.0).abs() < 1e-8);
}

#[test]
fn deterministic_arrivals_halve_the_variance() {
    let service = PhaseTypeParams::exponential(3.0).unwrap();
    let c = diffusion::derive_covariance(&service, 0.0, 1.0).unwrap();
    assert!((c.var_u - 3.0).abs() < 1e-12);
    assert!(diffusion::derive_covariance(&service, -1.0, 1.0).is_err());
}

#[test]
fn cross_term_reconciliation() {
    let service = common::erlang2();
    let derived = diffusion::derive_covariance(&service, 1.0, 0.5).unwrap();
    let close = DiffusionCoeffs {
        cross: &derived.cross * 1.05,
        ..derived.clone()
    };
    assert_eq!(diffusion::reconcile_cross(&derived, &close), derived);
    let far = DiffusionCoeffs {
        cross: &derived.cross * 0.5,
        ..derived.clone()
    };
    let out = diffusion::reconcile_cross(&derived, &far);
    assert!((&out.cross - &far.cross).amax() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn derived_covariance_is_psd(seed in 0u64..10_000, k in 1usize..7, c_u2 in 0.0f64..5.0) {
        let mut rng = rng_stream(seed, 3);
        let service = PhaseTypeParams::random(k, &mut rng);
        let c = diffusion::derive_covariance(&service, c_u2, 1.0).unwrap();
        let m = c.assembled();
        let min = linalg::lambda_min(&linalg::sym(&m)).unwrap();
        prop_assert!(min >= -1e-10 * (1.0 + m.amax()));
        let e = DVector::from_element(k, 1.0);
        prop_assert!((&c.cov_v * &e).amax() < 1e-10 * (1.0 + m.amax()));
        prop_assert!(c.var_u >= c_u2 * service.mu() - 1e-12);
    }
}
