//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line, even when all of them pass.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use qedlab::cqlf::{Cqlf, SolverOptions};
use qedlab::des::{self, SamplingPlan, SystemConfig, SystemState};
use qedlab::diffusion;
use qedlab::fluid::{self, FluidModel};
use qedlab::harris;
use qedlab::interarrival::{Family, Interarrival};
use qedlab::lyapunov::{self, LyapunovFn};
use qedlab::phasetype::PhaseTypeParams;
use qedlab::psi::{self, Grid, PsiParams};
use qedlab::rng_stream;
use qedlab::stats::{self, EmpiricalDist};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn timed(id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let took = start.elapsed();
    let in_time = took <= budget;
    let pass = out.pass && in_time;
    println!(
        "acceptance {id:>2} {name}: {} ({}; {:.1}s of {}s)",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64(),
        budget.as_secs()
    );
    pass
}

fn setup(service: &PhaseTypeParams, alpha: f64, beta: f64) -> (FluidModel, LyapunovFn) {
    let cqlf = Cqlf::build(service, alpha, SolverOptions::default()).expect("cqlf");
    (FluidModel::new(service, alpha, beta), LyapunovFn::new(service, &cqlf, alpha, beta))
}

fn cqlf_certificates() -> Outcome {
    let mut rng = rng_stream(2024, 1);
    let mut worst = 1.0f64;
    let mut counts = Vec::new();
    for k in 2..=6 {
        let mut ok = 0;
        for _ in 0..20 {
            let service = PhaseTypeParams::random(k, &mut rng);
            if let Ok(c) = Cqlf::build(&service, 1.0, SolverOptions::default()) {
                let cert = c.cert;
                if cert.lambda_min_q > 0.0 && cert.lambda_min_qr > 0.0 && cert.lambda_min_switch >= -1e-8 && cert.gamma_residual <= 1e-8 {
                    ok += 1;
                }
            }
        }
        worst = worst.min(ok as f64 / 20.0);
        counts.push(format!("K={k}: {ok}/20"));
    }
    outcome(worst >= 0.95, counts.join(", "))
}

fn psi_properties() -> Outcome {
    let mut rng = rng_stream(7, 2);
    let service = PhaseTypeParams::random(3, &mut rng);
    let params = PsiParams::new(0.8, service.r().clone(), service.p().clone());
    let grid = Grid::from_steps(1e-3, 2000).unwrap();
    let mut worst_homog = 0.0f64;
    let (mut fmin, mut fmax) = (f64::INFINITY, 0.0f64);
    for _ in 0..20 {
        let levels = piecewise_constant(3, grid.t_end(), 6, &mut rng);
        let input = sample_steps(&grid, 3, &levels);
        let out = psi::psi(&input, &params, &grid).unwrap();
        let mag = psi::magnitude(&input, &out);
        for b in [0.5, 2.0, 10.0] {
            let dev = psi::check_homogeneity(&input, b, &params, &grid).unwrap();
            worst_homog = worst_homog.max(dev / (10.0 * grid.dt * b * mag));
        }
        let fine = grid.refined();
        let r1 = psi::residual(&out, &input, &params, &grid).unwrap();
        let fine_in = sample_steps(&fine, 3, &levels);
        let fine_out = psi::psi(&fine_in, &params, &fine).unwrap();
        let r2 = psi::residual(&fine_out, &fine_in, &params, &fine).unwrap();
        fmin = fmin.min(r1 / r2);
        fmax = fmax.max(r1 / r2);
    }
    outcome(
        worst_homog <= 1.0 && fmin >= 1.8 && fmax <= 2.2,
        format!("homogeneity deviation/bound {worst_homog:.2e}, convergence factors [{fmin:.3}, {fmax:.3}]"),
    )
}

fn fluid_drift() -> Outcome {
    let service = erlang2();
    let (model, lyap) = setup(&service, 0.5, 0.5);
    let mut rng = rng_stream(31, 3);
    let starts: Vec<_> = (0..100).map(|_| fluid::sample_start(2, 1e-2, 1e6, &mut rng)).collect();
    let mono = fluid::check_g_monotone(&model, &lyap, &starts, &Grid::new(10.0, 1e-3).unwrap()).unwrap();
    let m = fluid::m_used(&lyap);
    let far: Vec<_> = (0..100).map(|_| lyapunov::sample_on_manifold(2, 1e3, &mut rng)).collect();
    let band = fluid::check_geometric_band(&model, &lyap, &far, &Grid::new(2.0, 1e-3).unwrap(), m);
    let mut drift_starts: Vec<_> = (0..300).map(|_| fluid::sample_start(2, 1e-2, 2e6, &mut rng)).collect();
    // make sure the top of the range is reached in sqrt g
    drift_starts.push(lyapunov::sample_on_manifold(2, 1e6, &mut rng));
    let max_sqrt_g = drift_starts.iter().map(|(x, z)| lyap.g_unchecked(*x, z).sqrt()).fold(0.0, f64::max);
    let drift = fluid::check_fluid_drift_inequality(&model, &lyap, &drift_starts, 1.0, 1e-3, m);
    let c_hat = band.as_ref().map(|b| b.c_hat).unwrap_or(f64::NAN);
    let (cc, eps) = drift.as_ref().map(|d| (d.c_hat, d.eps_hat)).unwrap_or((f64::NAN, 0.0));
    outcome(
        mono.violations == 0 && c_hat > 0.0 && eps > 0.0 && max_sqrt_g >= 1e6,
        format!(
            "{} violations over {} paths, band c_hat {c_hat:.3}, drift C_hat {cc:.3} eps_hat {eps:.2} up to sqrt g {max_sqrt_g:.2e}",
            mono.violations, mono.trajectories
        ),
    )
}

fn des_oracle() -> Outcome {
    let cfg = SystemConfig::new(20, 0.5, Family::Exponential, PhaseTypeParams::exponential(1.0).unwrap(), 0.5).unwrap();
    let plan = SamplingPlan::default_for(&cfg, 1_000_000);
    let run = des::estimate_stationary(&cfg, plan, 404).unwrap();
    let law = run.n_law();
    let oracle = des::mm_n_m_oracle(20, cfg.lambda(), 1.0, 0.5, 64);
    let len = law.len().max(oracle.len());
    let tv = (0..len)
        .map(|j| (law.get(j).unwrap_or(&0.0) - oracle.get(j).unwrap_or(&0.0)).abs())
        .sum::<f64>()
        / 2.0;
    outcome(tv < 0.01, format!("TV {tv:.4} over {} samples", run.plan.samples))
}

fn near_fluid_state(cfg: &SystemConfig) -> SystemState {
    let n = cfg.n;
    let mut z: Vec<u64> = cfg.service.gamma().iter().map(|g| (g * n as f64).floor() as u64).collect();
    z[0] += n as u64 - z.iter().sum::<u64>();
    SystemState { customers: n as u64, z }
}

fn identity() -> Outcome {
    let mut worst = 0.0f64;
    let mut runs = 0;
    for service in [PhaseTypeParams::exponential(1.0).unwrap(), erlang2()] {
        for family in [Family::Exponential, Family::Erlang { stages: 2 }, Family::Lognormal { sigma: 1.0 }] {
            for n in [20, 100] {
                let cfg = SystemConfig::new(n, 0.5, family, service.clone(), 0.5).unwrap();
                for seed in 0..3 {
                    let initial = if seed == 0 {
                        SystemState::empty(service.phases())
                    } else {
                        near_fluid_state(&cfg)
                    };
                    let grid = Grid::new(50.0, 0.01).unwrap();
                    match des::extract_components(&cfg, initial, &grid, seed) {
                        Ok(c) => worst = worst.max(c.residual / c.bound),
                        Err(e) => return outcome(false, format!("run failed: {e}")),
                    }
                    runs += 1;
                }
            }
        }
    }
    outcome(worst <= 1.0, format!("{runs} runs, worst residual/bound {worst:.3}"))
}

fn covariance() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for service in [PhaseTypeParams::exponential(1.0).unwrap(), erlang2()] {
        let cfg = SystemConfig::new(200, 0.5, Family::Exponential, service.clone(), 0.5).unwrap();
        let grid = Grid::new(500.0, 0.05).unwrap();
        let runs: Vec<_> = (0..10)
            .map(|s| des::extract_components(&cfg, near_fluid_state(&cfg), &grid, 600 + s).unwrap())
            .collect();
        let empirical = diffusion::empirical_increment_covariance(&runs, 20).unwrap();
        let derived = diffusion::derive_covariance(&service, 1.0, 0.5).unwrap();
        let rel = derived.relative_frobenius(&empirical);
        pass &= rel <= 0.10;
        if service.phases() == 1 {
            pass &= (derived.var_u - 2.0 * service.mu()).abs() < 1e-12;
        }
        details.push(format!("K={}: rel Frobenius {rel:.3}", service.phases()));
    }
    outcome(pass, details.join(", "))
}

/// Prelimit stationary laws for the K = 1 sweep, shared by the interchange
/// and tightness criteria.
struct Sweep {
    lyap: LyapunovFn,
    runs: Vec<(usize, EmpiricalDist)>,
    pou: EmpiricalDist,
}

fn k1_sweep() -> Sweep {
    let service = PhaseTypeParams::exponential(1.0).unwrap();
    let (model, lyap) = setup(&service, 0.5, 0.5);
    let runs = [10usize, 50, 200]
        .iter()
        .map(|&n| {
            let cfg = SystemConfig::new(n, 0.5, Family::Exponential, service.clone(), 0.5).unwrap();
            let plan = SamplingPlan::default_for(&cfg, 50_000);
            (n, des::estimate_stationary(&cfg, plan, 700 + n as u64).unwrap().dist)
        })
        .collect();
    let coeffs = diffusion::derive_covariance(&service, 1.0, 0.5).unwrap();
    let plan = SamplingPlan {
        burn_in: 200.0,
        samples: 50_000,
        spacing: 20.0,
    };
    let pou = diffusion::estimate_stationary_pou(0.0, &[0.0], &coeffs, &model, plan, 0.01, 77)
        .unwrap()
        .dist;
    Sweep { lyap, runs, pou }
}

fn interchange(sweep: &Sweep) -> Outcome {
    let oracle = diffusion::pou_1d_density_oracle(0.5, 0.5, 1.0, 2.0, 20_001);
    let mut ks = Vec::new();
    for (_, d) in &sweep.runs {
        let se = stats::ks_standard_error(stats::effective_size(d), f64::INFINITY);
        ks.push((stats::ks_table(&d.x_marginal(), &oracle).unwrap(), se));
    }
    let monotone = ks
        .windows(2)
        .all(|w| w[1].0 <= w[0].0 + 2.0 * (w[0].1.powi(2) + w[1].1.powi(2)).sqrt());
    let last = ks.last().unwrap().0;

    let service = erlang2();
    let (model, _) = setup(&service, 0.5, 0.5);
    let cfg = SystemConfig::new(200, 0.5, Family::Exponential, service.clone(), 0.5).unwrap();
    let des_run = des::estimate_stationary(&cfg, SamplingPlan::default_for(&cfg, 50_000), 901).unwrap();
    let coeffs = diffusion::derive_covariance(&service, 1.0, 0.5).unwrap();
    let plan = SamplingPlan {
        burn_in: 200.0,
        samples: 50_000,
        spacing: 20.0,
    };
    let pou = diffusion::estimate_stationary_pou(0.0, &[0.0, 0.0], &coeffs, &model, plan, 0.01, 902).unwrap();
    let ks_e = stats::ks_1d(&des_run.dist.x_marginal(), &pou.dist.x_marginal()).unwrap();
    let ks_list: Vec<String> = ks.iter().map(|(k, _)| format!("{k:.4}")).collect();
    outcome(
        monotone && last < 0.05 && ks_e < 0.05,
        format!(
            "K=1 KS to quadrature [{}] for n = 10, 50, 200; Erlang-2 KS(DES, POU) {ks_e:.4}",
            ks_list.join(", ")
        ),
    )
}

fn tightness(sweep: &Sweep) -> Outcome {
    let s = sweep.pou.sqrt_g_marginal(&sweep.lyap).upper_quantile(0.01);
    let diff_tail = stats::tail_mass(&sweep.pou, &sweep.lyap, s);
    let tails: Vec<f64> = sweep.runs.iter().map(|(_, d)| stats::tail_mass(d, &sweep.lyap, s)).collect();
    let worst = tails.iter().copied().fold(0.0, f64::max);
    outcome(
        worst < 0.05,
        format!("s = {s:.3} (diffusion tail {diff_tail:.4}), prelimit tails {tails:.4?}"),
    )
}

fn harris_check() -> Outcome {
    let laws = [
        ("Exp", Interarrival::exponential(1.0)),
        ("Erlang-2", Family::Erlang { stages: 2 }.with_mean(1.0)),
        ("H2", Family::Hyperexponential { scv: 4.0 }.with_mean(1.0)),
        ("lognormal", Family::Lognormal { sigma: 1.0 }.with_mean(1.0)),
    ];
    let mut pass = true;
    let mut details = Vec::new();
    for (name, law) in laws {
        match harris::petite_set_constants(&law, 0.5, 100) {
            Ok(set) => {
                let grid = harris::verify_outside(&law, 0.5, &set, 100).unwrap();
                let finite = set.c1.is_finite() && set.c2.is_finite() && set.h.is_finite();
                pass &= finite && grid.holds() && grid.points >= 10_000;
                details.push(format!("{name}: C1 {:.4} H {:.3} max bound {:.3}", set.c1, set.h, grid.max_bound));
            }
            Err(e) => {
                pass = false;
                details.push(format!("{name}: {e}"));
            }
        }
    }
    let c1 = harris::petite_set_constants(&Interarrival::exponential(1.0), 0.5, 100)
        .map(|s| s.c1)
        .unwrap_or(f64::NAN);
    let err = (c1 - 6f64.ln()).abs();
    pass &= err <= 1e-8;
    details.push(format!("|C1 - ln 6| = {err:.1e}"));
    outcome(pass, details.join("; "))
}

fn diffusion_drift() -> Outcome {
    let mut pass = true;
    let mut details = Vec::new();
    for service in [PhaseTypeParams::exponential(1.0).unwrap(), erlang2()] {
        let (_, lyap) = setup(&service, 0.5, 0.5);
        let cfg = SystemConfig::new(100, 0.5, Family::Exponential, service.clone(), 0.5).unwrap();
        let mut rng = rng_stream(1000, service.phases() as u64);
        let starts = des::starts_at_radii(&cfg, &lyap, &[10.0, 100.0, 1000.0], 15, &mut rng);
        let radii_hit = [10.0, 100.0, 1000.0]
            .iter()
            .filter(|r| {
                starts.iter().any(|s| {
                    let sc = qedlab::des::ScaledState::of(s, 0.0, &cfg);
                    (lyap.g_unchecked(sc.x, &sc.z).sqrt() / **r - 1.0).abs() < 0.05
                })
            })
            .count();
        let (_, ineq) = des::check_diffusion_drift(&cfg, &lyap, &starts, 1.0, 200, 15.0, 1001).unwrap();
        match ineq {
            Some(d) => {
                pass &= d.eps_hat > 0.0 && radii_hit == 3;
                details.push(format!(
                    "K={}: C {:.3} eps {:.2} over {} starts",
                    service.phases(),
                    d.c_hat,
                    d.eps_hat,
                    d.starts
                ));
            }
            None => {
                pass = false;
                details.push(format!("K={}: no feasible (C, eps)", service.phases()));
            }
        }
    }
    outcome(pass, details.join("; "))
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut all = true;
    all &= timed(1, "CQLF certificates", secs(60), cqlf_certificates);
    all &= timed(2, "Psi homogeneity and convergence", secs(30), psi_properties);
    all &= timed(3, "fluid drift", secs(120), fluid_drift);
    all &= timed(4, "DES against birth-death oracle", secs(300), des_oracle);
    all &= timed(5, "prelimit state is Psi of its inputs", secs(120), identity);
    all &= timed(6, "covariance derivation", secs(600), covariance);
    let start = Instant::now();
    let sweep = k1_sweep();
    let shared = start.elapsed();
    all &= timed(7, "interchange of limits", secs(1800).saturating_sub(shared), || {
        interchange(&sweep)
    });
    all &= timed(8, "tightness", secs(1800).saturating_sub(shared), || tightness(&sweep));
    all &= timed(9, "Harris drift constants", secs(30), harris_check);
    all &= timed(10, "diffusion-scale drift", secs(600), diffusion_drift);
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
