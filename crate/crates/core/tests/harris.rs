use qedlab::harris::{self, Occupancy};
use qedlab::interarrival::{Family, Interarrival};
use qedlab::rng_stream;

fn families() -> Vec<Interarrival> {
    vec![
        Interarrival::exponential(1.0),
        Family::Erlang { stages: 2 }.with_mean(1.0),
        Family::Hyperexponential { scv: 4.0 }.with_mean(1.0),
        Family::Lognormal { sigma: 1.0 }.with_mean(1.0),
    ]
}

#[test]
fn bound_holds_outside_the_box() {
    for d in families() {
        let set = harris::petite_set_constants(&d, 0.5, 20).unwrap();
        assert!(set.c1.is_finite() && set.c2.is_finite() && set.h.is_finite());
        let check = harris::verify_outside(&d, 0.5, &set, 100).unwrap();
        assert!(check.points >= 10_000);
        assert!(check.holds(), "{:?}: {check:?}", d.family);
    }
}

#[test]
fn c1_is_minimal() {
    for d in families() {
        let set = harris::petite_set_constants(&d, 1.0, 5).unwrap();
        assert!(harris::bracket(&d, set.c1) <= -0.5);
        assert!(harris::bracket(&d, set.c1 - 1e-6) > -0.5, "{:?}", d.family);
    }
}

#[test]
fn mrl_consistent_with_survival_integral() {
    for d in families() {
        for x in [0.0, 0.5, 1.0, 3.0, 6.0] {
            let m = d.mrl(x).unwrap();
            let lhs = m * d.survival(x);
            let rhs = d.survival_integral(x);
            assert!((lhs - rhs).abs() <= 1e-8, "{:?} at {x}: {lhs} vs {rhs}", d.family);
        }
    }
}

#[test]
fn lognormal_mrl_matches_monte_carlo() {
    let d = Family::Lognormal { sigma: 1.0 }.with_mean(1.0);
    let mut rng = rng_stream(11, 0);
    let draws: Vec<f64> = (0..400_000).map(|_| d.sample(&mut rng)).collect();
    for x in [0.0, 1.0, 3.0] {
        let tail: Vec<f64> = draws.iter().filter(|v| **v > x).map(|v| v - x).collect();
        let n = tail.len() as f64;
        let mean = tail.iter().sum::<f64>() / n;
        let var = tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        let m = d.mrl(x).unwrap();
        assert!((m - mean).abs() <= 3.0 * se, "x={x}: {m} vs {mean} +- {se}");
    }
}

#[test]
fn erlang_hazard_limits() {
    let d = Family::Erlang { stages: 2 }.with_mean(1.0);
    let (h0, m0) = harris::hazard_mrl(&d, 0.0).unwrap();
    assert_eq!(h0, 0.0);
    assert!((m0 - 1.0).abs() < 1e-9);
    let (h, _) = harris::hazard_mrl(&d, 60.0).unwrap();
    assert!((h - 2.0).abs() < 0.02);
}

#[test]
fn exponential_bound_closed_form() {
    let lam = 2.0;
    let d = Interarrival::exponential(lam);
    let nu = [1.0, 3.0];
    for a in [0.0, 0.3, 1.2] {
        let b = -1.0 + (-lam * a).exp() * (2.0 + 1.0 / lam);
        let want = 2.0 * (1.0 + lam) * b + lam - 0.5 * 4.0 - 4.0;
        let got = harris::generator_upper_bound(&d, 0.5, &nu, a, 4, Occupancy::Phases(&[0, 2])).unwrap();
        assert!((got - want).abs() < 1e-12);
    }
    // with an empty queue only occupied phases count
    let got = harris::generator_upper_bound(&d, 0.5, &nu, 0.0, 0, Occupancy::Phases(&[0, 2])).unwrap();
    let want = 2.0 * 3.0 * 1.5 + 2.0 - 3.0;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn large_queue_dominates() {
    let d = Family::Lognormal { sigma: 1.0 }.with_mean(1.0);
    let set = harris::petite_set_constants(&d, 0.25, 10).unwrap();
    for a in [0.0, 0.5 * set.c1, set.c1] {
        let q = set.c2.ceil() as u64 + 1;
        assert!(harris::generator_upper_bound(&d, 0.25, &[], a, q, Occupancy::Worst).unwrap() <= -1.0);
    }
}
