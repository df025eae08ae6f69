mod common;

use proptest::prelude::*;
use qedlab::des::{self, SamplingPlan, Simulator, SystemConfig, SystemState};
use qedlab::interarrival::Family;
use qedlab::phasetype::PhaseTypeParams;
use qedlab::psi::Grid;
use qedlab::rng_stream;

fn tv(a: &[f64], b: &[f64]) -> f64 {
    let len = a.len().max(b.len());
    (0..len)
        .map(|i| (a.get(i).unwrap_or(&0.0) - b.get(i).unwrap_or(&0.0)).abs())
        .sum::<f64>()
        / 2.0
}

#[test]
fn small_system_matches_birth_death_law() {
    let cfg = SystemConfig::new(4, 0.5, Family::Exponential, PhaseTypeParams::exponential(1.0).unwrap(), 0.7).unwrap();
    let plan = SamplingPlan {
        burn_in: 50.0,
        samples: 100_000,
        spacing: 1.0,
    };
    let run = des::estimate_stationary(&cfg, plan, 5).unwrap();
    let oracle = des::mm_n_m_oracle(4, cfg.lambda(), 1.0, 0.7, 16);
    let d = tv(&run.n_law(), &oracle);
    assert!(d < 0.01, "tv {d}");
}

#[test]
fn identity_holds_for_one_and_two_phases() {
    for service in [PhaseTypeParams::exponential(1.0).unwrap(), common::erlang2()] {
        for family in [Family::Exponential, Family::Lognormal { sigma: 0.8 }] {
            let cfg = SystemConfig::new(30, 0.5, family, service.clone(), 0.5).unwrap();
            let grid = Grid::new(20.0, 0.01).unwrap();
            let c = des::extract_components(&cfg, SystemState::empty(service.phases()), &grid, 2).unwrap();
            assert!(c.residual <= c.bound);
            assert!(c.exact_defect < 1e-9);
        }
    }
}

#[test]
fn reruns_are_identical() {
    let cfg = SystemConfig::new(10, 0.2, Family::Hyperexponential { scv: 3.0 }, common::erlang2(), 1.0).unwrap();
    let run = |seed| {
        let mut sim = Simulator::new(cfg.clone(), seed);
        sim.record_events(true);
        sim.advance_to(30.0);
        let mut buf = Vec::new();
        des::write_event_log(&mut buf, 2, sim.events().unwrap()).unwrap();
        buf
    };
    assert_eq!(run(8), run(8));
    assert_ne!(run(8), run(9));
}

#[test]
fn scaled_points_round_to_states() {
    let cfg = SystemConfig::new(100, 0.5, Family::Exponential, common::erlang2(), 0.5).unwrap();
    let s = des::state_near(&cfg, 2.0, &[0.3, -0.3]).unwrap();
    assert_eq!(s.customers, 120);
    assert_eq!(s.z, vec![53, 47]);
    let t = des::state_near(&cfg, -3.0, &[-1.5, -1.5]).unwrap();
    assert_eq!(t.customers, 70);
    assert_eq!(t.z.iter().sum::<u64>(), 70);
    assert!(des::state_near(&cfg, -20.0, &[-10.0, -10.0]).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn busy_servers_follow_the_customer_count(seed in 0u64..10_000, n in 1usize..12, k in 1usize..4) {
        let mut rng = rng_stream(seed, 7);
        let service = PhaseTypeParams::random(k, &mut rng);
        let cfg = SystemConfig::new(n, 0.3, Family::Erlang { stages: 3 }, service, 0.4).unwrap();
        let mut sim = Simulator::new(cfg, seed);
        sim.record_events(true);
        sim.advance_to(40.0);
        let mut last = 0.0;
        for ev in sim.events().unwrap() {
            prop_assert!(ev.t >= last);
            last = ev.t;
            prop_assert_eq!(ev.z.iter().sum::<u64>(), ev.customers.min(n as u64));
        }
        let c = sim.counters();
        prop_assert_eq!(c.arrivals, c.departures + c.abandonments + sim.state().customers);
    }
}
