//! Simulates an M/M/20+M queue and compares the law of the number in system
//! with the birth-death solution.

use qedlab::des::{estimate_stationary, mm_n_m_oracle, SamplingPlan, SystemConfig};
use qedlab::interarrival::Family;
use qedlab::phasetype::PhaseTypeParams;

fn main() {
    let cfg = SystemConfig::new(20, 0.5, Family::Exponential, PhaseTypeParams::exponential(1.0).unwrap(), 0.5).unwrap();
    let plan = SamplingPlan::default_for(&cfg, 50_000);
    let run = estimate_stationary(&cfg, plan, 1).unwrap();
    let law = run.n_law();
    let oracle = mm_n_m_oracle(20, cfg.lambda(), 1.0, 0.5, 64);
    let len = law.len().max(oracle.len());
    let tv = (0..len)
        .map(|j| (law.get(j).unwrap_or(&0.0) - oracle.get(j).unwrap_or(&0.0)).abs())
        .sum::<f64>()
        / 2.0;
    println!("N   simulated  exact");
    for (j, exact) in oracle.iter().enumerate().take(30).skip(10) {
        println!("{j:<3} {:.5}    {exact:.5}", law.get(j).unwrap_or(&0.0));
    }
    println!("total variation {tv:.4} over {} samples", run.plan.samples);
}
