//! Event-driven simulation of the `n`-th GI/Ph/n+M system.
//!
//! All exponential clocks (phase completions of every busy server and the
//! abandonment clock of the queue) are merged into one clock of total rate
//! `sum_k nu_k Z_k + alpha (N - n)^+`, which is redrawn after every event.
//! By memorylessness this has the same law as per-customer timers. The
//! renewal arrival clock is the only other entry in the event heap.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::io::{self, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::interarrival::{Family, Interarrival, InterarrivalError};
use crate::lyapunov::neg_part;
use crate::phasetype::{exp_inverse, PhaseTypeParams};
use crate::psi::{self, Grid, InputPath, PsiError, PsiParams, StatePath};
use crate::stats::{self, BatchMeans, DistMeta, EmpiricalDist, StatsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesError {
    #[error("invalid system configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Interarrival(#[from] InterarrivalError),
    #[error(transparent)]
    Psi(#[from] PsiError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("reconstruction bug: identity residual {residual:e} exceeds {bound:e}")]
    Reconstruction { residual: f64, bound: f64 },
}

#[derive(Debug, Clone)]
pub struct SystemConfig {
    pub n: usize,
    pub beta: f64,
    pub interarrival: Family,
    pub service: PhaseTypeParams,
    pub alpha: f64,
}

impl SystemConfig {
    pub fn new(n: usize, beta: f64, interarrival: Family, service: PhaseTypeParams, alpha: f64) -> Result<Self, DesError> {
        interarrival.validate()?;
        if n == 0 {
            return Err(DesError::Config("n must be positive".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(DesError::Config(format!("alpha must be positive, got {alpha}")));
        }
        if !(beta < (n as f64).sqrt()) || !beta.is_finite() {
            return Err(DesError::Config(format!("beta = {beta} leaves no arrivals at n = {n}")));
        }
        Ok(Self {
            n,
            beta,
            interarrival,
            service,
            alpha,
        })
    }

    /// `lambda_n = n mu (1 - beta / sqrt n)`.
    pub fn lambda(&self) -> f64 {
        let n = self.n as f64;
        n * self.service.mu() * (1.0 - self.beta / n.sqrt())
    }

    pub fn rho(&self) -> f64 {
        self.lambda() / (self.n as f64 * self.service.mu())
    }

    /// Interarrival times `u / lambda_n`.
    pub fn interarrival_law(&self) -> Interarrival {
        self.interarrival.with_mean(1.0 / self.lambda())
    }

    pub fn c_u2(&self) -> f64 {
        self.interarrival.scv()
    }

    /// `1 / min(alpha, mu, min nu)`.
    pub fn relaxation_time(&self) -> f64 {
        let min_nu = self.service.nu().iter().copied().fold(f64::INFINITY, f64::min);
        1.0 / self.alpha.min(self.service.mu()).min(min_nu)
    }

    pub fn sqrt_n(&self) -> f64 {
        (self.n as f64).sqrt()
    }
}

/// `(A, N, Z)`; the queue is `(N - n)^+` customers, order irrelevant under
/// exponential patience.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemState {
    pub customers: u64,
    pub z: Vec<u64>,
}

impl SystemState {
    pub fn empty(k: usize) -> Self {
        Self {
            customers: 0,
            z: vec![0; k],
        }
    }

    pub fn busy(&self) -> u64 {
        self.z.iter().sum()
    }

    pub fn queue(&self, n: usize) -> u64 {
        self.customers.saturating_sub(n as u64)
    }

    pub fn validate(&self, n: usize) -> Result<(), DesError> {
        if self.busy() != self.customers.min(n as u64) {
            return Err(DesError::Config(format!(
                "e'Z = {} but min(N, n) = {}",
                self.busy(),
                self.customers.min(n as u64)
            )));
        }
        Ok(())
    }
}

/// `(A, N, Z)` in diffusion scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledState {
    pub a: f64,
    pub x: f64,
    pub z: Vec<f64>,
}

impl ScaledState {
    pub fn of(state: &SystemState, age: f64, cfg: &SystemConfig) -> Self {
        let rn = cfg.sqrt_n();
        let n = cfg.n as f64;
        let gamma = cfg.service.gamma();
        Self {
            a: age / rn,
            x: (state.customers as f64 - n) / rn,
            z: state.z.iter().zip(gamma.iter()).map(|(zk, g)| (*zk as f64 - n * g) / rn).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Arrival,
    PhaseChange,
    Departure,
    Abandonment,
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Arrival => "arrival",
            EventKind::PhaseChange => "phase_change",
            EventKind::Departure => "departure",
            EventKind::Abandonment => "abandonment",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub t: f64,
    pub kind: EventKind,
    pub customers: u64,
    pub z: Vec<u64>,
}

/// Event counts since time 0.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Counters {
    pub arrivals: u64,
    pub departures: u64,
    pub abandonments: u64,
    /// Phase-k completions, `S_k`.
    pub completions: Vec<u64>,
    /// `routed[k][j]`: completions in phase `k` that moved to phase `j`.
    pub routed: Vec<Vec<u64>>,
    /// Service starts by initial phase.
    pub starts: Vec<u64>,
}

/// Exact time integrals since time 0.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Integrals {
    /// `int Z_k`.
    pub busy: Vec<f64>,
    /// `int (N - n)^+`.
    pub queue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Clock {
    Arrival,
    Markov(u64),
}

impl Clock {
    fn priority(&self) -> u8 {
        match self {
            Clock::Arrival => 0,
            Clock::Markov(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    time: f64,
    seq: u64,
    clock: Clock,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.clock.priority().cmp(&other.clock.priority()))
            .then(self.seq.cmp(&other.seq))
    }
}

pub struct Simulator {
    cfg: SystemConfig,
    law: Interarrival,
    rng: ChaCha8Rng,
    t: f64,
    last_arrival: f64,
    state: SystemState,
    heap: BinaryHeap<Reverse<Entry>>,
    seq: u64,
    generation: u64,
    counters: Counters,
    integrals: Integrals,
    log: Option<Vec<EventRecord>>,
}

impl Simulator {
    /// Starts empty with `A(0) = 0`.
    pub fn new(cfg: SystemConfig, seed: u64) -> Self {
        let k = cfg.service.phases();
        Self::with_state(cfg, SystemState::empty(k), crate::rng_stream(seed, 0)).expect("empty state is feasible")
    }

    pub fn with_state(cfg: SystemConfig, state: SystemState, rng: ChaCha8Rng) -> Result<Self, DesError> {
        let k = cfg.service.phases();
        if state.z.len() != k {
            return Err(DesError::Config(format!("initial Z has {} phases, service has {k}", state.z.len())));
        }
        state.validate(cfg.n)?;
        let law = cfg.interarrival_law();
        let mut sim = Self {
            cfg,
            law,
            rng,
            t: 0.0,
            last_arrival: 0.0,
            state,
            heap: BinaryHeap::new(),
            seq: 0,
            generation: 0,
            counters: Counters {
                completions: vec![0; k],
                routed: vec![vec![0; k]; k],
                starts: vec![0; k],
                ..Default::default()
            },
            integrals: Integrals {
                busy: vec![0.0; k],
                queue: 0.0,
            },
            log: None,
        };
        let first = sim.law.sample(&mut sim.rng);
        sim.push(first, Clock::Arrival);
        sim.reschedule_markov();
        Ok(sim)
    }

    pub fn record_events(&mut self, on: bool) {
        self.log = if on { Some(Vec::new()) } else { None };
    }

    pub fn events(&self) -> Option<&[EventRecord]> {
        self.log.as_deref()
    }

    pub fn config(&self) -> &SystemConfig {
        &self.cfg
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn age(&self) -> f64 {
        self.t - self.last_arrival
    }

    pub fn scaled(&self) -> ScaledState {
        ScaledState::of(&self.state, self.age(), &self.cfg)
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn integrals(&self) -> &Integrals {
        &self.integrals
    }

    fn push(&mut self, time: f64, clock: Clock) {
        self.seq += 1;
        self.heap.push(Reverse(Entry {
            time,
            seq: self.seq,
            clock,
        }));
    }

    fn markov_rate(&self) -> f64 {
        let nu = self.cfg.service.nu();
        let service: f64 = self.state.z.iter().zip(nu.iter()).map(|(z, v)| *z as f64 * v).sum();
        service + self.cfg.alpha * self.state.queue(self.cfg.n) as f64
    }

    fn reschedule_markov(&mut self) {
        self.generation += 1;
        let rate = self.markov_rate();
        if rate > 0.0 {
            let at = self.t + exp_inverse(rate, &mut self.rng);
            self.push(at, Clock::Markov(self.generation));
        }
    }

    fn accumulate(&mut self, until: f64) {
        let dt = until - self.t;
        if dt > 0.0 {
            for (acc, z) in self.integrals.busy.iter_mut().zip(&self.state.z) {
                *acc += *z as f64 * dt;
            }
            self.integrals.queue += self.state.queue(self.cfg.n) as f64 * dt;
        }
        self.t = until;
    }

    fn start_service(&mut self) {
        let phase = self.cfg.service.initial_phase(&mut self.rng);
        self.state.z[phase] += 1;
        self.counters.starts[phase] += 1;
    }

    fn log_event(&mut self, kind: EventKind) {
        if let Some(log) = self.log.as_mut() {
            log.push(EventRecord {
                t: self.t,
                kind,
                customers: self.state.customers,
                z: self.state.z.clone(),
            });
        }
    }

    /// Processes every event with time `<= until` and moves the clock there.
    pub fn advance_to(&mut self, until: f64) {
        while let Some(Reverse(next)) = self.heap.peek().copied() {
            if next.time > until {
                break;
            }
            self.heap.pop();
            if let Clock::Markov(g) = next.clock {
                if g != self.generation {
                    continue;
                }
            }
            self.accumulate(next.time);
            let kind = match next.clock {
                Clock::Arrival => self.arrive(),
                Clock::Markov(_) => self.markov_event(),
            };
            self.reschedule_markov();
            debug_assert_eq!(self.state.busy(), self.state.customers.min(self.cfg.n as u64));
            self.log_event(kind);
        }
        self.accumulate(until);
    }

    fn arrive(&mut self) -> EventKind {
        self.counters.arrivals += 1;
        self.state.customers += 1;
        self.last_arrival = self.t;
        if self.state.busy() < self.cfg.n as u64 {
            self.start_service();
        }
        let gap = self.law.sample(&mut self.rng);
        self.push(self.t + gap, Clock::Arrival);
        EventKind::Arrival
    }

    fn markov_event(&mut self) -> EventKind {
        let total = self.markov_rate();
        let mut pick = self.rng.random::<f64>() * total;
        let nu = self.cfg.service.nu().clone();
        for k in 0..self.state.z.len() {
            let r = self.state.z[k] as f64 * nu[k];
            if pick < r {
                return self.complete_phase(k);
            }
            pick -= r;
        }
        if self.state.queue(self.cfg.n) > 0 {
            self.counters.abandonments += 1;
            self.state.customers -= 1;
            return EventKind::Abandonment;
        }
        // Rounding pushed the draw past every bucket; take the last busy phase.
        let k = (0..self.state.z.len()).rev().find(|&k| self.state.z[k] > 0).expect("positive rate");
        self.complete_phase(k)
    }

    fn complete_phase(&mut self, k: usize) -> EventKind {
        self.counters.completions[k] += 1;
        self.state.z[k] -= 1;
        match self.cfg.service.route(k, &mut self.rng) {
            Some(j) => {
                self.counters.routed[k][j] += 1;
                self.state.z[j] += 1;
                EventKind::PhaseChange
            }
            None => {
                self.counters.departures += 1;
                self.state.customers -= 1;
                if self.state.customers >= self.cfg.n as u64 {
                    self.start_service();
                }
                EventKind::Departure
            }
        }
    }
}

/// Writes the event log as `t,event_type,N,Z1..ZK`.
pub fn write_event_log<W: Write>(mut w: W, k: usize, events: &[EventRecord]) -> io::Result<()> {
    write!(w, "t,event_type,N")?;
    for j in 1..=k {
        write!(w, ",Z{j}")?;
    }
    writeln!(w)?;
    for e in events {
        write!(w, "{},{},{}", e.t, e.kind.name(), e.customers)?;
        for z in &e.z {
            write!(w, ",{z}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Stationary law of the birth-death chain with birth rate `lambda` and
/// death rate `min(j, n) mu + (j - n)^+ alpha`.
///
/// The support starts at `truncation` states and doubles until the tail
/// beyond it carries less than `1e-12` (capped at `1e7` states).
pub fn mm_n_m_oracle(n: usize, lambda: f64, mu: f64, alpha: f64, truncation: usize) -> Vec<f64> {
    const CAP: usize = 10_000_000;
    if lambda == 0.0 {
        return vec![1.0];
    }
    let death = |j: usize| j.min(n) as f64 * mu + j.saturating_sub(n) as f64 * alpha;
    let mut size = truncation.max(2);
    loop {
        let mut log_p = Vec::with_capacity(size);
        log_p.push(0.0f64);
        for j in 1..size {
            let prev = log_p[j - 1];
            log_p.push(prev + lambda.ln() - death(j).ln());
        }
        let peak = log_p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = log_p.iter().map(|l| (l - peak).exp()).collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        // Beyond the last state the ratios lambda / death(j) keep falling once
        // death exceeds lambda, so the tail is at most a geometric series.
        let last = size - 1;
        let ratio = lambda / death(size);
        let tail = if ratio < 1.0 {
            p[last] * ratio / (1.0 - ratio)
        } else {
            f64::INFINITY
        };
        if tail < 1e-12 || size >= CAP {
            while p.len() > 1 && *p.last().unwrap() == 0.0 {
                p.pop();
            }
            let total: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= total);
            return p;
        }
        size = (size * 2).min(CAP);
    }
}

/// When and how many stationary samples to take.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SamplingPlan {
    pub burn_in: f64,
    pub samples: usize,
    pub spacing: f64,
}

impl SamplingPlan {
    /// Burn-in of 100 and spacing of 10 relaxation times.
    pub fn default_for(cfg: &SystemConfig, samples: usize) -> Self {
        let tau = cfg.relaxation_time();
        Self {
            burn_in: 100.0 * tau,
            samples,
            spacing: 10.0 * tau,
        }
    }
}

/// Samples from a long stationary run.
#[derive(Debug, Clone)]
pub struct StationaryRun {
    pub dist: EmpiricalDist,
    pub ages: Vec<f64>,
    /// `counts[j]`: samples with `N = j`.
    pub counts: Vec<u64>,
    pub x_plus: BatchMeans,
    pub x_minus: BatchMeans,
    pub plan: SamplingPlan,
    pub extensions: usize,
}

impl StationaryRun {
    /// Empirical law of `N`.
    pub fn n_law(&self) -> Vec<f64> {
        let total: u64 = self.counts.iter().sum();
        self.counts.iter().map(|c| *c as f64 / total as f64).collect()
    }

    /// Writes `a,x,z1..zK`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let k = self.dist.k;
        write!(w, "a,x")?;
        for j in 1..=k {
            write!(w, ",z{j}")?;
        }
        writeln!(w)?;
        for i in 0..self.dist.len() {
            write!(w, "{},{}", self.ages[i], self.dist.x[i] + 0.0)?;
            for v in self.dist.z_at(i) {
                write!(w, ",{}", v + 0.0)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

const BATCHES: usize = 20;
const MAX_EXTENSIONS: usize = 2;

/// Samples `(a, x, z)` at `burn_in + i spacing` from one long run.
///
/// When the batch means of `x^+` or `x^-` have lag-1 correlation above 0.5
/// the run is extended by doubling the sample count, at most twice.
pub fn estimate_stationary(cfg: &SystemConfig, plan: SamplingPlan, seed: u64) -> Result<StationaryRun, DesError> {
    if !(plan.burn_in >= 0.0 && plan.spacing > 0.0 && plan.samples >= BATCHES) {
        return Err(DesError::Config(format!("bad sampling plan {plan:?}")));
    }
    let k = cfg.service.phases();
    let mut sim = Simulator::new(cfg.clone(), seed);
    let mut xs = Vec::new();
    let mut zs = Vec::new();
    let mut ages = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    let mut target = plan.samples;
    let mut extensions = 0;
    loop {
        while xs.len() < target {
            let t = plan.burn_in + xs.len() as f64 * plan.spacing;
            sim.advance_to(t);
            let s = sim.scaled();
            xs.push(s.x);
            zs.extend_from_slice(&s.z);
            ages.push(s.a);
            let j = sim.state().customers as usize;
            if counts.len() <= j {
                counts.resize(j + 1, 0);
            }
            counts[j] += 1;
        }
        let plus: Vec<f64> = xs.iter().map(|x| x.max(0.0)).collect();
        let minus: Vec<f64> = xs.iter().map(|x| neg_part(*x)).collect();
        let x_plus = stats::batch_means(&plus, BATCHES);
        let x_minus = stats::batch_means(&minus, BATCHES);
        if (x_plus.lag1 > 0.5 || x_minus.lag1 > 0.5) && extensions < MAX_EXTENSIONS {
            log::warn!(
                "batch means correlated (lag-1 {:.2} / {:.2}); extending to {} samples",
                x_plus.lag1,
                x_minus.lag1,
                2 * target
            );
            extensions += 1;
            target *= 2;
            continue;
        }
        let meta = DistMeta {
            n: Some(cfg.n),
            seed,
            burn_in: plan.burn_in,
            spacing: plan.spacing,
            se_x_plus: x_plus.se,
            se_x_minus: x_minus.se,
        };
        let dist = EmpiricalDist::new(k, xs, zs, None)?.with_meta(meta);
        return Ok(StationaryRun {
            dist,
            ages,
            counts,
            x_plus,
            x_minus,
            plan: SamplingPlan { samples: target, ..plan },
            extensions,
        });
    }
}

/// Diffusion-scaled primitives on a grid, and the state they drive.
#[derive(Debug, Clone)]
pub struct Components {
    pub grid: Grid,
    /// `(U, V)`.
    pub input: InputPath,
    /// `(x, z)` sampled on the grid.
    pub state: StatePath,
    /// Compensated arrivals `(E(t) - lambda t) / sqrt n`.
    pub e: Vec<f64>,
    /// Compensated service and routing martingale, row-major by grid point.
    pub m: Vec<f64>,
    /// Compensated abandonments `(Ab(t) - alpha int (N - n)^+) / sqrt n`.
    pub g: Vec<f64>,
    /// Compensated initial-phase draws `(starts - p B) / sqrt n`, row-major.
    pub phi0: Vec<f64>,
    /// Largest defect of the integral equations with exact event-level
    /// integrals; rounding-level when the decomposition is right.
    pub exact_defect: f64,
    /// Defect with trapezoid integrals of the sampled path.
    pub residual: f64,
    pub bound: f64,
}

/// Runs the system from `initial` on `grid`, decomposes the scaled state
/// into its primitive components and checks `(x, z) = Psi(U, V)`.
pub fn extract_components(cfg: &SystemConfig, initial: SystemState, grid: &Grid, seed: u64) -> Result<Components, DesError> {
    let k = cfg.service.phases();
    let rn = cfg.sqrt_n();
    let n = cfg.n as f64;
    let mu = cfg.service.mu();
    let p = cfg.service.p().clone();
    let routing = cfg.service.routing().clone();
    let nu = cfg.service.nu().clone();
    let gamma = cfg.service.gamma().clone();
    let r = cfg.service.r().clone();
    let lambda = cfg.lambda();

    let mut sim = Simulator::with_state(cfg.clone(), initial, crate::rng_stream(seed, 0))?;
    let s0 = sim.scaled();
    let z0_total: f64 = s0.z.iter().sum();
    let v0: Vec<f64> = s0.z.iter().zip(p.iter()).map(|(z, pk)| z - pk * z0_total).collect();

    let len = grid.len();
    let mut input = InputPath::zeros(k, len);
    let mut state = StatePath::with_capacity(k, len);
    let mut e = Vec::with_capacity(len);
    let mut m = Vec::with_capacity(len * k);
    let mut g = Vec::with_capacity(len);
    let mut phi0 = Vec::with_capacity(len * k);
    let mut exact_defect = 0.0f64;
    let e_r: Vec<f64> = (0..k).map(|j| (0..k).map(|i| r[(i, j)]).sum()).collect();

    for i in 0..len {
        let t = grid.time(i);
        sim.advance_to(t);
        let c = sim.counters();
        let ints = sim.integrals();
        let s = sim.scaled();

        let ei = (c.arrivals as f64 - lambda * t) / rn;
        // sum_k (routed_k - P_k S_k) - (I - P')(S - nu o T), over sqrt n.
        let mut mi = vec![0.0; k];
        for j in 0..k {
            let mut routed = 0.0;
            for kk in 0..k {
                routed += c.routed[kk][j] as f64 - routing[(kk, j)] * c.completions[kk] as f64;
            }
            let mut comp = 0.0;
            for kk in 0..k {
                let ip = if kk == j { 1.0 } else { 0.0 } - routing[(kk, j)];
                comp += ip * (c.completions[kk] as f64 - nu[kk] * ints.busy[kk]);
            }
            mi[j] = (routed - comp) / rn;
        }
        let gi = (c.abandonments as f64 - cfg.alpha * ints.queue) / rn;
        let b: u64 = c.starts.iter().sum();
        let phii: Vec<f64> = (0..k).map(|j| (c.starts[j] as f64 - p[j] * b as f64) / rn).collect();

        let m_total: f64 = mi.iter().sum();
        let u = s0.x - mu * cfg.beta * t + ei + m_total - gi;
        input.u[i] = u;
        for j in 0..k {
            input.v[i * k + j] = v0[j] + phii[j] + mi[j] - p[j] * m_total;
        }

        // The integral equations with exact integrals.
        let ix = ints.queue / rn;
        let iz: Vec<f64> = (0..k).map(|j| (ints.busy[j] - n * gamma[j] * t) / rn).collect();
        let eriz: f64 = e_r.iter().zip(&iz).map(|(a, b)| a * b).sum();
        exact_defect = exact_defect.max((s.x - (u - cfg.alpha * ix - eriz)).abs());
        let eriz_total = eriz;
        for j in 0..k {
            let ciz: f64 = (0..k).map(|l| r[(j, l)] * iz[l]).sum::<f64>() - p[j] * eriz_total;
            let expected = input.v[i * k + j] - p[j] * neg_part(s.x) - ciz;
            exact_defect = exact_defect.max((s.z[j] - expected).abs());
        }

        state.push(s.x, &s.z);
        e.push(ei);
        m.extend_from_slice(&mi);
        g.push(gi);
        phi0.extend_from_slice(&phii);
    }

    let params = PsiParams::new(cfg.alpha, r, p);
    let residual = psi::residual(&state, &input, &params, grid)?;
    let bound = 10.0 * grid.dt * (1.0 + psi::magnitude(&input, &state));
    let scale = 1.0 + psi::magnitude(&input, &state);
    if !(residual <= bound) || !(exact_defect <= 1e-9 * scale) {
        return Err(DesError::Reconstruction {
            residual: residual.max(exact_defect),
            bound,
        });
    }
    Ok(Components {
        grid: *grid,
        input,
        state,
        e,
        m,
        g,
        phi0,
        exact_defect,
        residual,
        bound,
    })
}

/// The integer state closest to the scaled point `(x, z)`, or `None` when
/// rounding cannot keep every count nonnegative.
pub fn state_near(cfg: &SystemConfig, x: f64, z: &[f64]) -> Option<SystemState> {
    let rn = cfg.sqrt_n();
    let n = cfg.n as f64;
    let customers = (n + rn * x).round();
    if customers < 0.0 {
        return None;
    }
    let busy = customers.min(n) as i64;
    let gamma = cfg.service.gamma();
    let mut counts: Vec<i64> = z.iter().zip(gamma.iter()).map(|(zk, g)| (n * g + rn * zk).round() as i64).collect();
    // Push the rounding error onto the largest count.
    let gap = busy - counts.iter().sum::<i64>();
    let big = (0..counts.len()).max_by_key(|&j| counts[j])?;
    counts[big] += gap;
    if counts.iter().any(|c| *c < 0) {
        return None;
    }
    Some(SystemState {
        customers: customers as u64,
        z: counts.into_iter().map(|c| c as u64).collect(),
    })
}

/// Integer states with `sqrt g` close to each of `radii`, along `directions`
/// random on-manifold directions. Directions that leave the state space
/// after scaling are skipped.
pub fn starts_at_radii<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    lyap: &crate::lyapunov::LyapunovFn,
    radii: &[f64],
    directions: usize,
    rng: &mut R,
) -> Vec<SystemState> {
    let k = cfg.service.phases();
    let mut dirs = vec![(1.0, vec![0.0; k])];
    dirs.extend((0..directions).map(|_| crate::lyapunov::sample_on_manifold(k, 1.0, rng)));
    let mut out = Vec::new();
    for &r in radii {
        for (dx, dz) in &dirs {
            let at = |s: f64| lyap.g_unchecked(s * dx, &dz.iter().map(|v| s * v).collect::<Vec<_>>()).sqrt();
            let mut hi = 1.0;
            while at(hi) < r {
                hi *= 2.0;
            }
            let mut lo = 0.0;
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if at(mid) < r {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let z: Vec<f64> = dz.iter().map(|v| hi * v).collect();
            if let Some(state) = state_near(cfg, hi * dx, &z) {
                out.push(state);
            }
        }
    }
    out
}

/// One start of the diffusion-scale drift check.
#[derive(Debug, Clone, Serialize)]
pub struct DriftSample {
    pub sqrt_g0: f64,
    pub mean_sqrt_g1: f64,
    pub se: f64,
    pub near: bool,
}

/// Estimates `E sqrt g(t0)` from each start by `reps` independent runs and
/// searches `(C, eps)` with `C` read off the starts whose `sqrt g(0)` is at
/// most `near_radius`.
pub fn check_diffusion_drift(
    cfg: &SystemConfig,
    lyap: &crate::lyapunov::LyapunovFn,
    starts: &[SystemState],
    t0: f64,
    reps: usize,
    near_radius: f64,
    seed: u64,
) -> Result<(Vec<DriftSample>, Option<crate::fluid::DriftInequality>), DesError> {
    use rayon::prelude::*;
    if reps < 2 || !(t0 > 0.0) {
        return Err(DesError::Config(format!("need reps >= 2 and t0 > 0, got {reps} and {t0}")));
    }
    let samples: Vec<DriftSample> = starts
        .par_iter()
        .enumerate()
        .map(|(i, start)| {
            let mut s0 = 0.0;
            let mut vals = Vec::with_capacity(reps);
            for rep in 0..reps {
                let rng = crate::rng_stream(seed, (i * reps + rep) as u64);
                let mut sim = Simulator::with_state(cfg.clone(), start.clone(), rng)?;
                let a = sim.scaled();
                s0 = lyap.g_unchecked(a.x, &a.z).sqrt();
                sim.advance_to(t0);
                let b = sim.scaled();
                vals.push(lyap.g_unchecked(b.x, &b.z).sqrt());
            }
            let m = vals.iter().sum::<f64>() / reps as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (reps - 1) as f64;
            Ok(DriftSample {
                sqrt_g0: s0,
                mean_sqrt_g1: m,
                se: (var / reps as f64).sqrt(),
                near: s0 <= near_radius,
            })
        })
        .collect::<Result<_, DesError>>()?;
    let pairs: Vec<(f64, f64, bool)> = samples.iter().map(|s| (s.sqrt_g0, s.mean_sqrt_g1, s.near)).collect();
    Ok((samples.clone(), crate::fluid::drift_inequality_from_pairs(&pairs)))
}
