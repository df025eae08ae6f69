//! Command-line experiments: config loading, subcommands, manifests and
//! plot data.
//!
//! Exit codes are 0 when every checked property holds, 1 when one fails and
//! 2 for usage or configuration errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cqlf::{Cqlf, SolverOptions};
use crate::des::{self, SamplingPlan, SystemConfig, SystemState};
use crate::diffusion;
use crate::fluid::{self, FluidModel, FluidTrajectory, Method};
use crate::harris;
use crate::interarrival::Family;
use crate::lyapunov::{self, LyapunovFn};
use crate::phasetype::{PhaseTypeParams, PhaseTypeSpec};
use crate::psi::Grid;
use crate::stats;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("property failure: {0}")]
    Property(String),
    #[error("computation failed: {0}")]
    Compute(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Property(_) | CliError::Compute(_) => 1,
            CliError::Config(_) | CliError::Io { .. } => 2,
        }
    }
}

fn compute<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Compute(e.to_string())
}

fn config_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

/// Pass/fail thresholds; all of them are written to the manifest.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Tolerances {
    pub monotone_rel: f64,
    pub covariance_frobenius: f64,
    pub cross_term: f64,
    pub ks_final: f64,
    pub diffusion_tail: f64,
    pub tail_bound: f64,
    pub harris_bound: f64,
    pub harris_grid_side: usize,
    pub fluid_band_radius: f64,
    pub fluid_max_radius: f64,
}

pub const TOLERANCES: Tolerances = Tolerances {
    monotone_rel: fluid::MONOTONE_TOL,
    covariance_frobenius: 0.10,
    cross_term: diffusion::CROSS_TOL,
    ks_final: 0.05,
    diffusion_tail: 0.01,
    tail_bound: 0.05,
    harris_bound: -1.0,
    harris_grid_side: 100,
    fluid_band_radius: 1e3,
    fluid_max_radius: 1e6,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ServiceConfig {
    Exponential {
        rate: f64,
    },
    Erlang {
        stages: usize,
        rate: f64,
    },
    Hyperexponential {
        probs: Vec<f64>,
        rates: Vec<f64>,
    },
    General {
        p: Vec<f64>,
        nu: Vec<f64>,
        #[serde(rename = "P")]
        routing: Vec<Vec<f64>>,
    },
}

impl ServiceConfig {
    pub fn build(&self) -> Result<PhaseTypeParams, CliError> {
        match self {
            ServiceConfig::Exponential { rate } => PhaseTypeParams::exponential(*rate),
            ServiceConfig::Erlang { stages, rate } => PhaseTypeParams::erlang(*stages, *rate),
            ServiceConfig::Hyperexponential { probs, rates } => PhaseTypeParams::hyperexponential(probs.clone(), rates.clone()),
            ServiceConfig::General { p, nu, routing } => PhaseTypeSpec {
                p: p.clone(),
                nu: nu.clone(),
                routing: routing.clone(),
            }
            .build(),
        }
        .map_err(|e| CliError::Config(format!("service: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Horizons {
    /// Length of fluid trajectories.
    pub fluid: f64,
    /// `t0` of the drift inequalities.
    pub drift: f64,
    /// Length of each component-extraction run.
    pub components: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    pub burn_in: f64,
    pub spacing: f64,
    pub samples: usize,
}

impl From<Sampling> for SamplingPlan {
    fn from(s: Sampling) -> Self {
        SamplingPlan {
            burn_in: s.burn_in,
            samples: s.samples,
            spacing: s.spacing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub service: ServiceConfig,
    pub interarrival: Family,
    pub alpha: f64,
    pub beta: f64,
    pub n_list: Vec<usize>,
    pub horizons: Horizons,
    pub sampling: Sampling,
    pub seeds: Vec<u64>,
    /// Grid step for fluid paths, component extraction and the diffusion.
    pub dt: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.scenario.trim().is_empty() {
            return bad("scenario must be named".into());
        }
        let service = self.service.build()?;
        self.interarrival.validate().map_err(config_err)?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !self.beta.is_finite() {
            return bad("beta must be finite".into());
        }
        if self.n_list.is_empty() {
            return bad("n_list is empty".into());
        }
        if self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("n_list must be strictly increasing, got {:?}", self.n_list));
        }
        for &n in &self.n_list {
            SystemConfig::new(n, self.beta, self.interarrival, service.clone(), self.alpha).map_err(config_err)?;
        }
        if self.seeds.is_empty() {
            return bad("seeds is empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return bad("seeds must be distinct".into());
        }
        let h = self.horizons;
        if !(h.fluid > 0.0 && h.drift > 0.0 && h.components > 0.0) {
            return bad("horizons must be positive".into());
        }
        if !(self.dt > 0.0 && self.dt < h.drift.min(h.fluid).min(h.components)) {
            return bad(format!("dt must be positive and below every horizon, got {}", self.dt));
        }
        let s = self.sampling;
        if !(s.burn_in >= 0.0 && s.spacing > 0.0 && s.samples >= 20) {
            return bad("sampling needs burn_in >= 0, spacing > 0 and at least 20 samples".into());
        }
        Ok(())
    }

    fn system(&self, n: usize) -> Result<SystemConfig, CliError> {
        SystemConfig::new(n, self.beta, self.interarrival, self.service.build()?, self.alpha).map_err(config_err)
    }
}

#[derive(Debug, Parser)]
#[command(name = "qedlab", version, about = "Halfin-Whitt GI/Ph/n+M experiments")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Added to every configured seed.
    #[arg(long, global = true, default_value_t = 0, allow_negative_numbers = true)]
    seed_offset: i64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Solve for Q and certify it.
    Cqlf,
    /// Fluid drift suite.
    Fluid,
    /// Stationary estimation of the prelimit system for each n.
    Simulate,
    /// Covariance derivation and validation, and the diffusion's stationary law.
    Diffusion,
    /// Full pipeline: prelimit laws, diffusion law and distances.
    Interchange,
    /// Petite-set constants and the generator bound.
    HarrisCheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Cqlf => "cqlf",
            Command::Fluid => "fluid",
            Command::Simulate => "simulate",
            Command::Diffusion => "diffusion",
            Command::Interchange => "interchange",
            Command::HarrisCheck => "harris-check",
        }
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("qedlab {}: {e}", args.command.name());
            e.exit_code()
        }
    }
}

fn execute(args: &Args) -> Result<(), CliError> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let cfg = ExperimentConfig::parse(&text)?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set output_dir".into()))?;
    fs::create_dir_all(&out).map_err(|source| CliError::Io { path: out.clone(), source })?;
    if let Some(jobs) = args.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        // Fails harmlessly when a pool already exists (repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let seeds: Vec<u64> = cfg.seeds.iter().map(|s| s.wrapping_add_signed(args.seed_offset)).collect();
    let mut ctx = Run {
        cfg,
        out,
        seeds,
        used_seeds: BTreeMap::new(),
        outputs: Vec::new(),
        checks: BTreeMap::new(),
    };
    let result = match args.command {
        Command::Cqlf => ctx.cqlf(),
        Command::Fluid => ctx.fluid(),
        Command::Simulate => ctx.simulate(),
        Command::Diffusion => ctx.diffusion(),
        Command::Interchange => ctx.interchange(),
        Command::HarrisCheck => ctx.harris(),
    };
    ctx.write_manifest(args, &text)?;
    result?;
    let failed: Vec<&String> = ctx.checks.iter().filter(|(_, ok)| !**ok).map(|(k, _)| k).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Property(failed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")))
    }
}

/// splitmix64, used to derive independent per-task seeds from one base seed.
pub fn derive_seed(base: u64, task: u64) -> u64 {
    let mut z = base ^ task.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    seeds: Vec<u64>,
    used_seeds: BTreeMap<String, u64>,
    outputs: Vec<String>,
    checks: BTreeMap<String, bool>,
}

impl Run {
    fn seed(&mut self, label: &str, task: u64) -> u64 {
        let s = derive_seed(self.seeds[0], task);
        self.used_seeds.insert(label.to_string(), s);
        s
    }

    fn check(&mut self, name: &str, ok: bool) {
        if !ok {
            log::error!("check failed: {name}");
        }
        self.checks.insert(name.to_string(), ok);
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<fs::File>, CliError> {
        let path = self.out.join(name);
        let f = fs::File::create(&path).map_err(|source| CliError::Io { path, source })?;
        self.outputs.push(name.to_string());
        Ok(BufWriter::new(f))
    }

    fn write_with<F>(&mut self, name: &str, f: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
    {
        let mut w = self.create(name)?;
        f(&mut w).and_then(|_| w.flush()).map_err(|source| CliError::Io {
            path: self.out.join(name),
            source,
        })
    }

    fn write_json(&mut self, name: &str, value: &Value) -> Result<(), CliError> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)
        })
    }

    fn write_plot(&mut self, name: &str, columns: &[&str], rows: &[Vec<f64>]) -> Result<(), CliError> {
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CliError::Property(format!("non-finite value in plot data {name}")));
        }
        self.write_with(name, |w| write_plot_data(w, columns, rows))
    }

    fn lyapunov(&self, service: &PhaseTypeParams) -> Result<(Cqlf, LyapunovFn), CliError> {
        let opts = SolverOptions {
            seed: self.seeds[0],
            ..SolverOptions::default()
        };
        let cqlf = Cqlf::build(service, self.cfg.alpha, opts).map_err(|e| CliError::Property(format!("cqlf: {e}")))?;
        let lyap = LyapunovFn::new(service, &cqlf, self.cfg.alpha, self.cfg.beta);
        Ok((cqlf, lyap))
    }

    fn cqlf(&mut self) -> Result<(), CliError> {
        let service = self.cfg.service.build()?;
        let (cqlf, _) = self.lyapunov(&service)?;
        self.used_seeds.insert("cqlf".into(), self.seeds[0]);
        self.check("cqlf certificates", cqlf.cert.holds());
        let value = json!({
            "Q": serde_json::to_value(&cqlf).map_err(compute)?["Q"],
            "b": cqlf.b,
            "kappa": cqlf.kappa,
            "certificates": cqlf.cert,
        });
        self.write_json("cqlf.json", &value)?;
        self.write_json(
            "kappa_certificates.json",
            &serde_json::to_value(cqlf.kappa_certificates).map_err(compute)?,
        )
    }

    fn fluid(&mut self) -> Result<(), CliError> {
        let service = self.cfg.service.build()?;
        let k = service.phases();
        let (_, lyap) = self.lyapunov(&service)?;
        let model = FluidModel::new(&service, self.cfg.alpha, self.cfg.beta);
        let grid = Grid::new(self.cfg.horizons.fluid, self.cfg.dt).map_err(compute)?;
        let mut rng = crate::rng_stream(self.seed("fluid_starts", 1), 0);
        let starts: Vec<_> = (0..100)
            .map(|_| fluid::sample_start(k, 1e-2, TOLERANCES.fluid_max_radius, &mut rng))
            .collect();
        let monotone = fluid::check_g_monotone(&model, &lyap, &starts, &grid).map_err(compute)?;
        self.check("g monotone along fluid paths", monotone.violations == 0);

        let m = fluid::m_used(&lyap);
        let far: Vec<_> = (0..100)
            .map(|_| lyapunov::sample_on_manifold(k, TOLERANCES.fluid_band_radius, &mut rng))
            .collect();
        let band_grid = Grid::new(self.cfg.horizons.fluid.min(2.0), self.cfg.dt).map_err(compute)?;
        let band = fluid::check_geometric_band(&model, &lyap, &far, &band_grid, m);
        let band_json = match &band {
            Ok(b) => serde_json::to_value(b).map_err(compute)?,
            Err(e) => json!({ "error": e.to_string() }),
        };
        self.check("geometric band", band.map(|b| b.c_hat > 0.0).unwrap_or(false));

        let mut drift_starts: Vec<_> = (0..200)
            .map(|_| fluid::sample_start(k, 1e-2, TOLERANCES.fluid_max_radius, &mut rng))
            .collect();
        drift_starts.extend(far.iter().cloned());
        let drift = fluid::check_fluid_drift_inequality(&model, &lyap, &drift_starts, self.cfg.horizons.drift, self.cfg.dt, m);
        let drift_json = match &drift {
            Ok(d) => serde_json::to_value(d).map_err(compute)?,
            Err(e) => json!({ "error": e.to_string() }),
        };
        self.check("fluid drift inequality", drift.map(|d| d.eps_hat > 0.0).unwrap_or(false));

        // A few trajectories for plotting.
        let mut rows = Vec::new();
        for (i, (x0, z0)) in starts.iter().take(5).enumerate() {
            let path = model.integrate(*x0, z0, &grid, Method::DirectOde).map_err(compute)?;
            let traj = FluidTrajectory::new(path, grid, &lyap);
            let name = format!("fluid_traj_{i}.csv");
            self.write_with(&name, |w| traj.write_csv(w))?;
            let stride = (grid.steps / 200).max(1);
            for j in (0..grid.len()).step_by(stride) {
                rows.push(vec![i as f64, grid.time(j), traj.g[j]]);
            }
        }
        self.write_plot("g_along_fluid.dat", &["trajectory", "t", "g"], &rows)?;
        self.write_json(
            "fluid_report.json",
            &json!({ "monotone": monotone, "band": band_json, "drift": drift_json, "M_used": m }),
        )
    }

    fn simulate(&mut self) -> Result<(), CliError> {
        let mut summary = Vec::new();
        for (i, n) in self.cfg.n_list.clone().into_iter().enumerate() {
            let sys = self.cfg.system(n)?;
            let seed = self.seed(&format!("des_n{n}"), 100 + i as u64);
            let run = des::estimate_stationary(&sys, self.cfg.sampling.into(), seed).map_err(compute)?;
            self.write_with(&format!("stationary_n{n}.csv"), |w| run.write_csv(w))?;
            let mut entry = json!({
                "n": n,
                "samples": run.plan.samples,
                "extensions": run.extensions,
                "mean_x_plus": run.x_plus.mean,
                "se_x_plus": run.x_plus.se,
                "mean_x_minus": run.x_minus.mean,
                "se_x_minus": run.x_minus.se,
            });
            if sys.service.phases() == 1 && matches!(sys.interarrival, Family::Exponential) {
                let law = run.n_law();
                let oracle = des::mm_n_m_oracle(n, sys.lambda(), sys.service.mu(), sys.alpha, 4 * n + 16);
                let len = law.len().max(oracle.len());
                let tv = (0..len)
                    .map(|j| (law.get(j).unwrap_or(&0.0) - oracle.get(j).unwrap_or(&0.0)).abs())
                    .sum::<f64>()
                    / 2.0;
                entry["tv_birth_death"] = json!(tv);
            }
            summary.push(entry);
        }
        self.write_json("simulate.json", &json!(summary))
    }

    /// Derived and empirical covariance, reconciled, at the largest `n`.
    fn covariance(&mut self, service: &PhaseTypeParams) -> Result<(diffusion::DiffusionCoeffs, Value), CliError> {
        let n = *self.cfg.n_list.last().expect("validated");
        let sys = self.cfg.system(n)?;
        let derived = diffusion::derive_covariance(service, sys.c_u2(), self.cfg.alpha).map_err(compute)?;
        let grid = Grid::new(self.cfg.horizons.components, self.cfg.dt).map_err(compute)?;
        let mut busy: Vec<u64> = service.gamma().iter().map(|g| (g * n as f64).floor() as u64).collect();
        let short = n as u64 - busy.iter().sum::<u64>();
        busy[0] += short;
        let initial = SystemState {
            customers: n as u64,
            z: busy,
        };
        let mut runs = Vec::new();
        for (r, base) in self.seeds.clone().into_iter().enumerate() {
            let seed = derive_seed(base, 200);
            self.used_seeds.insert(format!("components_{r}"), seed);
            runs.push(des::extract_components(&sys, initial.clone(), &grid, seed).map_err(compute)?);
        }
        // Increments over one time unit.
        let window = ((1.0 / self.cfg.dt).round() as usize).max(1);
        let empirical = diffusion::empirical_increment_covariance(&runs, window).map_err(compute)?;
        let rel = derived.relative_frobenius(&empirical);
        self.check("covariance within tolerance", rel <= TOLERANCES.covariance_frobenius);
        let used = diffusion::reconcile_cross(&derived, &empirical);
        let max_residual = runs.iter().map(|c| c.residual / c.bound).fold(0.0, f64::max);
        self.check(
            "prelimit state equals Psi of its inputs",
            runs.iter().all(|c| c.residual <= c.bound),
        );
        let report = json!({
            "n": n,
            "derived": derived,
            "empirical": empirical,
            "used": used,
            "relative_frobenius": rel,
            "max_residual_over_bound": max_residual,
        });
        Ok((used, report))
    }

    fn pou_stationary(&mut self, service: &PhaseTypeParams, coeffs: &diffusion::DiffusionCoeffs) -> Result<diffusion::PouRun, CliError> {
        let model = FluidModel::new(service, self.cfg.alpha, self.cfg.beta);
        let seed = self.seed("pou", 300);
        let z0 = vec![0.0; service.phases()];
        diffusion::estimate_stationary_pou(0.0, &z0, coeffs, &model, self.cfg.sampling.into(), self.cfg.dt, seed).map_err(compute)
    }

    fn diffusion(&mut self) -> Result<(), CliError> {
        let service = self.cfg.service.build()?;
        let (coeffs, report) = self.covariance(&service)?;
        let run = self.pou_stationary(&service, &coeffs)?;
        self.write_with("pou_stationary.csv", |w| run.write_csv(w))?;
        let mut report = report;
        report["stationary"] = json!({
            "samples": run.plan.samples,
            "dt": run.dt,
            "mean_x_plus": run.x_plus.mean,
            "se_x_plus": run.x_plus.se,
            "mean_x_minus": run.x_minus.mean,
            "se_x_minus": run.x_minus.se,
        });
        self.write_json("diffusion.json", &report)
    }

    fn interchange(&mut self) -> Result<(), CliError> {
        let service = self.cfg.service.build()?;
        let (_, lyap) = self.lyapunov(&service)?;
        let n_max = *self.cfg.n_list.last().expect("validated");
        let c_u2 = self.cfg.system(n_max)?.c_u2();
        let coeffs = diffusion::derive_covariance(&service, c_u2, self.cfg.alpha).map_err(compute)?;
        let pou = self.pou_stationary(&service, &coeffs)?;

        let mut runs = Vec::new();
        for (i, n) in self.cfg.n_list.clone().into_iter().enumerate() {
            let sys = self.cfg.system(n)?;
            let seed = self.seed(&format!("des_n{n}"), 100 + i as u64);
            runs.push((n, des::estimate_stationary(&sys, self.cfg.sampling.into(), seed).map_err(compute)?));
        }

        // Tail levels: the one where the diffusion keeps 1% of its mass, and
        // a few around it for the curves.
        let s_star = pou.dist.sqrt_g_marginal(&lyap).upper_quantile(TOLERANCES.diffusion_tail);
        let s_grid: Vec<f64> = [0.25, 0.5, 1.0, 1.5, 2.0].iter().map(|f| f * s_star).collect();
        let dists: Vec<(usize, &stats::EmpiricalDist)> = runs.iter().map(|(n, r)| (*n, &r.dist)).collect();
        let report = stats::interchange_report(&dists, &pou.dist, &lyap, &s_grid).map_err(compute)?;
        self.write_with("interchange.csv", |w| report.write_csv(w))?;

        let last = report.rows.last().expect("nonempty");
        let tight = report.max_tails[2] < TOLERANCES.tail_bound;
        self.check("distances non-increasing in n", report.monotone);
        self.check("final KS distance", last.ks_x < TOLERANCES.ks_final);
        self.check("tightness", tight);

        // K = 1: the diffusion's x-law is also available by quadrature.
        let mut oracle_ks = Value::Null;
        if service.phases() == 1 {
            let oracle = diffusion::pou_1d_density_oracle(self.cfg.beta, self.cfg.alpha, service.mu(), coeffs.var_u, 20_001);
            let ks: Vec<f64> = runs
                .iter()
                .map(|(_, r)| stats::ks_table(&r.dist.x_marginal(), &oracle))
                .collect::<Result<_, _>>()
                .map_err(compute)?;
            oracle_ks = json!(ks);
        }

        let dist_rows: Vec<Vec<f64>> = report.rows.iter().map(|r| vec![r.n as f64, r.ks_x, r.w1_x, r.ks_g, r.se]).collect();
        self.write_plot("distances.dat", &["n", "ks_x", "w1_x", "ks_g", "se"], &dist_rows)?;
        let mut tail_rows = Vec::new();
        for (j, s) in report.s_grid.iter().enumerate() {
            let mut row = vec![*s, report.diffusion_tails[j]];
            row.extend(report.rows.iter().map(|r| r.tails[j]));
            tail_rows.push(row);
        }
        let names: Vec<String> = self.cfg.n_list.iter().map(|n| format!("tail_n{n}")).collect();
        let mut cols = vec!["s", "tail_diffusion"];
        cols.extend(names.iter().map(String::as_str));
        self.write_plot("tails.dat", &cols, &tail_rows)?;

        self.write_json(
            "interchange.json",
            &json!({
                "report": report,
                "s_star": s_star,
                "ks_to_quadrature": oracle_ks,
                "pass": { "monotone": report.monotone, "final_ks": last.ks_x < TOLERANCES.ks_final, "tight": tight },
            }),
        )
    }

    fn harris(&mut self) -> Result<(), CliError> {
        let service = self.cfg.service.build()?;
        let nu: Vec<f64> = service.nu().iter().copied().collect();
        let mut rows = Vec::new();
        for n in self.cfg.n_list.clone() {
            let sys = self.cfg.system(n)?;
            let law = sys.interarrival_law();
            let set = harris::petite_set_constants(&law, self.cfg.alpha, n).map_err(|e| CliError::Property(e.to_string()))?;
            let grid = harris::verify_outside(&law, self.cfg.alpha, &set, TOLERANCES.harris_grid_side).map_err(compute)?;
            self.check(&format!("generator bound outside B (n = {n})"), grid.holds());
            rows.push(json!({
                "n": n,
                "C1": set.c1,
                "C2": set.c2,
                "H": set.h,
                "B": set.describe(),
                "nu": nu,
                "grid": grid,
            }));
        }
        let value = json!(rows);
        println!("{}", serde_json::to_string_pretty(&value).map_err(compute)?);
        self.write_json("harris.json", &value)
    }

    fn write_manifest(&mut self, args: &Args, text: &str) -> Result<(), CliError> {
        let hash: String = Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
        let mut outputs = self.outputs.clone();
        outputs.sort();
        let manifest = json!({
            "scenario": self.cfg.scenario,
            "subcommand": args.command.name(),
            "config_sha256": hash,
            "config": self.cfg,
            "seed_offset": args.seed_offset,
            "seeds": self.seeds,
            "derived_seeds": self.used_seeds,
            "versions": {
                "qedlab": env!("CARGO_PKG_VERSION"),
                "serde_json": "1",
                "nalgebra": "0.35",
                "rand_chacha": "0.9",
            },
            "tolerances": TOLERANCES,
            "checks": self.checks,
            "outputs": outputs,
        });
        self.write_json("manifest.json", &manifest)
    }
}

/// Whitespace-separated columns under a one-line `#` header.
pub fn write_plot_data<W: Write>(mut w: W, columns: &[&str], rows: &[Vec<f64>]) -> std::io::Result<()> {
    writeln!(w, "# {}", columns.join(" "))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{}", v + 0.0)).collect();
        writeln!(w, "{}", cells.join(" "))?;
    }
    Ok(())
}

/// Reads back a plot file: the header columns and the numeric rows.
pub fn read_plot_data(path: &Path) -> std::io::Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(|h| h.strip_prefix("# "))
        .map(|h| h.split_whitespace().map(String::from).collect())
        .unwrap_or_default();
    let rows = lines
        .map(|l| l.split_whitespace().map(|c| c.parse::<f64>().unwrap_or(f64::NAN)).collect())
        .collect();
    Ok((header, rows))
}
