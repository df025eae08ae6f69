//! The piecewise-OU limit: Brownian inputs pushed through `Psi`.
//!
//! The input covariance comes from the component decomposition of the
//! prelimit inputs,
//!
//! ```text
//! U = x(0) - mu beta t + E + e'M - G
//! V = (I - pe')z(0) + Phi0 + (I - pe')M
//! ```
//!
//! with each compensated counting process replaced by a Brownian motion of
//! matching variance rate under the fluid time change. `G` vanishes in the
//! limit because its time argument `int x^+` is of order `1/sqrt n`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::des::{Components, SamplingPlan};
use crate::fluid::FluidModel;
use crate::linalg::{self, LinalgError};
use crate::lyapunov::{self, neg_part, DomainError};
use crate::phasetype::PhaseTypeParams;
use crate::psi::{self, Grid, InputPath, PsiError, PsiStepper, StatePath};
use crate::stats::{self, BatchMeans, DensityTable, DistMeta, EmpiricalDist, StatsError};

/// Diagonal shift that lets the rank-deficient covariance factor.
pub const CHOLESKY_JITTER: f64 = 1e-12;
/// Relative disagreement above which the empirical cross term replaces the
/// derived one.
pub const CROSS_TOL: f64 = 0.15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("derivation bug: assembled covariance is not PSD (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Psi(#[from] PsiError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("invalid input: {0}")]
    Input(String),
}

/// Variance rates of the Brownian inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffusionCoeffs {
    pub var_u: f64,
    #[serde(serialize_with = "ser_matrix")]
    pub cov_v: DMatrix<f64>,
    #[serde(serialize_with = "ser_vector")]
    pub cross: DVector<f64>,
}

fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    serde::Serialize::serialize(&rows, s)
}

fn ser_vector<S: serde::Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
    serde::Serialize::serialize(&v.iter().copied().collect::<Vec<_>>(), s)
}

impl DiffusionCoeffs {
    pub fn zero(k: usize) -> Self {
        Self {
            var_u: 0.0,
            cov_v: DMatrix::zeros(k, k),
            cross: DVector::zeros(k),
        }
    }

    pub fn phases(&self) -> usize {
        self.cross.len()
    }

    /// The `(K+1) x (K+1)` covariance of `(U, V)` increments per unit time.
    pub fn assembled(&self) -> DMatrix<f64> {
        let k = self.phases();
        let mut m = DMatrix::zeros(k + 1, k + 1);
        m[(0, 0)] = self.var_u;
        for j in 0..k {
            m[(0, j + 1)] = self.cross[j];
            m[(j + 1, 0)] = self.cross[j];
            for l in 0..k {
                m[(j + 1, l + 1)] = self.cov_v[(j, l)];
            }
        }
        m
    }

    pub fn from_assembled(m: &DMatrix<f64>) -> Self {
        let k = m.nrows() - 1;
        Self {
            var_u: m[(0, 0)],
            cov_v: m.view((1, 1), (k, k)).into_owned(),
            cross: DVector::from_fn(k, |j, _| m[(0, j + 1)]),
        }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        let m = self.assembled();
        let scale = 1f64.max(m.amax());
        let min = linalg::lambda_min(&linalg::sym(&m))?;
        if min < -1e-10 * scale {
            return Err(DiffusionError::NotPsd(min));
        }
        let e = DVector::from_element(self.phases(), 1.0);
        let null = (&self.cov_v * &e).amax().max(self.cross.sum().abs());
        if null > 1e-10 * scale {
            return Err(DiffusionError::Input(format!("V block is not null along e ({null:e})")));
        }
        Ok(())
    }

    /// `|A - B|_F / |B|_F` of the assembled matrices.
    pub fn relative_frobenius(&self, reference: &DiffusionCoeffs) -> f64 {
        let a = self.assembled();
        let b = reference.assembled();
        (a - &b).norm() / b.norm()
    }
}

/// Covariance rate of the compensated service-and-routing martingale `M`.
pub fn service_martingale_covariance(service: &PhaseTypeParams) -> DMatrix<f64> {
    let k = service.phases();
    let routing = service.routing();
    let nu = service.nu();
    let gamma = service.gamma();
    let mut sigma = DMatrix::zeros(k, k);
    for kk in 0..k {
        let w = nu[kk] * gamma[kk];
        let row = routing.row(kk).transpose();
        sigma += (DMatrix::from_diagonal(&row) - &row * row.transpose()) * w;
    }
    let ip = DMatrix::identity(k, k) - routing.transpose();
    let rate = DMatrix::from_diagonal(&nu.component_mul(gamma));
    sigma + &ip * rate * ip.transpose()
}

/// Limit covariance of the inputs `(U, V)` for interarrival variability
/// `c_u2`. The abandonment term does not contribute, so `alpha` only enters
/// through the drift.
pub fn derive_covariance(service: &PhaseTypeParams, c_u2: f64, _alpha: f64) -> Result<DiffusionCoeffs, DiffusionError> {
    if !(c_u2 >= 0.0) {
        return Err(DiffusionError::Input(format!("c_u2 must be nonnegative, got {c_u2}")));
    }
    let k = service.phases();
    let mu = service.mu();
    let p = service.p();
    let e = DVector::from_element(k, 1.0);
    let sigma_m = service_martingale_covariance(service);
    let proj = DMatrix::identity(k, k) - p * e.transpose();
    let var_u = c_u2 * mu + (e.transpose() * &sigma_m * &e)[(0, 0)];
    let cov_v = (DMatrix::from_diagonal(p) - p * p.transpose()) * mu + &proj * &sigma_m * proj.transpose();
    let cross = &proj * &sigma_m * &e;
    let coeffs = DiffusionCoeffs {
        var_u,
        cov_v: linalg::sym(&cov_v),
        cross,
    };
    coeffs.validate()?;
    Ok(coeffs)
}

/// Empirical covariance rate of `(U, V)` increments over windows of
/// `window` grid steps, pooled over runs. The mean increment (the drift
/// `-mu beta` of `U`) is removed.
pub fn empirical_increment_covariance(runs: &[Components], window: usize) -> Result<DiffusionCoeffs, DiffusionError> {
    let first = runs.first().ok_or_else(|| DiffusionError::Input("no runs".into()))?;
    let k = first.input.k;
    let mut incs: Vec<DVector<f64>> = Vec::new();
    let mut h = 0.0;
    for run in runs {
        let inp = &run.input;
        h = run.grid.dt * window as f64;
        let mut i = 0;
        while i + window < inp.len() {
            let j = i + window;
            let mut d = DVector::zeros(k + 1);
            d[0] = inp.u[j] - inp.u[i];
            for l in 0..k {
                d[l + 1] = inp.v_at(j)[l] - inp.v_at(i)[l];
            }
            incs.push(d);
            i = j;
        }
    }
    if incs.len() < 2 {
        return Err(DiffusionError::Input("too few increments".into()));
    }
    let count = incs.len() as f64;
    let mean = incs.iter().fold(DVector::zeros(k + 1), |acc, d| acc + d) / count;
    let mut cov = DMatrix::zeros(k + 1, k + 1);
    for d in &incs {
        let c = d - &mean;
        cov += &c * c.transpose();
    }
    cov /= (count - 1.0) * h;
    Ok(DiffusionCoeffs::from_assembled(&cov))
}

/// Keeps the derived coefficients unless the cross term disagrees with the
/// empirical one by more than 15% (relative to the larger of the two norms
/// and the `U` scale), in which case the empirical cross term is used.
pub fn reconcile_cross(derived: &DiffusionCoeffs, empirical: &DiffusionCoeffs) -> DiffusionCoeffs {
    let scale = derived.cross.norm().max(empirical.cross.norm()).max(1e-3 * derived.var_u.sqrt());
    let gap = (&derived.cross - &empirical.cross).norm();
    if gap > CROSS_TOL * scale {
        log::warn!(
            "derived cross term {:?} disagrees with empirical {:?}; using empirical",
            derived.cross,
            empirical.cross
        );
        // Keep V in the hyperplane and the matrix PSD by shrinking if needed.
        let mut out = derived.clone();
        let k = out.phases() as f64;
        let mean = empirical.cross.sum() / k;
        out.cross = empirical.cross.map(|c| c - mean);
        if out.validate().is_err() {
            out.cross = derived.cross.clone();
        }
        out
    } else {
        derived.clone()
    }
}

/// Gaussian increment generator for the inputs.
struct Noise {
    k: usize,
    chol: Option<DMatrix<f64>>,
    draws: Vec<f64>,
}

impl Noise {
    fn new(coeffs: &DiffusionCoeffs) -> Result<Self, DiffusionError> {
        let m = coeffs.assembled();
        let chol = if m.iter().all(|v| *v == 0.0) {
            None
        } else {
            Some(linalg::cholesky_jitter(&m, CHOLESKY_JITTER)?)
        };
        Ok(Self {
            k: coeffs.phases(),
            chol,
            draws: vec![0.0; coeffs.phases() + 1],
        })
    }

    /// Adds one increment of variance `dt` times the covariance to `(du, dv)`.
    fn draw<R: Rng + ?Sized>(&mut self, dt: f64, rng: &mut R, du: &mut f64, dv: &mut [f64]) {
        let Some(l) = &self.chol else {
            return;
        };
        let sd = dt.sqrt();
        for d in self.draws.iter_mut() {
            *d = StandardNormal.sample(rng);
        }
        let dim = self.k + 1;
        let mut out = [0.0f64; 16];
        let mut heap;
        let buf: &mut [f64] = if dim <= 16 {
            &mut out[..dim]
        } else {
            heap = vec![0.0; dim];
            &mut heap
        };
        for i in 0..dim {
            let mut s = 0.0;
            for j in 0..=i {
                s += l[(i, j)] * self.draws[j];
            }
            buf[i] = s * sd;
        }
        *du += buf[0];
        // Project the V increment back onto e'v = 0; only jitter leaves it.
        let mean = buf[1..].iter().sum::<f64>() / self.k as f64;
        for j in 0..self.k {
            dv[j] += buf[j + 1] - mean;
        }
    }
}

/// Brownian inputs `U = x0 - mu beta t + W_u`, `V = (I - pe')z0 + W_v`.
pub fn brownian_inputs(
    x0: f64,
    z0: &[f64],
    coeffs: &DiffusionCoeffs,
    model: &FluidModel,
    grid: &Grid,
    rng: &mut ChaCha8Rng,
) -> Result<InputPath, DiffusionError> {
    let base = model.inputs(x0, z0, grid).map_err(|e| DiffusionError::Input(e.to_string()))?;
    let mut noise = Noise::new(coeffs)?;
    let k = model.phases();
    let mut out = base.clone();
    let mut wu = 0.0;
    let mut wv = vec![0.0; k];
    for i in 1..grid.len() {
        noise.draw(grid.dt, rng, &mut wu, &mut wv);
        out.u[i] += wu;
        for (v, w) in out.v[i * k..(i + 1) * k].iter_mut().zip(&wv) {
            *v += w;
        }
    }
    Ok(out)
}

/// A piecewise-OU path on `grid`, as `Psi` of Brownian inputs.
pub fn simulate_pou(
    x0: f64,
    z0: &[f64],
    coeffs: &DiffusionCoeffs,
    model: &FluidModel,
    grid: &Grid,
    seed: u64,
) -> Result<StatePath, DiffusionError> {
    lyapunov::check_manifold(x0, z0)?;
    let mut rng = crate::rng_stream(seed, 1);
    let input = brownian_inputs(x0, z0, coeffs, model, grid, &mut rng)?;
    Ok(psi::psi(&input, &model.psi_params(), grid)?)
}

/// Runs the piecewise-OU process forward without storing the path.
pub struct PouStream {
    stepper: PsiStepper,
    noise: Noise,
    rng: ChaCha8Rng,
    dt: f64,
    drift: f64,
    u: f64,
    v: Vec<f64>,
    x: f64,
    z: Vec<f64>,
    t: f64,
}

impl PouStream {
    pub fn new(x0: f64, z0: &[f64], coeffs: &DiffusionCoeffs, model: &FluidModel, dt: f64, seed: u64) -> Result<Self, DiffusionError> {
        lyapunov::check_manifold(x0, z0)?;
        let total: f64 = z0.iter().sum();
        let v: Vec<f64> = z0.iter().zip(model.p.iter()).map(|(z, p)| z - p * total).collect();
        let mut stepper = PsiStepper::new(model.psi_params(), dt);
        let mut z = vec![0.0; z0.len()];
        let x = stepper.step(x0, &v, &mut z);
        Ok(Self {
            stepper,
            noise: Noise::new(coeffs)?,
            rng: crate::rng_stream(seed, 1),
            dt,
            drift: -model.mu * model.beta,
            u: x0,
            v,
            x,
            z,
            t: 0.0,
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn state(&self) -> (f64, &[f64]) {
        (self.x, &self.z)
    }

    pub fn step(&mut self) {
        self.u += self.drift * self.dt;
        self.noise.draw(self.dt, &mut self.rng, &mut self.u, &mut self.v);
        self.x = self.stepper.step(self.u, &self.v, &mut self.z);
        self.t += self.dt;
    }

    /// Steps until the clock reaches `t` (to within half a step).
    pub fn advance_to(&mut self, t: f64) {
        while self.t + 0.5 * self.dt < t {
            self.step();
        }
    }
}

/// Stationary samples of the piecewise-OU process.
#[derive(Debug, Clone)]
pub struct PouRun {
    pub dist: EmpiricalDist,
    pub x_plus: BatchMeans,
    pub x_minus: BatchMeans,
    pub plan: SamplingPlan,
    pub dt: f64,
}

impl PouRun {
    /// Writes `x,z1..zK`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let k = self.dist.k;
        write!(w, "x")?;
        for j in 1..=k {
            write!(w, ",z{j}")?;
        }
        writeln!(w)?;
        for i in 0..self.dist.len() {
            write!(w, "{}", self.dist.x[i] + 0.0)?;
            for v in self.dist.z_at(i) {
                write!(w, ",{}", v + 0.0)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Samples at `burn_in + i spacing` from one long run started at `(x0, z0)`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_stationary_pou(
    x0: f64,
    z0: &[f64],
    coeffs: &DiffusionCoeffs,
    model: &FluidModel,
    plan: SamplingPlan,
    dt: f64,
    seed: u64,
) -> Result<PouRun, DiffusionError> {
    const BATCHES: usize = 20;
    if plan.samples < BATCHES || !(plan.spacing > 0.0) || !(dt > 0.0) {
        return Err(DiffusionError::Input(format!("bad sampling plan {plan:?} with dt {dt}")));
    }
    let k = model.phases();
    let mut stream = PouStream::new(x0, z0, coeffs, model, dt, seed)?;
    let mut xs = Vec::with_capacity(plan.samples);
    let mut zs = Vec::with_capacity(plan.samples * k);
    let mut target = plan.samples;
    let mut extensions = 0;
    loop {
        while xs.len() < target {
            stream.advance_to(plan.burn_in + xs.len() as f64 * plan.spacing);
            let (x, z) = stream.state();
            xs.push(x);
            zs.extend_from_slice(z);
        }
        let plus: Vec<f64> = xs.iter().map(|x| x.max(0.0)).collect();
        let minus: Vec<f64> = xs.iter().map(|x| neg_part(*x)).collect();
        let x_plus = stats::batch_means(&plus, BATCHES);
        let x_minus = stats::batch_means(&minus, BATCHES);
        if (x_plus.lag1 > 0.5 || x_minus.lag1 > 0.5) && extensions < 2 {
            log::warn!("batch means correlated; extending to {} samples", 2 * target);
            extensions += 1;
            target *= 2;
            continue;
        }
        let meta = DistMeta {
            n: None,
            seed,
            burn_in: plan.burn_in,
            spacing: plan.spacing,
            se_x_plus: x_plus.se,
            se_x_minus: x_minus.se,
        };
        let dist = EmpiricalDist::new(k, xs, zs, None)?.with_meta(meta);
        return Ok(PouRun {
            dist,
            x_plus,
            x_minus,
            plan: SamplingPlan { samples: target, ..plan },
            dt,
        });
    }
}

/// Stationary density of the one-dimensional piecewise OU process with drift
/// `-mu beta - alpha x^+ + mu x^-` and variance rate `var_u`, tabulated on
/// `points` grid points covering all but about `1e-12` of the mass.
pub fn pou_1d_density_oracle(beta: f64, alpha: f64, mu: f64, var_u: f64, points: usize) -> DensityTable {
    assert!(var_u > 0.0 && points >= 3);
    // 2/var_u times the integral of the drift from 0 to x.
    let phi = |x: f64| {
        let quad = if x >= 0.0 { alpha } else { mu };
        2.0 / var_u * (-mu * beta * x - 0.5 * quad * x * x)
    };
    let sd_pos = (var_u / (2.0 * alpha)).sqrt();
    let sd_neg = (var_u / (2.0 * mu)).sqrt();
    let lo = (-beta).min(0.0) - 7.5 * sd_neg;
    let hi = (-mu * beta / alpha).max(0.0) + 7.5 * sd_pos;
    let xs: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    let peak = xs.iter().map(|x| phi(*x)).fold(f64::NEG_INFINITY, f64::max);
    let dens: Vec<f64> = xs.iter().map(|x| (phi(*x) - peak).exp()).collect();
    DensityTable::new(xs, dens)
}
