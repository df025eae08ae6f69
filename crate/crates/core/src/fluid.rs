//! The fluid model: `Psi` applied to drift-only inputs, or equivalently the
//! switched linear ODE
//!
//! ```text
//! x >= 0:  x' = -mu beta - alpha x - e'Rz,   z' = -(I - pe')Rz
//! x <  0:  x' = -mu beta - e'Rz,             z' = -(I - pe')Rz + p x'
//! ```
//!
//! `x'` is continuous across `x = 0`, so crossings are transversal and the
//! event locator never has to deal with sliding motion.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::linalg;
use crate::lyapunov::{self, DomainError, LyapunovFn};
use crate::phasetype::PhaseTypeParams;
use crate::psi::{self, Grid, InputPath, PsiError, PsiParams, StatePath};

/// Crossings of `x = 0` allowed per trajectory before giving up.
pub const MAX_CROSSINGS: usize = 10_000;
/// Accuracy of the event locator on `x = 0`.
pub const EVENT_TOL: f64 = 1e-10;
/// Relative slack in the monotonicity check.
pub const MONOTONE_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FluidError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Psi(#[from] PsiError),
    #[error("step-size fault: more than {MAX_CROSSINGS} crossings of x = 0")]
    Chattering,
    #[error("property failure: {0}")]
    Property(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ViaPsi,
    DirectOde,
}

#[derive(Debug, Clone)]
pub struct FluidModel {
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    pub r: DMatrix<f64>,
    pub p: DVector<f64>,
    e_r: DVector<f64>,
    c: DMatrix<f64>,
}

impl FluidModel {
    pub fn new(service: &PhaseTypeParams, alpha: f64, beta: f64) -> Self {
        Self::from_parts(service.r().clone(), service.p().clone(), service.mu(), alpha, beta)
    }

    pub fn from_parts(r: DMatrix<f64>, p: DVector<f64>, mu: f64, alpha: f64, beta: f64) -> Self {
        let k = p.len();
        let e = DVector::from_element(k, 1.0);
        let e_r = r.transpose() * &e;
        let c = (DMatrix::identity(k, k) - &p * e.transpose()) * &r;
        Self {
            alpha,
            beta,
            mu,
            r,
            p,
            e_r,
            c,
        }
    }

    pub fn phases(&self) -> usize {
        self.p.len()
    }

    pub fn psi_params(&self) -> PsiParams {
        PsiParams::new(self.alpha, self.r.clone(), self.p.clone())
    }

    /// The vector field of one branch, extended past the switching surface.
    fn field(&self, positive: bool, x: f64, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let erz = self.e_r.dot(z);
        let cz = &self.c * z;
        if positive {
            (-self.mu * self.beta - self.alpha * x - erz, -cz)
        } else {
            let dx = -self.mu * self.beta - erz;
            (dx, &self.p * dx - cz)
        }
    }

    /// The right-hand side at `(x, z)`.
    pub fn velocity(&self, x: f64, z: &[f64]) -> (f64, Vec<f64>) {
        let (dx, dz) = self.field(x >= 0.0, x, &DVector::from_column_slice(z));
        (dx, dz.iter().copied().collect())
    }

    /// The equilibrium `(-beta, -beta gamma)` or `(-mu beta / alpha, 0)`.
    pub fn equilibrium(&self, gamma: &DVector<f64>) -> (f64, Vec<f64>) {
        if self.beta >= 0.0 {
            (-self.beta, (gamma * -self.beta).iter().copied().collect())
        } else {
            (-self.mu * self.beta / self.alpha, vec![0.0; self.phases()])
        }
    }

    /// `u(t) = x0 - mu beta t`, `v(t) = (I - pe')z0`.
    pub fn inputs(&self, x0: f64, z0: &[f64], grid: &Grid) -> Result<InputPath, FluidError> {
        lyapunov::check_manifold(x0, z0)?;
        let total: f64 = z0.iter().sum();
        let v: Vec<f64> = z0.iter().zip(self.p.iter()).map(|(z, p)| z - p * total).collect();
        Ok(InputPath::from_fn(grid, self.phases(), |t| {
            (x0 - self.mu * self.beta * t, v.clone())
        }))
    }

    pub fn integrate(&self, x0: f64, z0: &[f64], grid: &Grid, method: Method) -> Result<StatePath, FluidError> {
        match method {
            Method::ViaPsi => {
                let input = self.inputs(x0, z0, grid)?;
                Ok(psi::psi(&input, &self.psi_params(), grid)?)
            }
            Method::DirectOde => self.integrate_ode(x0, z0, grid),
        }
    }

    fn rk4(&self, positive: bool, x: f64, z: &DVector<f64>, h: f64) -> (f64, DVector<f64>) {
        let (k1x, k1z) = self.field(positive, x, z);
        let (k2x, k2z) = self.field(positive, x + 0.5 * h * k1x, &(z + &k1z * (0.5 * h)));
        let (k3x, k3z) = self.field(positive, x + 0.5 * h * k2x, &(z + &k2z * (0.5 * h)));
        let (k4x, k4z) = self.field(positive, x + h * k3x, &(z + &k3z * h));
        let x1 = x + h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        let z1 = z + (k1z + k2z * 2.0 + k3z * 2.0 + k4z) * (h / 6.0);
        (x1, z1)
    }

    /// Which branch governs the motion leaving `(x, z)`.
    fn branch(&self, x: f64, z: &DVector<f64>) -> bool {
        if x > 0.0 {
            true
        } else if x < 0.0 {
            false
        } else {
            self.field(true, x, z).0 > 0.0
        }
    }

    fn integrate_ode(&self, x0: f64, z0: &[f64], grid: &Grid) -> Result<StatePath, FluidError> {
        lyapunov::check_manifold(x0, z0)?;
        let k = self.phases();
        let mut out = StatePath::with_capacity(k, grid.len());
        let mut x = x0;
        let mut z = DVector::from_column_slice(z0);
        out.push(x, z.as_slice());
        let mut crossings = 0usize;
        for _ in 0..grid.steps {
            let mut remaining = grid.dt;
            while remaining > 0.0 {
                let positive = self.branch(x, &z);
                let (x1, z1) = self.rk4(positive, x, &z, remaining);
                let crossed = if positive { x1 < 0.0 } else { x1 > 0.0 };
                if !crossed {
                    x = x1;
                    z = z1;
                    break;
                }
                crossings += 1;
                if crossings > MAX_CROSSINGS {
                    return Err(FluidError::Chattering);
                }
                // Bisect on the sub-step length for the hit of x = 0.
                let (mut lo, mut hi) = (0.0, remaining);
                let mut hit = (x, z.clone());
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let (xm, zm) = self.rk4(positive, x, &z, mid);
                    let before = if positive { xm >= 0.0 } else { xm <= 0.0 };
                    if before {
                        lo = mid;
                        hit = (xm, zm);
                    } else {
                        hi = mid;
                    }
                    if hit.0.abs() <= EVENT_TOL && hi - lo <= EVENT_TOL * grid.dt.max(1e-300) {
                        break;
                    }
                }
                // Land exactly on the surface, keeping the manifold identity.
                let shift = hit.1.sum() / k as f64;
                x = 0.0;
                z = hit.1.map(|v| v - shift);
                remaining -= lo;
                if lo == 0.0 {
                    // Already on the surface: step through it on the other branch.
                    let (x1, z1) = self.rk4(!positive, x, &z, remaining);
                    x = x1;
                    z = z1;
                    break;
                }
            }
            out.push(x, z.as_slice());
        }
        Ok(out)
    }
}

/// A fluid path with `g` and `d ln g / dt` along it.
#[derive(Debug, Clone)]
pub struct FluidTrajectory {
    pub grid: Grid,
    pub path: StatePath,
    pub g: Vec<f64>,
    pub dlng: Vec<f64>,
}

impl FluidTrajectory {
    pub fn new(path: StatePath, grid: Grid, lyap: &LyapunovFn) -> Self {
        let mut g = Vec::with_capacity(path.len());
        let mut dlng = Vec::with_capacity(path.len());
        for i in 0..path.len() {
            let gi = lyap.g_unchecked(path.x[i], path.z_at(i));
            let di = lyap.fluid_drift_unchecked(path.x[i], path.z_at(i));
            g.push(gi);
            dlng.push(if gi > 0.0 { di / gi } else { 0.0 });
        }
        Self { grid, path, g, dlng }
    }

    /// Largest `|(x, z)(t_{i+1}) - (x, z)(t_i)| / dt`.
    pub fn max_speed(&self) -> f64 {
        let p = &self.path;
        (1..p.len())
            .map(|i| {
                let dz: f64 = p.z_at(i).iter().zip(p.z_at(i - 1)).map(|(a, b)| (a - b).powi(2)).sum();
                ((p.x[i] - p.x[i - 1]).powi(2) + dz).sqrt() / self.grid.dt
            })
            .fold(0.0, f64::max)
    }

    /// CSV with columns `t,x,z1..zK,g,dlng`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let k = self.path.k;
        let mut header = String::from("t,x");
        for j in 1..=k {
            header.push_str(&format!(",z{j}"));
        }
        writeln!(w, "{header},g,dlng")?;
        for i in 0..self.path.len() {
            write!(w, "{},{}", self.grid.time(i), self.path.x[i] + 0.0)?;
            for v in self.path.z_at(i) {
                write!(w, ",{}", v + 0.0)?;
            }
            writeln!(w, ",{},{}", self.g[i], self.dlng[i] + 0.0)?;
        }
        Ok(())
    }
}

/// `10 (1 + |beta|)(1 + lambda_max(Q) / lambda_min(Q))`.
pub fn m_used(lyap: &LyapunovFn) -> f64 {
    let eig = linalg::sym_eig(&lyap.q).expect("certified Q is symmetric");
    10.0 * (1.0 + lyap.beta.abs()) * (1.0 + eig.max() / eig.min())
}

/// An on-manifold start with log-uniform radius in `[lo, hi]`.
pub fn sample_start<R: Rng + ?Sized>(k: usize, lo: f64, hi: f64, rng: &mut R) -> (f64, Vec<f64>) {
    let radius = (rng.random_range(lo.ln()..=hi.ln())).exp();
    lyapunov::sample_on_manifold(k, radius, rng)
}

#[derive(Debug, Clone, Serialize)]
pub struct MonotoneReport {
    pub trajectories: usize,
    pub violations: usize,
    /// Largest `(g(t_{i+1}) - g(t_i)) / (1 + g(t_i))`; negative when `g`
    /// strictly decreases everywhere.
    pub max_violation: f64,
}

/// Runs each start with `direct_ode` and counts steps where `g` increases by
/// more than `1e-6 (1 + g)`.
pub fn check_g_monotone(
    model: &FluidModel,
    lyap: &LyapunovFn,
    starts: &[(f64, Vec<f64>)],
    grid: &Grid,
) -> Result<MonotoneReport, FluidError> {
    let per: Vec<(usize, f64)> = starts
        .par_iter()
        .map(|(x0, z0)| {
            let path = model.integrate(*x0, z0, grid, Method::DirectOde)?;
            let mut count = 0;
            let mut worst = f64::NEG_INFINITY;
            let mut prev = lyap.g_unchecked(path.x[0], path.z_at(0));
            for i in 1..path.len() {
                let gi = lyap.g_unchecked(path.x[i], path.z_at(i));
                let rel = (gi - prev) / (1.0 + prev);
                worst = worst.max(rel);
                if rel > MONOTONE_TOL {
                    count += 1;
                }
                prev = gi;
            }
            Ok((count, worst))
        })
        .collect::<Result<_, FluidError>>()?;
    Ok(MonotoneReport {
        trajectories: starts.len(),
        violations: per.iter().map(|p| p.0).sum(),
        max_violation: per.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BandReport {
    pub c_hat: f64,
    #[serde(rename = "C_hat")]
    pub c_upper: f64,
    #[serde(rename = "M_used")]
    pub m_used: f64,
    pub points: usize,
}

/// The range of `d ln g / dt` over trajectory points with `|(x, z)| >= m_used`,
/// reported as `[-C_hat, -c_hat]`.
pub fn check_geometric_band(
    model: &FluidModel,
    lyap: &LyapunovFn,
    starts: &[(f64, Vec<f64>)],
    grid: &Grid,
    m_used: f64,
) -> Result<BandReport, FluidError> {
    let per: Vec<(f64, f64, usize)> = starts
        .par_iter()
        .map(|(x0, z0)| {
            let path = model.integrate(*x0, z0, grid, Method::DirectOde)?;
            let mut hi = f64::NEG_INFINITY;
            let mut lo = f64::INFINITY;
            let mut n = 0;
            for i in 0..path.len() {
                let (x, z) = (path.x[i], path.z_at(i));
                let norm = (x * x + z.iter().map(|v| v * v).sum::<f64>()).sqrt();
                if norm < m_used {
                    continue;
                }
                let d = lyap.fluid_drift_unchecked(x, z) / lyap.g_unchecked(x, z);
                hi = hi.max(d);
                lo = lo.min(d);
                n += 1;
            }
            Ok((hi, lo, n))
        })
        .collect::<Result<_, FluidError>>()?;
    let points: usize = per.iter().map(|p| p.2).sum();
    if points == 0 {
        return Err(FluidError::Property(format!("no trajectory point has norm >= {m_used}")));
    }
    let report = BandReport {
        c_hat: -per.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
        c_upper: -per.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        m_used,
        points,
    };
    if !(report.c_hat > 0.0) {
        return Err(FluidError::Property(format!("geometric band lost: c_hat = {}", report.c_hat)));
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftInequality {
    #[serde(rename = "C_hat")]
    pub c_hat: f64,
    pub eps_hat: f64,
    pub starts: usize,
}

/// Grid of candidate `eps` values, `0.01, 0.02, ..., 0.99`.
pub fn eps_grid() -> impl DoubleEndedIterator<Item = f64> {
    (1..=99).map(|i| i as f64 / 100.0)
}

/// Searches `eps` for `sqrt g(t0) - sqrt g(0) <= C - eps sqrt g(0)`.
///
/// `C` is read off the starts inside the ball of radius `m_used` and must
/// then hold for every start outside it; the largest `eps` that passes wins.
pub fn check_fluid_drift_inequality(
    model: &FluidModel,
    lyap: &LyapunovFn,
    starts: &[(f64, Vec<f64>)],
    t0: f64,
    dt: f64,
    m_used: f64,
) -> Result<DriftInequality, FluidError> {
    let grid = Grid::new(t0, dt)?;
    let pairs: Vec<(f64, f64, bool)> = starts
        .par_iter()
        .map(|(x0, z0)| {
            let path = model.integrate(*x0, z0, &grid, Method::DirectOde)?;
            let last = path.len() - 1;
            let s0 = lyap.g(*x0, z0)?.sqrt();
            let s1 = lyap.g_unchecked(path.x[last], path.z_at(last)).sqrt();
            let norm = (x0 * x0 + z0.iter().map(|v| v * v).sum::<f64>()).sqrt();
            Ok((s0, s1, norm <= m_used))
        })
        .collect::<Result<_, FluidError>>()?;
    drift_inequality_from_pairs(&pairs).ok_or_else(|| FluidError::Property("no feasible (C, eps) on the grid".into()))
}

/// The `(C, eps)` search over `(sqrt g(0), sqrt g(t0), near)` triples.
pub fn drift_inequality_from_pairs(pairs: &[(f64, f64, bool)]) -> Option<DriftInequality> {
    for eps in eps_grid().rev() {
        let c = pairs
            .iter()
            .filter(|p| p.2)
            .map(|(s0, s1, _)| s1 - s0 + eps * s0)
            .fold(0.0, f64::max);
        let ok = pairs.iter().all(|(s0, s1, _)| s1 - s0 + eps * s0 <= c + 1e-9 * (1.0 + s0));
        if ok {
            return Some(DriftInequality {
                c_hat: c,
                eps_hat: eps,
                starts: pairs.len(),
            });
        }
    }
    None
}
