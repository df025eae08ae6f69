//! Discretization of the map `Psi` sending inputs `(u, v)` with `e'v = 0` to
//! the state path `(x, z)` solving
//!
//! ```text
//! x(t) = u(t) - alpha * int_0^t x(s)^+ ds - e'R int_0^t z(s) ds
//! z(t) = v(t) - p x(t)^- - (I - pe')R int_0^t z(s) ds
//! ```
//!
//! The default scheme marches forward: at `t_i` the integrals are the
//! trapezoid sums up to `t_{i-1}` plus a left-endpoint contribution for the
//! last step, so `x(t_i)` is explicit, and `z(t_i)` follows from `x(t_i)^-`.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::lyapunov::neg_part;

/// Largest number of steps a grid may hold.
pub const MAX_STEPS: usize = 100_000_000;
/// Relative tolerance for `e'v = 0` on inputs.
pub const INPUT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PsiError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("input path has e'v = {defect:e} at step {step}")]
    InputOffHyperplane { step: usize, defect: f64 },
    #[error("path lengths do not match the grid: {0}")]
    Shape(String),
    #[error("refine grid: residual {residual:e} exceeds {bound:e}")]
    RefineGrid { residual: f64, bound: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dt: f64,
    pub steps: usize,
}

impl Grid {
    pub fn new(t_end: f64, dt: f64) -> Result<Self, PsiError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(PsiError::Grid(format!("dt must be positive, got {dt}")));
        }
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(PsiError::Grid(format!("t_end must be positive, got {t_end}")));
        }
        let ratio = t_end / dt;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
            return Err(PsiError::Grid(format!("t_end/dt = {ratio} is not an integer")));
        }
        Self::from_steps(dt, steps as usize)
    }

    pub fn from_steps(dt: f64, steps: usize) -> Result<Self, PsiError> {
        if steps == 0 || steps > MAX_STEPS {
            return Err(PsiError::Grid(format!("step count {steps} outside 1..={MAX_STEPS}")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(PsiError::Grid(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { dt, steps })
    }

    pub fn t_end(&self) -> f64 {
        self.dt * self.steps as f64
    }

    /// Number of grid points, `steps + 1`.
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    /// Same horizon at twice the resolution.
    pub fn refined(&self) -> Self {
        Self {
            dt: self.dt / 2.0,
            steps: self.steps * 2,
        }
    }
}

/// Input `(u, v)` sampled on a grid; `v` is stored row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPath {
    pub k: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Output `(x, z)` sampled on a grid; `z` is stored row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    pub k: usize,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

impl InputPath {
    pub fn zeros(k: usize, len: usize) -> Self {
        Self {
            k,
            u: vec![0.0; len],
            v: vec![0.0; len * k],
        }
    }

    pub fn from_fn(grid: &Grid, k: usize, mut f: impl FnMut(f64) -> (f64, Vec<f64>)) -> Self {
        let mut path = Self::zeros(k, grid.len());
        for i in 0..grid.len() {
            let (u, v) = f(grid.time(i));
            assert_eq!(v.len(), k, "input v has wrong length");
            path.u[i] = u;
            path.v[i * k..(i + 1) * k].copy_from_slice(&v);
        }
        path
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn v_at(&self, i: usize) -> &[f64] {
        &self.v[i * self.k..(i + 1) * self.k]
    }

    pub fn scaled(&self, b: f64) -> Self {
        Self {
            k: self.k,
            u: self.u.iter().map(|a| a * b).collect(),
            v: self.v.iter().map(|a| a * b).collect(),
        }
    }

    /// `sup_t |(u, v)(t)|` in the Euclidean norm.
    pub fn sup_norm(&self) -> f64 {
        (0..self.len()).map(|i| point_norm(self.u[i], self.v_at(i))).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<(), PsiError> {
        if self.v.len() != self.u.len() * self.k {
            return Err(PsiError::Shape(format!(
                "u has {} points but v has {} entries for k = {}",
                self.u.len(),
                self.v.len(),
                self.k
            )));
        }
        for i in 0..self.len() {
            let v = self.v_at(i);
            let defect: f64 = v.iter().sum();
            let scale = 1.0 + v.iter().map(|a| a.abs()).sum::<f64>();
            if defect.abs() > INPUT_TOL * scale {
                return Err(PsiError::InputOffHyperplane { step: i, defect });
            }
        }
        Ok(())
    }
}

impl StatePath {
    pub fn with_capacity(k: usize, len: usize) -> Self {
        Self {
            k,
            x: Vec::with_capacity(len),
            z: Vec::with_capacity(len * k),
        }
    }

    pub fn push(&mut self, x: f64, z: &[f64]) {
        debug_assert_eq!(z.len(), self.k);
        self.x.push(x);
        self.z.extend_from_slice(z);
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn z_at(&self, i: usize) -> &[f64] {
        &self.z[i * self.k..(i + 1) * self.k]
    }

    pub fn sup_norm(&self) -> f64 {
        (0..self.len()).map(|i| point_norm(self.x[i], self.z_at(i))).fold(0.0, f64::max)
    }

    /// Largest `|e'z + x^-|` along the path.
    pub fn manifold_defect(&self) -> f64 {
        (0..self.len())
            .map(|i| (self.z_at(i).iter().sum::<f64>() + neg_part(self.x[i])).abs())
            .fold(0.0, f64::max)
    }

    /// `sup_t |self(t) - other(t)|`.
    pub fn sup_distance(&self, other: &StatePath) -> f64 {
        assert_eq!(self.len(), other.len(), "paths have different lengths");
        (0..self.len())
            .map(|i| {
                let dz: Vec<f64> = self.z_at(i).iter().zip(other.z_at(i)).map(|(a, b)| a - b).collect();
                point_norm(self.x[i] - other.x[i], &dz)
            })
            .fold(0.0, f64::max)
    }
}

fn point_norm(a: f64, b: &[f64]) -> f64 {
    (a * a + b.iter().map(|v| v * v).sum::<f64>()).sqrt()
}

/// The coefficients `alpha`, `R`, `p` of the integral equations.
#[derive(Debug, Clone)]
pub struct PsiParams {
    pub alpha: f64,
    pub r: DMatrix<f64>,
    pub p: DVector<f64>,
    // e'R as a row, and (I - pe')R row-major.
    e_r: Vec<f64>,
    c: Vec<f64>,
}

impl PsiParams {
    pub fn new(alpha: f64, r: DMatrix<f64>, p: DVector<f64>) -> Self {
        let k = p.len();
        assert_eq!(r.nrows(), k);
        assert_eq!(r.ncols(), k);
        let e = DVector::from_element(k, 1.0);
        let e_r: Vec<f64> = (r.transpose() * &e).iter().copied().collect();
        let proj = DMatrix::identity(k, k) - &p * e.transpose();
        let cm = proj * &r;
        let mut c = Vec::with_capacity(k * k);
        for i in 0..k {
            for j in 0..k {
                c.push(cm[(i, j)]);
            }
        }
        Self { alpha, r, p, e_r, c }
    }

    pub fn phases(&self) -> usize {
        self.p.len()
    }

    /// `max(1, alpha, |R|)`, the rate that converts time steps into defects.
    pub fn rate_scale(&self) -> f64 {
        1f64.max(self.alpha).max(crate::linalg::abs_sum(&self.r))
    }

    /// `1 / max(alpha, max nu)`.
    pub fn characteristic_time(&self) -> f64 {
        let max_nu = (0..self.phases()).map(|k| self.r[(k, k)]).fold(0.0, f64::max);
        1.0 / self.alpha.max(max_nu)
    }

    /// Default step `1e-3` characteristic times.
    pub fn default_dt(&self) -> f64 {
        1e-3 * self.characteristic_time()
    }

    fn e_r_dot(&self, z: &[f64]) -> f64 {
        self.e_r.iter().zip(z).map(|(a, b)| a * b).sum()
    }

    fn c_apply(&self, z: &[f64], out: &mut [f64]) {
        let k = self.phases();
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.c[i * k..(i + 1) * k].iter().zip(z).map(|(a, b)| a * b).sum();
        }
    }

    /// Writes `x` and `z` from the inputs at one grid point and the
    /// integrals `ix = int x^+`, `iz = int z` up to that point.
    fn solve_point(&self, u: f64, v: &[f64], ix: f64, iz: &[f64], scratch: &mut [f64], z: &mut [f64]) -> f64 {
        let x = u - self.alpha * ix - self.e_r_dot(iz);
        let xm = neg_part(x);
        self.c_apply(iz, scratch);
        for j in 0..z.len() {
            z[j] = v[j] - self.p[j] * xm - scratch[j];
        }
        x
    }
}

/// Streaming form of the marching scheme, for paths too long to store.
#[derive(Debug, Clone)]
pub struct PsiStepper {
    params: PsiParams,
    dt: f64,
    started: bool,
    tx: f64,
    tz: Vec<f64>,
    prev_xp: f64,
    prev_z: Vec<f64>,
    iz: Vec<f64>,
    scratch: Vec<f64>,
}

impl PsiStepper {
    pub fn new(params: PsiParams, dt: f64) -> Self {
        let k = params.phases();
        Self {
            params,
            dt,
            started: false,
            tx: 0.0,
            tz: vec![0.0; k],
            prev_xp: 0.0,
            prev_z: vec![0.0; k],
            iz: vec![0.0; k],
            scratch: vec![0.0; k],
        }
    }

    pub fn params(&self) -> &PsiParams {
        &self.params
    }

    /// Consumes the input at the next grid point, writes `z` and returns `x`.
    pub fn step(&mut self, u: f64, v: &[f64], z: &mut [f64]) -> f64 {
        let dt = self.dt;
        let ix = if self.started { self.tx + dt * self.prev_xp } else { 0.0 };
        for j in 0..self.iz.len() {
            self.iz[j] = if self.started { self.tz[j] + dt * self.prev_z[j] } else { 0.0 };
        }
        let x = self.params.solve_point(u, v, ix, &self.iz, &mut self.scratch, z);
        let xp = x.max(0.0);
        if self.started {
            self.tx += 0.5 * dt * (self.prev_xp + xp);
            for ((t, p), zj) in self.tz.iter_mut().zip(&self.prev_z).zip(z.iter()) {
                *t += 0.5 * dt * (p + zj);
            }
        }
        self.prev_xp = xp;
        self.prev_z.copy_from_slice(z);
        self.started = true;
        x
    }
}

/// Which discretization `psi_with` uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Explicit marching, x first and then z.
    March,
    /// Implicit trapezoid at each step, solved by fixed-point sweeps.
    Sweep,
}

fn check_shapes(input: &InputPath, params: &PsiParams, grid: &Grid) -> Result<(), PsiError> {
    if input.k != params.phases() {
        return Err(PsiError::Shape(format!(
            "input has k = {}, params have {}",
            input.k,
            params.phases()
        )));
    }
    if input.len() != grid.len() {
        return Err(PsiError::Shape(format!(
            "input has {} points, grid has {}",
            input.len(),
            grid.len()
        )));
    }
    input.validate()
}

/// `Psi(input)` on the grid by the marching scheme, with the residual check.
pub fn psi(input: &InputPath, params: &PsiParams, grid: &Grid) -> Result<StatePath, PsiError> {
    psi_with(input, params, grid, Scheme::March)
}

pub fn psi_with(input: &InputPath, params: &PsiParams, grid: &Grid, scheme: Scheme) -> Result<StatePath, PsiError> {
    check_shapes(input, params, grid)?;
    let out = match scheme {
        Scheme::March => march(input, params, grid),
        Scheme::Sweep => sweep(input, params, grid),
    };
    let res = residual(&out, input, params, grid)?;
    let bound = residual_bound(params, grid, input, &out);
    if !(res <= bound) {
        return Err(PsiError::RefineGrid { residual: res, bound });
    }
    Ok(out)
}

/// `10 dt * rate_scale * (1 + magnitude)`; the residual of a well-resolved
/// path stays below it.
pub fn residual_bound(params: &PsiParams, grid: &Grid, input: &InputPath, out: &StatePath) -> f64 {
    10.0 * grid.dt * params.rate_scale() * (1.0 + magnitude(input, out))
}

/// `max(sup |(u, v)|, sup |(x, z)|)`.
pub fn magnitude(input: &InputPath, out: &StatePath) -> f64 {
    input.sup_norm().max(out.sup_norm())
}

fn march(input: &InputPath, params: &PsiParams, grid: &Grid) -> StatePath {
    let k = input.k;
    let mut stepper = PsiStepper::new(params.clone(), grid.dt);
    let mut out = StatePath::with_capacity(k, grid.len());
    let mut z = vec![0.0; k];
    for i in 0..grid.len() {
        let x = stepper.step(input.u[i], input.v_at(i), &mut z);
        out.push(x, &z);
    }
    out
}

const SWEEP_MAX_ITER: usize = 200;

fn sweep(input: &InputPath, params: &PsiParams, grid: &Grid) -> StatePath {
    let k = input.k;
    let dt = grid.dt;
    let mut out = StatePath::with_capacity(k, grid.len());
    let mut tx = 0.0;
    let mut tz = vec![0.0; k];
    let mut iz = vec![0.0; k];
    let mut scratch = vec![0.0; k];
    let mut z = vec![0.0; k];
    let mut z_new = vec![0.0; k];
    let x0 = params.solve_point(input.u[0], input.v_at(0), 0.0, &tz, &mut scratch, &mut z);
    out.push(x0, &z);
    let mut prev_x = x0;
    let mut prev_z = z.clone();
    for i in 1..grid.len() {
        let (u, v) = (input.u[i], input.v_at(i));
        // Start from the explicit guess.
        let mut x = prev_x;
        z.copy_from_slice(&prev_z);
        for _ in 0..SWEEP_MAX_ITER {
            let ix = tx + 0.5 * dt * (prev_x.max(0.0) + x.max(0.0));
            for j in 0..k {
                iz[j] = tz[j] + 0.5 * dt * (prev_z[j] + z[j]);
            }
            let x_new = params.solve_point(u, v, ix, &iz, &mut scratch, &mut z_new);
            let change = (x_new - x)
                .abs()
                .max(z_new.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            let scale = 1.0 + x_new.abs() + z_new.iter().map(|a| a.abs()).sum::<f64>();
            x = x_new;
            z.copy_from_slice(&z_new);
            if change <= 1e-15 * scale {
                break;
            }
        }
        tx += 0.5 * dt * (prev_x.max(0.0) + x.max(0.0));
        for j in 0..k {
            tz[j] += 0.5 * dt * (prev_z[j] + z[j]);
        }
        out.push(x, &z);
        prev_x = x;
        prev_z.copy_from_slice(&z);
    }
    out
}

/// Largest defect of the two integral equations over the grid, with the
/// integrals of `output` taken by the trapezoid rule.
pub fn residual(output: &StatePath, input: &InputPath, params: &PsiParams, grid: &Grid) -> Result<f64, PsiError> {
    let k = params.phases();
    if output.len() != grid.len() || input.len() != grid.len() || output.k != k || input.k != k {
        return Err(PsiError::Shape(format!(
            "output has {} points, input {}, grid {}",
            output.len(),
            input.len(),
            grid.len()
        )));
    }
    let dt = grid.dt;
    let mut ix = 0.0;
    let mut iz = vec![0.0; k];
    let mut scratch = vec![0.0; k];
    let mut z_expected = vec![0.0; k];
    let mut worst = 0.0f64;
    for i in 0..grid.len() {
        if i > 0 {
            ix += 0.5 * dt * (output.x[i - 1].max(0.0) + output.x[i].max(0.0));
            let (a, b) = (output.z_at(i - 1), output.z_at(i));
            for j in 0..k {
                iz[j] += 0.5 * dt * (a[j] + b[j]);
            }
        }
        let x = output.x[i];
        let x_expected = input.u[i] - params.alpha * ix - params.e_r_dot(&iz);
        // The z equation is checked against the recorded x, so a defect in x
        // shows up once rather than twice.
        params.c_apply(&iz, &mut scratch);
        let xm = neg_part(x);
        let v = input.v_at(i);
        for j in 0..k {
            z_expected[j] = v[j] - params.p[j] * xm - scratch[j];
        }
        let dz = output
            .z_at(i)
            .iter()
            .zip(&z_expected)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max((x - x_expected).abs()).max(dz);
    }
    Ok(worst)
}

/// `sup_t |Psi(b y) - b Psi(y)|`.
pub fn check_homogeneity(input: &InputPath, b: f64, params: &PsiParams, grid: &Grid) -> Result<f64, PsiError> {
    assert!(b > 0.0, "scale must be positive");
    let base = psi(input, params, grid)?;
    let scaled = psi(&input.scaled(b), params, grid)?;
    let expected = StatePath {
        k: base.k,
        x: base.x.iter().map(|a| a * b).collect(),
        z: base.z.iter().map(|a| a * b).collect(),
    };
    Ok(scaled.sup_distance(&expected))
}

/// `sup_t |Psi(y1) - Psi(y2)| / sup_t |y1 - y2|`, zero for identical inputs.
pub fn check_lipschitz(y1: &InputPath, y2: &InputPath, params: &PsiParams, grid: &Grid) -> Result<f64, PsiError> {
    let diff = InputPath {
        k: y1.k,
        u: y1.u.iter().zip(&y2.u).map(|(a, b)| a - b).collect(),
        v: y1.v.iter().zip(&y2.v).map(|(a, b)| a - b).collect(),
    };
    let denom = diff.sup_norm();
    if denom == 0.0 {
        return Ok(0.0);
    }
    let a = psi(y1, params, grid)?;
    let b = psi(y2, params, grid)?;
    Ok(a.sup_distance(&b) / denom)
}

fn write_rows<W: Write>(mut w: W, grid: &Grid, names: (&str, &str), k: usize, a: &[f64], b: &[f64]) -> io::Result<()> {
    let mut header = format!("t,{}", names.0);
    for j in 1..=k {
        header.push_str(&format!(",{}{j}", names.1));
    }
    writeln!(w, "{header}")?;
    for i in 0..a.len() {
        // Adding 0.0 turns -0.0 into 0.0 so signs of zero never reach the file.
        write!(w, "{},{}", grid.time(i), a[i] + 0.0)?;
        for v in &b[i * k..(i + 1) * k] {
            write!(w, ",{}", v + 0.0)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// CSV with columns `t,u,v1..vK`.
pub fn write_input_csv<W: Write>(w: W, grid: &Grid, input: &InputPath) -> io::Result<()> {
    write_rows(w, grid, ("u", "v"), input.k, &input.u, &input.v)
}

/// CSV with columns `t,x,z1..zK`.
pub fn write_state_csv<W: Write>(w: W, grid: &Grid, path: &StatePath) -> io::Result<()> {
    write_rows(w, grid, ("x", "z"), path.k, &path.x, &path.z)
}
