//! The quadratic Lyapunov function `g` on the state manifold
//! `S = {(x, z) : e'z + x^- = 0}` and its derivative along the fluid field.
//!
//! ```text
//! g(x, z) = (x + beta)^2          + kappa (z + beta gamma)' Q (z + beta gamma)   beta >= 0
//! g(x, z) = (alpha x + mu beta)^2 + kappa (z + beta gamma)' Q (z + beta gamma)   beta <  0
//! ```
//!
//! `sqrt(g)` is the function whose geometric decay the rest of the crate tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::cqlf::{self, Cqlf};
use crate::phasetype::PhaseTypeParams;

/// Manifold membership tolerance, relative to `1 + |x| + |z|_1`.
pub const MANIFOLD_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("state is off the manifold: e'z + x^- = {defect:e}")]
    OffManifold { defect: f64 },
    #[error("state has {got} phase components, expected {expected}")]
    Dimension { got: usize, expected: usize },
}

pub fn neg_part(x: f64) -> f64 {
    (-x).max(0.0)
}

pub fn pos_part(x: f64) -> f64 {
    x.max(0.0)
}

/// `e'z + x^-`, zero exactly on the manifold.
pub fn manifold_defect(x: f64, z: &[f64]) -> f64 {
    z.iter().sum::<f64>() + neg_part(x)
}

pub fn check_manifold(x: f64, z: &[f64]) -> Result<(), DomainError> {
    let defect = manifold_defect(x, z);
    let scale = 1.0 + x.abs() + z.iter().map(|v| v.abs()).sum::<f64>();
    if defect.abs() > MANIFOLD_TOL * scale {
        return Err(DomainError::OffManifold { defect });
    }
    Ok(())
}

/// Moves a free pair `(x, w)` onto the manifold by shifting `w` along `e`.
pub fn project_to_manifold(x: f64, w: &[f64]) -> Vec<f64> {
    let k = w.len() as f64;
    let shift = (w.iter().sum::<f64>() + neg_part(x)) / k;
    w.iter().map(|v| v - shift).collect()
}

/// A random on-manifold point with Euclidean norm `radius`.
///
/// The manifold is a cone, so scaling a projected Gaussian pair keeps it on
/// the manifold.
pub fn sample_on_manifold<R: Rng + ?Sized>(k: usize, radius: f64, rng: &mut R) -> (f64, Vec<f64>) {
    loop {
        let x: f64 = StandardNormal.sample(rng);
        let w: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        let z = project_to_manifold(x, &w);
        let norm = (x * x + z.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if norm > 1e-8 {
            let s = radius / norm;
            return (x * s, z.iter().map(|v| v * s).collect());
        }
    }
}

/// `g` together with the data it depends on.
#[derive(Debug, Clone)]
pub struct LyapunovFn {
    pub beta: f64,
    pub alpha: f64,
    pub mu: f64,
    pub kappa: f64,
    pub b: f64,
    pub gamma: DVector<f64>,
    pub q: DMatrix<f64>,
    r: DMatrix<f64>,
    p: DVector<f64>,
    // Cached quadratic forms for the drift cases.
    e_r: DVector<f64>,
    switch: DMatrix<f64>,
    lyap: DMatrix<f64>,
    negative_x: DMatrix<f64>,
}

impl LyapunovFn {
    pub fn new(service: &PhaseTypeParams, cqlf: &Cqlf, alpha: f64, beta: f64) -> Self {
        Self::from_parts(
            service.r().clone(),
            service.p().clone(),
            service.gamma().clone(),
            service.mu(),
            cqlf.q.clone(),
            cqlf.kappa,
            cqlf.b,
            alpha,
            beta,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        r: DMatrix<f64>,
        p: DVector<f64>,
        gamma: DVector<f64>,
        mu: f64,
        q: DMatrix<f64>,
        kappa: f64,
        b: f64,
        alpha: f64,
        beta: f64,
    ) -> Self {
        let k = p.len();
        let e = DVector::from_element(k, 1.0);
        let e_r = r.transpose() * &e;
        let switch = cqlf::switching_form(&q, &r, &p);
        let lyap = cqlf::lyapunov_form(&q, &r);
        let eer = &e * e_r.transpose();
        let negative_x = &eer + eer.transpose() + &lyap * kappa;
        Self {
            beta,
            alpha,
            mu,
            kappa,
            b,
            gamma,
            q,
            r,
            p,
            e_r,
            switch,
            lyap,
            negative_x,
        }
    }

    pub fn phases(&self) -> usize {
        self.gamma.len()
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn p(&self) -> &DVector<f64> {
        &self.p
    }

    /// The point where `g` is smallest: `(-beta, -beta gamma)` for `beta >= 0`
    /// and `(-mu beta / alpha, 0)` otherwise.
    pub fn minimizer(&self) -> (f64, Vec<f64>) {
        if self.beta >= 0.0 {
            (-self.beta, (&self.gamma * -self.beta).iter().copied().collect())
        } else {
            (-self.mu * self.beta / self.alpha, vec![0.0; self.phases()])
        }
    }

    pub fn min_value(&self) -> f64 {
        if self.beta >= 0.0 {
            0.0
        } else {
            self.kappa * self.beta * self.beta * self.gamma.dot(&(&self.q * &self.gamma))
        }
    }

    fn shifted_quadratic(&self, z: &[f64]) -> f64 {
        let k = self.phases();
        let w = DVector::from_iterator(k, z.iter().zip(self.gamma.iter()).map(|(zi, gi)| zi + self.beta * gi));
        w.dot(&(&self.q * &w))
    }

    fn first_term(&self, x: f64) -> f64 {
        if self.beta >= 0.0 {
            (x + self.beta).powi(2)
        } else {
            (self.alpha * x + self.mu * self.beta).powi(2)
        }
    }

    /// `g(x, z)` without the manifold check.
    pub fn g_unchecked(&self, x: f64, z: &[f64]) -> f64 {
        self.first_term(x) + self.kappa * self.shifted_quadratic(z)
    }

    pub fn g(&self, x: f64, z: &[f64]) -> Result<f64, DomainError> {
        self.check(x, z)?;
        Ok(self.g_unchecked(x, z))
    }

    pub fn sqrt_g(&self, x: f64, z: &[f64]) -> Result<f64, DomainError> {
        self.g(x, z).map(f64::sqrt)
    }

    fn check(&self, x: f64, z: &[f64]) -> Result<(), DomainError> {
        if z.len() != self.phases() {
            return Err(DomainError::Dimension {
                got: z.len(),
                expected: self.phases(),
            });
        }
        check_manifold(x, z)
    }

    /// The norm `sqrt(x^2 + kappa z'Qz)` in which `sqrt(g)` is 1-Lipschitz for
    /// `beta >= 0`.
    pub fn q_norm(&self, x: f64, z: &[f64]) -> f64 {
        let zv = DVector::from_column_slice(z);
        (x * x + self.kappa * zv.dot(&(&self.q * &zv))).sqrt()
    }

    /// `dg/dt` along the fluid field, assembled case by case:
    ///
    /// * `beta >= 0, x >= 0`: `-2(x+beta)(alpha x + mu beta + e'Rz) - kappa z'Mz`
    /// * `beta >= 0, x < 0`: `-w'[ee'R + R'ee' + kappa(QR + R'Q)]w`
    /// * `beta < 0, x >= 0`: `-2 alpha (alpha x + mu beta)(alpha x + mu beta + e'Rz) - kappa z'Mz`
    /// * `beta < 0, x < 0`: `-2 alpha (alpha x + mu beta)(mu beta + e'Rz) - kappa w'(QR + R'Q)w`
    ///
    /// with `w = z + beta gamma` and `M` the switching form.
    pub fn fluid_drift_g(&self, x: f64, z: &[f64]) -> Result<f64, DomainError> {
        self.check(x, z)?;
        Ok(self.fluid_drift_unchecked(x, z))
    }

    pub fn fluid_drift_unchecked(&self, x: f64, z: &[f64]) -> f64 {
        let k = self.phases();
        let zv = DVector::from_column_slice(z);
        let erz = self.e_r.dot(&zv);
        let (a, mu, beta, kappa) = (self.alpha, self.mu, self.beta, self.kappa);
        let w = &zv + &self.gamma * beta;
        debug_assert_eq!(w.len(), k);
        match (beta >= 0.0, x >= 0.0) {
            (true, true) => -2.0 * (x + beta) * (a * x + mu * beta + erz) - kappa * zv.dot(&(&self.switch * &zv)),
            (true, false) => -w.dot(&(&self.negative_x * &w)),
            (false, true) => {
                let s = a * x + mu * beta;
                -2.0 * a * s * (s + erz) - kappa * zv.dot(&(&self.switch * &zv))
            }
            (false, false) => {
                let s = a * x + mu * beta;
                -2.0 * a * s * (mu * beta + erz) - kappa * w.dot(&(&self.lyap * &w))
            }
        }
    }

    /// Largest ratio `|sqrt g(a) - sqrt g(b)| / |a - b|` over `samples` random
    /// on-manifold pairs.
    ///
    /// Half the pairs are independent points with log-uniform radii in
    /// `[1e-2, 1e4]`; the other half pair a point with a rescaling of it
    /// about the minimizer, projected back onto the manifold.
    pub fn lipschitz_estimate<R: Rng + ?Sized>(&self, samples: usize, rng: &mut R) -> f64 {
        let k = self.phases();
        let (mx, mz) = self.minimizer();
        let mut best = 0.0f64;
        for i in 0..samples.max(2) {
            let radius = 10f64.powf(rng.random_range(-2.0..4.0));
            let (ax, az) = sample_on_manifold(k, radius, rng);
            let (bx, bz) = if i % 2 == 0 {
                let radius = 10f64.powf(rng.random_range(-2.0..4.0));
                sample_on_manifold(k, radius, rng)
            } else {
                let s: f64 = rng.random_range(0.0..2.0);
                let x = mx + s * (ax - mx);
                let w: Vec<f64> = az.iter().zip(&mz).map(|(a, m)| m + s * (a - m)).collect();
                (x, project_to_manifold(x, &w))
            };
            let dist = ((ax - bx).powi(2) + az.iter().zip(&bz).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sqrt();
            if dist < 1e-12 {
                continue;
            }
            let diff = (self.g_unchecked(ax, &az).sqrt() - self.g_unchecked(bx, &bz).sqrt()).abs();
            best = best.max(diff / dist);
        }
        best
    }
}
