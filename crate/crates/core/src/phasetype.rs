//! Phase-type service distributions.
//!
//! A service time is the absorption time of a transient Markov chain on
//! phases `0..K`: the first phase is drawn from `p`, phase `k` is held for an
//! `Exp(nu_k)` time, then the chain moves to phase `j` with probability
//! `P[k][j]` or is absorbed with probability `1 - sum_j P[k][j]`.
//!
//! [`PhaseTypeParams`] can only be obtained through validation, and it carries
//! the derived quantities every other module needs: the matrix
//! `R = (I - P') diag(nu)`, the service rate `mu` with `1/mu = e'R^{-1}p`, and
//! the busy-phase mix `gamma = mu R^{-1} p`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

pub const PROB_TOL: f64 = 1e-12;
pub const RADIUS_TOL: f64 = 1e-10;
const COND_WARN: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("empty phase-type specification")]
    Empty,
    #[error("dimension mismatch: p has {p} entries, nu has {nu}, P is {rows}x{cols}")]
    Dimension { p: usize, nu: usize, rows: usize, cols: usize },
    #[error("p[{index}] = {value} is negative")]
    NegativeProbability { index: usize, value: f64 },
    #[error("p sums to {sum}, not 1")]
    ProbabilitySum { sum: f64 },
    #[error("nu[{index}] = {value} is not a positive rate")]
    NonPositiveRate { index: usize, value: f64 },
    #[error("P[{index}][{index}] = {value} is not zero")]
    NonzeroDiagonal { index: usize, value: f64 },
    #[error("P[{row}][{col}] = {value} is negative")]
    NegativeRouting { row: usize, col: usize, value: f64 },
    #[error("sub-stochasticity violated: row {row} of P sums to {sum}")]
    SubStochasticity { row: usize, sum: f64 },
    #[error("I-P singular: spectral radius of P is {radius}")]
    Singular { radius: f64 },
}

/// Unvalidated phase-type parameters as they appear in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseTypeSpec {
    pub p: Vec<f64>,
    pub nu: Vec<f64>,
    #[serde(rename = "P")]
    pub routing: Vec<Vec<f64>>,
}

/// Evidence that a [`PhaseTypeSpec`] passed every check.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationCertificate {
    pub phases: usize,
    pub max_row_sum: f64,
    pub spectral_radius: f64,
}

impl PhaseTypeSpec {
    /// Checks every invariant in a fixed order and reports the first failure.
    pub fn validate(&self) -> Result<ValidationCertificate, ParamError> {
        let k = self.p.len();
        if k == 0 {
            return Err(ParamError::Empty);
        }
        let cols = self.routing.first().map_or(0, Vec::len);
        if self.nu.len() != k || self.routing.len() != k || self.routing.iter().any(|row| row.len() != k) {
            return Err(ParamError::Dimension {
                p: k,
                nu: self.nu.len(),
                rows: self.routing.len(),
                cols,
            });
        }
        for (index, &value) in self.p.iter().enumerate() {
            if !(value >= 0.0) {
                return Err(ParamError::NegativeProbability { index, value });
            }
        }
        let sum: f64 = self.p.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(ParamError::ProbabilitySum { sum });
        }
        for (index, &value) in self.nu.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(ParamError::NonPositiveRate { index, value });
            }
        }
        let mut max_row_sum = 0.0f64;
        for (row, entries) in self.routing.iter().enumerate() {
            if entries[row] != 0.0 {
                return Err(ParamError::NonzeroDiagonal {
                    index: row,
                    value: entries[row],
                });
            }
            for (col, &value) in entries.iter().enumerate() {
                if !(value >= 0.0) {
                    return Err(ParamError::NegativeRouting { row, col, value });
                }
            }
            let s: f64 = entries.iter().sum();
            if s > 1.0 + PROB_TOL {
                return Err(ParamError::SubStochasticity { row, sum: s });
            }
            max_row_sum = max_row_sum.max(s);
        }
        let radius = linalg::spectral_radius(&self.routing_matrix());
        if radius >= 1.0 - RADIUS_TOL {
            return Err(ParamError::Singular { radius });
        }
        Ok(ValidationCertificate {
            phases: k,
            max_row_sum,
            spectral_radius: radius,
        })
    }

    pub fn build(&self) -> Result<PhaseTypeParams, ParamError> {
        self.validate()?;
        PhaseTypeParams::from_valid(self.clone())
    }

    fn routing_matrix(&self) -> DMatrix<f64> {
        let k = self.p.len();
        DMatrix::from_fn(k, k, |i, j| self.routing[i][j])
    }
}

/// Derived service-rate data: `R`, `mu` and `gamma`.
#[derive(Debug, Clone)]
pub struct DerivedServiceData {
    pub r: DMatrix<f64>,
    pub r_inv: DMatrix<f64>,
    pub mu: f64,
    pub gamma: DVector<f64>,
    pub condition: f64,
}

/// Validated phase-type parameters together with their derived data.
#[derive(Debug, Clone)]
pub struct PhaseTypeParams {
    spec: PhaseTypeSpec,
    p: DVector<f64>,
    nu: DVector<f64>,
    routing: DMatrix<f64>,
    derived: DerivedServiceData,
    // Cumulative routing rows for inverse-CDF draws; the final slot is absorption.
    initial_cdf: Vec<f64>,
    routing_cdf: Vec<Vec<f64>>,
}

impl PhaseTypeParams {
    pub fn new(p: Vec<f64>, nu: Vec<f64>, routing: Vec<Vec<f64>>) -> Result<Self, ParamError> {
        PhaseTypeSpec { p, nu, routing }.build()
    }

    pub fn exponential(rate: f64) -> Result<Self, ParamError> {
        Self::new(vec![1.0], vec![rate], vec![vec![0.0]])
    }

    /// Erlang with `stages` phases each of rate `rate` (mean `stages / rate`).
    pub fn erlang(stages: usize, rate: f64) -> Result<Self, ParamError> {
        let mut p = vec![0.0; stages];
        if stages > 0 {
            p[0] = 1.0;
        }
        let routing = (0..stages)
            .map(|i| {
                let mut row = vec![0.0; stages];
                if i + 1 < stages {
                    row[i + 1] = 1.0;
                }
                row
            })
            .collect();
        Self::new(p, vec![rate; stages], routing)
    }

    pub fn hyperexponential(probs: Vec<f64>, rates: Vec<f64>) -> Result<Self, ParamError> {
        let k = probs.len();
        Self::new(probs, rates, vec![vec![0.0; k]; k])
    }

    /// A random valid instance with `k` phases: Dirichlet-like `p`, rates in
    /// `[0.5, 3)`, and routing rows with total mass below `0.9`.
    pub fn random<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        let raw: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
        let total: f64 = raw.iter().sum();
        let mut p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        // Renormalize so the sum is 1 to within rounding of the last entry.
        let head: f64 = p[..k - 1].iter().sum();
        p[k - 1] = (1.0 - head).max(0.0);
        let nu: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..3.0)).collect();
        let routing: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                let mut row: Vec<f64> = (0..k).map(|j| if i == j { 0.0 } else { rng.random::<f64>() }).collect();
                let s: f64 = row.iter().sum();
                let mass = rng.random_range(0.0..0.9);
                if s > 0.0 {
                    row.iter_mut().for_each(|v| *v *= mass / s);
                }
                row
            })
            .collect();
        Self::new(p, nu, routing).expect("random construction yields valid parameters")
    }

    fn from_valid(spec: PhaseTypeSpec) -> Result<Self, ParamError> {
        let k = spec.p.len();
        let p = DVector::from_vec(spec.p.clone());
        let nu = DVector::from_vec(spec.nu.clone());
        let routing = spec.routing_matrix();
        let derived = derive(&p, &nu, &routing)?;
        let cumulative = |weights: &[f64]| -> Vec<f64> {
            let mut acc = 0.0;
            weights
                .iter()
                .map(|w| {
                    acc += w;
                    acc
                })
                .collect()
        };
        let initial_cdf = cumulative(&spec.p);
        let routing_cdf = (0..k).map(|i| cumulative(&spec.routing[i])).collect();
        Ok(Self {
            spec,
            p,
            nu,
            routing,
            derived,
            initial_cdf,
            routing_cdf,
        })
    }

    pub fn phases(&self) -> usize {
        self.p.len()
    }
    pub fn p(&self) -> &DVector<f64> {
        &self.p
    }
    pub fn nu(&self) -> &DVector<f64> {
        &self.nu
    }
    pub fn routing(&self) -> &DMatrix<f64> {
        &self.routing
    }
    pub fn spec(&self) -> &PhaseTypeSpec {
        &self.spec
    }
    pub fn derived(&self) -> &DerivedServiceData {
        &self.derived
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.derived.r
    }
    pub fn mu(&self) -> f64 {
        self.derived.mu
    }
    pub fn gamma(&self) -> &DVector<f64> {
        &self.derived.gamma
    }

    /// Mean service time `e'R^{-1}p`.
    pub fn mean(&self) -> f64 {
        1.0 / self.derived.mu
    }

    /// Second moment of the service time, `2 p' T^{-2} e` with `T = -R'`.
    pub fn second_moment(&self) -> f64 {
        // Absorption-time moments: E[S^2] = 2 e' (R^{-1})^2 p.
        let rinv = &self.derived.r_inv;
        let v = rinv * (rinv * &self.p);
        2.0 * v.sum()
    }

    /// Draws the first phase from `p` by inverse CDF.
    pub fn initial_phase<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        pick(&self.initial_cdf, rng.random::<f64>()).unwrap_or(self.phases() - 1)
    }

    /// Next phase after leaving `phase`, or `None` on absorption.
    pub fn route<R: Rng + ?Sized>(&self, phase: usize, rng: &mut R) -> Option<usize> {
        pick(&self.routing_cdf[phase], rng.random::<f64>())
    }

    /// Sojourn in `phase` by inverse transform.
    pub fn sojourn<R: Rng + ?Sized>(&self, phase: usize, rng: &mut R) -> f64 {
        exp_inverse(self.nu[phase], rng)
    }

    /// Full absorption path of one service.
    pub fn sample_service<R: Rng + ?Sized>(&self, rng: &mut R) -> ServiceSample {
        let mut phases = Vec::new();
        let mut total = 0.0;
        let mut phase = Some(self.initial_phase(rng));
        while let Some(k) = phase {
            let s = self.sojourn(k, rng);
            total += s;
            phases.push((k, s));
            phase = self.route(k, rng);
        }
        ServiceSample { total, phases }
    }

    pub fn sample_total<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let mut total = 0.0;
        let mut phase = Some(self.initial_phase(rng));
        while let Some(k) = phase {
            total += self.sojourn(k, rng);
            phase = self.route(k, rng);
        }
        total
    }
}

/// One sampled service: the total and the visited `(phase, sojourn)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceSample {
    pub total: f64,
    pub phases: Vec<(usize, f64)>,
}

/// Index of the first cumulative weight strictly above `u`, or `None` if `u`
/// falls in the residual mass past the end.
fn pick(cdf: &[f64], u: f64) -> Option<usize> {
    cdf.iter().position(|&c| u < c)
}

pub(crate) fn exp_inverse<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    // 1 - U lies in (0, 1], so the logarithm is finite.
    -(1.0 - rng.random::<f64>()).ln() / rate
}

/// `R`, `mu` and `gamma` from raw parameters.
pub fn derive(p: &DVector<f64>, nu: &DVector<f64>, routing: &DMatrix<f64>) -> Result<DerivedServiceData, ParamError> {
    let k = p.len();
    let eye = DMatrix::<f64>::identity(k, k);
    let r = (&eye - routing.transpose()) * DMatrix::from_diagonal(nu);
    let r_inv = linalg::inverse(&r).map_err(|_| ParamError::Singular {
        radius: linalg::spectral_radius(routing),
    })?;
    let condition = linalg::condition_1(&r, &r_inv);
    if condition > COND_WARN {
        log::warn!("R is ill-conditioned (cond_1 = {condition:e})");
    }
    let visits = &r_inv * p;
    let mu = 1.0 / visits.sum();
    let gamma = visits * mu;
    Ok(DerivedServiceData {
        r,
        r_inv,
        mu,
        gamma,
        condition,
    })
}
