//! Common quadratic Lyapunov matrix for the two regimes of the fluid dynamics.
//!
//! We look for a symmetric `Q` with
//!
//! * `Q` positive definite,
//! * `QR + R'Q` positive definite,
//! * `Q(I - pe')R + R'(I - ep')Q` positive semi-definite,
//!
//! normalized so that `Q gamma = e` (hence `b = gamma'Q gamma = 1`). On that
//! affine slice `gamma` is always a null vector of the third form, so
//! semi-definiteness is equivalent to definiteness of the form restricted to
//! the hyperplane `e'h = 0`, which is a complement of `gamma`. The solver works
//! with that restricted form so that every condition has a strict margin.
//!
//! The search is a projected subgradient method with Polyak steps on the
//! convex penalty
//!
//! ```text
//! Phi(Q) = (d - lmin(Q))+ + (d - lmin(QR + R'Q))+ + (d - lmin(U'M U))+
//! ```
//!
//! where `U` spans `e'h = 0` and `d = 1e-6 |R|`. Each eigenvalue is concave in
//! `Q`, so an outer product of its eigenvector is a supergradient.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::phasetype::PhaseTypeParams;

/// Absolute slack for semi-definiteness of `Q(I - pe')R + R'(I - ep')Q`.
pub const PSD_TOL: f64 = 1e-8;
/// Maximum allowed `|Q gamma - b e|_inf`.
pub const GAMMA_TOL: f64 = 1e-8;
/// Relative strictness margin, multiplied by `|R|`.
pub const MARGIN_REL: f64 = 1e-6;
const KAPPA_MAX_DOUBLINGS: u32 = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CqlfError {
    #[error("infeasible within iteration budget ({restarts} restarts, best penalty {best_penalty:e})")]
    Infeasible { restarts: usize, best_penalty: f64 },
    #[error("Q fails strict band condition (c_B = {c_b:e})")]
    BandFailure { c_b: f64 },
    #[error("kappa budget exhausted above 2^{KAPPA_MAX_DOUBLINGS}")]
    KappaBudget,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            restarts: 20,
            max_iter: 20_000,
        }
    }
}

/// Eigenvalue certificates for a candidate `Q`, recomputed from scratch.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Certificate {
    pub lambda_min_q: f64,
    pub lambda_min_qr: f64,
    /// Smallest eigenvalue of the full `sym(Q(I - pe')R)` form; zero up to
    /// rounding because `gamma` is in its kernel.
    pub lambda_min_switch: f64,
    /// `c_B`: smallest value of the switching form on `{e'h = 0, |h| = 1}`.
    pub band_lower: f64,
    /// `C_B`: largest value of the same.
    pub band_upper: f64,
    pub gamma_residual: f64,
    pub b: f64,
}

impl Certificate {
    pub fn compute(q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DVector<f64>, gamma: &DVector<f64>) -> Result<Self, LinalgError> {
        let k = q.nrows();
        let b = (gamma.transpose() * q * gamma)[(0, 0)];
        let gamma_residual = (q * gamma - DVector::from_element(k, b)).amax();
        let switch = switching_form(q, r, p);
        let (band_lower, band_upper) = z_band_of(&switch)?;
        Ok(Self {
            lambda_min_q: linalg::lambda_min(q)?,
            lambda_min_qr: linalg::lambda_min(&lyapunov_form(q, r))?,
            lambda_min_switch: linalg::lambda_min(&switch)?,
            band_lower,
            band_upper,
            gamma_residual,
            b,
        })
    }

    /// All four conditions: `Q > 0`, `QR + R'Q > 0`, switching form `>= -1e-8`,
    /// and `Q gamma = b e` with `b > 0`.
    pub fn holds(&self) -> bool {
        self.lambda_min_q > 0.0
            && self.lambda_min_qr > 0.0
            && self.lambda_min_switch >= -PSD_TOL
            && self.gamma_residual <= GAMMA_TOL
            && self.b > 0.0
    }
}

/// A certified Lyapunov matrix with its scale `kappa`.
#[derive(Debug, Clone, Serialize)]
pub struct Cqlf {
    #[serde(rename = "Q", serialize_with = "serialize_matrix")]
    pub q: DMatrix<f64>,
    pub b: f64,
    pub kappa: f64,
    #[serde(rename = "certificates")]
    pub cert: Certificate,
    pub kappa_certificates: KappaCertificate,
}

fn serialize_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.serialize(s)
}

impl Cqlf {
    /// Solves for `Q`, checks the band, and selects `kappa` for the given
    /// abandonment rate.
    pub fn build(service: &PhaseTypeParams, alpha: f64, opts: SolverOptions) -> Result<Self, CqlfError> {
        let (r, p, gamma, mu) = (service.r(), service.p(), service.gamma(), service.mu());
        let solved = solve_q(r, p, gamma, opts)?;
        let band = check_z_band(&solved.q, r, p)?;
        let kappa = select_kappa(&solved.q, r, p, alpha, mu, band)?;
        let kappa_certificates = KappaCertificate::compute(&solved.q, r, alpha, mu, band, kappa)?;
        Ok(Self {
            q: solved.q,
            b: solved.b,
            kappa,
            cert: solved.cert,
            kappa_certificates,
        })
    }
}

/// `Q` and `b` before `kappa` is chosen.
#[derive(Debug, Clone)]
pub struct SolvedQ {
    pub q: DMatrix<f64>,
    pub b: f64,
    pub cert: Certificate,
    pub restart: usize,
    pub iterations: usize,
}

pub fn lyapunov_form(q: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    linalg::sym(&(q * r * 2.0))
}

/// `Q(I - pe')R + R'(I - ep')Q`.
pub fn switching_form(q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DVector<f64>) -> DMatrix<f64> {
    let a = centered_r(r, p);
    linalg::sym(&(q * a * 2.0))
}

/// `(I - pe')R`.
pub fn centered_r(r: &DMatrix<f64>, p: &DVector<f64>) -> DMatrix<f64> {
    let k = p.len();
    let e = DVector::from_element(k, 1.0);
    (DMatrix::<f64>::identity(k, k) - p * e.transpose()) * r
}

fn z_band_of(switch: &DMatrix<f64>) -> Result<(f64, f64), LinalgError> {
    let k = switch.nrows();
    let basis = linalg::hyperplane_basis(&DVector::from_element(k, 1.0));
    Ok(linalg::restricted_extremes(switch, &basis)?.unwrap_or((f64::INFINITY, f64::INFINITY)))
}

/// Extremes `(c_B, C_B)` of the switching form over `{h : e'h = 0, |h| = 1}`.
///
/// For a single phase the hyperplane is `{0}` and both values are `+inf`;
/// callers treat the band as vacuous.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZBand {
    pub lower: f64,
    pub upper: f64,
}

impl ZBand {
    pub fn is_vacuous(&self) -> bool {
        self.lower.is_infinite()
    }
}

pub fn check_z_band(q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DVector<f64>) -> Result<ZBand, CqlfError> {
    let (lower, upper) = z_band_of(&switching_form(q, r, p))?;
    let tol = 1e-12 * linalg::abs_sum(r).max(1.0);
    if lower <= tol {
        return Err(CqlfError::BandFailure { c_b: lower });
    }
    Ok(ZBand { lower, upper })
}

/// Orthonormal coordinates on symmetric `K x K` matrices plus the affine slice
/// `{S : S gamma = e}`.
struct SymSlice {
    k: usize,
    // Columns are the constraint map applied to each basis element.
    constraint: DMatrix<f64>,
    gram_inv: DMatrix<f64>,
}

impl SymSlice {
    fn new(gamma: &DVector<f64>) -> Result<Self, LinalgError> {
        let k = gamma.len();
        let d = k * (k + 1) / 2;
        let mut constraint = DMatrix::zeros(k, d);
        for (s, (i, j)) in Self::pairs(k).enumerate() {
            let col = Self::basis(k, i, j) * gamma;
            constraint.set_column(s, &col);
        }
        let gram = &constraint * constraint.transpose();
        let gram_inv = linalg::inverse(&gram)?;
        Ok(Self { k, constraint, gram_inv })
    }

    fn pairs(k: usize) -> impl Iterator<Item = (usize, usize)> {
        (0..k).flat_map(move |i| (i..k).map(move |j| (i, j)))
    }

    fn basis(k: usize, i: usize, j: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(k, k);
        if i == j {
            m[(i, i)] = 1.0;
        } else {
            let w = std::f64::consts::FRAC_1_SQRT_2;
            m[(i, j)] = w;
            m[(j, i)] = w;
        }
        m
    }

    fn coords(&self, m: &DMatrix<f64>) -> DVector<f64> {
        let w = std::f64::consts::SQRT_2;
        DVector::from_iterator(
            self.k * (self.k + 1) / 2,
            Self::pairs(self.k).map(|(i, j)| if i == j { m[(i, i)] } else { 0.5 * w * (m[(i, j)] + m[(j, i)]) }),
        )
    }

    fn matrix(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.k, self.k);
        for (s, (i, j)) in Self::pairs(self.k).enumerate() {
            m += Self::basis(self.k, i, j) * theta[s];
        }
        m
    }

    /// Orthogonal projection onto the tangent space `{S gamma = 0}`.
    fn tangent(&self, theta: &DVector<f64>) -> DVector<f64> {
        let a = &self.constraint;
        theta - a.transpose() * (&self.gram_inv * (a * theta))
    }

    /// Orthogonal projection onto `{S gamma = e}`.
    fn onto_slice(&self, theta: &DVector<f64>) -> DVector<f64> {
        let a = &self.constraint;
        let defect = a * theta - DVector::from_element(self.k, 1.0);
        theta - a.transpose() * (&self.gram_inv * defect)
    }
}

struct Penalty {
    value: f64,
    // Subgradient of the penalty, in matrix form.
    subgradient: DMatrix<f64>,
}

fn penalty(q: &DMatrix<f64>, r: &DMatrix<f64>, centered: &DMatrix<f64>, hyper: &DMatrix<f64>, margin: f64) -> Result<Penalty, LinalgError> {
    let k = q.nrows();
    let mut value = 0.0;
    let mut grad = DMatrix::zeros(k, k);

    let eq = linalg::sym_eig(q)?;
    if eq.min() < margin {
        value += margin - eq.min();
        let v = eq.min_vector();
        grad -= &v * v.transpose();
    }

    let eqr = linalg::sym_eig(&lyapunov_form(q, r))?;
    if eqr.min() < margin {
        value += margin - eqr.min();
        let v = eqr.min_vector();
        let w = r * &v;
        grad -= &v * w.transpose() + &w * v.transpose();
    }

    if hyper.ncols() > 0 {
        let form = linalg::sym(&(hyper.transpose() * linalg::sym(&(q * centered * 2.0)) * hyper));
        let es = linalg::sym_eig(&form)?;
        if es.min() < margin {
            value += margin - es.min();
            let y = hyper * es.min_vector();
            let ay = centered * &y;
            grad -= &y * ay.transpose() + &ay * y.transpose();
        }
    }
    Ok(Penalty { value, subgradient: grad })
}

/// Finds a certified `Q` on the slice `Q gamma = e`.
///
/// Restart 0 starts from the Lyapunov solution of `QR + R'Q = I` projected
/// onto the slice; later restarts perturb it with a seeded random symmetric
/// matrix. The first certified restart wins.
pub fn solve_q(r: &DMatrix<f64>, p: &DVector<f64>, gamma: &DVector<f64>, opts: SolverOptions) -> Result<SolvedQ, CqlfError> {
    let k = r.nrows();
    let slice = SymSlice::new(gamma)?;
    let centered = centered_r(r, p);
    let hyper = linalg::hyperplane_basis(&DVector::from_element(k, 1.0));
    let margin = MARGIN_REL * linalg::abs_sum(r);
    let q0 = linalg::solve_lyapunov(r, &DMatrix::identity(k, k))?;
    let q0_scale = q0.norm();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best = f64::INFINITY;

    for restart in 0..opts.restarts.max(1) {
        let start = if restart == 0 {
            q0.clone()
        } else {
            let noise = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
            &q0 + linalg::sym(&noise) * (0.5 * q0_scale)
        };
        let mut theta = slice.onto_slice(&slice.coords(&start));
        for iter in 0..opts.max_iter {
            let q = slice.matrix(&theta);
            let pen = penalty(&q, r, &centered, &hyper, margin)?;
            best = best.min(pen.value);
            if pen.value == 0.0 {
                let cert = Certificate::compute(&q, r, p, gamma)?;
                if cert.holds() {
                    log::debug!("cqlf certified on restart {restart} after {iter} iterations");
                    return Ok(SolvedQ {
                        b: cert.b,
                        q,
                        cert,
                        restart,
                        iterations: iter,
                    });
                }
                break;
            }
            let g = slice.tangent(&slice.coords(&pen.subgradient));
            let gn2 = g.norm_squared();
            if gn2 == 0.0 {
                break;
            }
            // Polyak step aimed one margin below the zero level set, which the
            // penalty reaches whenever a strictly feasible point exists.
            theta -= g * ((pen.value + margin) / gn2);
            theta = slice.onto_slice(&theta);
        }
    }
    Err(CqlfError::Infeasible {
        restarts: opts.restarts.max(1),
        best_penalty: best,
    })
}

/// Minimum eigenvalues of the three `kappa` conditions at a given `kappa`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KappaCertificate {
    /// `ee'R + R'ee' + kappa (QR + R'Q)`.
    pub lambda_min_negative_x: f64,
    /// `-2 alpha (alpha v mu) |e'R| I + kappa (QR + R'Q)`.
    pub lambda_min_overload: f64,
    /// `kappa c_B / 2 - |e'R|^2 max(1/(alpha ^ mu), alpha)`; `+inf` for one phase.
    pub cross_term_slack: f64,
}

impl KappaCertificate {
    pub fn compute(q: &DMatrix<f64>, r: &DMatrix<f64>, alpha: f64, mu: f64, band: ZBand, kappa: f64) -> Result<Self, LinalgError> {
        let k = q.nrows();
        let e = DVector::from_element(k, 1.0);
        let er = e.transpose() * r;
        let er_norm = er.norm();
        let qr = lyapunov_form(q, r);
        let eer = &e * &er;
        let first = linalg::sym(&(eer * 2.0)) + &qr * kappa;
        let second = DMatrix::<f64>::identity(k, k) * (-2.0 * alpha * alpha.max(mu) * er_norm) + &qr * kappa;
        let cross_term_slack = if band.is_vacuous() {
            f64::INFINITY
        } else {
            kappa * band.lower / 2.0 - er_norm * er_norm * (1.0 / alpha.min(mu)).max(alpha)
        };
        Ok(Self {
            lambda_min_negative_x: linalg::lambda_min(&first)?,
            lambda_min_overload: linalg::lambda_min(&second)?,
            cross_term_slack,
        })
    }

    pub fn holds(&self) -> bool {
        self.lambda_min_negative_x > 0.0 && self.lambda_min_overload > 0.0 && self.cross_term_slack >= 0.0
    }
}

/// Smallest `kappa` in `{1, 2, 4, ...}` meeting all three conditions.
pub fn select_kappa(q: &DMatrix<f64>, r: &DMatrix<f64>, _p: &DVector<f64>, alpha: f64, mu: f64, band: ZBand) -> Result<f64, CqlfError> {
    let mut kappa = 1.0;
    for _ in 0..=KAPPA_MAX_DOUBLINGS {
        if KappaCertificate::compute(q, r, alpha, mu, band, kappa)?.holds() {
            return Ok(kappa);
        }
        kappa *= 2.0;
    }
    Err(CqlfError::KappaBudget)
}
