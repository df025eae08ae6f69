//! Drift constants behind positive Harris recurrence of the prelimit chain.
//!
//! The state is `(a, q, z)`: age of the current interarrival time, queue
//! length and the phase counts of customers in service. With
//!
//! ```text
//! f(a, q, z) = 2F(a)(1 + m(a)) + q + sum z
//! ```
//!
//! the extended generator satisfies
//!
//! ```text
//! Gf <= 2(1 + h(a)) [1 - 2F(a) + int_a^inf (1 - F)] + h(a) - alpha q - sum nu
//! ```
//!
//! and the bracket tends to -1 as `a` grows, which gives `Gf <= -1 + H 1_B`
//! for a box `B` in `(a, q)`.

use serde::Serialize;
use thiserror::Error;

use crate::interarrival::{Interarrival, InterarrivalError};

/// The evaluation range stops where the survival function drops below this.
pub const SURVIVAL_CAP: f64 = 1e-12;
/// Points in the coarse scans for `C1` and `H`.
pub const SCAN_POINTS: usize = 4000;
/// Bisection and golden-section stop at this absolute width.
pub const REFINE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarrisError {
    #[error(transparent)]
    Interarrival(#[from] InterarrivalError),
    #[error("assumption (a) violated numerically: {0}")]
    Unbounded(String),
    #[error("hazard is not locally bounded: h({a}) = {h}")]
    Hazard { a: f64, h: f64 },
    #[error("invalid input: {0}")]
    Input(String),
}

/// Which service rates are subtracted in the generator bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Occupancy<'a> {
    /// Phase counts of the customers in service.
    Phases(&'a [u64]),
    /// No phase information: subtract nothing, the worst case.
    Worst,
}

/// `1 - 2F(a) + int_a^inf (1 - F)`.
pub fn bracket(dist: &Interarrival, a: f64) -> f64 {
    1.0 - 2.0 * dist.cdf(a) + dist.survival_integral(a)
}

/// `(h(x), m(x))`.
pub fn hazard_mrl(dist: &Interarrival, x: f64) -> Result<(f64, f64), HarrisError> {
    if !(x >= 0.0) {
        return Err(HarrisError::Input(format!("age must be nonnegative, got {x}")));
    }
    Ok((dist.hazard(x)?, dist.mrl(x)?))
}

pub fn f_lyap(dist: &Interarrival, a: f64, q: u64, z: &[u64]) -> Result<f64, HarrisError> {
    let (_, m) = hazard_mrl(dist, a)?;
    Ok(2.0 * dist.cdf(a) * (1.0 + m) + q as f64 + z.iter().sum::<u64>() as f64)
}

/// The `a`-part of the bound, `2(1 + h(a)) bracket(a) + h(a)`.
pub fn age_part(dist: &Interarrival, a: f64) -> Result<f64, HarrisError> {
    let h = dist.hazard(a)?;
    Ok(2.0 * (1.0 + h) * bracket(dist, a) + h)
}

/// Upper bound on `Gf(a, q, z)`. With `q > 0` every rate `nu_k` is
/// subtracted; with `q = 0` only those of occupied phases.
pub fn generator_upper_bound(dist: &Interarrival, alpha: f64, nu: &[f64], a: f64, q: u64, occ: Occupancy) -> Result<f64, HarrisError> {
    let service: f64 = match occ {
        Occupancy::Phases(z) => {
            if z.len() != nu.len() {
                return Err(HarrisError::Input(format!("{} phase counts for {} rates", z.len(), nu.len())));
            }
            if q > 0 {
                nu.iter().sum()
            } else {
                nu.iter().zip(z).filter(|(_, c)| **c > 0).map(|(r, _)| r).sum()
            }
        }
        Occupancy::Worst => 0.0,
    };
    Ok(age_part(dist, a)? - alpha * q as f64 - service)
}

/// `B = [0, c1] x [0, c2] x {sum z <= n}` and the jump `h` of the bound on it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PetiteSet {
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    #[serde(rename = "H")]
    pub h: f64,
    pub n: usize,
    /// Largest age inside the evaluation range.
    pub a_cap: f64,
}

impl PetiteSet {
    pub fn contains(&self, a: f64, q: u64, z_total: u64) -> bool {
        a <= self.c1 && q as f64 <= self.c2 && z_total <= self.n as u64
    }

    pub fn describe(&self) -> String {
        format!("[0, {}] x [0, {}] x {{sum z <= {}}}", self.c1, self.c2, self.n)
    }
}

/// Age where the survival function reaches `SURVIVAL_CAP`.
pub fn age_cap(dist: &Interarrival) -> Result<f64, HarrisError> {
    if !dist.is_unbounded() {
        return Err(HarrisError::Unbounded("interarrival law has bounded support".into()));
    }
    let mut hi = dist.mean;
    while dist.survival(hi) > SURVIVAL_CAP {
        hi *= 2.0;
        if hi > 1e12 * dist.mean {
            return Err(HarrisError::Unbounded("survival does not decay".into()));
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-9 * hi {
        let mid = 0.5 * (lo + hi);
        if dist.survival(mid) > SURVIVAL_CAP {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// `C1`, `C2 = (H + 1)/alpha` and `H` for the given law.
pub fn petite_set_constants(dist: &Interarrival, alpha: f64, n: usize) -> Result<PetiteSet, HarrisError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(HarrisError::Input(format!("alpha must be positive, got {alpha}")));
    }
    let cap = age_cap(dist)?;
    let step = cap / SCAN_POINTS as f64;
    let grid: Vec<f64> = (0..=SCAN_POINTS).map(|i| i as f64 * step).collect();

    let mut hmax = 0.0f64;
    for &a in &grid {
        let h = dist.hazard(a)?;
        if !h.is_finite() {
            return Err(HarrisError::Hazard { a, h });
        }
        hmax = hmax.max(h);
    }
    log::debug!("sup hazard on [0, {cap}] is {hmax}");

    // Smallest grid point after which the bracket stays at or below -1/2.
    let mut first = None;
    for (i, &a) in grid.iter().enumerate().rev() {
        if bracket(dist, a) <= -0.5 {
            first = Some(i);
        } else {
            break;
        }
    }
    let i = first.ok_or_else(|| HarrisError::Unbounded(format!("bracket never reaches -1/2 on [0, {cap}]")))?;
    let c1 = if i == 0 {
        0.0
    } else {
        let (mut lo, mut hi) = (grid[i - 1], grid[i]);
        while hi - lo > REFINE_TOL {
            let mid = 0.5 * (lo + hi);
            if bracket(dist, mid) <= -0.5 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };
    let tail_end = (10.0 * c1).min(cap);
    for j in 0..=SCAN_POINTS {
        let a = c1 + (tail_end - c1) * j as f64 / SCAN_POINTS as f64;
        let b = bracket(dist, a);
        if b > -0.5 + 1e-12 {
            return Err(HarrisError::Unbounded(format!("bracket climbs back to {b} at a = {a}")));
        }
    }

    let h = maximize_age_part(dist, c1)?;
    Ok(PetiteSet {
        c1,
        c2: (h + 1.0) / alpha,
        h,
        n,
        a_cap: cap,
    })
}

/// `sup_{[0, c1]} age_part` by a coarse scan and golden-section refinement.
fn maximize_age_part(dist: &Interarrival, c1: f64) -> Result<f64, HarrisError> {
    if c1 == 0.0 {
        return age_part(dist, 0.0);
    }
    let step = c1 / SCAN_POINTS as f64;
    let mut best = (0.0, f64::NEG_INFINITY);
    for i in 0..=SCAN_POINTS {
        let a = i as f64 * step;
        let v = age_part(dist, a)?;
        if v > best.1 {
            best = (a, v);
        }
    }
    let invphi = 0.5 * (5f64.sqrt() - 1.0);
    let mut lo = (best.0 - step).max(0.0);
    let mut hi = (best.0 + step).min(c1);
    let mut x1 = hi - invphi * (hi - lo);
    let mut x2 = lo + invphi * (hi - lo);
    let mut f1 = age_part(dist, x1)?;
    let mut f2 = age_part(dist, x2)?;
    while hi - lo > REFINE_TOL.max(1e-10 * c1) {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + invphi * (hi - lo);
            f2 = age_part(dist, x2)?;
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - invphi * (hi - lo);
            f1 = age_part(dist, x1)?;
        }
    }
    Ok(best.1.max(f1).max(f2).max(age_part(dist, 0.0)?).max(age_part(dist, c1)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCheck {
    pub points: usize,
    pub violations: usize,
    pub max_bound: f64,
}

impl GridCheck {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

/// Evaluates the worst-case bound on `side x side` points with `a > C1` and
/// on as many with `a <= C1`, `q > C2`; every one must be `<= -1`.
pub fn verify_outside(dist: &Interarrival, alpha: f64, set: &PetiteSet, side: usize) -> Result<GridCheck, HarrisError> {
    let a_hi = (10.0 * set.c1.max(dist.mean)).min(set.a_cap);
    let q_lo = set.c2.floor() as u64 + 1;
    let mut points = 0;
    let mut violations = 0;
    let mut max_bound = f64::NEG_INFINITY;
    let mut check = |a: f64, q: u64| -> Result<(), HarrisError> {
        let bound = generator_upper_bound(dist, alpha, &[], a, q, Occupancy::Worst)?;
        points += 1;
        max_bound = max_bound.max(bound);
        if bound > -1.0 {
            violations += 1;
        }
        Ok(())
    };
    for i in 1..=side {
        let a = set.c1 + (a_hi - set.c1) * i as f64 / side as f64;
        for q in 0..side as u64 {
            check(a, q)?;
        }
    }
    for i in 0..side {
        let a = set.c1 * i as f64 / (side - 1).max(1) as f64;
        for q in 0..side as u64 {
            check(a, q_lo + q)?;
        }
    }
    Ok(GridCheck {
        points,
        violations,
        max_bound,
    })
}
