//! Interarrival laws shared by the simulator and the Harris-recurrence checks.
//!
//! Every family is parametrized so its base law has mean 1; `Interarrival`
//! rescales that by `mean`.

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::phasetype::exp_inverse;

/// Survival values below this count as underflow.
pub const SURVIVAL_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterarrivalError {
    #[error("invalid interarrival parameters: {0}")]
    Params(String),
    #[error("survival underflow at x = {x}: 1 - F(x) = {survival:e}")]
    Range { x: f64, survival: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum Family {
    Exponential,
    Erlang {
        stages: u32,
    },
    /// Two-phase hyperexponential with balanced means and the given squared
    /// coefficient of variation (`scv >= 1`).
    Hyperexponential {
        scv: f64,
    },
    Lognormal {
        sigma: f64,
    },
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interarrival {
    pub family: Family,
    pub mean: f64,
}

impl Family {
    pub fn validate(&self) -> Result<(), InterarrivalError> {
        match *self {
            Family::Erlang { stages: 0 } => Err(InterarrivalError::Params("erlang needs stages >= 1".into())),
            Family::Hyperexponential { scv } if !(scv >= 1.0 && scv.is_finite()) => Err(InterarrivalError::Params(format!(
                "hyperexponential needs finite scv >= 1, got {scv}"
            ))),
            Family::Lognormal { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(InterarrivalError::Params(format!("lognormal needs sigma > 0, got {sigma}")))
            }
            _ => Ok(()),
        }
    }

    /// Squared coefficient of variation, which is also the variance of the
    /// mean-one law.
    pub fn scv(&self) -> f64 {
        match *self {
            Family::Exponential => 1.0,
            Family::Erlang { stages } => 1.0 / stages as f64,
            Family::Hyperexponential { scv } => scv,
            Family::Lognormal { sigma } => (sigma * sigma).exp_m1(),
            Family::Deterministic => 0.0,
        }
    }

    pub fn with_mean(self, mean: f64) -> Interarrival {
        Interarrival { family: self, mean }
    }
}

/// `(p1, rate1, rate2)` of the balanced-means hyperexponential with mean 1.
fn h2_params(scv: f64) -> (f64, f64, f64) {
    let p1 = 0.5 * (1.0 + ((scv - 1.0) / (scv + 1.0)).sqrt());
    (p1, 2.0 * p1, 2.0 * (1.0 - p1))
}

fn std_normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Interarrival {
    pub fn new(family: Family, mean: f64) -> Result<Self, InterarrivalError> {
        family.validate()?;
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(InterarrivalError::Params(format!("mean must be positive, got {mean}")));
        }
        Ok(Self { family, mean })
    }

    pub fn exponential(rate: f64) -> Self {
        Self {
            family: Family::Exponential,
            mean: 1.0 / rate,
        }
    }

    pub fn variance(&self) -> f64 {
        self.family.scv() * self.mean * self.mean
    }

    /// Whether `F(x) < 1` for every `x`.
    pub fn is_unbounded(&self) -> bool {
        !matches!(self.family, Family::Deterministic)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let base = match self.family {
            Family::Exponential => exp_inverse(1.0, rng),
            Family::Erlang { stages } => {
                let rate = stages as f64;
                (0..stages).map(|_| exp_inverse(rate, rng)).sum()
            }
            Family::Hyperexponential { scv } => {
                let (p1, r1, r2) = h2_params(scv);
                if rng.random::<f64>() < p1 {
                    exp_inverse(r1, rng)
                } else {
                    exp_inverse(r2, rng)
                }
            }
            Family::Lognormal { sigma } => LogNormal::new(-0.5 * sigma * sigma, sigma).expect("sigma validated").sample(rng),
            Family::Deterministic => 1.0,
        };
        base * self.mean
    }

    /// `1 - F(x)`.
    pub fn survival(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 1.0;
        }
        let y = x / self.mean;
        match self.family {
            Family::Exponential => (-y).exp(),
            Family::Erlang { stages } => {
                let t = stages as f64 * y;
                let mut term = (-t).exp();
                let mut sum = term;
                for j in 1..stages {
                    term *= t / j as f64;
                    sum += term;
                }
                sum
            }
            Family::Hyperexponential { scv } => {
                let (p1, r1, r2) = h2_params(scv);
                p1 * (-r1 * y).exp() + (1.0 - p1) * (-r2 * y).exp()
            }
            Family::Lognormal { sigma } => std_normal_sf((y.ln() + 0.5 * sigma * sigma) / sigma),
            Family::Deterministic => {
                if y < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        1.0 - self.survival(x)
    }

    /// `F'(x)`, taken as the right derivative at 0.
    pub fn density(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        let y = x / self.mean;
        let base = match self.family {
            Family::Exponential => (-y).exp(),
            Family::Erlang { stages } => {
                let k = stages as f64;
                let t = k * y;
                // k (t^{k-1} / (k-1)!) e^{-t}
                let mut term = k * (-t).exp();
                for j in 1..stages {
                    term *= t / j as f64;
                }
                term
            }
            Family::Hyperexponential { scv } => {
                let (p1, r1, r2) = h2_params(scv);
                p1 * r1 * (-r1 * y).exp() + (1.0 - p1) * r2 * (-r2 * y).exp()
            }
            Family::Lognormal { sigma } => {
                if y == 0.0 {
                    0.0
                } else {
                    std_normal_pdf((y.ln() + 0.5 * sigma * sigma) / sigma) / (y * sigma)
                }
            }
            Family::Deterministic => 0.0,
        };
        base / self.mean
    }

    /// `h(x) = F'(x) / (1 - F(x))`.
    pub fn hazard(&self, x: f64) -> Result<f64, InterarrivalError> {
        let s = self.survival(x);
        if s < SURVIVAL_FLOOR {
            return Err(InterarrivalError::Range { x, survival: s });
        }
        Ok(match self.family {
            Family::Exponential => 1.0 / self.mean,
            _ => self.density(x) / s,
        })
    }

    /// `int_x^inf (1 - F(s)) ds` in closed form.
    pub fn survival_integral(&self, x: f64) -> f64 {
        let x = x.max(0.0);
        let y = x / self.mean;
        let base = match self.family {
            Family::Exponential => (-y).exp(),
            Family::Erlang { stages } => {
                // (1/k) sum_{i<k} (k - i) e^{-t} t^i / i!
                let k = stages as f64;
                let t = k * y;
                let mut term = (-t).exp();
                let mut sum = k * term;
                for i in 1..stages {
                    term *= t / i as f64;
                    sum += (k - i as f64) * term;
                }
                sum / k
            }
            Family::Hyperexponential { scv } => {
                let (p1, r1, r2) = h2_params(scv);
                p1 / r1 * (-r1 * y).exp() + (1.0 - p1) / r2 * (-r2 * y).exp()
            }
            Family::Lognormal { sigma } => {
                // E[(Y - y)^+] = Phi(d1) - y Phi(d2) for a mean-one lognormal.
                if y == 0.0 {
                    1.0
                } else {
                    let d1 = (0.5 * sigma * sigma - y.ln()) / sigma;
                    let d2 = d1 - sigma;
                    std_normal_sf(-d1) - y * std_normal_sf(-d2)
                }
            }
            Family::Deterministic => (1.0 - y).max(0.0),
        };
        base * self.mean
    }

    /// `int_x^inf (1 - F(s)) ds` by double-exponential quadrature after
    /// mapping `[x, inf)` onto `[0, 1)`.
    pub fn survival_integral_quadrature(&self, x: f64) -> f64 {
        self.tail_quadrature(x, 1.0)
    }

    // The integrand is divided by `norm` so the absolute error target stays
    // meaningful deep in the tail.
    fn tail_quadrature(&self, x: f64, norm: f64) -> f64 {
        let scale = self.mean;
        let f = |t: f64| {
            if t >= 1.0 {
                return 0.0;
            }
            let s = x + scale * t / (1.0 - t);
            self.survival(s) / norm * scale / ((1.0 - t) * (1.0 - t))
        };
        quadrature::double_exponential::integrate(f, 0.0, 1.0, 1e-13 * scale).integral * norm
    }

    /// Mean residual life `m(x) = E[xi - x | xi > x]`, by quadrature.
    pub fn mrl(&self, x: f64) -> Result<f64, InterarrivalError> {
        let s = self.survival(x);
        if s < SURVIVAL_FLOOR {
            return Err(InterarrivalError::Range { x, survival: s });
        }
        Ok(self.tail_quadrature(x, s) / s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_is_memoryless() {
        let d = Interarrival::exponential(2.0);
        for x in [0.0, 0.5, 3.0, 20.0] {
            assert!((d.hazard(x).unwrap() - 2.0).abs() < 1e-12);
            assert!((d.mrl(x).unwrap() - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn erlang_two_limits() {
        let d = Family::Erlang { stages: 2 }.with_mean(1.0);
        assert_eq!(d.hazard(0.0).unwrap(), 0.0);
        assert!((d.hazard(40.0).unwrap() - 2.0).abs() < 0.03);
        assert!((d.mrl(0.0).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn closed_form_integrals_match_quadrature() {
        let families = [
            Family::Exponential,
            Family::Erlang { stages: 3 },
            Family::Hyperexponential { scv: 4.0 },
            Family::Lognormal { sigma: 1.0 },
        ];
        for fam in families {
            let d = fam.with_mean(1.7);
            for x in [0.0, 0.3, 1.0, 4.0, 9.0] {
                let a = d.survival_integral(x);
                let b = d.survival_integral_quadrature(x);
                assert!((a - b).abs() <= 1e-8 * a.max(1e-3), "{fam:?} at {x}: {a} vs {b}");
            }
            assert!((d.survival_integral(0.0) - 1.7).abs() < 1e-10);
        }
    }

    #[test]
    fn hyperexponential_has_requested_scv() {
        let (p1, r1, r2) = h2_params(5.0);
        let mean = p1 / r1 + (1.0 - p1) / r2;
        let second = 2.0 * (p1 / (r1 * r1) + (1.0 - p1) / (r2 * r2));
        assert!((mean - 1.0).abs() < 1e-12);
        assert!((second - 1.0 - 5.0).abs() < 1e-10);
    }

    #[test]
    fn config_round_trip() {
        let f: Family = serde_json::from_str(r#"{"family":"erlang","stages":2}"#).unwrap();
        assert_eq!(f, Family::Erlang { stages: 2 });
        assert!(serde_json::from_str::<Family>(r#"{"family":"erlang","stages":2,"rate":1}"#).is_err());
    }
}
