//! Weighted empirical distributions on the state manifold, 1-D distances,
//! tail masses and batch-means output analysis.

use serde::Serialize;
use thiserror::Error;

use crate::lyapunov::{self, LyapunovFn};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    Empty,
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("sample {index} is off the manifold")]
    OffManifold { index: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("mismatched configurations: {0}")]
    Mismatch(String),
}

/// Provenance of an empirical distribution.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DistMeta {
    pub n: Option<usize>,
    pub seed: u64,
    pub burn_in: f64,
    pub spacing: f64,
    pub se_x_plus: f64,
    pub se_x_minus: f64,
}

/// Weighted points `(x, z)` on the manifold `e'z + x^- = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDist {
    pub k: usize,
    pub x: Vec<f64>,
    /// Row-major, `k` entries per sample.
    pub z: Vec<f64>,
    pub weights: Vec<f64>,
    pub meta: DistMeta,
}

impl EmpiricalDist {
    /// Builds a distribution, with equal weights when `weights` is `None`.
    pub fn new(k: usize, x: Vec<f64>, z: Vec<f64>, weights: Option<Vec<f64>>) -> Result<Self, StatsError> {
        if x.is_empty() {
            return Err(StatsError::Empty);
        }
        if z.len() != x.len() * k {
            return Err(StatsError::Dimension(format!(
                "{} x-values but {} z-entries for k = {k}",
                x.len(),
                z.len()
            )));
        }
        let weights = match weights {
            None => vec![1.0 / x.len() as f64; x.len()],
            Some(w) => {
                if w.len() != x.len() {
                    return Err(StatsError::Weights(format!("{} weights for {} samples", w.len(), x.len())));
                }
                if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return Err(StatsError::Weights("weights must be positive".into()));
                }
                let total: f64 = w.iter().sum();
                w.into_iter().map(|v| v / total).collect()
            }
        };
        let dist = Self {
            k,
            x,
            z,
            weights,
            meta: DistMeta::default(),
        };
        for i in 0..dist.len() {
            if lyapunov::check_manifold(dist.x[i], dist.z_at(i)).is_err() {
                return Err(StatsError::OffManifold { index: i });
            }
        }
        Ok(dist)
    }

    pub fn with_meta(mut self, meta: DistMeta) -> Self {
        self.meta = meta;
        self
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

    pub fn x_marginal(&self) -> Weighted1d {
        Weighted1d::new(self.x.clone(), self.weights.clone())
    }

    pub fn z_marginal(&self, j: usize) -> Weighted1d {
        Weighted1d::new((0..self.len()).map(|i| self.z_at(i)[j]).collect(), self.weights.clone())
    }

    /// The law of `sqrt g` under this distribution.
    pub fn sqrt_g_marginal(&self, lyap: &LyapunovFn) -> Weighted1d {
        Weighted1d::new(
            (0..self.len()).map(|i| lyap.g_unchecked(self.x[i], self.z_at(i)).sqrt()).collect(),
            self.weights.clone(),
        )
    }

    pub fn mean_x(&self) -> f64 {
        self.x.iter().zip(&self.weights).map(|(x, w)| x * w).sum()
    }
}

/// A weighted 1-D sample, sorted, with cumulative weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Weighted1d {
    pub values: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl Weighted1d {
    pub fn new(values: Vec<f64>, weights: Vec<f64>) -> Self {
        let mut pairs: Vec<(f64, f64)> = values.into_iter().zip(weights).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        let mut acc = 0.0;
        let mut vals = Vec::with_capacity(pairs.len());
        let mut cum = Vec::with_capacity(pairs.len());
        for (v, w) in pairs {
            acc += w / total;
            // Merge ties so the CDF has one step per distinct value.
            if vals.last() == Some(&v) {
                *cum.last_mut().unwrap() = acc;
            } else {
                vals.push(v);
                cum.push(acc);
            }
        }
        if let Some(last) = cum.last_mut() {
            *last = 1.0;
        }
        Self {
            values: vals,
            cumulative: cum,
        }
    }

    pub fn unweighted(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(values, vec![1.0; n])
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `P(X <= t)`.
    pub fn cdf(&self, t: f64) -> f64 {
        let idx = self.values.partition_point(|v| *v <= t);
        if idx == 0 {
            0.0
        } else {
            self.cumulative[idx - 1]
        }
    }

    /// `P(X < t)`.
    fn cdf_left(&self, t: f64) -> f64 {
        let idx = self.values.partition_point(|v| *v < t);
        if idx == 0 {
            0.0
        } else {
            self.cumulative[idx - 1]
        }
    }

    pub fn mean(&self) -> f64 {
        let mut prev = 0.0;
        let mut m = 0.0;
        for (v, c) in self.values.iter().zip(&self.cumulative) {
            m += v * (c - prev);
            prev = *c;
        }
        m
    }

    /// Smallest value `t` with `P(X > t) <= mass`.
    pub fn upper_quantile(&self, mass: f64) -> f64 {
        let idx = self.cumulative.partition_point(|c| *c < 1.0 - mass);
        self.values[idx.min(self.values.len() - 1)]
    }
}

/// A density tabulated on an increasing grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    pub x: Vec<f64>,
    pub density: Vec<f64>,
    cumulative: Vec<f64>,
}

impl DensityTable {
    /// Normalizes the table by the trapezoid rule.
    pub fn new(x: Vec<f64>, density: Vec<f64>) -> Self {
        assert_eq!(x.len(), density.len());
        assert!(x.len() >= 2, "density table needs two points");
        let mut cumulative = vec![0.0; x.len()];
        for i in 1..x.len() {
            cumulative[i] = cumulative[i - 1] + 0.5 * (x[i] - x[i - 1]) * (density[i] + density[i - 1]);
        }
        let total = *cumulative.last().unwrap();
        let density = density.into_iter().map(|d| d / total).collect();
        cumulative.iter_mut().for_each(|c| *c /= total);
        Self { x, density, cumulative }
    }

    /// Integral of the stored density before normalization is 1 by
    /// construction; this recomputes it.
    pub fn total_mass(&self) -> f64 {
        (1..self.x.len())
            .map(|i| 0.5 * (self.x[i] - self.x[i - 1]) * (self.density[i] + self.density[i - 1]))
            .sum()
    }

    pub fn cdf(&self, t: f64) -> f64 {
        if t <= self.x[0] {
            return 0.0;
        }
        let last = self.x.len() - 1;
        if t >= self.x[last] {
            return 1.0;
        }
        let i = self.x.partition_point(|v| *v <= t) - 1;
        // Integrate the linear interpolant of the density over [x_i, t].
        let h = t - self.x[i];
        let slope = (self.density[i + 1] - self.density[i]) / (self.x[i + 1] - self.x[i]);
        self.cumulative[i] + h * (self.density[i] + 0.5 * slope * h)
    }

    pub fn mean(&self) -> f64 {
        (1..self.x.len())
            .map(|i| 0.5 * (self.x[i] - self.x[i - 1]) * (self.x[i] * self.density[i] + self.x[i - 1] * self.density[i - 1]))
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        (1..self.x.len())
            .map(|i| {
                let f = |j: usize| (self.x[j] - m).powi(2) * self.density[j];
                0.5 * (self.x[i] - self.x[i - 1]) * (f(i) + f(i - 1))
            })
            .sum()
    }
}

/// Kolmogorov-Smirnov distance between two weighted samples.
pub fn ks_1d(a: &Weighted1d, b: &Weighted1d) -> Result<f64, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut worst = 0.0f64;
    for t in a.values.iter().chain(&b.values) {
        worst = worst.max((a.cdf(*t) - b.cdf(*t)).abs());
    }
    Ok(worst)
}

/// Kolmogorov-Smirnov distance between a weighted sample and a tabulated
/// density; both one-sided limits of the empirical CDF are checked.
pub fn ks_table(a: &Weighted1d, table: &DensityTable) -> Result<f64, StatsError> {
    if a.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut worst = 0.0f64;
    for t in &a.values {
        let f = table.cdf(*t);
        worst = worst.max((a.cdf(*t) - f).abs()).max((a.cdf_left(*t) - f).abs());
    }
    Ok(worst)
}

/// `W1 = int |F_a - F_b| dt`, the L1 distance of the quantile functions.
pub fn wasserstein1_1d(a: &Weighted1d, b: &Weighted1d) -> Result<f64, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut points: Vec<f64> = a.values.iter().chain(&b.values).copied().collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let mut total = 0.0;
    for w in points.windows(2) {
        total += (a.cdf(w[0]) - b.cdf(w[0])).abs() * (w[1] - w[0]);
    }
    Ok(total)
}

/// Weighted fraction of samples with `sqrt g > s`.
pub fn tail_mass(dist: &EmpiricalDist, lyap: &LyapunovFn, s: f64) -> f64 {
    (0..dist.len())
        .filter(|&i| lyap.g_unchecked(dist.x[i], dist.z_at(i)).sqrt() > s)
        .map(|i| dist.weights[i])
        .sum::<f64>()
        + 0.0
}

/// Effective sample size: `1 / sum w^2`, shrunk by the ratio of the naive to
/// the batch-means variance of the mean of `x^+` when that is recorded.
pub fn effective_size(dist: &EmpiricalDist) -> f64 {
    let naive = 1.0 / dist.weights.iter().map(|w| w * w).sum::<f64>();
    let se = dist.meta.se_x_plus;
    if !(se > 0.0) {
        return naive;
    }
    let plus: Vec<f64> = dist.x.iter().map(|x| x.max(0.0)).collect();
    let mean: f64 = plus.iter().zip(&dist.weights).map(|(v, w)| v * w).sum();
    let var: f64 = plus.iter().zip(&dist.weights).map(|(v, w)| w * (v - mean).powi(2)).sum();
    (var / (se * se)).clamp(1.0, naive)
}

/// Batch-means summary of a correlated series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatchMeans {
    pub mean: f64,
    pub se: f64,
    /// Lag-1 autocorrelation of the batch means.
    pub lag1: f64,
    pub batches: usize,
}

/// Splits `series` into `batches` equal consecutive batches; a trailing
/// remainder is dropped.
pub fn batch_means(series: &[f64], batches: usize) -> BatchMeans {
    assert!(batches >= 2, "need at least two batches");
    let size = series.len() / batches;
    assert!(size >= 1, "series shorter than the batch count");
    let means: Vec<f64> = (0..batches)
        .map(|b| series[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let mean = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
    let lag1 = if var > 0.0 {
        means.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / ((batches - 1) as f64 * var)
    } else {
        0.0
    };
    BatchMeans {
        mean,
        se: (var / batches as f64).sqrt(),
        lag1,
        batches,
    }
}

/// Standard error of a KS statistic between two independent samples with
/// effective sizes `n1` and `n2`, from the asymptotic Kolmogorov law
/// (mean of the limit is `sqrt(pi/2) ln 2`, standard deviation about 0.2603).
pub fn ks_standard_error(n1: f64, n2: f64) -> f64 {
    let scale = if n2.is_infinite() {
        1.0 / n1.sqrt()
    } else {
        (1.0 / n1 + 1.0 / n2).sqrt()
    };
    0.2603 * scale
}

/// One row of the interchange report.
#[derive(Debug, Clone, Serialize)]
pub struct InterchangeRow {
    pub n: usize,
    pub ks_x: f64,
    pub w1_x: f64,
    pub ks_g: f64,
    pub tails: Vec<f64>,
    /// Combined standard error used by the monotonicity check.
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InterchangeReport {
    pub s_grid: Vec<f64>,
    pub rows: Vec<InterchangeRow>,
    pub diffusion_tails: Vec<f64>,
    /// Distances non-increasing in `n` up to two combined standard errors.
    pub monotone: bool,
    /// Largest tail mass over the sweep at each `s`.
    pub max_tails: Vec<f64>,
}

impl InterchangeReport {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "n,ks_x,w1_x,ks_g")?;
        for s in &self.s_grid {
            write!(w, ",tail@{s}")?;
        }
        writeln!(w)?;
        for r in &self.rows {
            write!(w, "{},{},{},{}", r.n, r.ks_x, r.w1_x, r.ks_g)?;
            for t in &r.tails {
                write!(w, ",{t}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Distances from each `pi^n` estimate to the diffusion estimate, and tail
/// curves. `effective` gives the effective sample size of each estimate
/// (the diffusion's last) for the noise allowance.
pub fn interchange_report(
    dists: &[(usize, &EmpiricalDist)],
    diffusion: &EmpiricalDist,
    lyap: &LyapunovFn,
    s_grid: &[f64],
) -> Result<InterchangeReport, StatsError> {
    if dists.is_empty() {
        return Err(StatsError::Empty);
    }
    if dists.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(StatsError::Mismatch("n values must be strictly increasing".into()));
    }
    if dists.iter().any(|(_, d)| d.k != diffusion.k) {
        return Err(StatsError::Mismatch("phase counts differ".into()));
    }
    let dx = diffusion.x_marginal();
    let dg = diffusion.sqrt_g_marginal(lyap);
    let mut rows = Vec::new();
    for (n, d) in dists {
        rows.push(InterchangeRow {
            n: *n,
            ks_x: ks_1d(&d.x_marginal(), &dx)?,
            w1_x: wasserstein1_1d(&d.x_marginal(), &dx)?,
            ks_g: ks_1d(&d.sqrt_g_marginal(lyap), &dg)?,
            tails: s_grid.iter().map(|s| tail_mass(d, lyap, *s)).collect(),
            se: ks_standard_error(effective_size(d), effective_size(diffusion)),
        });
    }
    let monotone = rows.windows(2).all(|w| {
        let allowance = 2.0 * (w[0].se * w[0].se + w[1].se * w[1].se).sqrt();
        w[1].ks_x <= w[0].ks_x + allowance && w[1].ks_g <= w[0].ks_g + allowance
    });
    let max_tails = (0..s_grid.len())
        .map(|j| rows.iter().map(|r| r.tails[j]).fold(0.0, f64::max))
        .collect();
    Ok(InterchangeReport {
        s_grid: s_grid.to_vec(),
        diffusion_tails: s_grid.iter().map(|s| tail_mass(diffusion, lyap, *s)).collect(),
        rows,
        monotone,
        max_tails,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_basics() {
        let a = Weighted1d::unweighted(vec![0.0]);
        let b = Weighted1d::unweighted(vec![1.0]);
        assert_eq!(ks_1d(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_1d(&a, &b).unwrap(), 1.0);
        assert!(ks_1d(&a, &Weighted1d::unweighted(vec![])).is_err());
    }

    #[test]
    fn w1_translation() {
        let a = Weighted1d::unweighted(vec![0.0, 1.0, 5.0]);
        let b = Weighted1d::unweighted(vec![2.5, 3.5, 7.5]);
        assert_eq!(wasserstein1_1d(&a, &a).unwrap(), 0.0);
        assert!((wasserstein1_1d(&a, &b).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn table_cdf_of_uniform() {
        let t = DensityTable::new(vec![0.0, 1.0, 2.0], vec![3.0, 3.0, 3.0]);
        assert!((t.cdf(0.5) - 0.25).abs() < 1e-15);
        assert!((t.total_mass() - 1.0).abs() < 1e-15);
        assert!((t.mean() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn batch_means_of_constant_series() {
        let bm = batch_means(&[2.0; 100], 10);
        assert_eq!(bm.mean, 2.0);
        assert_eq!(bm.se, 0.0);
    }

    #[test]
    fn weights_are_normalized() {
        let d = EmpiricalDist::new(1, vec![1.0, 2.0], vec![0.0, 0.0], Some(vec![1.0, 3.0])).unwrap();
        assert_eq!(d.weights, vec![0.25, 0.75]);
        assert!(EmpiricalDist::new(1, vec![-1.0], vec![0.0], None).is_err());
    }
}
