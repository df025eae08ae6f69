#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use qedlab::phasetype::PhaseTypeParams;
use qedlab::psi::{Grid, InputPath};
use rand::Rng;

pub fn erlang2() -> PhaseTypeParams {
    PhaseTypeParams::erlang(2, 2.0).unwrap()
}

pub fn scalar_r(nu: f64) -> (DMatrix<f64>, DVector<f64>) {
    (DMatrix::from_element(1, 1, nu), DVector::from_element(1, 1.0))
}

/// A random vector with `e'v = 0`.
pub fn centered<R: Rng>(k: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(-scale..scale)).collect();
    let mean = w.iter().sum::<f64>() / k as f64;
    w.into_iter().map(|a| a - mean).collect()
}

/// Right-continuous step input with `pieces` levels whose jumps sit on the
/// coarse grid, so every refinement sees the same path.
pub fn piecewise_constant<R: Rng>(k: usize, t_end: f64, pieces: usize, rng: &mut R) -> Vec<(f64, f64, Vec<f64>)> {
    (0..pieces)
        .map(|i| {
            let start = t_end * i as f64 / pieces as f64;
            (start, rng.random_range(-2.0..2.0), centered(k, 2.0, rng))
        })
        .collect()
}

pub fn sample_steps(grid: &Grid, k: usize, levels: &[(f64, f64, Vec<f64>)]) -> InputPath {
    InputPath::from_fn(grid, k, |t| {
        let level = levels.iter().rev().find(|(s, _, _)| t >= *s - 1e-12).unwrap();
        (level.1, level.2.clone())
    })
}
