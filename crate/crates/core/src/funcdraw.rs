//! Random functions on the ordinal-covariate grid, drawn from a Gaussian
//! process with linear mean `gamma' x` and squared-exponential covariance
//! `eta * exp(-rho * |x_i - x_j|^2)`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest jitter, relative to `eta`.
const JITTER_START: f64 = 1e-10;
/// Largest jitter tried before giving up.
const JITTER_MAX: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("covariance factorization failed with jitter up to {jitter:e} * eta")]
    Factorization { jitter: f64 },
    #[error("invalid kernel parameters eta={eta}, rho={rho}")]
    InvalidKernel { eta: f64, rho: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpSpec {
    pub eta: f64,
    pub rho: f64,
    pub mean_coefficients: Vec<f64>,
}

/// Function values at every grid point, in grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub values: Vec<f64>,
}

impl GridFunction {
    #[inline]
    pub fn at(&self, num_index: usize) -> f64 {
        self.values[num_index]
    }
}

pub fn gp_covariance(grid: &[Vec<f64>], eta: f64, rho: f64) -> DMatrix<f64> {
    let n = grid.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = eta;
        for j in 0..i {
            let d2: f64 = grid[i].iter().zip(&grid[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = eta * (-rho * d2).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky factor of the jittered kernel on a fixed grid, reusable across
/// many draws with the same `(eta, rho)`.
#[derive(Debug, Clone)]
pub struct GpFactor {
    grid: Vec<Vec<f64>>,
    lower: DMatrix<f64>,
    jitter: f64,
    eta: f64,
    rho: f64,
}

impl GpFactor {
    pub fn new(grid: &[Vec<f64>], eta: f64, rho: f64) -> Result<Self, GpError> {
        if !(eta > 0.0 && rho > 0.0 && eta.is_finite() && rho.is_finite()) {
            return Err(GpError::InvalidKernel { eta, rho });
        }
        let base = gp_covariance(grid, eta, rho);
        let mut rel = JITTER_START;
        loop {
            let mut k = base.clone();
            for i in 0..k.nrows() {
                k[(i, i)] += rel * eta;
            }
            if let Some(chol) = Cholesky::new(k) {
                return Ok(GpFactor { grid: grid.to_vec(), lower: chol.unpack(), jitter: rel * eta, eta, rho });
            }
            if rel >= JITTER_MAX {
                return Err(GpError::Factorization { jitter: rel });
            }
            rel *= 10.0;
        }
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// `gamma' x + L z` with `z` standard normal.
    pub fn draw_with_mean<R: Rng + ?Sized>(&self, gamma: &[f64], rng: &mut R) -> GridFunction {
        let n = self.grid.len();
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let noise = &self.lower * z;
        let values = self
            .grid
            .iter()
            .zip(noise.iter())
            .map(|(x, e)| x.iter().zip(gamma).map(|(a, g)| a * g).sum::<f64>() + e)
            .collect();
        GridFunction { values }
    }

    /// Draws fresh standard-normal mean coefficients, then the function.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> GridFunction {
        let h = self.grid.first().map_or(0, Vec::len);
        let gamma: Vec<f64> = (0..h).map(|_| rng.sample(StandardNormal)).collect();
        self.draw_with_mean(&gamma, rng)
    }
}

pub fn sample_gp_function<R: Rng + ?Sized>(
    spec: &GpSpec,
    grid: &[Vec<f64>],
    rng: &mut R,
) -> Result<GridFunction, GpError> {
    let factor = GpFactor::new(grid, spec.eta, spec.rho)?;
    Ok(factor.draw_with_mean(&spec.mean_coefficients, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line_grid(c: usize) -> Vec<Vec<f64>> {
        (0..c).map(|i| vec![i as f64 / (c - 1) as f64]).collect()
    }

    #[test]
    fn kernel_entries() {
        let k = gp_covariance(&[vec![0.0], vec![0.5]], 2.0, 1.0);
        assert_eq!(k[(0, 0)], 2.0);
        assert_eq!(k[(1, 1)], 2.0);
        assert!((k[(0, 1)] - 2.0 * (-0.25f64).exp()).abs() < 1e-15);
        assert!((k[(0, 1)] - 1.5576).abs() < 1e-4);
        let far = gp_covariance(&line_grid(5), 1.0, 1e6);
        assert!(far[(0, 1)] < 1e-100);
    }

    #[test]
    fn kernel_is_symmetric_psd() {
        let grid = line_grid(100);
        let k = gp_covariance(&grid, 3.0, 0.5);
        assert_eq!(k.clone() - k.transpose(), DMatrix::zeros(100, 100));
        let min_eig = k.symmetric_eigenvalues().min();
        assert!(min_eig >= -1e-8, "min eigenvalue {min_eig}");
    }

    #[test]
    fn fine_grid_needs_and_gets_jitter() {
        for &(eta, rho) in &[(0.1, 0.1), (10.0, 0.1), (10.0, 10.0), (0.1, 10.0)] {
            let f = GpFactor::new(&line_grid(100), eta, rho).unwrap();
            assert!(f.jitter() <= 1e-4 * eta);
        }
    }

    #[test]
    fn zero_variance_limit_is_linear_mean() {
        let grid = line_grid(20);
        let spec = GpSpec { eta: 1e-12, rho: 1.0, mean_coefficients: vec![1.7] };
        let f = sample_gp_function(&spec, &grid, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (x, v) in grid.iter().zip(&f.values) {
            assert!((v - 1.7 * x[0]).abs() < 1e-5);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let grid = line_grid(30);
        let spec = GpSpec { eta: 2.0, rho: 3.0, mean_coefficients: vec![0.3] };
        let a = sample_gp_function(&spec, &grid, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_gp_function(&spec, &grid, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn demeaned_draws_center_on_zero() {
        let grid = line_grid(10);
        let factor = GpFactor::new(&grid, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = 4000;
        let mut sum = vec![0.0; 10];
        for _ in 0..m {
            let f = factor.draw_with_mean(&[0.0], &mut rng);
            for (s, v) in sum.iter_mut().zip(&f.values) {
                *s += v;
            }
        }
        for s in sum {
            // marginal sd is sqrt(eta) = 1
            assert!((s / m as f64).abs() <= 4.0 / (m as f64).sqrt());
        }
    }
}
