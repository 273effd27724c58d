//! SWAG posterior over the flattened cores: running mean and second moment
//! of the optimizer trajectory plus a ring buffer of the last `k` deviation
//! vectors, giving the low-rank + diagonal covariance
//! `Sigma = (1/2) (D D^T + diag(sigma^2))`.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{read_matrix, write_matrix, Matrix, SeededRng};
use crate::predictive::ThetaSampler;

/// Variance floor guarding against floating-point cancellation.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Accumulates trajectory snapshots after the burn-in phase.
#[derive(Debug, Clone)]
pub struct SwagCollector {
    dim: usize,
    k: usize,
    count: u64,
    mean: Vec<f64>,
    mean_sq: Vec<f64>,
    deviations: VecDeque<Vec<f64>>,
}

impl SwagCollector {
    pub fn new(dim: usize, k: usize) -> Self {
        Self {
            dim,
            k,
            count: 0,
            mean: vec![0.0; dim],
            mean_sq: vec![0.0; dim],
            deviations: VecDeque::with_capacity(k),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unclamped variance estimate `mean(theta^2) - mean(theta)^2`.
    pub fn raw_variance(&self) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.mean_sq)
            .map(|(m, m2)| m2 - m * m)
            .collect()
    }

    /// Deviation columns currently buffered, oldest first.
    pub fn deviations(&self) -> impl Iterator<Item = &[f64]> {
        self.deviations.iter().map(|d| d.as_slice())
    }

    /// Absorb one snapshot: update the running means first, then buffer the
    /// deviation against the just-updated mean.
    pub fn collect(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "swag_collect",
                expected: format!("{} entries", self.dim),
                got: format!("{}", theta.len()),
            });
        }
        self.count += 1;
        let inv_n = 1.0 / self.count as f64;
        for i in 0..self.dim {
            self.mean[i] += (theta[i] - self.mean[i]) * inv_n;
            self.mean_sq[i] += (theta[i] * theta[i] - self.mean_sq[i]) * inv_n;
        }
        if self.k > 0 {
            if self.deviations.len() == self.k {
                self.deviations.pop_front();
            }
            let dev: Vec<f64> = theta
                .iter()
                .zip(&self.mean)
                .map(|(t, m)| t - m)
                .collect();
            self.deviations.push_back(dev);
        }
        Ok(())
    }

    /// Freeze the collected statistics into a posterior.
    pub fn finalize(&self) -> Result<SwagPosterior> {
        if self.count < 2 {
            return Err(Error::invalid_arg(format!(
                "swag_finalize needs at least 2 snapshots, got {}",
                self.count
            )));
        }
        let sigma2: Vec<f64> = self
            .raw_variance()
            .into_iter()
            .map(|v| v.max(VARIANCE_FLOOR))
            .collect();
        let deviations = if self.deviations.is_empty() {
            None
        } else {
            let cols = self.deviations.len();
            let mut d = Matrix::zeros(self.dim, cols);
            for (j, col) in self.deviations.iter().enumerate() {
                for i in 0..self.dim {
                    d[(i, j)] = col[i];
                }
            }
            Some(d)
        };
        Ok(SwagPosterior {
            mean: self.mean.clone(),
            sigma2,
            deviations,
        })
    }
}

/// Gaussian posterior `N(mean, (1/2)(D D^T + diag(sigma2)))`.
#[derive(Debug, Clone)]
pub struct SwagPosterior {
    pub mean: Vec<f64>,
    /// Elementwise variances, clamped at [`VARIANCE_FLOOR`].
    pub sigma2: Vec<f64>,
    /// dim x K deviation matrix; `None` when no deviations were kept (k = 0).
    pub deviations: Option<Matrix>,
}

impl SwagPosterior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Number of stored deviation columns.
    pub fn k_stored(&self) -> usize {
        self.deviations.as_ref().map_or(0, Matrix::cols)
    }

    /// Dense `(1/2)(D D^T + diag(sigma2))`, for tests and diagnostics.
    pub fn implied_covariance(&self) -> Matrix {
        let dim = self.dim();
        let mut cov = match &self.deviations {
            Some(d) => d.matmul_nt(d),
            None => Matrix::zeros(dim, dim),
        };
        for i in 0..dim {
            cov[(i, i)] += self.sigma2[i];
        }
        cov.scaled(0.5)
    }

    pub fn save(&self, dir: impl AsRef<Path>, meta: &SwagMeta) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_matrix(dir.join("mu.sbmx"), &Matrix::column(&self.mean))?;
        write_matrix(dir.join("sigma2.sbmx"), &Matrix::column(&self.sigma2))?;
        if let Some(d) = &self.deviations {
            write_matrix(dir.join("D.sbmx"), d)?;
        }
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(meta)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(SwagPosterior, SwagMeta)> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            return Err(Error::MissingArtifact {
                phase: "swag load",
                path: meta_path,
                hint: "fit-swag",
            });
        }
        let meta: SwagMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
        let mean = read_matrix(dir.join("mu.sbmx"))?.into_vec();
        let sigma2 = read_matrix(dir.join("sigma2.sbmx"))?.into_vec();
        let d_path = dir.join("D.sbmx");
        let deviations = if d_path.exists() {
            Some(read_matrix(d_path)?)
        } else {
            None
        };
        if sigma2.len() != mean.len()
            || deviations.as_ref().is_some_and(|d| d.rows() != mean.len())
        {
            return Err(Error::Format {
                path: dir.join("mu.sbmx"),
                reason: "inconsistent posterior dimensions".into(),
            });
        }
        Ok((
            SwagPosterior {
                mean,
                sigma2,
                deviations,
            },
            meta,
        ))
    }
}

impl ThetaSampler for SwagPosterior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `theta = mu + 2^{-1/2} sqrt(sigma2) . z1 + 2^{-1/2} D z2`; the diagonal
    /// draws come first, then one draw per deviation column.
    fn sample(&self, rng: &mut SeededRng) -> Vec<f64> {
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        let mut theta: Vec<f64> = self
            .mean
            .iter()
            .zip(&self.sigma2)
            .map(|(m, s2)| m + inv_sqrt2 * s2.sqrt() * rng.next_normal())
            .collect();
        if let Some(d) = &self.deviations {
            let z: Vec<f64> = (0..d.cols()).map(|_| rng.next_normal()).collect();
            for i in 0..theta.len() {
                let mut acc = 0.0;
                for (j, zj) in z.iter().enumerate() {
                    acc += d[(i, j)] * zj;
                }
                theta[i] += inv_sqrt2 * acc;
            }
        }
        theta
    }
}

/// Provenance recorded next to the posterior files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwagMeta {
    pub k: usize,
    pub burn_in_epochs: usize,
    pub snapshots: u64,
}
