use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-8;

/// Mean and covariance (n - 1 normalization) of a feature sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
    pub samples: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::Dimension {
                expected: format!("{d}x{d} covariance"),
                got: format!("{} values", cov.len()),
            });
        }
        Ok(GaussianStats { mean, cov, samples: 0 })
    }

    pub fn from_samples(x: &[Vec<f64>]) -> Result<Self> {
        let d = x.first().map_or(0, Vec::len);
        if x.len() < d + 1 || x.len() < 2 {
            return Err(Error::BatchTooSmall {
                need: (d + 1).max(2),
                got: x.len(),
            });
        }
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            if row.len() != d {
                return Err(Error::Dimension {
                    expected: format!("{d} features"),
                    got: row.len().to_string(),
                });
            }
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; d * d];
        for row in x {
            for i in 0..d {
                let di = row[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (row[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1.0);
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(GaussianStats {
            mean,
            cov,
            samples: x.len(),
        })
    }

    fn matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let m = DMatrix::from_row_slice(d, d, &self.cov);
        let asym = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| (m[(i, j)] - m[(j, i)]).abs())
            .fold(0.0, f64::max);
        if asym > SYMMETRY_TOL {
            return Err(Error::Asymmetric(asym));
        }
        Ok((&m + m.transpose()) * 0.5)
    }
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`, clipped at zero.
///
/// The trace of `(S1 S2)^(1/2)` is taken from the symmetric
/// `S1^(1/2) S2 S1^(1/2)`, which has the same eigenvalues.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            expected: format!("{} features", a.dim()),
            got: b.dim().to_string(),
        });
    }
    let s1 = a.matrix()?;
    let s2 = b.matrix()?;
    let diff = DVector::from_column_slice(&a.mean) - DVector::from_column_slice(&b.mean);
    let r1 = psd_sqrt(s1.clone());
    let inner = &r1 * &s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = diff.norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(Error::non_finite("Frechet distance"));
    }
    Ok(d.max(0.0))
}
