//! Principal axes of encoder embeddings and decoding along them.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample PCA. `axes` is the `dim x dim` matrix whose column `k` is the
/// `k`-th principal axis, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub axes: Vec<f64>,
}

/// Fit on `N >= 2` embeddings of equal length, with the `N - 1` covariance.
/// Each axis is signed so its largest-magnitude component is positive.
pub fn pca_fit(embeddings: &[Vec<f32>]) -> Result<Pca> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::Empty("PCA needs at least two embeddings"));
    }
    let dim = embeddings[0].len();
    if dim == 0 {
        return Err(Error::Empty("embedding dimension"));
    }
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != dim {
            return Err(Error::shape("pca_fit", format!("embedding {i} has length {}, expected {dim}", e.len())));
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding {i}")));
        }
    }
    let mut mean = vec![0.0f64; dim];
    for e in embeddings {
        for (m, &v) in mean.iter_mut().zip(e) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |i, j| embeddings[i][j] as f64 - mean[j]);
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut axes = vec![0.0f64; dim * dim];
    for (k, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let lead = (0..dim).fold(0, |best, i| if col[i].abs() > col[best].abs() { i } else { best });
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..dim {
            axes[i * dim + k] = sign * col[i];
        }
    }
    Ok(Pca {
        dim,
        mean,
        eigenvalues,
        axes,
    })
}

impl Pca {
    pub fn axis(&self, k: usize) -> Result<Vec<f64>> {
        if k >= self.dim {
            return Err(Error::IndexOutOfRange { index: k, len: self.dim });
        }
        Ok((0..self.dim).map(|i| self.axes[i * self.dim + k]).collect())
    }

    /// Coordinates of `x` along every axis, relative to the mean.
    pub fn project(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.check_len(x.len())?;
        let d = self.dim;
        Ok((0..d)
            .map(|k| (0..d).map(|i| (x[i] as f64 - self.mean[i]) * self.axes[i * d + k]).sum())
            .collect())
    }

    /// Inverse of [`Pca::project`].
    pub fn reconstruct(&self, coords: &[f64]) -> Result<Vec<f32>> {
        self.check_len(coords.len())?;
        let d = self.dim;
        Ok((0..d)
            .map(|i| (self.mean[i] + (0..d).map(|k| self.axes[i * d + k] * coords[k]).sum::<f64>()) as f32)
            .collect())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::shape("pca", format!("vector of length {len}, expected {}", self.dim)));
        }
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let pca: Pca = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        if pca.mean.len() != pca.dim || pca.eigenvalues.len() != pca.dim || pca.axes.len() != pca.dim * pca.dim {
            return Err(Error::shape("pca", format!("{} holds inconsistent dimensions", path.display())));
        }
        Ok(pca)
    }
}

/// `mu + amount * axis_k`.
pub fn perturb_axis(mu: &[f32], pca: &Pca, k: usize, amount: f64) -> Result<Vec<f32>> {
    pca.check_len(mu.len())?;
    let axis = pca.axis(k)?;
    Ok(mu.iter().zip(&axis).map(|(&m, &a)| (m as f64 + amount * a) as f32).collect())
}
