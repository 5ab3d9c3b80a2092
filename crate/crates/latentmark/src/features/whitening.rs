//! PCA whitening of raw extractor features.
//!
//! Fitting computes the sample mean and (population) covariance of the raw
//! features, eigendecomposes the covariance, and keeps the top `d`
//! eigenpairs: `W = Λ^{−1/2}·Uᵀ`, so the fitted population maps to zero
//! mean and identity covariance. Eigenvalues are floored at `eps` to keep
//! degenerate directions from blowing up the scale.

use nalgebra::{DMatrix, DVector};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorfile::{self, Tensor, VERSION_F64};

/// Affine map `x ↦ W·(x − μ)` from `R^{d_raw}` to `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    mean: Vec<f64>,
    /// `d × d_raw`, row-major.
    matrix: Vec<f64>,
    d: usize,
    d_raw: usize,
}

impl WhiteningTransform {
    /// The do-nothing transform on `R^d` (zero mean, identity matrix).
    pub fn identity(d: usize) -> Self {
        let mut matrix = vec![0.0; d * d];
        for i in 0..d {
            matrix[i * d + i] = 1.0;
        }
        WhiteningTransform {
            mean: vec![0.0; d],
            matrix,
            d,
            d_raw: d,
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn d_raw(&self) -> usize {
        self.d_raw
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// `W·(x − μ)`.
    pub fn apply(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.d_raw {
            return Err(Error::ShapeMismatch(format!(
                "raw feature dim {} vs whitening input dim {}",
                raw.len(),
                self.d_raw
            )));
        }
        let centered: Vec<f64> = raw.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok((0..self.d)
            .map(|r| {
                self.matrix[r * self.d_raw..(r + 1) * self.d_raw]
                    .iter()
                    .zip(&centered)
                    .map(|(w, x)| w * x)
                    .sum()
            })
            .collect())
    }

    /// Adjoint `Wᵀ·c`, used to chain gradients through the whitening.
    pub fn adjoint(&self, cotangent: &[f64]) -> Result<Vec<f64>> {
        if cotangent.len() != self.d {
            return Err(Error::ShapeMismatch(format!(
                "cotangent dim {} vs whitened dim {}",
                cotangent.len(),
                self.d
            )));
        }
        let mut out = vec![0.0; self.d_raw];
        for (r, &c) in cotangent.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (o, w) in out
                .iter_mut()
                .zip(&self.matrix[r * self.d_raw..(r + 1) * self.d_raw])
            {
                *o += w * c;
            }
        }
        Ok(out)
    }

    /// Write as a container file with tensors `mean` and `W` (f64 payload).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = vec![
            Tensor::new("mean", vec![self.d_raw as u64], self.mean.clone()),
            Tensor::new(
                "W",
                vec![self.d as u64, self.d_raw as u64],
                self.matrix.clone(),
            ),
        ];
        tensorfile::write_tensors(path, VERSION_F64, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = tensorfile::read_tensors(path)?;
        let mean = file.require("mean")?;
        let w = file.require("W")?;
        if w.dims.len() != 2 {
            return Err(Error::CorruptFile("W must be rank 2".into()));
        }
        let d = w.dims[0] as usize;
        let d_raw = w.dims[1] as usize;
        if mean.data.len() != d_raw {
            return Err(Error::CorruptFile(format!(
                "mean length {} vs W columns {}",
                mean.data.len(),
                d_raw
            )));
        }
        Ok(WhiteningTransform {
            mean: mean.data.clone(),
            matrix: w.data.clone(),
            d,
            d_raw,
        })
    }
}

/// Fit a whitening transform on raw feature samples.
///
/// Requires at least `d + 1` samples. With `eps = 0` a rank-deficient
/// covariance (a non-positive eigenvalue among the kept ones) is an error;
/// with `eps > 0` eigenvalues are floored instead.
pub fn fit_whitening(samples: &[Vec<f64>], d: usize, eps: f64) -> Result<WhiteningTransform> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::InsufficientSamples("no samples".into()));
    }
    let d_raw = samples[0].len();
    if d == 0 || d > d_raw {
        return Err(Error::InvalidConfig(format!(
            "whitened dim {d} must be in 1..={d_raw}"
        )));
    }
    if n < d + 1 {
        return Err(Error::InsufficientSamples(format!(
            "{n} samples for d = {d}; need at least {}",
            d + 1
        )));
    }
    if samples.iter().any(|s| s.len() != d_raw) {
        return Err(Error::ShapeMismatch("ragged sample list".into()));
    }

    let mut mean = vec![0.0; d_raw];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // population covariance of the centered samples
    let mut cov = DMatrix::<f64>::zeros(d_raw, d_raw);
    let mut centered = vec![0.0; d_raw];
    for s in samples {
        for (c, (x, m)) in centered.iter_mut().zip(s.iter().zip(&mean)) {
            *c = x - m;
        }
        for i in 0..d_raw {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d_raw {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..d_raw {
        for j in i..d_raw {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d_raw).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("eigenvalues are finite")
    });

    let mut matrix = vec![0.0; d * d_raw];
    for (row, &idx) in order.iter().take(d).enumerate() {
        let lambda = eig.eigenvalues[idx];
        let lambda = if eps == 0.0 {
            if lambda <= 0.0 {
                return Err(Error::Domain(format!(
                    "rank-deficient covariance (eigenvalue {lambda}) with eps = 0"
                )));
            }
            lambda
        } else {
            lambda.max(eps)
        };
        let scale = 1.0 / lambda.sqrt();
        let col: DVector<f64> = eig.eigenvectors.column(idx).into();
        for (j, v) in col.iter().enumerate() {
            matrix[row * d_raw + j] = v * scale;
        }
    }

    Ok(WhiteningTransform {
        mean,
        matrix,
        d,
        d_raw,
    })
}
