use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear projection onto the top principal directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `target_dim` columns of length `input_dim`, stored column after column.
    pub basis: Vec<f64>,
    /// Variance along each retained direction, descending.
    pub eigenvalues: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
}

const CHUNK: usize = 2048;

/// Fits PCA to `data` (row-major, `dim` columns) keeping `target_dim` directions.
pub fn fit_pca<T>(data: &[T], dim: usize, target_dim: usize) -> Result<PcaModel>
where
    T: Copy + Into<f64> + Sync,
{
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::dims(format!("multiple of {dim}"), data.len()));
    }
    let n = data.len() / dim;
    if target_dim == 0 || target_dim > dim {
        return Err(Error::InvalidArgument(format!(
            "target dimension {target_dim} not in 1..={dim}"
        )));
    }
    if n <= target_dim {
        return Err(Error::InsufficientSamples {
            needed: target_dim + 1,
            got: n,
        });
    }

    let mut mean = vec![0.0f64; dim];
    for row in data.chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.into();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    // Upper-triangle scatter, accumulated per fixed-size chunk and reduced in
    // chunk order so the result does not depend on thread scheduling.
    let partials: Vec<Vec<f64>> = data
        .par_chunks(CHUNK * dim)
        .map(|chunk| {
            let mut acc = vec![0.0f64; dim * dim];
            let mut centered = vec![0.0f64; dim];
            for row in chunk.chunks_exact(dim) {
                for (c, (&v, m)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
                    *c = v.into() - m;
                }
                for i in 0..dim {
                    let ci = centered[i];
                    if ci == 0.0 {
                        continue;
                    }
                    let rowacc = &mut acc[i * dim..(i + 1) * dim];
                    for j in i..dim {
                        rowacc[j] += ci * centered[j];
                    }
                }
            }
            acc
        })
        .collect();
    let mut scatter = vec![0.0f64; dim * dim];
    for p in &partials {
        for (s, v) in scatter.iter_mut().zip(p) {
            *s += v;
        }
    }
    let cov = DMatrix::from_fn(dim, dim, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        scatter[a * dim + b] / n as f64
    });
    let total_variance = cov.trace();

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut basis = Vec::with_capacity(dim * target_dim);
    let mut eigenvalues = Vec::with_capacity(target_dim);
    for &k in order.iter().take(target_dim) {
        let col = eig.eigenvectors.column(k);
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        basis.extend(col.iter().map(|v| v * sign));
        eigenvalues.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(PcaModel {
        mean,
        basis,
        eigenvalues,
        total_variance,
    })
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn component(&self, k: usize) -> &[f64] {
        let d = self.input_dim();
        &self.basis[k * d..(k + 1) * d]
    }

    pub fn project_into<T: Copy + Into<f64>>(&self, x: &[T], out: &mut [f64]) {
        let d = self.input_dim();
        debug_assert_eq!(x.len(), d);
        for (k, o) in out.iter_mut().enumerate().take(self.output_dim()) {
            let col = &self.basis[k * d..(k + 1) * d];
            *o = x
                .iter()
                .zip(&self.mean)
                .zip(col)
                .map(|((&v, m), b)| (v.into() - m) * b)
                .sum();
        }
    }

    pub fn project<T: Copy + Into<f64>>(&self, x: &[T]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.project_into(x, &mut out);
        out
    }

    pub fn reconstruct(&self, y: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (k, &c) in y.iter().enumerate() {
            for (o, b) in out.iter_mut().zip(self.component(k)) {
                *o += c * b;
            }
        }
        out
    }

    pub fn explained_variance_fraction(&self) -> f64 {
        if self.total_variance <= 0.0 {
            return 1.0;
        }
        self.eigenvalues.iter().sum::<f64>() / self.total_variance
    }
}
