//! PCA codec turning 2-d instance masks into short 1-d codes.
//!
//! Fitting goes through the Gram matrix (`n x n` for `n` masks) so the
//! eigenproblem stays small; components with numerically zero variance are
//! replaced by a deterministic orthonormal completion so the row basis is
//! always well-formed.

use crate::tape::TensorError;
use nalgebra::{DMatrix, SymmetricEigen};

#[derive(Debug, Clone)]
pub struct MaskCodec {
    /// Mask side length (masks are `side x side`).
    pub side: usize,
    /// Number of retained components.
    pub dim: usize,
    pub mean: Vec<f64>,
    /// `dim x side^2`, orthonormal rows, descending explained variance.
    pub components: Vec<f64>,
    pub explained_variance: Vec<f64>,
}

impl MaskCodec {
    /// Fit on binary masks by descending explained variance. Requires at
    /// least `dim` masks.
    pub fn fit(masks: &[Vec<f64>], dim: usize, side: usize) -> Result<MaskCodec, TensorError> {
        let d = side * side;
        let n = masks.len();
        if n < dim {
            return Err(TensorError::invalid(format!(
                "pca: {n} masks but {dim} components requested"
            )));
        }
        if dim > d {
            return Err(TensorError::invalid(format!("pca: {dim} components > {d} pixels")));
        }
        if let Some(bad) = masks.iter().find(|m| m.len() != d) {
            return Err(TensorError::dim(format!(
                "pca: mask of length {} expected {d}",
                bad.len()
            )));
        }
        let mut mean = vec![0.0; d];
        for m in masks {
            for (s, &v) in mean.iter_mut().zip(m) {
                *s += v;
            }
        }
        for s in &mut mean {
            *s /= n as f64;
        }
        // centered data, row per mask
        let mut centered = vec![0.0; n * d];
        for (i, m) in masks.iter().enumerate() {
            for j in 0..d {
                centered[i * d + j] = m[j] - mean[j];
            }
        }
        // Gram matrix G = Xc Xc^T
        let mut gram = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for k in 0..d {
                    s += centered[i * d + k] * centered[j * d + k];
                }
                gram[(i, j)] = s;
                gram[(j, i)] = s;
            }
        }
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });

        let max_ev = eig.eigenvalues.iter().cloned().fold(0.0, f64::max).max(1.0);
        let tol = 1e-10 * max_ev;
        let mut components = Vec::with_capacity(dim * d);
        let mut variances = Vec::with_capacity(dim);
        for &oi in order.iter() {
            if components.len() / d >= dim {
                break;
            }
            let ev = eig.eigenvalues[oi];
            if ev <= tol {
                continue;
            }
            let inv = 1.0 / ev.sqrt();
            let mut row = vec![0.0; d];
            for i in 0..n {
                let u = eig.eigenvectors[(i, oi)] * inv;
                if u != 0.0 {
                    for k in 0..d {
                        row[k] += u * centered[i * d + k];
                    }
                }
            }
            fix_sign(&mut row);
            components.extend_from_slice(&row);
            variances.push(ev / n as f64);
        }
        // deterministic orthonormal completion for rank-deficient data
        let mut basis_idx = 0usize;
        while components.len() / d < dim && basis_idx < d {
            let mut row = vec![0.0; d];
            row[basis_idx] = 1.0;
            basis_idx += 1;
            for r in 0..components.len() / d {
                let existing = &components[r * d..(r + 1) * d];
                let dot: f64 = existing.iter().zip(&row).map(|(a, b)| a * b).sum();
                for k in 0..d {
                    row[k] -= dot * existing[k];
                }
            }
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.5 {
                for v in &mut row {
                    *v /= norm;
                }
                fix_sign(&mut row);
                components.extend_from_slice(&row);
                variances.push(0.0);
            }
        }
        let got = components.len() / d;
        if got < dim {
            return Err(TensorError::invalid(format!(
                "pca: could only build {got} of {dim} components"
            )));
        }
        Ok(MaskCodec { side, dim, mean, components, explained_variance: variances })
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    /// Project a mask onto the components: `code = C (mask - mean)`.
    pub fn encode(&self, mask: &[f64]) -> Vec<f64> {
        assert_eq!(mask.len(), self.pixels());
        let d = self.pixels();
        let mut code = vec![0.0; self.dim];
        for (r, c) in code.iter_mut().enumerate() {
            let row = &self.components[r * d..(r + 1) * d];
            let mut s = 0.0;
            for k in 0..d {
                s += row[k] * (mask[k] - self.mean[k]);
            }
            *c = s;
        }
        code
    }

    /// Reconstruct a mask: `mean + C^T code` (unclamped; training loss uses
    /// these raw values).
    pub fn decode(&self, code: &[f64]) -> Vec<f64> {
        assert_eq!(code.len(), self.dim);
        let d = self.pixels();
        let mut out = self.mean.clone();
        for (r, &cv) in code.iter().enumerate() {
            if cv != 0.0 {
                let row = &self.components[r * d..(r + 1) * d];
                for k in 0..d {
                    out[k] += cv * row[k];
                }
            }
        }
        out
    }

    /// Reconstruction clamped to [0, 1] for evaluation.
    pub fn decode_clamped(&self, code: &[f64]) -> Vec<f64> {
        let mut out = self.decode(code);
        for v in &mut out {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }

    pub fn max_row_orthonormality_error(&self) -> f64 {
        let d = self.pixels();
        let mut worst = 0.0f64;
        for i in 0..self.dim {
            for j in i..self.dim {
                let a = &self.components[i * d..(i + 1) * d];
                let b = &self.components[j * d..(j + 1) * d];
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }
}

/// Deterministic sign convention: the largest-magnitude entry is positive
/// (first such entry on ties).
fn fix_sign(row: &mut [f64]) {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate() {
        if v.abs() > row[best].abs() {
            best = i;
        }
    }
    if row[best] < 0.0 {
        for v in row.iter_mut() {
            *v = -*v;
        }
    }
}
