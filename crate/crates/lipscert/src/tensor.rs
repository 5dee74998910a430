//! Dense row-major `f64` tensors and the matrix-norm primitives the rest of
//! the crate builds on.
//!
//! Reductions use a fixed row-major accumulation order so that repeated runs
//! produce bit-identical results; nothing here reassociates sums behind the
//! caller's back.

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Internal seed for the power-iteration start vector, so `spectral_norm` is
/// a pure function of its input matrix.
const SPECTRAL_NORM_SEED: u64 = 0x5ca1_ab1e_0000_0001;

/// Dense tensor: contiguous `f64` storage plus a shape, row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build from shape and data; the element count must match the shape.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                expected: format!("{n} elements for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    /// Identity matrix.
    pub fn eye(d: usize) -> Self {
        Self::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 })
    }

    /// 2-D tensor from nested rows (test-friendly constructor).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    pub fn vector(data: &[f64]) -> Self {
        Self {
            shape: vec![data.len()],
            data: data.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret the same storage under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() needs a 2-D tensor");
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a 2-D tensor");
        self.shape[1]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.shape[1] + j] = v;
    }

    /// Row `i` of a 2-D tensor as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combine; shapes must match exactly.
    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                expected: format!("{:?}", self.shape),
                got: format!("{:?}", other.shape),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    /// `self += c * other`, in place.
    pub fn add_scaled(&mut self, other: &Self, c: f64) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    /// Matrix product with deterministic row-major accumulation.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: "two 2-D tensors".into(),
                got: format!("{:?} x {:?}", self.shape, other.shape),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: format!("inner dim {k}"),
                got: format!("inner dim {k2}"),
            });
        }
        let mut out = Self::zeros(&[m, n]);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `Wᵀ x` for a 2-D weight and a vector, the affine application used
    /// throughout the model code.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        let (m, n) = (self.rows(), self.cols());
        assert_eq!(x.len(), m, "matvec_t input length");
        let mut out = vec![0.0; n];
        for i in 0..m {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            let row = &self.data[i * n..(i + 1) * n];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * xi;
            }
        }
        out
    }

    /// `W x` for a 2-D weight and a vector.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let (m, n) = (self.rows(), self.cols());
        assert_eq!(x.len(), n, "matvec input length");
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for (w, xv) in row.iter().zip(x) {
                acc += w * xv;
            }
            out[i] = acc;
        }
        out
    }

    /// Maximum absolute row sum, `max_i Σ_j |A_ij|`.
    pub fn inf_norm(&self) -> f64 {
        assert_eq!(self.shape.len(), 2, "inf_norm needs a 2-D tensor");
        let (m, n) = (self.rows(), self.cols());
        let mut best = 0.0f64;
        for i in 0..m {
            let s: f64 = self.data[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum();
            best = best.max(s);
        }
        best
    }

    /// Square root of the sum of squared entries.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest singular value via power iteration on `WᵀW`.
    ///
    /// Converged when successive estimates differ by at most `tol`;
    /// otherwise the final estimate is returned flagged unconverged. An
    /// all-zero matrix returns 0 exactly. The start vector comes from the
    /// operation's own seeded stream, so the result is a deterministic
    /// function of the matrix alone.
    pub fn spectral_norm(&self, iters: usize, tol: f64) -> SpectralNorm {
        assert!(iters >= 1, "spectral_norm: iters >= 1");
        assert!(tol > 0.0, "spectral_norm: tol > 0");
        assert_eq!(self.shape.len(), 2, "spectral_norm needs a 2-D tensor");
        let (m, n) = (self.rows(), self.cols());
        if self.data.iter().all(|&v| v == 0.0) {
            return SpectralNorm {
                value: 0.0,
                converged: true,
                iterations: 0,
            };
        }

        let stream = ((m as u64) << 32) ^ (n as u64);
        let mut rng = RngStream::new(SPECTRAL_NORM_SEED, stream);
        let mut v = vec![0.0; n];
        rng.fill_normal(&mut v);
        normalize_l2(&mut v);

        let mut sigma_prev = 0.0;
        let mut sigma = 0.0;
        let mut used = 0;
        for it in 0..iters {
            used = it + 1;
            let u = self.matvec(&v); // W v
            sigma = l2(&u);
            if sigma == 0.0 {
                // v landed in the null space; redraw.
                rng.fill_normal(&mut v);
                normalize_l2(&mut v);
                continue;
            }
            let mut w = self.matvec_t(&u); // Wᵀ (W v)
            normalize_l2(&mut w);
            v = w;
            if (sigma - sigma_prev).abs() <= tol {
                return SpectralNorm {
                    value: sigma,
                    converged: true,
                    iterations: used,
                };
            }
            sigma_prev = sigma;
        }
        SpectralNorm {
            value: sigma,
            converged: false,
            iterations: used,
        }
    }

    /// `spectral_norm` with the crate defaults (200 iterations, tol 1e-10).
    pub fn spectral_norm_default(&self) -> SpectralNorm {
        self.spectral_norm(200, 1e-10)
    }
}

/// Result of a power-iteration spectral norm estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralNorm {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

pub fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize_l2(x: &mut [f64]) {
    let n = l2(x);
    if n > 0.0 {
        for v in x.iter_mut() {
            *v /= n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::eye(2);
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(i2.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_annihilator() {
        let a = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let b = Tensor::from_rows(&[&[0.0], &[5.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = RngStream::new(42, 0);
        let a = rng.normal_tensor(&[3, 4]);
        let b = rng.normal_tensor(&[4, 2]);
        let c = a.matmul(&b).unwrap();
        // Naive sum-of-products oracle, entry by entry.
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert_close(c.get(i, j), s, 1e-15);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn spectral_norm_diagonal() {
        let w = Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 4.0]]);
        assert_close(w.spectral_norm_default().value, 4.0, 1e-10);
    }

    #[test]
    fn spectral_norm_nilpotent() {
        let w = Tensor::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        assert_close(w.spectral_norm_default().value, 1.0, 1e-10);
    }

    #[test]
    fn spectral_norm_zero_matrix() {
        let w = Tensor::zeros(&[3, 5]);
        let s = w.spectral_norm_default();
        assert_eq!(s.value, 0.0);
        assert!(s.converged);
    }

    #[test]
    fn spectral_norm_matches_jacobi_svd_oracle() {
        let mut rng = RngStream::new(7, 1);
        let w = rng.normal_tensor(&[8, 8]);
        let expect = jacobi_svd_max(&w);
        let got = w.spectral_norm(5000, 1e-13).value;
        assert_close(got, expect, 1e-8);
    }

    #[test]
    fn spectral_norm_rectangular_matches_oracle() {
        let mut rng = RngStream::new(9, 2);
        let w = rng.normal_tensor(&[5, 9]);
        assert_close(w.spectral_norm(5000, 1e-13).value, jacobi_svd_max(&w), 1e-8);
    }

    #[test]
    fn inf_norm_cases() {
        let w = Tensor::from_rows(&[&[1.0, -2.0], &[3.0, 0.0]]);
        assert_eq!(w.inf_norm(), 3.0);
        assert_eq!(Tensor::zeros(&[4, 4]).inf_norm(), 0.0);
        assert_eq!(Tensor::eye(6).inf_norm(), 1.0);
    }

    #[test]
    fn frobenius_cases() {
        let w = Tensor::from_rows(&[&[3.0, 4.0]]);
        assert_close(w.frobenius_norm(), 5.0, 1e-15);
        assert_close(Tensor::eye(4).frobenius_norm(), 2.0, 1e-15);
        let mut rng = RngStream::new(3, 3);
        let r = rng.normal_tensor(&[5, 5]);
        assert!(r.frobenius_norm() >= r.spectral_norm_default().value - 1e-9);
    }

    #[test]
    fn spectral_leq_frobenius_many() {
        let mut rng = RngStream::new(100, 0);
        for trial in 0..100 {
            let m = 1 + (trial % 7);
            let n = 1 + (trial % 5);
            let w = rng.normal_tensor(&[m, n]);
            let s = w.spectral_norm_default().value;
            assert!(
                s <= w.frobenius_norm() + 1e-9,
                "trial {trial}: spectral {s} > frobenius {}",
                w.frobenius_norm()
            );
        }
    }

    #[test]
    fn spectral_norm_scales_linearly() {
        let mut rng = RngStream::new(5, 5);
        let w = rng.normal_tensor(&[6, 4]);
        let base = w.spectral_norm(2000, 1e-13).value;
        for &c in &[2.0, -3.5, 0.25] {
            let s = w.scale(c).spectral_norm(2000, 1e-13).value;
            assert!((s - c.abs() * base).abs() <= 1e-10 * s.max(1.0));
        }
    }

    #[test]
    fn reshape_checks_count() {
        let t = Tensor::zeros(&[2, 3]);
        assert!(t.reshape(&[3, 2]).is_ok());
        assert!(t.reshape(&[4, 2]).is_err());
    }

    /// One-sided Jacobi SVD: orthogonalize column pairs until the Gram
    /// matrix is diagonal; singular values are the column norms. Independent
    /// of the power-iteration path.
    fn jacobi_svd_max(w: &Tensor) -> f64 {
        let (m, n) = (w.rows(), w.cols());
        // Work on the transpose when rows < cols so columns are long.
        let a = if m < n { w.transpose() } else { w.clone() };
        let (m, n) = (a.rows(), a.cols());
        let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
        for _sweep in 0..60 {
            let mut off = 0.0f64;
            for p in 0..n {
                for q in (p + 1)..n {
                    let app = dot(&cols[p], &cols[p]);
                    let aqq = dot(&cols[q], &cols[q]);
                    let apq = dot(&cols[p], &cols[q]);
                    if apq.abs() <= 1e-15 * (app * aqq).sqrt().max(1e-300) {
                        continue;
                    }
                    off = off.max(apq.abs());
                    let theta = 0.5 * (2.0 * apq).atan2(app - aqq);
                    let (c, s) = (theta.cos(), theta.sin());
                    for i in 0..m {
                        let vp = cols[p][i];
                        let vq = cols[q][i];
                        cols[p][i] = c * vp + s * vq;
                        cols[q][i] = -s * vp + c * vq;
                    }
                }
            }
            if off == 0.0 {
                break;
            }
        }
        cols.iter().map(|c| l2(c)).fold(0.0, f64::max)
    }
}
