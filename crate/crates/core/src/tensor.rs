//! Dense row-major matrices and channel permutations.
//!
//! Everything here computes in `f64`. Activations are stored as
//! `tokens x channels`, weights as `in_channels x out_channels`, so a linear
//! layer is `y = x.matmul(&w)`.

use crate::error::{Result, TrdqError};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Axis selector for [`Tensor2D::apply_permutation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Reduction scope for [`Tensor2D::max_abs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Global,
    PerRow,
    PerCol,
}

impl Tensor2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TrdqError::shape(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TrdqError::shape("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(TrdqError::domain(format!("{what} contains NaN or Inf")))
        }
    }

    pub fn matmul(&self, rhs: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != rhs.rows {
            return Err(TrdqError::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (n, m) = (self.rows, rhs.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let acc = &mut out[i * m..(i + 1) * m];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in acc.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor2D {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn transpose(&self) -> Tensor2D {
        Tensor2D::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Gathers columns (or rows) by `p`: output column `j` is input column
    /// `p[j]`. On columns this equals `self * p.to_matrix()`, on rows it
    /// equals `p.to_matrix()^T * self`.
    pub fn apply_permutation(&self, p: &PermutationVector, axis: Axis) -> Result<Tensor2D> {
        let want = match axis {
            Axis::Rows => self.rows,
            Axis::Cols => self.cols,
        };
        if p.len() != want {
            return Err(TrdqError::shape(format!(
                "permutation of length {} applied to axis of length {want}",
                p.len()
            )));
        }
        Ok(match axis {
            Axis::Cols => Tensor2D::from_fn(self.rows, self.cols, |i, j| self.get(i, p.entries[j])),
            Axis::Rows => {
                let mut data = Vec::with_capacity(self.data.len());
                for &src in &p.entries {
                    data.extend_from_slice(self.row(src));
                }
                Tensor2D {
                    rows: self.rows,
                    cols: self.cols,
                    data,
                }
            }
        })
    }

    pub fn max_abs(&self, scope: Scope) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(TrdqError::domain("max_abs of an empty tensor"));
        }
        Ok(match scope {
            Scope::Global => vec![self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))],
            Scope::PerRow => (0..self.rows)
                .map(|i| self.row(i).iter().fold(0.0_f64, |m, v| m.max(v.abs())))
                .collect(),
            Scope::PerCol => {
                let mut out = vec![0.0_f64; self.cols];
                for i in 0..self.rows {
                    for (o, v) in out.iter_mut().zip(self.row(i)) {
                        *o = o.max(v.abs());
                    }
                }
                out
            }
        })
    }

    /// Global maximum magnitude; 0 for an empty tensor.
    pub fn abs_max(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn add(&self, rhs: &Tensor2D) -> Result<Tensor2D> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor2D) -> Result<Tensor2D> {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Tensor2D {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2D {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, rhs: &Tensor2D, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2D> {
        if self.shape() != rhs.shape() {
            return Err(TrdqError::shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&self, bias: &[f64]) -> Result<Tensor2D> {
        if bias.len() != self.cols {
            return Err(TrdqError::shape("row-vector length mismatch"));
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            for (v, b) in out.row_mut(i).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Column slice `[start, start + width)`.
    pub fn col_block(&self, start: usize, width: usize) -> Tensor2D {
        Tensor2D::from_fn(self.rows, width, |i, j| self.get(i, start + j))
    }

    /// Row slice `[start, start + height)`.
    pub fn row_block(&self, start: usize, height: usize) -> Tensor2D {
        Tensor2D {
            rows: height,
            cols: self.cols,
            data: self.data[start * self.cols..(start + height) * self.cols].to_vec(),
        }
    }

    /// Stacks tensors with equal column counts on top of each other.
    pub fn vstack(parts: &[&Tensor2D]) -> Result<Tensor2D> {
        let cols = parts.first().map_or(0, |t| t.cols);
        if parts.iter().any(|t| t.cols != cols) {
            return Err(TrdqError::shape("vstack of tensors with different widths"));
        }
        let data: Vec<f64> = parts.iter().flat_map(|t| t.data.iter().copied()).collect();
        Ok(Tensor2D {
            rows: data.len() / cols.max(1),
            cols,
            data,
        })
    }
}

/// A permutation of `0..len`, stored as the gather index list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationVector {
    entries: Vec<usize>,
}

impl PermutationVector {
    pub fn new(entries: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; entries.len()];
        for &e in &entries {
            if e >= entries.len() || seen[e] {
                return Err(TrdqError::domain(format!(
                    "{entries:?} is not a permutation of 0..{}",
                    entries.len()
                )));
            }
            seen[e] = true;
        }
        Ok(Self { entries })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            entries: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[usize] {
        &self.entries
    }

    pub fn is_identity(&self) -> bool {
        self.entries.iter().enumerate().all(|(i, &e)| i == e)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.entries.len()];
        for (j, &e) in self.entries.iter().enumerate() {
            inv[e] = j;
        }
        Self { entries: inv }
    }

    /// Dense matrix `M` with `M[p[j], j] = 1`.
    pub fn to_matrix(&self) -> Tensor2D {
        let n = self.entries.len();
        let mut m = Tensor2D::zeros(n, n);
        for (j, &e) in self.entries.iter().enumerate() {
            m.set(e, j, 1.0);
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn naive_matmul(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
        Tensor2D::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    #[test]
    fn identity_matmul() {
        let m = Tensor2D::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0]]).unwrap();
        assert_eq!(Tensor2D::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn permutation_matmul_swaps_columns() {
        let a = Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let p = Tensor2D::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let want = Tensor2D::from_rows(&[vec![2.0, 1.0], vec![4.0, 3.0]]).unwrap();
        assert_eq!(a.matmul(&p).unwrap(), want);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = seeded(7);
        let a = Tensor2D::randn(8, 8, 1.0, &mut rng);
        let b = Tensor2D::randn(8, 8, 1.0, &mut rng);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor2D::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(TrdqError::Shape(_))));
    }

    #[test]
    fn transpose_cases() {
        let mut rng = seeded(1);
        let a = Tensor2D::randn(5, 3, 1.0, &mut rng);
        assert_eq!(a.transpose().transpose(), a);
        let t = a.transpose();
        for i in 0..5 {
            for j in 0..3 {
                assert_eq!(t.get(j, i), a.get(i, j));
            }
        }
        let row = Tensor2D::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(row.transpose().shape(), (4, 1));
    }

    #[test]
    fn permutation_gather() {
        let x = Tensor2D::new(1, 2, vec![3.0, 7.0]).unwrap();
        let p = PermutationVector::new(vec![1, 0]).unwrap();
        assert_eq!(
            x.apply_permutation(&p, Axis::Cols).unwrap().data(),
            &[7.0, 3.0]
        );
        let id = PermutationVector::identity(2);
        assert_eq!(x.apply_permutation(&id, Axis::Cols).unwrap(), x);
        assert!(x.apply_permutation(&p, Axis::Rows).is_err());
    }

    #[test]
    fn permutation_matches_dense_matmul() {
        let mut rng = seeded(3);
        let x = Tensor2D::randn(6, 6, 1.0, &mut rng);
        let p = PermutationVector::new(vec![4, 2, 0, 5, 1, 3]).unwrap();
        let m = p.to_matrix();
        assert_eq!(
            x.apply_permutation(&p, Axis::Cols).unwrap(),
            x.matmul(&m).unwrap()
        );
        assert_eq!(
            x.apply_permutation(&p, Axis::Rows).unwrap(),
            m.transpose().matmul(&x).unwrap()
        );
        assert_eq!(m.matmul(&m.transpose()).unwrap(), Tensor2D::identity(6));
    }

    #[test]
    fn rejects_non_permutations() {
        assert!(PermutationVector::new(vec![0, 0]).is_err());
        assert!(PermutationVector::new(vec![0, 2]).is_err());
    }

    #[test]
    fn max_abs_scopes() {
        assert_eq!(
            Tensor2D::zeros(3, 3).max_abs(Scope::Global).unwrap(),
            vec![0.0]
        );
        let x = Tensor2D::new(1, 2, vec![-3.0, 2.0]).unwrap();
        assert_eq!(x.max_abs(Scope::Global).unwrap(), vec![3.0]);
        assert!(Tensor2D::zeros(0, 0).max_abs(Scope::Global).is_err());

        let mut rng = seeded(11);
        let r = Tensor2D::randn(10, 10, 1.0, &mut rng);
        let per_col = r.max_abs(Scope::PerCol).unwrap();
        for (j, &m) in per_col.iter().enumerate() {
            let mut scan = 0.0_f64;
            for i in 0..10 {
                scan = scan.max(r.get(i, j).abs());
            }
            assert_eq!(m, scan);
        }
    }
}
