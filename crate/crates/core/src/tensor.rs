//! Dense 64-bit float tensors with explicit shapes.
//!
//! Storage is a flat row-major `Vec<f64>`. Rank is arbitrary in principle,
//! but everything in this crate is rank 1 (vectors) or rank 2 (matrices).
//! Operations validate shapes and report [`Error::ShapeMismatch`] instead of
//! panicking; numeric results are checked for finiteness at layer boundaries.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Shape-tagged dense array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// A tensor of zeros with the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// A tensor with every element set to `value`.
    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Wrap a flat buffer; `data.len()` must equal the shape's volume.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::ShapeMismatch {
                context: "Tensor::from_vec",
                expected: vec![len],
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// A rank-1 tensor from a slice.
    pub fn vector(data: &[f64]) -> Self {
        Tensor {
            shape: vec![data.len()],
            data: data.to_vec(),
        }
    }

    /// A rank-2 tensor from nested rows; all rows must share a length.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::ShapeMismatch {
                    context: "Tensor::matrix",
                    expected: vec![c],
                    got: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![r, c],
            data,
        })
    }

    /// The identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Glorot-uniform initialization: uniform in `[-limit, limit]` with
    /// `limit = sqrt(6 / (fan_in + fan_out))`, where the fans are the two
    /// matrix dimensions. Draw order is row-major and deterministic for a
    /// given RNG state.
    pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor (a rank-1 tensor counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => self.shape.iter().rev().skip(1).product(),
        }
    }

    /// Columns of a rank-2 tensor (length of a rank-1 tensor).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
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

    /// Reinterpret the buffer under a new shape of equal volume.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::reshape",
                expected: vec![self.data.len()],
                got: vec![len],
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let c = self.cols();
        self.data[row * c + col] = value;
    }

    /// Borrow one row of a rank-2 tensor.
    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    /// Copy one row out as a rank-1 tensor.
    pub fn row_tensor(&self, row: usize) -> Tensor {
        Tensor::vector(self.row(row))
    }

    pub fn set_row(&mut self, row: usize, values: &[f64]) -> Result<()> {
        let c = self.cols();
        if values.len() != c {
            return Err(Error::ShapeMismatch {
                context: "Tensor::set_row",
                expected: vec![c],
                got: vec![values.len()],
            });
        }
        self.data[row * c..(row + 1) * c].copy_from_slice(values);
        Ok(())
    }

    /// Matrix product `self · other` for rank-2 operands.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "Tensor::matmul",
                expected: vec![k],
                got: vec![k2],
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
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
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ · other`, used for weight gradients (`xᵀ · dy`).
    pub fn matmul_at_b(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "Tensor::matmul_at_b",
                expected: vec![k],
                got: vec![k2],
            });
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self · otherᵀ`, used for input gradients (`dy · Wᵀ`).
    pub fn matmul_a_bt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "Tensor::matmul_a_bt",
                expected: vec![k],
                got: vec![k2],
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    fn zip_with(&self, other: &Tensor, context: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context,
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "Tensor::add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "Tensor::sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "Tensor::mul", |a, b| a * b)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context: "Tensor::add_assign",
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context: "Tensor::axpy",
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Add a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_row_broadcast(&self, bias: &Tensor) -> Result<Tensor> {
        let c = self.cols();
        if bias.len() != c {
            return Err(Error::ShapeMismatch {
                context: "Tensor::add_row_broadcast",
                expected: vec![c],
                got: vec![bias.len()],
            });
        }
        let mut out = self.clone();
        for row in 0..out.rows() {
            for j in 0..c {
                out.data[row * c + j] += bias.data[j];
            }
        }
        Ok(out)
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * alpha).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context: "Tensor::dot",
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Squared Euclidean norm, `Σ v²`.
    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Concatenate two tensors with equal row counts along the column axis.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows() != other.rows() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::concat_cols",
                expected: vec![self.rows()],
                got: vec![other.rows()],
            });
        }
        let (r, ca, cb) = (self.rows(), self.cols(), other.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Tensor {
            shape: if self.rank() == 1 && other.rank() == 1 {
                vec![ca + cb]
            } else {
                vec![r, ca + cb]
            },
            data,
        })
    }

    /// Copy columns `[start, start+width)` into a new tensor.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor> {
        if start + width > self.cols() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::slice_cols",
                expected: vec![self.cols()],
                got: vec![start + width],
            });
        }
        let r = self.rows();
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&self.row(i)[start..start + width]);
        }
        Ok(Tensor {
            shape: if self.rank() == 1 {
                vec![width]
            } else {
                vec![r, width]
            },
            data,
        })
    }

    /// Fail if any element is NaN or infinite.
    pub fn ensure_finite(&self, context: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn from_vec_rejects_wrong_volume() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn identity_matmul_is_identity_map() {
        let x = Tensor::matrix(&[&[3.0, -1.0]]).unwrap();
        let eye = Tensor::identity(2);
        assert_eq!(x.matmul(&eye).unwrap(), x);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = seeded_rng(7, "tensor.matmul.oracle");
        let a = Tensor::glorot_uniform(4, 3, &mut rng);
        let b = Tensor::glorot_uniform(3, 5, &mut rng);
        let fast = a.matmul(&b).unwrap();

        // Naive oracle: explicit triple loop, no skipping.
        let mut naive = Tensor::zeros(&[4, 5]);
        for i in 0..4 {
            for j in 0..5 {
                let mut acc = 0.0;
                for p in 0..3 {
                    acc += a.get(i, p) * b.get(p, j);
                }
                naive.set(i, j, acc);
            }
        }
        for (f, n) in fast.data().iter().zip(naive.data()) {
            assert!((f - n).abs() < 1e-12, "matmul diverges from oracle: {f} vs {n}");
        }
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = seeded_rng(21, "tensor.transpose.oracle");
        let a = Tensor::glorot_uniform(4, 3, &mut rng);
        let b = Tensor::glorot_uniform(4, 5, &mut rng);
        let c = Tensor::glorot_uniform(3, 5, &mut rng);

        let atb = a.matmul_at_b(&b).unwrap();
        let atb_ref = a.transpose().matmul(&b).unwrap();
        assert_eq!(atb.shape(), atb_ref.shape());
        for (x, y) in atb.data().iter().zip(atb_ref.data()) {
            assert!((x - y).abs() < 1e-12);
        }

        let abt = a.matmul_a_bt(&c.transpose()).unwrap();
        let abt_ref = a.matmul(&c).unwrap();
        for (x, y) in abt.data().iter().zip(abt_ref.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::matrix(&[&[5.0], &[6.0]]).unwrap();
        let cat = a.concat_cols(&b).unwrap();
        assert_eq!(cat.shape(), &[2, 3]);
        assert_eq!(cat.slice_cols(0, 2).unwrap(), a);
        assert_eq!(cat.slice_cols(2, 1).unwrap(), b);
    }

    #[test]
    fn finiteness_is_enforced() {
        let t = Tensor::vector(&[1.0, f64::NAN]);
        assert!(t.ensure_finite("test").is_err());
        assert!(Tensor::vector(&[1.0]).ensure_finite("test").is_ok());
    }

    #[test]
    fn glorot_limit_bounds_draws() {
        let mut rng = seeded_rng(3, "tensor.glorot.bounds");
        let t = Tensor::glorot_uniform(10, 20, &mut rng);
        let limit = (6.0 / 30.0_f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn row_broadcast_adds_bias_to_every_row() {
        let x = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::vector(&[10.0, 20.0]);
        let y = x.add_row_broadcast(&b).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);
    }
}
