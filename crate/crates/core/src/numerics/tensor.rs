use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with explicit shape.
///
/// Almost everything in this crate is a matrix; features are stored
/// column-per-sample (`d × m`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Build a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let data = rows.iter().flat_map(|row| row.iter().copied()).collect();
        Tensor::new(vec![r, c], data).expect("from_rows shape")
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Tensor::new(vec![values.len(), 1], values.to_vec()).expect("column vector")
    }

    pub fn random_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("random_normal shape")
    }

    pub fn random_uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("random_uniform shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub(crate) fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (r, k) = self.expect_matrix("matmul")?;
        let (k2, c) = other.expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let out_row = &mut out[i * c..(i + 1) * c];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * c..(p + 1) * c];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![r, c],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.expect_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        let cols = self.cols();
        (0..self.rows()).map(|r| self.data[r * cols + c]).collect()
    }

    /// Euclidean norm of every column.
    pub fn column_norms(&self) -> Vec<f64> {
        let (r, c) = (self.rows(), self.cols());
        let mut sq = vec![0.0; c];
        for i in 0..r {
            for (j, s) in sq.iter_mut().enumerate() {
                let v = self.data[i * c + j];
                *s += v * v;
            }
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    /// Mean over columns, as a vector of length `rows`.
    pub fn column_mean(&self) -> Vec<f64> {
        let (r, c) = (self.rows(), self.cols());
        (0..r)
            .map(|i| self.data[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect()
    }

    /// Select a subset of columns in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = self.expect_matrix("select_columns")?;
        if idx.is_empty() {
            return Err(Error::Dimension {
                op: "select_columns",
                left: self.shape.clone(),
                right: vec![0],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Dimension {
                op: "select_columns",
                left: self.shape.clone(),
                right: vec![bad],
            });
        }
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            out.extend(idx.iter().map(|&j| row[j]));
        }
        Tensor::new(vec![r, idx.len()], out)
    }

    /// Stack matrices vertically (they must agree in column count).
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::config("concat", "no inputs"))?;
        let (_, c) = first.expect_matrix("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, pc) = p.expect_matrix("concat_rows")?;
            if pc != c {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![rows, c], data)
    }

    /// Broadcast a vector into every column of a `len × m` matrix.
    pub fn broadcast_columns(values: &[f64], m: usize) -> Tensor {
        let mut data = Vec::with_capacity(values.len() * m);
        for &v in values {
            data.extend(std::iter::repeat_n(v, m));
        }
        Tensor::new(vec![values.len(), m], data).expect("broadcast shape")
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(shape: &[usize], bytes: &[u8]) -> Result<Tensor> {
        if !bytes.len().is_multiple_of(8) {
            return Err(Error::format("blob", format!("length {} is not a multiple of 8", bytes.len())));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect();
        Tensor::new(shape.to_vec(), data).map_err(|_| {
            Error::format(
                "blob",
                format!("{} values do not fit shape {:?}", bytes.len() / 8, shape),
            )
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::random_normal(&[3, 3], 1.0, &mut rng);
        assert_eq!(Tensor::eye(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[1.0], &[1.0]]);
        assert_eq!(a.matmul(&b).unwrap(), Tensor::from_rows(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn zero_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = Tensor::random_normal(&[3, 4], 1.0, &mut rng);
        assert_eq!(Tensor::zeros(&[2, 3]).matmul(&b).unwrap(), Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn shape_must_match_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn select_and_concat() {
        let a = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let s = a.select_columns(&[2, 0]).unwrap();
        assert_eq!(s, Tensor::from_rows(&[&[3.0, 1.0], &[6.0, 4.0]]));
        let c = Tensor::concat_rows(&[&a, &a]).unwrap();
        assert_eq!(c.shape(), &[4, 3]);
    }

    #[test]
    fn bytes_round_trip() {
        let a = Tensor::from_rows(&[&[1.5, -0.0], &[f64::MIN_POSITIVE, 1e300]]);
        let b = Tensor::from_le_bytes(&[2, 2], &a.to_le_bytes()).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
    }
}
