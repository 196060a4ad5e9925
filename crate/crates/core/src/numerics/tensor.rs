use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of rank 1 to 3.
///
/// All arithmetic treats the tensor as a matrix whose column count is the
/// last extent and whose row count is the product of the leading extents,
/// so a rank-1 tensor of length `k` behaves as a `1 x k` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::shape(format!("rank must be 1..=3, got {}", shape.len())));
        }
        if shape.contains(&0) {
            return Err(Error::shape(format!("extents must be positive, got {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; len],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[..self.shape.len() - 1].iter().product()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows() == other.rows() && self.cols() == other.cols()
    }

    pub(crate) fn as_matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `a (m x k) * b (k x p)`, sequential ascending-index accumulation.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * p..(t + 1) * p];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m x k) * b^T` where `b` is `p x k`.
pub(crate) fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * p + j] = s;
        }
    }
    out
}

/// `a^T * b` where `a` is `m x k` and `b` is `m x p`; result `k x p`.
pub(crate) fn matmul_at_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * p];
    for i in 0..m {
        let brow = &b[i * p..(i + 1) * p];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[t * p..(t + 1) * p];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(&[], vec![]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0]).is_err());
        assert!(Tensor::new(&[1, 2, 3, 4], vec![0.0; 24]).is_err());
    }

    #[test]
    fn rank3_flattens_leading_extents() {
        let t = Tensor::new(&[2, 3, 4], vec![0.0; 24]).unwrap();
        assert_eq!(t.rows(), 6);
        assert_eq!(t.cols(), 4);
    }

    #[test]
    fn raw_products_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, 1.0, 0.0, 3.0]; // 3x2
        let ab = matmul_raw(&a, &b, 2, 3, 2);
        assert_eq!(ab, vec![5.0, 11.0, 14.0, 23.0]);
        // b^T is 2x3 ; a * (b^T)^T with bt passed as p x k
        let bt = [1.0, 2.0, 0.0, 0.0, 1.0, 3.0];
        assert_eq!(matmul_bt_raw(&a, &bt, 2, 3, 2), ab);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2 = a^T
        // (a^T)^T * b with a^T stored as m=3? use at as 3x2 -> at^T (2x3) * ? skip: check a^T * c
        let c = [1.0, 1.0]; // 2x1
        assert_eq!(matmul_at_raw(&a, &c, 2, 3, 1), vec![5.0, 7.0, 9.0]);
        assert_eq!(matmul_raw(&at, &c, 3, 2, 1), vec![5.0, 7.0, 9.0]);
    }
}
