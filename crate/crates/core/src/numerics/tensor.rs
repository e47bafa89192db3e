use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f64` tensor.
///
/// Values are checked for finiteness when a tensor is built from outside data
/// ([`Tensor::new`], [`Tensor::from_rows`]). Arithmetic inside the crate goes
/// through the unchecked constructors and relies on the inputs being finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {pos} is {}", data[pos])));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds an `rows × cols` matrix; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Shape(format!(
                "row {bad} has {} columns, expected {cols}",
                rows[bad].len()
            )));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Leading dimension of a matrix (rows).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Trailing dimension of a matrix; all but the first axis are flattened.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// `self · other` for `n×k` and `k×m` matrices.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (n, k) = (self.rows(), self.cols());
        let m = other.cols();
        assert_eq!(k, other.rows(), "matmul inner dimensions");
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = self.row(i);
            let o = &mut out[i * m..(i + 1) * m];
            for (p, &aip) in a.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let b = other.row(p);
                for (oj, &bj) in o.iter_mut().zip(b) {
                    *oj += aip * bj;
                }
            }
        }
        Tensor::from_parts(vec![n, m], out)
    }

    /// `self · otherᵀ` for `n×k` and `m×k` matrices.
    pub fn matmul_t(&self, other: &Tensor) -> Tensor {
        let (n, k) = (self.rows(), self.cols());
        let m = other.rows();
        assert_eq!(k, other.cols(), "matmul_t inner dimensions");
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                out.push(dot(a, other.row(j)));
            }
        }
        Tensor::from_parts(vec![n, m], out)
    }

    /// `selfᵀ · other` for `k×n` and `k×m` matrices.
    pub fn t_matmul(&self, other: &Tensor) -> Tensor {
        let (k, n) = (self.rows(), self.cols());
        let m = other.cols();
        assert_eq!(k, other.rows(), "t_matmul inner dimensions");
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let a = self.row(p);
            let b = other.row(p);
            for (i, &api) in a.iter().enumerate() {
                if api == 0.0 {
                    continue;
                }
                let o = &mut out[i * m..(i + 1) * m];
                for (oj, &bj) in o.iter_mut().zip(b) {
                    *oj += api * bj;
                }
            }
        }
        Tensor::from_parts(vec![n, m], out)
    }

    pub fn transpose(&self) -> Tensor {
        let (n, m) = (self.rows(), self.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor::from_parts(vec![m, n], out)
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy shapes");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        self.axpy(1.0, other);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> Tensor {
        let mut t = self.clone();
        t.scale(alpha);
        t
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Stacks equal-length vectors as matrix rows.
    pub fn stack_rows<R: AsRef<[f64]>>(rows: &[R]) -> Tensor {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "stack_rows lengths");
            data.extend_from_slice(r.as_ref());
        }
        Tensor::from_parts(vec![rows.len(), cols], data)
    }

    /// Rows `start..end` of a matrix as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = end - start;
        Tensor::from_parts(shape, self.data[start * c..end * c].to_vec())
    }
}

/// Left-to-right dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nan_and_bad_length() {
        assert!(matches!(Tensor::new(vec![2], vec![1.0, f64::NAN]), Err(Error::NonFinite(_))));
        assert!(matches!(Tensor::new(vec![2, 2], vec![1.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0]]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 0.5], vec![-1.0, 2.0], vec![0.0, 3.0]]).unwrap();
        let ab = a.matmul(&b);
        assert_eq!(ab.data(), &[-1.0, 13.5, -1.0, 30.0]);
        assert_eq!(a.matmul_t(&b.transpose()), ab);
        assert_eq!(a.transpose().t_matmul(&b), ab);
    }
}
