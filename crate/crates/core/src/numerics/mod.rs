//! Dense linear algebra, stable elementwise primitives and a finite-difference
//! gradient oracle.
//!
//! Everything here is a pure function. Reductions run left to right so results
//! are bit-reproducible.

mod exact;
mod gradcheck;
mod tensor;

use std::collections::BTreeMap;

pub use exact::ExactSum;
pub use gradcheck::{central_difference, finite_diff_check, FdOptions, FdReport};
pub use tensor::{dot, norm, Tensor};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Named tensors, ordered by name.
pub type ParamMap = BTreeMap<String, Tensor>;

/// A scalar value together with its gradient with respect to named inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradPair {
    pub value: f64,
    pub grads: ParamMap,
}

impl GradPair {
    pub fn new(value: f64) -> Self {
        Self { value, grads: ParamMap::new() }
    }

    pub fn with(mut self, name: &str, grad: Tensor) -> Self {
        self.grads.insert(name.to_owned(), grad);
        self
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    /// `self += weight · other`, adding gradients key by key.
    pub fn accumulate(&mut self, weight: f64, other: &GradPair) {
        self.value += weight * other.value;
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => acc.axpy(weight, g),
                None => {
                    self.grads.insert(name.clone(), g.scaled(weight));
                }
            }
        }
    }

    /// Checks every gradient against the shape of the parameter it belongs to.
    pub fn check_shapes(&self, params: &ParamMap) -> Result<()> {
        for (name, g) in &self.grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient `{name}` has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        Ok(())
    }
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > ZERO_NORM_EPS) {
        return Err(Error::ZeroVector { eps: ZERO_NORM_EPS });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Backward pass of [`l2_normalize`]: maps the gradient w.r.t. the unit vector
/// `unit = v / ‖v‖` to the gradient w.r.t. `v`.
pub fn l2_normalize_backward(unit: &[f64], raw_norm: f64, d_unit: &[f64]) -> Vec<f64> {
    let radial = dot(unit, d_unit);
    unit.iter()
        .zip(d_unit)
        .map(|(u, g)| (g - u * radial) / raw_norm)
        .collect()
}

/// `N×M` cosine similarities between the rows of `a` (`N×D`) and `b` (`M×D`).
pub fn cosine_similarity_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "row widths differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let unit_rows = |t: &Tensor| -> Result<Vec<Vec<f64>>> {
        (0..t.rows()).map(|i| l2_normalize(t.row(i))).collect()
    };
    let ua = Tensor::stack_rows(&unit_rows(a)?);
    let ub = Tensor::stack_rows(&unit_rows(b)?);
    Ok(ua.matmul_t(&ub))
}

/// `log σ(x) = −log(1 + e^{−x})`, evaluated without overflow for any finite `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn log_sigmoid_tensor(t: &Tensor) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| log_sigmoid(x)).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `softmax(scale · x)` with max subtraction.
pub fn softmax_row(x: &[f64], scale: f64) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let m = x.iter().map(|v| scale * v).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (scale * v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log Σ exp(x)`; `−∞` for an empty slice.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = x.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}
