//! Minimal deterministic reverse-mode autodiff over dense 1-D/2-D real
//! arrays, with the convolution and gate primitives the two metamodel
//! architectures need, plus SGD-momentum/AdamW optimizers.

mod optim;
mod tape;

pub use optim::{clip_grad_norm, OptimizerKind, OptimizerState};
pub use tape::{NodeId, Tape};

use crate::{Error, Result};

/// Dense row-major tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} needs {} entries, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Central finite differences of a scalar-valued function of a flat
/// parameter vector. Independent oracle for gradient checks.
pub fn central_finite_diff<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    at: &[f64],
    step: f64,
) -> Vec<f64> {
    let mut x = at.to_vec();
    let mut grad = vec![0.0; at.len()];
    for i in 0..at.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Max relative error between an analytic gradient and a finite-difference
/// reference, with an absolute floor to avoid 0/0 on dead entries.
pub fn max_rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(a, r)| (a - r).abs() / r.abs().max(a.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
