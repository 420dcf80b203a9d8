//! Dense N-dimensional tensors with tape-based reverse-mode differentiation.
//!
//! The engine is deliberately small: it provides exactly the forward
//! operations the reconstruction network needs (convolutions, transposed
//! convolutions, layer normalization, dense layers, gated recurrence,
//! activations, losses) plus `backward` over a per-pass tape and a
//! finite-difference `grad_check` oracle.
//!
//! Values are stored row-major as `f64`. Weight checkpoints serialize to
//! little-endian `f32` (see [`checkpoint`]).

mod checkpoint;
mod grad_check;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use grad_check::grad_check;
pub use tape::{ConvLstmVars, ConvLstmWeightVars, Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;

/// Elementwise nonlinearities supported by the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative expressed in terms of the activation output `y`.
    pub(crate) fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Dense row-major N-dimensional array, optionally carrying a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, validating that every extent is positive and the
    /// data length equals the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dimension(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dimension(format!(
                "shape {shape:?} implies {numel} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform samples in `[lo, hi)` from the supplied RNG.
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::dimension(format!(
                "gradient length {} does not match tensor numel {}",
                g.len(),
                self.data.len()
            )));
        }
        match &mut self.grad {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }
}

/// Hidden/cell pair carried between gated recurrence steps.
///
/// Both tensors share one `(channels, height, width)` shape; after any step
/// the hidden values lie in `(-1, 1)` because they are the product of a
/// sigmoid gate and a tanh.
#[derive(Debug, Clone)]
pub struct ConvLstmState {
    pub hidden: Tensor,
    pub cell: Tensor,
}

impl ConvLstmState {
    pub fn new(hidden: Tensor, cell: Tensor) -> Result<Self> {
        if hidden.shape() != cell.shape() {
            return Err(Error::dimension(format!(
                "hidden shape {:?} != cell shape {:?}",
                hidden.shape(),
                cell.shape()
            )));
        }
        Ok(ConvLstmState { hidden, cell })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ConvLstmState {
            hidden: Tensor::zeros(&[channels, height, width]),
            cell: Tensor::zeros(&[channels, height, width]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_zero_extent() {
        assert!(matches!(
            Tensor::new(vec![2, 0, 3], vec![]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn accumulate_grad_sums() {
        let mut t = Tensor::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_lstm_state_shape_check() {
        let h = Tensor::zeros(&[2, 3, 3]);
        let c = Tensor::zeros(&[2, 3, 4]);
        assert!(ConvLstmState::new(h, c).is_err());
    }
}
