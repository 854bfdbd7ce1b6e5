//! Dense row-major tensor value type.

use crate::{Dtype, Error, Result, Scalar};
use rand::Rng;

/// A dense tensor: shape, row-major contiguous data, and an optional
/// gradient buffer of the same shape (populated by [`super::Tape::backward`]
/// consumers for leaf tensors that requested gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    /// Build a tensor from a shape and matching row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} elements but {} were provided",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); numel], requires_grad: false, grad: None }
    }

    /// Tensor filled with a constant.
    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false, grad: None }
    }

    /// Tensor with elements drawn uniformly from `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| F::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    /// Mark this tensor as a differentiable leaf when placed on a tape.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> Dtype {
        F::DTYPE
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Gradient buffer, if one has been stored.
    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    /// Store a gradient buffer (same length as the data).
    pub fn set_grad(&mut self, grad: Vec<F>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient has {} elements, tensor has {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Element-wise cast to another scalar type (used to move data between
    /// f32 training paths and f64 checking paths).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]);
        assert!(matches!(t, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn rank_zero_is_a_scalar() {
        let t = Tensor::<f64>::new(vec![], vec![2.5]).unwrap();
        assert_eq!(t.numel(), 1);
        assert_eq!(t.shape(), &[] as &[usize]);
    }

    #[test]
    fn set_grad_checks_length() {
        let mut t = Tensor::<f32>::zeros(&[4]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        assert!(t.set_grad(vec![1.0; 4]).is_ok());
        assert_eq!(t.grad().unwrap(), &[1.0; 4]);
    }
}
