//! Dense row-major tensors over `f32` (default) or `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Element type of a [`Tensor`]. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Dtype tag used by the checkpoint format.
    const DTYPE: DType;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Dense n-dimensional array with an optional gradient buffer of the same shape.
#[derive(Clone, PartialEq)]
pub struct Tensor<F: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n], grad: None }
    }

    pub fn scalar(value: F) -> Self {
        Self { shape: vec![1], data: vec![value], grad: None }
    }

    /// i.i.d. standard normal entries drawn from `rng`.
    pub fn randn(shape: &[usize], rng: &mut RngStream) -> Self {
        let n = shape.iter().product();
        let data = rng.normal_vec(n).into_iter().map(F::of).collect();
        Self { shape: shape.to_vec(), data, grad: None }
    }

    /// Normal entries scaled by `std`.
    pub fn randn_scaled(shape: &[usize], std: f64, rng: &mut RngStream) -> Self {
        let n = shape.iter().product();
        let data = rng.normal_vec(n).into_iter().map(|z| F::of(z * std)).collect();
        Self { shape: shape.to_vec(), data, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
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

    pub fn get(&self, index: &[usize]) -> F {
        let off: usize = index.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), n);
        }
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut [F] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![F::zero(); n])
    }

    pub fn requires_grad(mut self) -> Self {
        self.grad_mut();
        self
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it if needed.
    pub fn accumulate_grad(&mut self, delta: &[F]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        for (g, d) in self.grad_mut().iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    /// Both the data buffer and the gradient buffer, borrowed disjointly.
    pub fn data_and_grad_mut(&mut self) -> (&mut [F], &mut [F]) {
        let n = self.data.len();
        let grad = self.grad.get_or_insert_with(|| vec![F::zero(); n]);
        (&mut self.data, grad)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect(), grad: None }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.check_same_shape("zip_map", other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data, grad: None })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> F {
        self.sum() / F::of(self.data.len() as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, v| m.max(v.abs()))
    }

    /// Element-wise conversion to another precision. The gradient is dropped.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
            grad: None,
        }
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn strides_are_row_major() {
        let t = Tensor::<f32>::zeros(&[2, 3, 4]);
        assert_eq!(t.strides(), vec![12, 4, 1]);
    }

    #[test]
    fn grad_matches_shape() {
        let mut t = Tensor::<f64>::zeros(&[3, 2]).requires_grad();
        t.accumulate_grad(&[1.0; 6]);
        assert_eq!(t.grad().unwrap().len(), t.len());
        t.zero_grad();
        assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn reshape_keeps_data() {
        let t = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.clone().reshape(&[4]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[3]).is_err());
    }
}
