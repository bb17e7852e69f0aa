//! Flat real-valued latent tensors with a shape descriptor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A latent state `z_t` (or a noise vector) stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl Latent {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                found: vec![data.len()],
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation(format!(
                "latent entry {i} is not finite"
            )));
        }
        Ok(Self { data, shape })
    }

    /// One-dimensional latent of shape `[len]`.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(data, vec![n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            data: vec![0.0; n],
            shape: shape.to_vec(),
        }
    }

    pub(crate) fn from_parts_unchecked(data: Vec<f64>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { data, shape }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &Latent) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                found: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Elementwise `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &Latent, b: f64) -> Result<Latent> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(Self::from_parts_unchecked(data, self.shape.clone()))
    }

    pub fn add(&self, other: &Latent) -> Result<Latent> {
        self.axpby(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &Latent) -> Result<Latent> {
        self.axpby(1.0, other, -1.0)
    }

    pub fn scale(&self, s: f64) -> Latent {
        Self::from_parts_unchecked(self.data.iter().map(|x| s * x).collect(), self.shape.clone())
    }

    pub fn dot(&self, other: &Latent) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(x, y)| x * y).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `||self - other|| / ||other||`, falling back to the absolute error
    /// when `other` is the zero vector.
    pub fn relative_error(&self, reference: &Latent) -> Result<f64> {
        let diff = self.sub(reference)?.norm();
        let scale = reference.norm();
        Ok(if scale > 0.0 { diff / scale } else { diff })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shape_and_nan() {
        assert!(Latent::new(vec![1.0, 2.0, 3.0], vec![2, 2]).is_err());
        assert!(Latent::new(vec![1.0, f64::NAN], vec![2]).is_err());
        assert!(Latent::new(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).is_ok());
    }

    #[test]
    fn arithmetic_checks_shape() {
        let a = Latent::from_vec(vec![1.0, 2.0]).unwrap();
        let b = Latent::from_vec(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
        assert_eq!(a.dot(&a).unwrap(), 5.0);
    }
}
