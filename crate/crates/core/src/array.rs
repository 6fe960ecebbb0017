//! Dense row-major arrays of finite 64-bit floats.
//!
//! [`RealArray`] is the carrier for every vector and matrix in the crate:
//! hidden states, weights, logits, mask parameters. Construction rejects
//! NaN and infinity so downstream numeric code never has to re-check.

use crate::error::{Error, Result};

/// A dense array with an explicit shape and row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct RealArray {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl RealArray {
    /// Build an array, validating that `product(shape) == values.len()` and
    /// that every value is finite.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::ShapeMismatch {
                op: "RealArray::new".into(),
                expected: shape.clone(),
                actual: vec![values.len()],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("RealArray::new".into()));
        }
        Ok(Self { shape, values })
    }

    /// A scalar, shape `[]`.
    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![], vec![value])
    }

    /// A vector, shape `[len]`.
    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(vec![n], values)
    }

    /// A matrix, shape `[rows, cols]`, row-major.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    /// All-zero array of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The single value of a scalar array.
    pub fn item(&self) -> f64 {
        debug_assert!(self.values.len() == 1, "item() on non-scalar array");
        self.values[0]
    }

    /// Consume the array, returning its raw values.
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shape_value_mismatch() {
        let err = RealArray::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn rejects_nan_and_inf() {
        assert!(RealArray::vector(vec![1.0, f64::NAN]).is_err());
        assert!(RealArray::vector(vec![f64::INFINITY]).is_err());
        assert!(RealArray::vector(vec![1.0, -2.0]).is_ok());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = RealArray::scalar(3.5).unwrap();
        assert!(s.shape().is_empty());
        assert_eq!(s.item(), 3.5);
    }
}
