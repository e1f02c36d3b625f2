use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A value together with its directional derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTensor {
    pub value: Tensor,
    pub tangent: Tensor,
}

impl DualTensor {
    pub fn new(value: Tensor, tangent: Tensor) -> Result<Self> {
        if value.shape() != tangent.shape() {
            return Err(Error::shape("dual tangent", value.shape(), tangent.shape()));
        }
        Ok(DualTensor { value, tangent })
    }

    pub(crate) fn from_parts(value: Vec<f64>, tangent: Vec<f64>) -> Self {
        let n = value.len();
        DualTensor {
            value: Tensor::from_parts(vec![n], value),
            tangent: Tensor::from_parts(vec![n], tangent),
        }
    }

    /// A constant: zero tangent.
    pub fn constant(value: Tensor) -> Self {
        let tangent = value.zeros_like();
        DualTensor { value, tangent }
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.value, self.tangent)
    }
}
