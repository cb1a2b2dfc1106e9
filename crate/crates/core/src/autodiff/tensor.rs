use super::AdError;

/// Dense row-major tensor of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AdError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AdError::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("holds {} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor when the caller has already guaranteed the length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AdError> {
        Self::new(vec![rows, cols], data)
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, AdError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
