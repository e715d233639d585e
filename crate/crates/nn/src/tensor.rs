//! Dense row-major `f32` tensors.

use crate::NnError;

/// A dense row-major tensor. Image batches use `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f32>) -> Result<Self, NnError> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(NnError::Shape(format!(
                "tensor dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    /// Number of values per batch item.
    pub fn item_len(&self) -> usize {
        self.dims.iter().skip(1).product()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Slice of the `i`-th batch item.
    pub fn item(&self, i: usize) -> &[f32] {
        let n = self.item_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.item_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self, NnError> {
        let expected: usize = dims.iter().product();
        if expected != self.data.len() {
            return Err(NnError::Shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Stacks equally sized items into a batch tensor with the given item dims.
    pub fn stack<'a, I>(item_dims: &[usize], items: I) -> Result<Self, NnError>
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        let item_len: usize = item_dims.iter().product();
        let mut data = Vec::new();
        let mut n = 0;
        for item in items {
            if item.len() != item_len {
                return Err(NnError::Shape(format!(
                    "batch item {n} has {} values, expected {item_len}",
                    item.len()
                )));
            }
            data.extend_from_slice(item);
            n += 1;
        }
        let mut dims = vec![n];
        dims.extend_from_slice(item_dims);
        Ok(Self { dims, data })
    }

    pub fn iter_items(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.item_len().max(1))
    }
}
