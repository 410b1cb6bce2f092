//! Flat parameter storage with named tensor shapes.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    pub data: Vec<f64>,
    pub tensors: Vec<TensorInfo>,
}

impl Params {
    /// Reserve a zero-filled tensor and return its id.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let info = TensorInfo {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.data.len(),
        };
        self.data.resize(self.data.len() + info.len(), 0.0);
        self.tensors.push(info);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slice(&self, id: usize) -> &[f64] {
        &self.data[self.tensors[id].range()]
    }

    pub fn slice_mut(&mut self, id: usize) -> &mut [f64] {
        let r = self.tensors[id].range();
        &mut self.data[r]
    }

    pub fn v1(&self, id: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.slice(id))
    }

    pub fn v2(&self, id: usize) -> ArrayView2<'_, f64> {
        let s = &self.tensors[id].shape;
        ArrayView2::from_shape((s[0], s[1]), self.slice(id)).expect("tensor shape")
    }

    /// Row `row` of a matrix tensor.
    pub fn row(&self, id: usize, row: usize) -> &[f64] {
        let cols = self.tensors[id].shape[1];
        &self.slice(id)[row * cols..(row + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Gradient buffer sharing a parameter layout.
pub struct Grads<'a> {
    pub data: Vec<f64>,
    tensors: &'a [TensorInfo],
}

impl<'a> Grads<'a> {
    pub fn zeros(params: &'a Params) -> Self {
        Grads {
            data: vec![0.0; params.len()],
            tensors: &params.tensors,
        }
    }

    pub fn m1(&mut self, id: usize) -> ArrayViewMut1<'_, f64> {
        let r = self.tensors[id].range();
        ArrayViewMut1::from(&mut self.data[r])
    }

    pub fn m2(&mut self, id: usize) -> ArrayViewMut2<'_, f64> {
        let t = &self.tensors[id];
        let (r, c) = (t.shape[0], t.shape[1]);
        let range = t.range();
        ArrayViewMut2::from_shape((r, c), &mut self.data[range]).expect("tensor shape")
    }

    pub fn row_mut(&mut self, id: usize, row: usize) -> &mut [f64] {
        let t = &self.tensors[id];
        let cols = t.shape[1];
        let start = t.offset + row * cols;
        &mut self.data[start..start + cols]
    }
}
