//! Dense `f64` tensors with a small reverse-mode tape.
//!
//! The tape ([`Graph`]) borrows a [`ParamStore`] for the duration of one
//! forward pass. [`Graph::backward`] returns a [`Gradients`] value which the
//! caller folds back into the store with [`ParamStore::accumulate`], after
//! the graph (and its borrow) is gone.

pub mod checkpoint;
mod graph;
pub mod opcount;
mod param;

pub use graph::{Gradients, Graph, NodeId};
pub use param::{sgd_step, ParamId, ParamStore, Parameter, SgdConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Checked constructor: rejects shape/length disagreement, zero-sized
    /// dimensions and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::contract(format!(
                "non-finite tensor entry at index {pos}"
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-1 tensor. Finiteness is only checked in debug builds.
    pub fn vector(data: Vec<f64>) -> Self {
        debug_assert!(
            data.iter().all(|x| x.is_finite()),
            "non-finite vector entry"
        );
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::vector(vec![x])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor { shape, data }
    }
}

/// Lowest-index argmax.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().rank(), 2);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn softmax_is_normalized() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p[2] > p[1] && p[1] > p[0]);
    }
}
