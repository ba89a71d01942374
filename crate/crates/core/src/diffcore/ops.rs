//! Gradient-free entry points for the graph operations.
//!
//! Each function evaluates on a throwaway inference graph so results are
//! bit-identical to the values produced during training.

use super::graph::Graph;
use super::tensor::{axis_split, Tensor};
use crate::error::{Error, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let (va, vb) = (g.input(a), g.input(b));
    let out = g.matmul(va, vb)?;
    Ok(g.to_tensor(out))
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut g = Graph::inference();
    let v = g.input(x);
    let out = g.softmax(v, axis)?;
    Ok(g.to_tensor(out))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::inference();
    let (vx, vg, vb) = (g.input(x), g.input(gamma), g.input(beta));
    let out = g.layer_norm(vx, vg, vb, eps)?;
    Ok(g.to_tensor(out))
}

pub fn max_reduce(x: &Tensor, axis: usize, mask: Option<&[bool]>) -> Result<Tensor> {
    let mut g = Graph::inference();
    let v = g.input(x);
    let out = g.max_reduce(v, axis, mask)?;
    Ok(g.to_tensor(out))
}

/// Minimum over `axis` among positions where `mask` is true.
pub fn min_reduce(x: &Tensor, axis: usize, mask: Option<&[bool]>) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let included: Vec<bool> = match mask {
        Some(m) if m.len() != n => {
            return Err(Error::Dimension(format!("mask of length {} over axis of length {n}", m.len())))
        }
        Some(m) => m.to_vec(),
        None => vec![true; n],
    };
    if !included.iter().any(|&b| b) {
        return Err(Error::InvalidMask("mask excludes every position".into()));
    }
    let xv = x.values();
    let mut out = vec![f64::INFINITY; outer * inner];
    for o in 0..outer {
        for j in 0..inner {
            for i in (0..n).filter(|&i| included[i]) {
                out[o * inner + j] = out[o * inner + j].min(xv[(o * n + i) * inner + j]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

pub fn weighted_reduce(x: &Tensor, weights: &Tensor, axis: usize, mask: Option<&[bool]>) -> Result<Tensor> {
    let mut g = Graph::inference();
    let (vx, vw) = (g.input(x), g.input(weights));
    let out = g.weighted_reduce(vx, vw, axis, mask)?;
    Ok(g.to_tensor(out))
}
