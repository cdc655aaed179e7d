//! Convenience wrappers over [`Graph`] for one-off evaluation on plain
//! tensors, plus the spatial reductions used on feature grids.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Graph {
    /// Per-channel maximum over the two trailing (spatial) axes.
    pub fn spatial_max(&mut self, x: Var) -> Result<Var> {
        let flat = self.flatten_spatial(x)?;
        Ok(self.max_last(flat))
    }

    /// Per-channel mean over the two trailing (spatial) axes.
    pub fn spatial_avg(&mut self, x: Var) -> Result<Var> {
        let flat = self.flatten_spatial(x)?;
        Ok(self.mean_last(flat))
    }

    fn flatten_spatial(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::shape(
                "spatial reduction",
                format!("expected [.., H, W] with a channel axis, got {s:?}"),
            ));
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.push(s[s.len() - 2] * s[s.len() - 1]);
        self.reshape(x, &shape)
    }
}

pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, w, b) = (
        g.constant(input.clone()),
        g.constant(weight.clone()),
        g.constant(bias.clone()),
    );
    let y = g.conv2d(x, w, b, stride, padding)?;
    Ok(g.value(y).clone())
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xv, w, b) = (
        g.constant(x.clone()),
        g.constant(weight.clone()),
        g.constant(bias.clone()),
    );
    let y = g.linear(xv, w, b)?;
    Ok(g.value(y).clone())
}

/// Cosine similarity of two equal-length vectors, norms floored at 1e-12.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::shape(
            "cosine_sim",
            format!("lengths {} vs {}", u.len(), v.len()),
        ));
    }
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![1, u.len()], u.to_vec())?);
    let b = g.constant(Tensor::new(vec![1, v.len()], v.to_vec())?);
    let s = g.cosine(a, b)?;
    Ok(g.value(s).item())
}

/// Per-channel spatial maximum of a `[C, H, W]` map with the `(row, col)`
/// of the first maximal cell in row-major order.
pub fn spatial_max(x: &Tensor) -> Result<(Tensor, Vec<(usize, usize)>)> {
    if x.ndim() != 3 {
        return Err(Error::shape(
            "spatial_max",
            format!("expected [C,H,W], got {:?}", x.shape()),
        ));
    }
    let w = x.shape()[2];
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let m = g.spatial_max(v)?;
    let idx = g
        .argmax(m)
        .expect("max node")
        .iter()
        .map(|&i| (i / w, i % w))
        .collect();
    Ok((g.value(m).clone(), idx))
}
