//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{broadcastable, Gradients, Graph, Var};
pub use params::{Bound, ParamId, ParamSet};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Clamp applied before every logarithm in entropy terms.
pub const LOG_EPS: f64 = 1e-8;

/// Element-wise functions exposed outside a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Log,
    Exp,
}

pub fn elementwise<T: Scalar>(x: &Tensor<T>, f: Elementwise) -> Result<Tensor<T>> {
    x.check_finite("elementwise input")?;
    let mut g = Graph::new();
    let v = g.constant(x.clone())?;
    let y = match f {
        Elementwise::Relu => g.relu(v)?,
        Elementwise::Sigmoid => g.sigmoid(v)?,
        Elementwise::Log => g.log_clamped(v, T::lit(LOG_EPS))?,
        Elementwise::Exp => g.exp(v)?,
    };
    Ok(g.value(y).clone())
}

pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone())?;
    let y = g.softmax(v, axis)?;
    Ok(g.value(y).clone())
}

/// Single-image convolution: `C_in×H×W` input, `C_out×C_in×k×k` kernels.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    if input.ndim() != 3 {
        return Err(Error::Dimension {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: kernels.shape().to_vec(),
        });
    }
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let mut g = Graph::new();
    let x = g.constant(input.reshape(shape)?)?;
    let k = g.constant(kernels.clone())?;
    let y = g.conv2d(x, k, stride, padding)?;
    let out = g.value(y);
    out.reshape(out.shape()[1..].to_vec())
}

/// Per-column mean and unbiased variance of a `B×d` matrix.
pub fn batch_stats<T: Scalar>(z: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (rows, cols) = batch_dims(z, "batch_stats")?;
    let (mean, var) = graph::column_stats(z.data(), rows, cols);
    Ok((
        Tensor::from_parts(vec![cols], mean.into_iter().map(T::lit).collect()),
        Tensor::from_parts(vec![cols], var.into_iter().map(T::lit).collect()),
    ))
}

/// Unbiased sample covariance of the columns of a `B×d` matrix.
pub fn covariance_matrix<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = batch_dims(z, "covariance_matrix")?;
    let cov = graph::covariance_f64(z.data(), rows, cols);
    Ok(Tensor::from_parts(
        vec![cols, cols],
        cov.into_iter().map(T::lit).collect(),
    ))
}

fn batch_dims<T: Scalar>(z: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    if z.ndim() != 2 {
        return Err(Error::Dimension {
            op,
            lhs: z.shape().to_vec(),
            rhs: vec![],
        });
    }
    if z.shape()[0] < 2 {
        return Err(Error::DegenerateBatch {
            op,
            rows: z.shape()[0],
        });
    }
    Ok((z.shape()[0], z.shape()[1]))
}
