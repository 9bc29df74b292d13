//! Convolutional encoder and capsule projector.

mod baseline;
mod encoder;
mod primary;
mod routing;

pub use baseline::SplitMlpProjector;
pub use encoder::{global_average_pool, Encoder, EncoderConfig};
pub use primary::{pool_grid, split_capsule_channels, CapsuleGridVars, PrimaryCapsules};
pub use routing::{
    coupling, coupling_coefficients, route_activations, route_poses, routed_activations,
    routed_poses, self_routing, transform_votes, votes, RoutedCapsules, RoutingLayerParams,
    SelfRoutingLayer, ROUTING_EPS,
};

use crate::error::{Error, Result};
use crate::ndcore::{Graph, Tensor};
use crate::scalar::Scalar;

/// Flattened 4×4 pose length.
pub const POSE_DIM: usize = 16;

/// Capsules of one sample: `N×16` poses and `N` activations.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleSet<T> {
    pub poses: Tensor<T>,
    pub activations: Tensor<T>,
}

impl<T: Scalar> CapsuleSet<T> {
    pub fn new(poses: Tensor<T>, activations: Tensor<T>) -> Result<Self> {
        let n = activations.len();
        if poses.shape() != [n, POSE_DIM] || activations.ndim() != 1 {
            return Err(Error::Dimension {
                op: "CapsuleSet",
                lhs: poses.shape().to_vec(),
                rhs: activations.shape().to_vec(),
            });
        }
        poses.check_finite("capsule poses")?;
        if activations
            .data()
            .iter()
            .any(|a| !(*a >= T::zero() && *a <= T::one()))
        {
            return Err(Error::Parameter(
                "capsule activations must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { poses, activations })
    }

    pub fn len(&self) -> usize {
        self.activations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }

    pub fn pose(&self, i: usize) -> &[T] {
        self.poses.row(i)
    }
}

/// A capsule set laid out on an `H×W` grid; capsule `c` at `(y, x)` is
/// entry `(c·H + y)·W + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleGrid<T> {
    pub capsules: CapsuleSet<T>,
    pub n_caps: usize,
    pub height: usize,
    pub width: usize,
}

impl<T: Scalar> CapsuleGrid<T> {
    pub fn new(
        capsules: CapsuleSet<T>,
        n_caps: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if capsules.len() != n_caps * height * width {
            return Err(Error::Config(format!(
                "{} capsules do not fill a {n_caps}×{height}×{width} grid",
                capsules.len()
            )));
        }
        Ok(Self {
            capsules,
            n_caps,
            height,
            width,
        })
    }

    /// Pulls sample `b` out of a batched graph grid.
    pub fn from_graph(g: &Graph<T>, grid: &CapsuleGridVars, b: usize) -> Result<Self> {
        let n = grid.lower_count();
        let poses = g
            .value(grid.poses)
            .narrow(1, b, 1)?
            .reshape([n, POSE_DIM])?;
        let acts = g.value(grid.activations).narrow(1, b, 1)?.reshape([n])?;
        Self::new(
            CapsuleSet::new(poses, acts)?,
            grid.n_caps,
            grid.height,
            grid.width,
        )
    }
}

/// Mean pose and activation of every capsule over its spatial positions.
pub fn spatial_average_pool<T: Scalar>(grid: &CapsuleGrid<T>) -> Result<CapsuleSet<T>> {
    let hw = grid.height * grid.width;
    if hw == 0 || grid.n_caps == 0 {
        return Err(Error::Config("cannot pool an empty capsule grid".into()));
    }
    let scale = T::lit(1.0 / hw as f64);
    let (p, a) = (grid.capsules.poses.data(), grid.capsules.activations.data());
    let mut poses = vec![T::zero(); grid.n_caps * POSE_DIM];
    let mut acts = vec![T::zero(); grid.n_caps];
    for c in 0..grid.n_caps {
        for s in 0..hw {
            let i = c * hw + s;
            acts[c] += a[i] * scale;
            for k in 0..POSE_DIM {
                poses[c * POSE_DIM + k] += p[i * POSE_DIM + k] * scale;
            }
        }
    }
    CapsuleSet::new(
        Tensor::new([grid.n_caps, POSE_DIM], poses)?,
        Tensor::new([grid.n_caps], acts)?,
    )
}
