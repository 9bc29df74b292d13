//! Non-iterative self-routing between two capsule layers.
//!
//! Graph functions work on a capsule-major, batch-second layout: lower
//! poses are `N×B×16` and lower activations `N×B`, where `N` is the number
//! of lower capsules and `B` the batch size.

use rand::Rng;

use crate::capsnet::{CapsuleSet, POSE_DIM};
use crate::error::{Error, Result};
use crate::ndcore::{Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::scalar::Scalar;

/// Lower bound applied to routing denominators inside the graph.
pub const ROUTING_EPS: f64 = 1e-8;

/// Routing weights for `lower` input capsules and `upper` output capsules.
///
/// `w_route` is `N×16×J`; `w_pose` is `N×16×(J·16)` where the column block
/// `j` of capsule `i` holds the transpose of the 16×16 matrix `W_ij`, so
/// that `û_{j|i} = W_ij·u_i` is a row-vector product `u_iᵀ·W_ijᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingLayerParams<T> {
    pub w_route: Tensor<T>,
    pub w_pose: Tensor<T>,
}

impl<T: Scalar> RoutingLayerParams<T> {
    pub fn new(w_route: Tensor<T>, w_pose: Tensor<T>) -> Result<Self> {
        let p = Self { w_route, w_pose };
        p.dims()?;
        Ok(p)
    }

    /// Random initialisation with unit-gain scaling.
    pub fn init<R: Rng + ?Sized>(lower: usize, upper: usize, rng: &mut R) -> Self {
        let std = (1.0 / POSE_DIM as f64).sqrt();
        Self {
            w_route: Tensor::randn([lower, POSE_DIM, upper], std, rng),
            w_pose: Tensor::randn([lower, POSE_DIM, upper * POSE_DIM], std, rng),
        }
    }

    /// Builds the stored layout from explicit `W_ij` matrices
    /// (`pose[i][j]` is row-major 16×16).
    pub fn from_pose_matrices(w_route: Tensor<T>, pose: &[Vec<Vec<T>>]) -> Result<Self> {
        let lower = pose.len();
        let upper = pose.first().map_or(0, |r| r.len());
        let mut data = vec![T::zero(); lower * POSE_DIM * upper * POSE_DIM];
        for (i, row) in pose.iter().enumerate() {
            for (j, m) in row.iter().enumerate() {
                if m.len() != POSE_DIM * POSE_DIM {
                    return Err(Error::Config("pose matrices must be 16×16".into()));
                }
                for q in 0..POSE_DIM {
                    for p in 0..POSE_DIM {
                        data[(i * POSE_DIM + p) * upper * POSE_DIM + j * POSE_DIM + q] =
                            m[q * POSE_DIM + p];
                    }
                }
            }
        }
        Self::new(
            w_route,
            Tensor::new([lower, POSE_DIM, upper * POSE_DIM], data)?,
        )
    }

    /// `(lower, upper)` capsule counts.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let r = self.w_route.shape();
        let p = self.w_pose.shape();
        if r.len() != 3
            || r[1] != POSE_DIM
            || p.len() != 3
            || p[0] != r[0]
            || p[1] != POSE_DIM
            || p[2] != r[2] * POSE_DIM
        {
            return Err(Error::Dimension {
                op: "routing parameters",
                lhs: r.to_vec(),
                rhs: p.to_vec(),
            });
        }
        Ok((r[0], r[2]))
    }

    /// `W_ij` as a row-major 16×16 matrix.
    pub fn pose_matrix(&self, i: usize, j: usize) -> Vec<T> {
        let (_, upper) = self.dims().expect("validated at construction");
        let w = self.w_pose.data();
        let mut m = vec![T::zero(); POSE_DIM * POSE_DIM];
        for q in 0..POSE_DIM {
            for p in 0..POSE_DIM {
                m[q * POSE_DIM + p] = w[(i * POSE_DIM + p) * upper * POSE_DIM + j * POSE_DIM + q];
            }
        }
        m
    }

    /// Routes one sample's lower capsules.
    pub fn route(&self, input: &CapsuleSet<T>) -> Result<CapsuleSet<T>> {
        let (lower, upper) = self.dims()?;
        if input.len() != lower {
            return Err(Error::Dimension {
                op: "self_routing_layer",
                lhs: vec![input.len()],
                rhs: vec![lower],
            });
        }
        if input.activations.data().iter().all(|&a| a == T::zero()) {
            return Err(Error::DivisionGuard("route_activations"));
        }
        let mut g = Graph::new();
        let u = g.constant(input.poses.reshape([lower, 1, POSE_DIM])?)?;
        let a = g.constant(input.activations.reshape([lower, 1])?)?;
        let wr = g.constant(self.w_route.clone())?;
        let wp = g.constant(self.w_pose.clone())?;
        let out = self_routing(&mut g, u, a, wr, wp)?;
        CapsuleSet::new(
            g.value(out.poses).reshape([upper, POSE_DIM])?,
            g.value(out.activations).reshape([upper])?,
        )
    }
}

/// Per-sample wrapper: `u: N×16`, `w_route: N×16×J` to `c: N×J`.
pub fn coupling_coefficients<T: Scalar>(
    poses: &Tensor<T>,
    w_route: &Tensor<T>,
) -> Result<Tensor<T>> {
    let n = poses.shape()[0];
    let mut g = Graph::new();
    let u = g.constant(poses.reshape([n, 1, poses.len() / n])?)?;
    let w = g.constant(w_route.clone())?;
    let c = coupling(&mut g, u, w)?;
    let j = g.shape(c)[2];
    g.value(c).reshape([n, j])
}

/// Per-sample wrapper: `a: N`, `c: N×J` to `J` upper activations.
pub fn route_activations<T: Scalar>(
    activations: &Tensor<T>,
    coupling_coeffs: &Tensor<T>,
) -> Result<Tensor<T>> {
    if activations.data().iter().all(|&a| a == T::zero()) {
        return Err(Error::DivisionGuard("route_activations"));
    }
    let (n, j) = (coupling_coeffs.shape()[0], coupling_coeffs.shape()[1]);
    let mut g = Graph::new();
    let a = g.constant(activations.reshape([n, 1])?)?;
    let c = g.constant(coupling_coeffs.reshape([n, 1, j])?)?;
    let out = routed_activations(&mut g, a, c)?;
    g.value(out).reshape([j])
}

/// Per-sample wrapper: `u: N×16` to votes `N×J×16`.
pub fn transform_votes<T: Scalar>(
    poses: &Tensor<T>,
    params: &RoutingLayerParams<T>,
) -> Result<Tensor<T>> {
    let (lower, upper) = params.dims()?;
    if poses.shape() != [lower, POSE_DIM] {
        return Err(Error::Dimension {
            op: "transform_votes",
            lhs: poses.shape().to_vec(),
            rhs: vec![lower, POSE_DIM],
        });
    }
    let mut g = Graph::new();
    let u = g.constant(poses.reshape([lower, 1, POSE_DIM])?)?;
    let w = g.constant(params.w_pose.clone())?;
    let v = votes(&mut g, u, w)?;
    g.value(v).reshape([lower, upper, POSE_DIM])
}

/// Per-sample wrapper: votes `N×J×16`, `c: N×J`, `a: N` to `J×16`.
pub fn route_poses<T: Scalar>(
    votes_t: &Tensor<T>,
    coupling_coeffs: &Tensor<T>,
    activations: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, j) = (coupling_coeffs.shape()[0], coupling_coeffs.shape()[1]);
    for col in 0..j {
        let total: f64 = (0..n)
            .map(|i| (coupling_coeffs.data()[i * j + col] * activations.data()[i]).widen())
            .sum();
        if total == 0.0 {
            return Err(Error::DivisionGuard("route_poses"));
        }
    }
    let mut g = Graph::new();
    let v = g.constant(votes_t.reshape([n, 1, j, POSE_DIM])?)?;
    let c = g.constant(coupling_coeffs.reshape([n, 1, j])?)?;
    let a = g.constant(activations.reshape([n, 1])?)?;
    let out = routed_poses(&mut g, v, c, a)?;
    g.value(out).reshape([j, POSE_DIM])
}

/// `N×B×16` poses and `N×16×J` routing weights to softmax coupling
/// coefficients `N×B×J`.
pub fn coupling<T: Scalar>(g: &mut Graph<T>, poses: Var, w_route: Var) -> Result<Var> {
    let logits = g.bmm(poses, w_route)?;
    g.softmax(logits, 2)
}

/// `a_j = Σ_i c_ij a_i / Σ_i a_i`, giving `B×J`.
pub fn routed_activations<T: Scalar>(
    g: &mut Graph<T>,
    activations: Var,
    coupling_coeffs: Var,
) -> Result<Var> {
    g.weighted_mean(coupling_coeffs, activations, T::lit(ROUTING_EPS))
}

/// Votes `û_{j|i} = W_ij u_i` as `N×B×J×16`.
pub fn votes<T: Scalar>(g: &mut Graph<T>, poses: Var, w_pose: Var) -> Result<Var> {
    let s = g.shape(poses).to_vec();
    let j = g.shape(w_pose)[2] / POSE_DIM;
    let v = g.bmm(poses, w_pose)?;
    g.reshape(v, [s[0], s[1], j, POSE_DIM])
}

/// `u_j = Σ_i c_ij a_i û_{j|i} / Σ_i c_ij a_i`, giving `B×J×16`.
pub fn routed_poses<T: Scalar>(
    g: &mut Graph<T>,
    votes_v: Var,
    coupling_coeffs: Var,
    activations: Var,
) -> Result<Var> {
    let vs = g.shape(votes_v).to_vec();
    let (n, b, j) = (vs[0], vs[1], vs[2]);
    let a = g.reshape(activations, [n, b, 1])?;
    let w = g.mul(coupling_coeffs, a)?;
    let w = g.reshape(w, [n, b * j])?;
    let v = g.reshape(votes_v, [n, b * j, POSE_DIM])?;
    let out = g.weighted_mean(v, w, T::lit(ROUTING_EPS))?;
    g.reshape(out, [b, j, POSE_DIM])
}

/// Output of a routing layer for a batch.
#[derive(Clone, Copy, Debug)]
pub struct RoutedCapsules {
    /// `B×J`, rows on the simplex.
    pub activations: Var,
    /// `B×J×16`.
    pub poses: Var,
}

pub fn self_routing<T: Scalar>(
    g: &mut Graph<T>,
    poses: Var,
    activations: Var,
    w_route: Var,
    w_pose: Var,
) -> Result<RoutedCapsules> {
    let (ps, as_) = (g.shape(poses), g.shape(activations));
    if ps.len() != 3
        || ps[2] != POSE_DIM
        || as_.len() != 2
        || as_[0] != ps[0]
        || as_[1] != ps[1]
        || g.shape(w_route)[0] != ps[0]
    {
        return Err(Error::Dimension {
            op: "self_routing_layer",
            lhs: ps.to_vec(),
            rhs: g.shape(w_route).to_vec(),
        });
    }
    let c = coupling(g, poses, w_route)?;
    let act = routed_activations(g, activations, c)?;
    let v = votes(g, poses, w_pose)?;
    let pose = routed_poses(g, v, c, activations)?;
    Ok(RoutedCapsules {
        activations: act,
        poses: pose,
    })
}

/// The trainable routing layer inside a model.
#[derive(Clone, Debug)]
pub struct SelfRoutingLayer {
    pub lower: usize,
    pub upper: usize,
    pub w_route: ParamId,
    pub w_pose: ParamId,
}

impl SelfRoutingLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        lower: usize,
        upper: usize,
        rng: &mut R,
    ) -> Self {
        let init = RoutingLayerParams::<T>::init(lower, upper, rng);
        Self {
            lower,
            upper,
            w_route: params.add("routing.w_route", init.w_route),
            w_pose: params.add("routing.w_pose", init.w_pose),
        }
    }

    pub fn params<T: Scalar>(&self, params: &ParamSet<T>) -> RoutingLayerParams<T> {
        RoutingLayerParams {
            w_route: params.get(self.w_route).clone(),
            w_pose: params.get(self.w_pose).clone(),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        poses: Var,
        activations: Var,
    ) -> Result<RoutedCapsules> {
        if g.shape(poses)[0] != self.lower {
            return Err(Error::Dimension {
                op: "self_routing_layer",
                lhs: g.shape(poses).to_vec(),
                rhs: vec![self.lower],
            });
        }
        self_routing(
            g,
            poses,
            activations,
            p.var(self.w_route),
            p.var(self.w_pose),
        )
    }
}
