use rand::Rng;

use crate::capsnet::POSE_DIM;
use crate::error::{Error, Result};
use crate::ndcore::{Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::scalar::Scalar;

/// Lower capsules laid out for routing: `N = n_caps·H·W` capsules ordered
/// capsule-major, then row, then column.
#[derive(Clone, Copy, Debug)]
pub struct CapsuleGridVars {
    /// `N×B×16`.
    pub poses: Var,
    /// `N×B`, in `(0, 1)`.
    pub activations: Var,
    pub n_caps: usize,
    pub height: usize,
    pub width: usize,
}

impl CapsuleGridVars {
    pub fn lower_count(&self) -> usize {
        self.n_caps * self.height * self.width
    }
}

/// Two parallel `1×1` convolutions: pose channels and sigmoid activation
/// channels.
#[derive(Clone, Debug)]
pub struct PrimaryCapsules {
    pub n_caps: usize,
    pub in_channels: usize,
    pose_kernel: ParamId,
    pose_bias: ParamId,
    act_kernel: ParamId,
    act_bias: ParamId,
}

impl PrimaryCapsules {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        in_channels: usize,
        n_caps: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / in_channels as f64).sqrt();
        Self {
            n_caps,
            in_channels,
            pose_kernel: params.add(
                "primary.pose.kernel",
                Tensor::randn([n_caps * POSE_DIM, in_channels, 1, 1], std, rng),
            ),
            pose_bias: params.add(
                "primary.pose.bias",
                Tensor::zeros([1, n_caps * POSE_DIM, 1, 1]),
            ),
            act_kernel: params.add(
                "primary.act.kernel",
                Tensor::randn([n_caps, in_channels, 1, 1], std, rng),
            ),
            act_bias: params.add("primary.act.bias", Tensor::zeros([1, n_caps, 1, 1])),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        features: Var,
    ) -> Result<CapsuleGridVars> {
        let s = g.shape(features).to_vec();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::Config(format!(
                "primary capsules expect {} feature channels, got shape {s:?}",
                self.in_channels
            )));
        }
        let pose = g.conv2d(features, p.var(self.pose_kernel), 1, 0)?;
        let logits = g.conv2d(features, p.var(self.act_kernel), 1, 0)?;
        let logits = g.add(logits, p.var(self.act_bias))?;
        let pose = g.add(pose, p.var(self.pose_bias))?;
        let act = g.sigmoid(logits)?;
        split_capsule_channels(g, pose, act, self.n_caps)
    }
}

/// Rearranges `B×(n·16)×H×W` pose channels and `B×n×H×W` activations into
/// the routing layout.
pub fn split_capsule_channels<T: Scalar>(
    g: &mut Graph<T>,
    pose_maps: Var,
    act_maps: Var,
    n_caps: usize,
) -> Result<CapsuleGridVars> {
    let s = g.shape(pose_maps).to_vec();
    let a = g.shape(act_maps).to_vec();
    if s.len() != 4 || s[1] != n_caps * POSE_DIM || a != [s[0], n_caps, s[2], s[3]] {
        return Err(Error::Config(format!(
            "capsule channel mismatch: pose maps {s:?}, activation maps {a:?}, {n_caps} capsules"
        )));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let pose = g.reshape(pose_maps, [b, n_caps, POSE_DIM, h, w])?;
    let pose = g.permute(pose, &[1, 3, 4, 0, 2])?;
    let pose = g.reshape(pose, [n_caps * h * w, b, POSE_DIM])?;
    let act = g.permute(act_maps, &[1, 2, 3, 0])?;
    let act = g.reshape(act, [n_caps * h * w, b])?;
    Ok(CapsuleGridVars {
        poses: pose,
        activations: act,
        n_caps,
        height: h,
        width: w,
    })
}

/// Spatial mean of a capsule grid: `B×n_caps` activations and
/// `B×n_caps×16` poses.
pub fn pool_grid<T: Scalar>(g: &mut Graph<T>, grid: &CapsuleGridVars) -> Result<(Var, Var)> {
    let (n, hw) = (grid.n_caps, grid.height * grid.width);
    let b = g.shape(grid.activations)[1];
    let pose = g.reshape(grid.poses, [n, hw, b, POSE_DIM])?;
    let pose = g.mean_axis(pose, 1)?;
    let pose = g.permute(pose, &[1, 0, 2])?;
    let act = g.reshape(grid.activations, [n, hw, b])?;
    let act = g.mean_axis(act, 1)?;
    let act = g.permute(act, &[1, 0])?;
    Ok((act, pose))
}
