use rand::Rng;

use crate::error::{Error, Result};
use crate::ndcore::{Bound, Graph, ParamSet, Var};
use crate::nn::Mlp;
use crate::scalar::Scalar;

/// Two independent MLP heads over the two halves of a representation
/// vector: the left half feeds the invariant head, the right half the
/// equivariant head.
#[derive(Clone, Debug)]
pub struct SplitMlpProjector {
    pub half: usize,
    pub invariant: Mlp,
    pub equivariant: Mlp,
}

impl SplitMlpProjector {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        rep_dim: usize,
        hidden: usize,
        inv_dim: usize,
        equi_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if rep_dim % 2 != 0 || rep_dim == 0 {
            return Err(Error::Config(format!(
                "split projector needs an even representation, got {rep_dim}"
            )));
        }
        let half = rep_dim / 2;
        Ok(Self {
            half,
            invariant: Mlp::new(params, "split.inv", &[half, hidden, inv_dim], rng),
            equivariant: Mlp::new(params, "split.equi", &[half, hidden, equi_dim], rng),
        })
    }

    /// `B×d` representations to `(z_inv, z_equi)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, rep: Var) -> Result<(Var, Var)> {
        let s = g.shape(rep).to_vec();
        if s.len() != 2 || s[1] != 2 * self.half {
            return Err(Error::Config(format!(
                "split projector expects {} dims, got {s:?}",
                2 * self.half
            )));
        }
        let left = g.narrow(rep, 1, 0, self.half)?;
        let right = g.narrow(rep, 1, self.half, self.half)?;
        let z_inv = self.invariant.forward(g, p, left)?;
        let z_equi = self.equivariant.forward(g, p, right)?;
        Ok((z_inv, z_equi))
    }
}
