//! Training objective over batched capsule embeddings.
//!
//! Every function builds onto a [`Graph`] so the result can be
//! differentiated; [`LossBreakdown`] reads the component values back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Graph, Tensor, Var, LOG_EPS};
use crate::scalar::Scalar;

/// Row-sum tolerance for probability inputs.
pub const SIMPLEX_TOLERANCE: f64 = 1e-4;
/// Added to variances before the square root in the variance hinge.
pub const STD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_inv: f64,
    pub lambda_equi: f64,
    pub lambda_v: f64,
    pub lambda_c: f64,
    /// Average both cross-entropy directions instead of `H(Z, Z')` alone.
    #[serde(default = "default_true")]
    pub symmetric_ce: bool,
}

fn default_true() -> bool {
    true
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_inv: 0.1,
            lambda_equi: 5.0,
            lambda_v: 10.0,
            lambda_c: 1.0,
            symmetric_ce: true,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_inv: 0.0,
            lambda_equi: 0.0,
            lambda_v: 0.0,
            lambda_c: 0.0,
            symmetric_ce: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_inv", self.lambda_inv),
            ("lambda_equi", self.lambda_equi),
            ("lambda_v", self.lambda_v),
            ("lambda_c", self.lambda_c),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Scalar values of every loss component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub invariant_ce: f64,
    pub mean_entropy_a: f64,
    pub mean_entropy_b: f64,
    pub equivariant_mse: f64,
    pub var_reg_a: f64,
    pub var_reg_b: f64,
    pub cov_reg_a: f64,
    pub cov_reg_b: f64,
    pub predictor_var_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted combination of the stored components.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.lambda_inv * self.invariant_ce - (self.mean_entropy_a + self.mean_entropy_b)
            + w.lambda_equi * self.equivariant_mse
            + w.lambda_c * (self.cov_reg_a + self.cov_reg_b)
            + w.lambda_v * (self.var_reg_a + self.var_reg_b)
            + w.lambda_v * self.predictor_var_reg
    }

    pub fn is_finite(&self) -> bool {
        [
            self.invariant_ce,
            self.mean_entropy_a,
            self.mean_entropy_b,
            self.equivariant_mse,
            self.var_reg_a,
            self.var_reg_b,
            self.cov_reg_a,
            self.cov_reg_b,
            self.predictor_var_reg,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn check_simplex<T: Scalar>(g: &Graph<T>, z: Var, op: &str) -> Result<(usize, usize)> {
    let s = g.shape(z);
    if s.len() != 2 {
        return Err(Error::Contract(format!(
            "{op} expects a B×K matrix, got {s:?}"
        )));
    }
    let (b, k) = (s[0], s[1]);
    let d = g.value(z).data();
    for r in 0..b {
        let row = &d[r * k..(r + 1) * k];
        let sum: f64 = row.iter().map(|v| v.widen()).sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE || row.iter().any(|&v| v < T::zero()) {
            return Err(Error::Contract(format!(
                "{op}: row {r} is not a probability vector (sum {sum})"
            )));
        }
    }
    Ok((b, k))
}

/// `−(1/B) Σ_b Σ_k p[b,k]·log q[b,k]`.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, p: Var, q: Var) -> Result<Var> {
    let lq = g.log_clamped(q, T::lit(LOG_EPS))?;
    let prod = g.mul(p, lq)?;
    let s = g.sum_axis(prod, 1)?;
    let m = g.mean_all(s)?;
    g.neg(m)
}

/// Cross-entropy between the two views' activation vectors.
pub fn invariant_loss<T: Scalar>(
    g: &mut Graph<T>,
    z_a: Var,
    z_b: Var,
    symmetric: bool,
) -> Result<Var> {
    let sa = check_simplex(g, z_a, "invariant_loss")?;
    let sb = check_simplex(g, z_b, "invariant_loss")?;
    if sa != sb {
        return Err(Error::Dimension {
            op: "invariant_loss",
            lhs: vec![sa.0, sa.1],
            rhs: vec![sb.0, sb.1],
        });
    }
    let ab = cross_entropy(g, z_a, z_b)?;
    if !symmetric {
        return Ok(ab);
    }
    let ba = cross_entropy(g, z_b, z_a)?;
    let sum = g.add(ab, ba)?;
    g.mul_scalar(sum, T::lit(0.5))
}

/// Entropy of the batch-mean probability vector.
pub fn mean_entropy<T: Scalar>(g: &mut Graph<T>, z: Var) -> Result<Var> {
    check_simplex(g, z, "mean_entropy")?;
    let mean = g.mean_axis(z, 0)?;
    let lm = g.log_clamped(mean, T::lit(LOG_EPS))?;
    let prod = g.mul(mean, lm)?;
    let s = g.sum_all(prod)?;
    g.neg(s)
}

/// Mean over rows of the squared Euclidean distance.
pub fn equivariant_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) || g.shape(pred).len() != 2 {
        return Err(Error::Dimension {
            op: "equivariant_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(target).to_vec(),
        });
    }
    let d = g.sub(pred, target)?;
    let sq = g.square(d)?;
    let rows = g.sum_axis(sq, 1)?;
    g.mean_all(rows)
}

/// `(1/d) Σ_j max(0, 1 − std_j)`.
pub fn variance_reg<T: Scalar>(g: &mut Graph<T>, z: Var) -> Result<Var> {
    let var = g.variance(z)?;
    let std = g.sqrt_eps(var, T::lit(STD_EPS))?;
    let neg = g.neg(std)?;
    let gap = g.add_scalar(neg, T::one())?;
    let hinge = g.relu(gap)?;
    g.mean_all(hinge)
}

/// `(1/d) Σ_{i≠j} Cov_ij²`.
pub fn covariance_reg<T: Scalar>(g: &mut Graph<T>, z: Var) -> Result<Var> {
    let cov = g.covariance(z)?;
    let d = g.shape(cov)[0];
    let mask = g.constant(Tensor::from_fn([d, d], |k| {
        if k / d == k % d {
            T::zero()
        } else {
            T::one()
        }
    }))?;
    let off = g.mul(cov, mask)?;
    let sq = g.square(off)?;
    let s = g.sum_all(sq)?;
    g.mul_scalar(s, T::lit(1.0 / d as f64))
}

/// Graph handles of every component plus the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub invariant_ce: Var,
    pub mean_entropy_a: Var,
    pub mean_entropy_b: Var,
    pub equivariant_mse: Var,
    pub var_reg_a: Var,
    pub var_reg_b: Var,
    pub cov_reg_a: Var,
    pub cov_reg_b: Var,
    pub predictor_var_reg: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().widen();
        LossBreakdown {
            invariant_ce: v(self.invariant_ce),
            mean_entropy_a: v(self.mean_entropy_a),
            mean_entropy_b: v(self.mean_entropy_b),
            equivariant_mse: v(self.equivariant_mse),
            var_reg_a: v(self.var_reg_a),
            var_reg_b: v(self.var_reg_b),
            cov_reg_a: v(self.cov_reg_a),
            cov_reg_b: v(self.cov_reg_b),
            predictor_var_reg: v(self.predictor_var_reg),
            total: v(self.total),
        }
    }
}

/// Embeddings of a batch of view pairs.
#[derive(Clone, Copy, Debug)]
pub struct Embeddings {
    pub act_a: Var,
    pub act_b: Var,
    pub pose_a: Var,
    pub pose_b: Var,
    /// Predictor output for `pose_a` under the pair's relative rotation.
    pub pred: Var,
}

pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    e: &Embeddings,
    w: &LossWeights,
) -> Result<LossVars> {
    w.validate()?;
    let b = g.shape(e.act_a)[0];
    for v in [e.act_b, e.pose_a, e.pose_b, e.pred] {
        if g.shape(v)[0] != b {
            return Err(Error::Dimension {
                op: "total_loss",
                lhs: g.shape(e.act_a).to_vec(),
                rhs: g.shape(v).to_vec(),
            });
        }
    }
    let ce = invariant_loss(g, e.act_a, e.act_b, w.symmetric_ce)?;
    let ha = mean_entropy(g, e.act_a)?;
    let hb = mean_entropy(g, e.act_b)?;
    let mse = equivariant_loss(g, e.pred, e.pose_b)?;
    let va = variance_reg(g, e.pose_a)?;
    let vb = variance_reg(g, e.pose_b)?;
    let ca = covariance_reg(g, e.pose_a)?;
    let cb = covariance_reg(g, e.pose_b)?;
    let vp = variance_reg(g, e.pred)?;

    let mut terms = Vec::new();
    let mut push = |g: &mut Graph<T>, x: Var, lambda: f64| -> Result<()> {
        if lambda != 0.0 {
            terms.push(g.mul_scalar(x, T::lit(lambda))?);
        }
        Ok(())
    };
    push(g, ce, w.lambda_inv)?;
    push(g, ha, -1.0)?;
    push(g, hb, -1.0)?;
    push(g, mse, w.lambda_equi)?;
    push(g, va, w.lambda_v)?;
    push(g, vb, w.lambda_v)?;
    push(g, ca, w.lambda_c)?;
    push(g, cb, w.lambda_c)?;
    push(g, vp, w.lambda_v)?;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(LossVars {
        invariant_ce: ce,
        mean_entropy_a: ha,
        mean_entropy_b: hb,
        equivariant_mse: mse,
        var_reg_a: va,
        var_reg_b: vb,
        cov_reg_a: ca,
        cov_reg_b: cb,
        predictor_var_reg: vp,
        total,
    })
}

/// Evaluates every component on plain tensors.
pub fn evaluate<T: Scalar>(
    act_a: &Tensor<T>,
    act_b: &Tensor<T>,
    pose_a: &Tensor<T>,
    pose_b: &Tensor<T>,
    pred: &Tensor<T>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let e = Embeddings {
        act_a: g.constant(act_a.clone())?,
        act_b: g.constant(act_b.clone())?,
        pose_a: g.constant(pose_a.clone())?,
        pose_b: g.constant(pose_b.clone())?,
        pred: g.constant(pred.clone())?,
    };
    Ok(total_loss(&mut g, &e, w)?.breakdown(&g))
}
