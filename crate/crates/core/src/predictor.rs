//! Hypernetwork pose predictor.
//!
//! A single linear map sends `g̃ = [1, w, x, y, z]` (the rotation quaternion
//! with a constant term) to the weights and biases of a residual 2-layer
//! MLP `z ↦ z + W₂·relu(W₁·z + b₁) + b₂` (hidden width `D` by default). Because the
//! map is linear, `W₁ = Σ_k g̃_k W₁ₖ`, and the batched forward pass applies
//! the five basis blocks to the whole batch at once instead of
//! materialising one matrix per row.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndcore::{Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::rotations::{Quaternion, UNIT_TOLERANCE};
use crate::scalar::Scalar;

/// Size of `g̃`.
pub const G_DIM: usize = 5;
/// Initial std of the quaternion-dependent generator blocks.
pub const GENERATOR_INIT_STD: f64 = 1e-3;

/// Generator tensors for pose dim `D` and hidden width `H`: `w1` is
/// `D×(5·H)` and `w2` is `H×(5·D)`, where column block `k` holds the
/// transpose of basis matrix `k`; `b1` is `5×H` and `b2` is `5×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperPredictorParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

/// An MLP produced for one quaternion. Weight matrices are `out×in`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedMlp<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> GeneratedMlp<T> {
    pub fn apply(&self, z: &[T]) -> Vec<T> {
        let layer = |w: &Tensor<T>, b: &Tensor<T>, x: &[T]| -> Vec<T> {
            (0..w.shape()[0])
                .map(|o| {
                    b.data()[o]
                        + w.row(o)
                            .iter()
                            .zip(x)
                            .fold(T::zero(), |acc, (&a, &v)| acc + a * v)
                })
                .collect()
        };
        let h: Vec<T> = layer(&self.w1, &self.b1, z)
            .into_iter()
            .map(|v| v.max(T::zero()))
            .collect();
        layer(&self.w2, &self.b2, &h)
            .into_iter()
            .zip(z)
            .map(|(o, &x)| x + o)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

fn g_tilde(q: &Quaternion) -> Result<[f64; G_DIM]> {
    if (q.norm() - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::Contract(format!(
            "predictor needs a unit quaternion, norm is {}",
            q.norm()
        )));
    }
    Ok([1.0, q.w, q.x, q.y, q.z])
}

impl<T: Scalar> HyperPredictorParams<T> {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros([dim, G_DIM * hidden]),
            b1: Tensor::zeros([G_DIM, hidden]),
            w2: Tensor::zeros([hidden, G_DIM * dim]),
            b2: Tensor::zeros([G_DIM, dim]),
        }
    }

    /// He-scaled constant first-layer block, zero constant second-layer
    /// block and small quaternion-dependent blocks: the predictor starts as
    /// the identity plus a small rotation-dependent perturbation.
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut block = |rows: usize, cols: usize, std_const: f64| {
            let normal = Tensor::<T>::randn([rows, G_DIM * cols], 1.0, rng);
            let d = normal
                .data()
                .iter()
                .enumerate()
                .map(|(k, &v)| {
                    v * T::lit(if k % (G_DIM * cols) < cols {
                        std_const
                    } else {
                        GENERATOR_INIT_STD
                    })
                })
                .collect();
            Tensor::from_parts(vec![rows, G_DIM * cols], d)
        };
        let w1 = block(dim, hidden, (2.0 / dim as f64).sqrt());
        let w2 = block(hidden, dim, 0.0);
        Self {
            w1,
            b1: Tensor::zeros([G_DIM, hidden]),
            w2,
            b2: Tensor::zeros([G_DIM, dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w2.shape()[0]
    }

    pub fn generate_weights(&self, q: &Quaternion) -> Result<GeneratedMlp<T>> {
        let gt = g_tilde(q)?;
        let combine = |w: &Tensor<T>| {
            // out×in matrix Σ_k g̃_k W_k from the transposed blocks
            let (n_in, n_out) = (w.shape()[0], w.shape()[1] / G_DIM);
            Tensor::from_fn([n_out, n_in], |idx| {
                let (o, i) = (idx / n_in, idx % n_in);
                let row = w.row(i);
                (0..G_DIM).fold(T::zero(), |acc, k| acc + T::lit(gt[k]) * row[k * n_out + o])
            })
        };
        let bias = |b: &Tensor<T>| {
            Tensor::from_fn([b.shape()[1]], |o| {
                (0..G_DIM).fold(T::zero(), |acc, k| acc + T::lit(gt[k]) * b.row(k)[o])
            })
        };
        Ok(GeneratedMlp {
            w1: combine(&self.w1),
            b1: bias(&self.b1),
            w2: combine(&self.w2),
            b2: bias(&self.b2),
        })
    }

    /// Applies the generated MLP of `quats[i]` to row `i` of `z`.
    pub fn predict(&self, z: &Tensor<T>, quats: &[Quaternion]) -> Result<Tensor<T>> {
        let q = quaternion_batch(quats)?;
        let mut g = Graph::new();
        let zv = g.constant(z.clone())?;
        let qv = g.constant(q)?;
        let p = [
            g.constant(self.w1.clone())?,
            g.constant(self.b1.clone())?,
            g.constant(self.w2.clone())?,
            g.constant(self.b2.clone())?,
        ];
        let out = hyper_forward(&mut g, zv, qv, p)?;
        Ok(g.value(out).clone())
    }
}

/// Stacks quaternions into a `B×4` tensor after checking they are unit.
pub fn quaternion_batch<T: Scalar>(quats: &[Quaternion]) -> Result<Tensor<T>> {
    let mut d = Vec::with_capacity(quats.len() * 4);
    for q in quats {
        g_tilde(q)?;
        d.extend(q.as_array().iter().map(|&v| T::lit(v)));
    }
    Tensor::new([quats.len(), 4], d)
}

/// Batched forward: `z: B×D`, `quats: B×4`, generator leaves `[w1, b1, w2, b2]`.
pub fn hyper_forward<T: Scalar>(g: &mut Graph<T>, z: Var, quats: Var, p: [Var; 4]) -> Result<Var> {
    let (zs, qs) = (g.shape(z).to_vec(), g.shape(quats).to_vec());
    let d = g.shape(p[0])[0];
    if zs.len() != 2 || zs[1] != d || qs != [zs[0], 4] || g.shape(p[2])[1] != G_DIM * d {
        return Err(Error::Dimension {
            op: "predict",
            lhs: zs,
            rhs: qs,
        });
    }
    let b = zs[0];
    let ones = g.constant(Tensor::ones([b, 1]))?;
    let gt = g.concat(&[ones, quats], 1)?;
    let gt3 = g.reshape(gt, [b, G_DIM, 1])?;
    let layer = |g: &mut Graph<T>, x: Var, w: Var, bias: Var| -> Result<Var> {
        let n_out = g.shape(w)[1] / G_DIM;
        let basis = g.matmul(x, w)?;
        let basis = g.reshape(basis, [b, G_DIM, n_out])?;
        let weighted = g.mul(basis, gt3)?;
        let lin = g.sum_axis(weighted, 1)?;
        let bb = g.matmul(gt, bias)?;
        g.add(lin, bb)
    };
    let h = layer(g, z, p[0], p[1])?;
    let h = g.relu(h)?;
    let o = layer(g, h, p[2], p[3])?;
    g.add(z, o)
}

/// The predictor as a model component registered in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct HyperPredictor {
    pub dim: usize,
    pub hidden: usize,
    ids: [ParamId; 4],
}

impl HyperPredictor {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let init = HyperPredictorParams::<T>::init(dim, hidden, rng);
        Self {
            dim,
            hidden,
            ids: [
                params.add("predictor.w1", init.w1),
                params.add("predictor.b1", init.b1),
                params.add("predictor.w2", init.w2),
                params.add("predictor.b2", init.b2),
            ],
        }
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        self.ids
    }

    pub fn params<T: Scalar>(&self, params: &ParamSet<T>) -> HyperPredictorParams<T> {
        HyperPredictorParams {
            w1: params.get(self.ids[0]).clone(),
            b1: params.get(self.ids[1]).clone(),
            w2: params.get(self.ids[2]).clone(),
            b2: params.get(self.ids[3]).clone(),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z: Var,
        quats: Var,
    ) -> Result<Var> {
        hyper_forward(g, z, quats, self.ids.map(|id| p.var(id)))
    }
}

/// Maps a pose embedding under a rotation; used by retrieval-style
/// evaluation.
pub trait PosePredictor<T: Scalar> {
    fn predict(&self, z: &Tensor<T>, quats: &[Quaternion]) -> Result<Tensor<T>>;
}

impl<T: Scalar> PosePredictor<T> for HyperPredictorParams<T> {
    fn predict(&self, z: &Tensor<T>, quats: &[Quaternion]) -> Result<Tensor<T>> {
        HyperPredictorParams::predict(self, z, quats)
    }
}

/// Ignores the rotation.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityPredictor;

impl<T: Scalar> PosePredictor<T> for IdentityPredictor {
    fn predict(&self, z: &Tensor<T>, quats: &[Quaternion]) -> Result<Tensor<T>> {
        if z.shape()[0] != quats.len() {
            return Err(Error::Dimension {
                op: "predict",
                lhs: z.shape().to_vec(),
                rhs: vec![quats.len()],
            });
        }
        Ok(z.clone())
    }
}
