//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node whose
//! parents already exist, so node order is a topological order and the
//! backward pass is a single reverse sweep.

use crate::error::{Error, Result};
use crate::ndcore::tensor::{broadcast_shape, broadcast_strides, for_each_strided, numel, Tensor};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log {
        x: Var,
        eps: T,
    },
    Sqrt(Var),
    Square(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Matmul(Var, Var),
    Bmm(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Variance(Var),
    Covariance(Var),
    WeightedMean {
        votes: Var,
        weights: Var,
        eps: T,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Computation tape.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zero when `v` does not lie
    /// on a path to the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// Moves the gradient out, leaving zero behind.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads.get_mut(v.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn expand_to<T: Scalar>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape() == shape {
        return t.clone();
    }
    let strides = broadcast_strides(t.shape(), shape);
    let mut out = vec![T::zero(); numel(shape)];
    let src = t.data();
    for_each_strided(shape, &strides, |o, s| out[o] = src[s]);
    Tensor::from_parts(shape.to_vec(), out)
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

struct ConvGeometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeometry {
    fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols_len(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Unfold one image into a (C·k·k) × (H'·W') patch matrix.
    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.padding as isize);
        let n = self.cols_len();
        for c in 0..self.c_in {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.h_out {
                        let iy = (oy * s + ky) as isize - p;
                        for ox in 0..self.w_out {
                            let ix = (ox * s + kx) as isize - p;
                            dst[oy * self.w_out + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                plane[iy as usize * self.w + ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-add patches into an image.
    fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.padding as isize);
        let n = self.cols_len();
        for c in 0..self.c_in {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.h_out {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.w_out {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && (ix as usize) < self.w {
                                plane[iy as usize * self.w + ix as usize] +=
                                    src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry(
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    if stride == 0 {
        return Err(Error::Parameter("conv2d stride must be at least 1".into()));
    }
    if input.len() != 4 || kernel.len() != 4 || input[1] != kernel[1] || kernel[2] != kernel[3] {
        return Err(Error::Dimension {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: kernel.to_vec(),
        });
    }
    let (h, w, k) = (input[2], input[3], kernel[2]);
    if k > h + 2 * padding || k > w + 2 * padding {
        return Err(Error::Dimension {
            op: "conv2d (kernel larger than padded input)",
            lhs: input.to_vec(),
            rhs: kernel.to_vec(),
        });
    }
    Ok(ConvGeometry {
        batch: input[0],
        c_in: input[1],
        h,
        w,
        c_out: kernel[0],
        k,
        stride,
        padding,
        h_out: (h + 2 * padding - k) / stride + 1,
        w_out: (w + 2 * padding - k) / stride + 1,
    })
}

fn softmax_forward<T: Scalar>(x: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
    let (outer, dim, inner) = axis_extents(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * dim + j) * inner + i;
            let max = (0..dim).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
            let mut total = 0f64;
            for j in 0..dim {
                let e = (src[at(j)] - max).exp();
                total += e.widen();
                out[at(j)] = e;
            }
            if log {
                let lse = T::lit(total.ln());
                for j in 0..dim {
                    out[at(j)] = src[at(j)] - max - lse;
                }
            } else {
                let inv = T::lit(1.0 / total);
                for j in 0..dim {
                    out[at(j)] *= inv;
                }
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        op: Op<T>,
        value: Tensor<T>,
        requires_grad: bool,
        name: &str,
    ) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_op(&mut self, op: Op<T>, value: Tensor<T>, parents: &[Var], name: &str) -> Result<Var> {
        let rg = parents.iter().any(|&p| self.requires(p));
        self.push(op, value, rg, name)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(Op::Leaf, t, false, "constant")
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(Op::Leaf, t, true, "variable")
    }

    fn broadcast_op(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.value(a).broadcast_with(self.value(b), name, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast_op(a, b, "add", |x, y| x + y)?;
        self.push_op(Op::Add(a, b), v, &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast_op(a, b, "sub", |x, y| x - y)?;
        self.push_op(Op::Sub(a, b), v, &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast_op(a, b, "mul", |x, y| x * y)?;
        self.push_op(Op::Mul(a, b), v, &[a, b], "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast_op(a, b, "div", |x, y| x / y)?;
        self.push_op(Op::Div(a, b), v, &[a, b], "div")
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x).map(|a| a + c);
        self.push_op(Op::AddScalar(x), v, &[x], "add_scalar")
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x).map(|a| a * c);
        self.push_op(Op::MulScalar(x, c), v, &[x], "mul_scalar")
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -T::one())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.push_op(Op::Relu(x), v, &[x], "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| T::one() / (T::one() + (-a).exp()));
        self.push_op(Op::Sigmoid(x), v, &[x], "sigmoid")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.exp());
        self.push_op(Op::Exp(x), v, &[x], "exp")
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(Error::Parameter("log clamp must be positive".into()));
        }
        let v = self.value(x).map(|a| a.max(eps).ln());
        self.push_op(Op::Log { x, eps }, v, &[x], "log")
    }

    /// `sqrt(x + eps)`.
    pub fn sqrt_eps(&mut self, x: Var, eps: T) -> Result<Var> {
        let v = self.value(x).map(|a| (a + eps).sqrt());
        self.push_op(Op::Sqrt(x), v, &[x], "sqrt")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a * a);
        self.push_op(Op::Square(x), v, &[x], "square")
    }

    fn check_axis(&self, x: Var, axis: usize, op: &str) -> Result<()> {
        if axis >= self.value(x).ndim() {
            return Err(Error::Parameter(format!(
                "{op}: axis {axis} invalid for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    /// Sum over `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "sum_axis")?;
        let t = self.value(x);
        let (outer, dim, inner) = axis_extents(t.shape(), axis);
        let src = t.data();
        let mut acc = vec![0f64; outer * inner];
        for o in 0..outer {
            for j in 0..dim {
                let row = &src[(o * dim + j) * inner..(o * dim + j + 1) * inner];
                for (a, &s) in acc[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *a += s.widen();
                }
            }
        }
        let mut shape: Vec<usize> = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let v = Tensor::from_parts(shape, acc.into_iter().map(T::lit).collect());
        self.push_op(Op::SumAxis { x, axis }, v, &[x], "sum_axis")
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "mean_axis")?;
        let n = self.shape(x)[axis];
        let s = self.sum_axis(x, axis)?;
        self.mul_scalar(s, T::lit(1.0 / n as f64))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push_op(Op::SumAll(x), v, &[x], "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.mul_scalar(s, T::lit(1.0 / n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push_op(Op::Reshape(x), v, &[x], "reshape")
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(axes)?;
        self.push_op(
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            v,
            &[x],
            "permute",
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).narrow(axis, start, len)?;
        self.push_op(Op::Narrow { x, axis, start }, v, &[x], "narrow")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        self.push_op(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            v,
            parts,
            "concat",
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push_op(Op::Matmul(a, b), v, &[a, b], "matmul")
    }

    /// Batched matrix product `(n×m×k)·(n×k×p) → n×m×p`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dimension {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, m, k, p) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); n * m * p];
        for i in 0..n {
            T::gemm(
                m,
                k,
                p,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * p..(i + 1) * k * p],
                false,
                &mut out[i * m * p..(i + 1) * m * p],
                false,
            );
        }
        let v = Tensor::from_parts(vec![n, m, p], out);
        self.push_op(Op::Bmm(a, b), v, &[a, b], "bmm")
    }

    /// 2-D cross-correlation of a `B×C×H×W` batch with `C_out×C×k×k`
    /// kernels.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geo = conv_geometry(self.shape(input), self.shape(kernel), stride, padding)?;
        let x = self.value(input).data();
        let kd = self.value(kernel).data();
        let (rows, n) = (geo.cols_rows(), geo.cols_len());
        let img = geo.c_in * geo.h * geo.w;
        let mut cols = vec![T::zero(); rows * n];
        let mut out = vec![T::zero(); geo.batch * geo.c_out * n];
        for b in 0..geo.batch {
            geo.im2col(&x[b * img..(b + 1) * img], &mut cols);
            T::gemm(
                geo.c_out,
                rows,
                n,
                kd,
                false,
                &cols,
                false,
                &mut out[b * geo.c_out * n..(b + 1) * geo.c_out * n],
                false,
            );
        }
        let v = Tensor::from_parts(vec![geo.batch, geo.c_out, geo.h_out, geo.w_out], out);
        self.push_op(
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            v,
            &[input, kernel],
            "conv2d",
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let v = softmax_forward(self.value(x), axis, false);
        self.push_op(Op::Softmax { x, axis }, v, &[x], "softmax")
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let v = softmax_forward(self.value(x), axis, true);
        self.push_op(Op::LogSoftmax { x, axis }, v, &[x], "log_softmax")
    }

    fn batch_matrix(&self, x: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        if s[0] < 2 {
            return Err(Error::DegenerateBatch { op, rows: s[0] });
        }
        Ok((s[0], s[1]))
    }

    /// Per-column unbiased variance of a `B×d` matrix.
    pub fn variance(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.batch_matrix(x, "variance")?;
        let (_, var) = column_stats(self.value(x).data(), rows, cols);
        let v = Tensor::from_parts(vec![cols], var.into_iter().map(T::lit).collect());
        self.push_op(Op::Variance(x), v, &[x], "variance")
    }

    /// Unbiased sample covariance `d×d` of a `B×d` matrix.
    pub fn covariance(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.batch_matrix(x, "covariance")?;
        let cov = covariance_f64(self.value(x).data(), rows, cols);
        let v = Tensor::from_parts(vec![cols, cols], cov.into_iter().map(T::lit).collect());
        self.push_op(Op::Covariance(x), v, &[x], "covariance")
    }

    /// Weighted mean over the leading axis:
    /// `out[s,p] = Σ_i w[i,s]·v[i,s,p] / max(Σ_i w[i,s], eps)`.
    pub fn weighted_mean(&mut self, votes: Var, weights: Var, eps: T) -> Result<Var> {
        let (sv, sw) = (self.shape(votes), self.shape(weights));
        if sv.len() != 3 || sw.len() != 2 || sv[0] != sw[0] || sv[1] != sw[1] {
            return Err(Error::Dimension {
                op: "weighted_mean",
                lhs: sv.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (n, s, p) = (sv[0], sv[1], sv[2]);
        let (vd, wd) = (self.value(votes).data(), self.value(weights).data());
        let mut num = vec![0f64; s * p];
        let mut den = vec![0f64; s];
        for i in 0..n {
            for j in 0..s {
                let w = wd[i * s + j].widen();
                den[j] += w;
                let row = &vd[(i * s + j) * p..(i * s + j + 1) * p];
                for (acc, &x) in num[j * p..(j + 1) * p].iter_mut().zip(row) {
                    *acc += w * x.widen();
                }
            }
        }
        let e = eps.widen();
        let out: Vec<T> = num
            .iter()
            .enumerate()
            .map(|(k, &x)| T::lit(x / den[k / p].max(e)))
            .collect();
        let v = Tensor::from_parts(vec![s, p], out);
        self.push_op(
            Op::WeightedMean {
                votes,
                weights,
                eps,
            },
            v,
            &[votes, weights],
            "weighted_mean",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], to: Var, g: impl FnOnce() -> Tensor<T>) {
        if self.requires(to) {
            add_into(&mut grads[to.0], g());
        }
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, || g.sum_to_shape(self.shape(*a)));
                self.send(grads, *b, || g.sum_to_shape(self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, || g.sum_to_shape(self.shape(*a)));
                self.send(grads, *b, || g.map(|x| -x).sum_to_shape(self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires(*a) {
                    let ga = g
                        .broadcast_with(vb, "mul", |x, y| x * y)?
                        .sum_to_shape(va.shape());
                    add_into(&mut grads[a.0], ga);
                }
                if self.requires(*b) {
                    let gb = g
                        .broadcast_with(va, "mul", |x, y| x * y)?
                        .sum_to_shape(vb.shape());
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires(*a) {
                    let ga = g
                        .broadcast_with(vb, "div", |x, y| x / y)?
                        .sum_to_shape(va.shape());
                    add_into(&mut grads[a.0], ga);
                }
                if self.requires(*b) {
                    // d(a/b)/db = -out / b
                    let t = g.zip_map(out, |x, y| -x * y)?;
                    let gb = t
                        .broadcast_with(vb, "div", |x, y| x / y)?
                        .sum_to_shape(vb.shape());
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::AddScalar(x) => self.send(grads, *x, || g.clone()),
            Op::MulScalar(x, c) => {
                let c = *c;
                self.send(grads, *x, || g.map(|v| v * c));
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                self.send(grads, *x, || {
                    g.zip_map(vx, |gv, xv| if xv > T::zero() { gv } else { T::zero() })
                        .expect("shape")
                });
            }
            Op::Sigmoid(x) => {
                self.send(grads, *x, || {
                    g.zip_map(out, |gv, y| gv * y * (T::one() - y))
                        .expect("shape")
                });
            }
            Op::Exp(x) => self.send(grads, *x, || g.zip_map(out, |gv, y| gv * y).expect("shape")),
            Op::Log { x, eps } => {
                let (vx, eps) = (self.value(*x), *eps);
                self.send(grads, *x, || {
                    g.zip_map(vx, |gv, xv| if xv > eps { gv / xv } else { T::zero() })
                        .expect("shape")
                });
            }
            Op::Sqrt(x) => {
                let two = T::lit(2.0);
                self.send(grads, *x, || {
                    g.zip_map(out, |gv, y| gv / (two * y)).expect("shape")
                });
            }
            Op::Square(x) => {
                let (vx, two) = (self.value(*x), T::lit(2.0));
                self.send(grads, *x, || {
                    g.zip_map(vx, |gv, xv| two * gv * xv).expect("shape")
                });
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let mut keep = shape.clone();
                keep[*axis] = 1;
                self.send(grads, *x, || {
                    expand_to(&g.reshape(keep).expect("same size"), &shape)
                });
            }
            Op::SumAll(x) => {
                let gv = g.item();
                self.send(grads, *x, || Tensor::full(self.shape(*x).to_vec(), gv));
            }
            Op::Reshape(x) => {
                self.send(grads, *x, || {
                    g.reshape(self.shape(*x).to_vec()).expect("same size")
                });
            }
            Op::Permute { x, axes } => {
                let inv = Tensor::<T>::inverse_axes(axes);
                self.send(grads, *x, || g.permute(&inv).expect("valid permutation"));
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                self.send(grads, *x, || {
                    let (outer, dim, inner) = axis_extents(&shape, *axis);
                    let len = g.shape()[*axis];
                    let mut full = vec![T::zero(); numel(&shape)];
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        let src = o * len * inner;
                        full[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    Tensor::from_parts(shape, full)
                });
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.requires(p) {
                        add_into(&mut grads[p.0], g.narrow(*axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.requires(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, vb.data(), true, &mut ga, false);
                    add_into(&mut grads[a.0], Tensor::from_parts(vec![m, k], ga));
                }
                if self.requires(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, va.data(), true, g.data(), false, &mut gb, false);
                    add_into(&mut grads[b.0], Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Bmm(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (nb, m, k, p) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
                let gd = g.data();
                if self.requires(*a) {
                    let mut ga = vec![T::zero(); nb * m * k];
                    for i in 0..nb {
                        T::gemm(
                            m,
                            p,
                            k,
                            &gd[i * m * p..(i + 1) * m * p],
                            false,
                            &vb.data()[i * k * p..(i + 1) * k * p],
                            true,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    add_into(&mut grads[a.0], Tensor::from_parts(vec![nb, m, k], ga));
                }
                if self.requires(*b) {
                    let mut gb = vec![T::zero(); nb * k * p];
                    for i in 0..nb {
                        T::gemm(
                            k,
                            m,
                            p,
                            &va.data()[i * m * k..(i + 1) * m * k],
                            true,
                            &gd[i * m * p..(i + 1) * m * p],
                            false,
                            &mut gb[i * k * p..(i + 1) * k * p],
                            false,
                        );
                    }
                    add_into(&mut grads[b.0], Tensor::from_parts(vec![nb, k, p], gb));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (vi, vk) = (self.value(*input), self.value(*kernel));
                let geo = conv_geometry(vi.shape(), vk.shape(), *stride, *padding)?;
                let (rows, n) = (geo.cols_rows(), geo.cols_len());
                let img = geo.c_in * geo.h * geo.w;
                let (need_i, need_k) = (self.requires(*input), self.requires(*kernel));
                let mut cols = vec![T::zero(); rows * n];
                let mut dcols = vec![T::zero(); rows * n];
                let mut gk = vec![T::zero(); vk.len()];
                let mut gi = vec![T::zero(); if need_i { vi.len() } else { 0 }];
                for b in 0..geo.batch {
                    let gb = &g.data()[b * geo.c_out * n..(b + 1) * geo.c_out * n];
                    if need_k {
                        geo.im2col(&vi.data()[b * img..(b + 1) * img], &mut cols);
                        T::gemm(geo.c_out, n, rows, gb, false, &cols, true, &mut gk, true);
                    }
                    if need_i {
                        T::gemm(
                            rows,
                            geo.c_out,
                            n,
                            vk.data(),
                            true,
                            gb,
                            false,
                            &mut dcols,
                            false,
                        );
                        geo.col2im(&dcols, &mut gi[b * img..(b + 1) * img]);
                    }
                }
                if need_k {
                    add_into(
                        &mut grads[kernel.0],
                        Tensor::from_parts(vk.shape().to_vec(), gk),
                    );
                }
                if need_i {
                    add_into(
                        &mut grads[input.0],
                        Tensor::from_parts(vi.shape().to_vec(), gi),
                    );
                }
            }
            Op::Softmax { x, axis } => {
                self.send(grads, *x, || {
                    let (outer, dim, inner) = axis_extents(out.shape(), *axis);
                    let (y, gd) = (out.data(), g.data());
                    let mut gx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * dim + j) * inner + i;
                            let dot: f64 = (0..dim).map(|j| (gd[at(j)] * y[at(j)]).widen()).sum();
                            let dot = T::lit(dot);
                            for j in 0..dim {
                                gx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                    Tensor::from_parts(out.shape().to_vec(), gx)
                });
            }
            Op::LogSoftmax { x, axis } => {
                self.send(grads, *x, || {
                    let (outer, dim, inner) = axis_extents(out.shape(), *axis);
                    let (y, gd) = (out.data(), g.data());
                    let mut gx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * dim + j) * inner + i;
                            let total = T::lit((0..dim).map(|j| gd[at(j)].widen()).sum::<f64>());
                            for j in 0..dim {
                                gx[at(j)] = gd[at(j)] - y[at(j)].exp() * total;
                            }
                        }
                    }
                    Tensor::from_parts(out.shape().to_vec(), gx)
                });
            }
            Op::Variance(x) => {
                let vx = self.value(*x);
                let (rows, cols) = (vx.shape()[0], vx.shape()[1]);
                self.send(grads, *x, || {
                    let (mean, _) = column_stats(vx.data(), rows, cols);
                    let scale = 2.0 / (rows as f64 - 1.0);
                    Tensor::from_fn([rows, cols], |k| {
                        let c = k % cols;
                        T::lit(scale * (vx.data()[k].widen() - mean[c]) * g.data()[c].widen())
                    })
                });
            }
            Op::Covariance(x) => {
                let vx = self.value(*x);
                let (rows, cols) = (vx.shape()[0], vx.shape()[1]);
                self.send(grads, *x, || {
                    let (mean, _) = column_stats(vx.data(), rows, cols);
                    let centered: Vec<T> = vx
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &v)| T::lit(v.widen() - mean[k % cols]))
                        .collect();
                    let scale = T::lit(1.0 / (rows as f64 - 1.0));
                    let gd = g.data();
                    let sym: Vec<T> = (0..cols * cols)
                        .map(|k| (gd[k] + gd[(k % cols) * cols + k / cols]) * scale)
                        .collect();
                    let mut gx = vec![T::zero(); rows * cols];
                    T::gemm(
                        rows, cols, cols, &centered, false, &sym, false, &mut gx, false,
                    );
                    Tensor::from_parts(vec![rows, cols], gx)
                });
            }
            Op::WeightedMean {
                votes,
                weights,
                eps,
            } => {
                let (vv, vw) = (self.value(*votes), self.value(*weights));
                let (n, s, p) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
                let (vd, wd, gd, od) = (vv.data(), vw.data(), g.data(), out.data());
                let mut den = vec![0f64; s];
                for i in 0..n {
                    for (j, d) in den.iter_mut().enumerate() {
                        *d += wd[i * s + j].widen();
                    }
                }
                let e = eps.widen();
                let inv: Vec<f64> = den.iter().map(|d| 1.0 / d.max(e)).collect();
                if self.requires(*votes) {
                    let mut gv = vec![T::zero(); vd.len()];
                    for i in 0..n {
                        for j in 0..s {
                            let w = T::lit(wd[i * s + j].widen() * inv[j]);
                            let base = (i * s + j) * p;
                            for q in 0..p {
                                gv[base + q] = w * gd[j * p + q];
                            }
                        }
                    }
                    add_into(
                        &mut grads[votes.0],
                        Tensor::from_parts(vv.shape().to_vec(), gv),
                    );
                }
                if self.requires(*weights) {
                    let mut gw = vec![T::zero(); wd.len()];
                    for i in 0..n {
                        for j in 0..s {
                            let base = (i * s + j) * p;
                            let mut acc = 0f64;
                            for q in 0..p {
                                // below the clamp the denominator is constant
                                let centre = if den[j] > e {
                                    od[j * p + q].widen()
                                } else {
                                    0.0
                                };
                                acc += (vd[base + q].widen() - centre) * gd[j * p + q].widen();
                            }
                            gw[i * s + j] = T::lit(acc * inv[j]);
                        }
                    }
                    add_into(
                        &mut grads[weights.0],
                        Tensor::from_parts(vw.shape().to_vec(), gw),
                    );
                }
            }
        }
        Ok(())
    }
}

/// Column means and unbiased variances, accumulated in `f64`.
pub(crate) fn column_stats<T: Scalar>(x: &[T], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0f64; cols];
    for r in 0..rows {
        for c in 0..cols {
            mean[c] += x[r * cols + c].widen();
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0f64; cols];
    for r in 0..rows {
        for c in 0..cols {
            let d = x[r * cols + c].widen() - mean[c];
            var[c] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= rows as f64 - 1.0);
    (mean, var)
}

pub(crate) fn covariance_f64<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<f64> {
    let (mean, _) = column_stats(x, rows, cols);
    let centered: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(k, &v)| v.widen() - mean[k % cols])
        .collect();
    let mut cov = vec![0f64; cols * cols];
    f64::gemm(
        cols, rows, cols, &centered, true, &centered, false, &mut cov, false,
    );
    let scale = 1.0 / (rows as f64 - 1.0);
    cov.iter_mut().for_each(|c| *c *= scale);
    cov
}

/// Broadcast compatibility check used by callers that build shapes ahead
/// of time.
pub fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    broadcast_shape(a, b).is_some()
}
