use crate::error::{Error, Result};
use crate::ndcore::Tensor;
use crate::scalar::Scalar;

/// `1 − Σ(y − ŷ)² / Σ(y − ȳ)²` over all entries, with `ȳ` the per-column
/// mean.
pub fn r_squared<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    if y.shape() != y_hat.shape() {
        return Err(Error::Dimension {
            op: "r_squared",
            lhs: y.shape().to_vec(),
            rhs: y_hat.shape().to_vec(),
        });
    }
    let n = y.shape()[0];
    if n < 2 {
        return Err(Error::DegenerateBatch {
            op: "r_squared",
            rows: n,
        });
    }
    let d = y.len() / n;
    let (yd, pd) = (y.data(), y_hat.data());
    let mut means = vec![0f64; d];
    for (k, v) in yd.iter().enumerate() {
        means[k % d] += v.widen() / n as f64;
    }
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for k in 0..yd.len() {
        let (t, p) = (yd[k].widen(), pd[k].widen());
        ss_res += (t - p) * (t - p);
        ss_tot += (t - means[k % d]) * (t - means[k % d]);
    }
    if ss_tot == 0.0 {
        return Err(Error::DegenerateTarget("targets have zero variance".into()));
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Index of the largest entry of every row; ties go to the lower index.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Vec<usize> {
    let n = scores.shape()[0];
    (0..n)
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn top1_accuracy<T: Scalar>(scores: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    if scores.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::Dimension {
            op: "top1_accuracy",
            lhs: scores.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let hits = argmax_rows(scores)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Per-column z-scoring fitted on one set and applied to others.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<T: Scalar>(x: &Tensor<T>) -> Result<Self> {
        let n = x.shape()[0];
        if n < 2 {
            return Err(Error::DegenerateBatch {
                op: "standardize",
                rows: n,
            });
        }
        let d = x.len() / n;
        let mut mean = vec![0f64; d];
        for (k, v) in x.data().iter().enumerate() {
            mean[k % d] += v.widen() / n as f64;
        }
        let mut var = vec![0f64; d];
        for (k, v) in x.data().iter().enumerate() {
            var[k % d] += (v.widen() - mean[k % d]).powi(2) / (n - 1) as f64;
        }
        // constant features pass through centred but unscaled
        let std = var
            .into_iter()
            .map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.mean.len();
        if x.ndim() != 2 || x.shape()[1] != d {
            return Err(Error::Dimension {
                op: "standardize",
                lhs: x.shape().to_vec(),
                rhs: vec![d],
            });
        }
        Ok(Tensor::from_fn(x.shape().to_vec(), |k| {
            T::lit((x.data()[k].widen() - self.mean[k % d]) / self.std[k % d])
        }))
    }

    /// Maps standardised values back to the original scale.
    pub fn invert<T: Scalar>(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.mean.len();
        if z.ndim() != 2 || z.shape()[1] != d {
            return Err(Error::Dimension {
                op: "standardize",
                lhs: z.shape().to_vec(),
                rhs: vec![d],
            });
        }
        Ok(Tensor::from_fn(z.shape().to_vec(), |k| {
            T::lit(z.data()[k].widen() * self.std[k % d] + self.mean[k % d])
        }))
    }
}
