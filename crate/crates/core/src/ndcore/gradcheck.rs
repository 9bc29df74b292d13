//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used here, so the check is independent of
//! the backward implementation it validates.

use crate::error::Result;
use crate::ndcore::{Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Outcome of [`check`]; one relative error per input tensor.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub relative_errors: Vec<f64>,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

impl GradReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute error when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Compares the analytic gradient of the scalar built by `f` against
/// central differences with step `h`, for every element of every input.
pub fn check<T, F>(inputs: &[Tensor<T>], f: F, h: f64) -> Result<GradReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.variable(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v).cast()).collect();

    let eval = |values: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = values
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item().widen())
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut grad = vec![0f64; inputs[k].len()];
        for (e, slot) in grad.iter_mut().enumerate() {
            let orig = inputs[k].data()[e];
            work[k].data_mut()[e] = orig + T::lit(h);
            let plus = eval(&work)?;
            work[k].data_mut()[e] = orig - T::lit(h);
            let minus = eval(&work)?;
            work[k].data_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        numeric.push(Tensor::from_parts(inputs[k].shape().to_vec(), grad));
    }
    let relative_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n.data()))
        .collect();
    Ok(GradReport {
        relative_errors,
        analytic,
        numeric,
    })
}
