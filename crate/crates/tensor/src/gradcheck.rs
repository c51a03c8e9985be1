//! Central finite-difference checks for tape-built functions.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-input comparison between tape gradients and finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`, or the plain
    /// difference norm when both gradients are below `1e-7`.
    pub rel_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare the gradient of a scalar function of `inputs` against central
/// differences with step `eps`.
pub fn check<T, F>(inputs: &[Tensor<T>], eps: f64, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_, T>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = out.backward()?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, T>> = xs.iter().map(|t| tape.param(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item().to_f64().unwrap_or(f64::NAN))
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = input.data()[i].to_f64().unwrap();
            work[k].data_mut()[i] = T::from_f64_lossy(x0 + eps);
            let plus = eval(&work)?;
            work[k].data_mut()[i] = T::from_f64_lossy(x0 - eps);
            let minus = eval(&work)?;
            work[k].data_mut()[i] = input.data()[i];
            *slot = (plus - minus) / (2.0 * eps);
        }
        let a = analytic[k].to_f64_vec();
        let diff = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = na.max(nn);
        rel_errors.push(if scale < 1e-7 { diff } else { diff / scale });
    }
    Ok(GradCheckReport { rel_errors })
}
