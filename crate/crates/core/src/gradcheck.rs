//! Central finite-difference checks for the full scoring pipeline.

use crate::error::Result;
use crate::model::{Gradients, ModelConfig, ModelParams, Query, TRAINABLE};
use crate::tensor::{Matrix, Mode};
use crate::train::forward_backward;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative errors, so entries whose true gradient is
/// zero are judged by absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x + h) - f(x - h)) / 2h` for every coordinate of `x`.
pub fn central_differences(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + step;
            let up = f(&p);
            p[i] = x[i] - step;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Worst relative error per trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub per_tensor: Vec<(&'static str, usize, f64)>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.per_tensor.iter().map(|t| t.2).fold(0.0, f64::max)
    }
}

/// Compares the analytic gradient of the mean BCE loss with central finite
/// differences, perturbing one entry of one tensor at a time. Dropout must be
/// off, since each loss evaluation is a fresh forward pass.
pub fn check_loss_gradients(
    params: &ModelParams,
    config: &ModelConfig,
    queries: &[Query],
    targets: &Matrix,
    mode: Mode,
) -> Result<GradCheck> {
    let analytic: Gradients = forward_backward(params, config, queries, targets, mode, None)?.grads;
    let slots = analytic.slots();
    let mut per_tensor = Vec::new();
    for (name, grad) in TRAINABLE.iter().zip(slots) {
        if grad.is_empty() || (!config.batchnorm && name.starts_with("bn_")) {
            continue;
        }
        let base: Vec<f64> = params
            .tensors()
            .into_iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, d)| d.to_vec())
            .expect("trainable tensor");
        let mut work = params.clone();
        let mut err = None;
        let numeric = central_differences(
            |x| {
                work.tensor_mut(name).expect("tensor").copy_from_slice(x);
                match forward_backward(&work, config, queries, targets, mode, None) {
                    Ok(s) => s.loss,
                    Err(e) => {
                        err.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &base,
            FD_STEP,
        );
        if let Some(e) = err {
            return Err(e);
        }
        let worst = grad
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        per_tensor.push((*name, grad.len(), worst));
    }
    Ok(GradCheck { per_tensor })
}
