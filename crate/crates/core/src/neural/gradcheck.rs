//! Central finite-difference gradient verification.

use super::loss::Reduction;
use super::network::Network;
use super::tensor::Tensor;
use super::train::{batch_loss, loss_and_gradients, Targets};
use super::NeuralError;

/// Denominator floor below which relative error degrades to absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` for every parameter.
pub fn numeric_gradient<F>(params: &[f64], h: f64, mut f: F) -> Result<Vec<f64>, NeuralError>
where
    F: FnMut(&[f64]) -> Result<f64, NeuralError>,
{
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p)?;
        p[i] = orig - h;
        let down = f(&p)?;
        p[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares backpropagated gradients with central finite differences of the loss.
pub fn check_gradients(
    net: &Network,
    inputs: &Tensor,
    targets: &Targets,
    h: f64,
) -> Result<GradCheckReport, NeuralError> {
    let (_, analytic) = loss_and_gradients(net, inputs, targets, Reduction::Sum)?;
    let mut probe = net.clone();
    let numeric = numeric_gradient(net.params(), h, |p| {
        probe.set_params(p)?;
        let out = probe.forward(inputs)?.into_mat()?;
        Ok(batch_loss(probe.spec().loss, &out, targets, Reduction::Sum)?.0)
    })?;
    let (worst_index, max_relative_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    Ok(GradCheckReport { max_relative_error, worst_index, analytic, numeric })
}
