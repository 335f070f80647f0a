//! Central finite differences for checking analytic gradients.
//!
//! The numeric side only ever evaluates the loss, so it shares no code
//! with the backward pass it is compared against.

use super::Tensor;

/// Denominator floor for the relative error, so gradients that are
/// essentially zero are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub tensor: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst: Option<Mismatch>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// `∂loss/∂p ≈ (loss(p + h) − loss(p − h)) / 2h` for every element.
pub fn numeric_gradients(
    params: &[Tensor<f64>],
    step: f64,
    mut loss: impl FnMut(&[Tensor<f64>]) -> f64,
) -> Vec<Tensor<f64>> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut grad = Tensor::zeros(params[i].shape().to_vec());
        for e in 0..params[i].len() {
            let original = work[i].data()[e];
            work[i].data_mut()[e] = original + step;
            let up = loss(&work);
            work[i].data_mut()[e] = original - step;
            let down = loss(&work);
            work[i].data_mut()[e] = original;
            grad.data_mut()[e] = (up - down) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

pub fn compare(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut report = GradCheckReport::default();
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert_eq!(a.shape(), n.shape(), "gradient shape mismatch for tensor {i}");
        for (e, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            report.checked += 1;
            let err = relative_error(x, y);
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some(Mismatch {
                    tensor: i,
                    element: e,
                    analytic: x,
                    numeric: y,
                    relative_error: err,
                });
            }
        }
    }
    report
}
