use nalgebra::DMatrix;

use super::OdeModel;

/// Scalar test model `ẋ = θ₁ x` with closed-form solution `x₀ e^{θ₁ t}`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearTest;

impl OdeModel for LinearTest {
    fn name(&self) -> &str {
        "linear-test"
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        1
    }

    fn rhs(&self, x: &[f64], _t: f64, theta: &[f64], out: &mut [f64]) {
        out[0] = theta[0] * x[0];
    }

    fn jacobians(&self, x: &[f64], _t: f64, theta: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        (DMatrix::from_element(1, 1, theta[0]), DMatrix::from_element(1, 1, x[0]))
    }

    fn hessians(&self, _x: &[f64], _t: f64, _theta: &[f64]) -> Vec<DMatrix<f64>> {
        vec![DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])]
    }
}
