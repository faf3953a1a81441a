use nalgebra::DMatrix;

use super::{add_sym, OdeModel};
use crate::error::{Error, Result};

/// FitzHugh-Nagumo oscillator, `θ = (a, b, c)`:
///
/// ```text
/// ẋ₁ = c (x₁ − x₁³/3 + x₂)
/// ẋ₂ = −(x₁ − a + b x₂) / c
/// ```
#[derive(Debug, Clone, Copy, Default)]
pub struct FitzHughNagumo;

impl OdeModel for FitzHughNagumo {
    fn name(&self) -> &str {
        "fitzhugh-nagumo"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn param_dim(&self) -> usize {
        3
    }

    fn rhs(&self, x: &[f64], _t: f64, theta: &[f64], out: &mut [f64]) {
        let (x1, x2) = (x[0], x[1]);
        let (a, b, c) = (theta[0], theta[1], theta[2]);
        out[0] = c * (x1 - x1 * x1 * x1 / 3.0 + x2);
        out[1] = -(x1 - a + b * x2) / c;
    }

    fn jacobians(&self, x: &[f64], _t: f64, theta: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let (x1, x2) = (x[0], x[1]);
        let (a, b, c) = (theta[0], theta[1], theta[2]);
        let s = x1 - a + b * x2;
        let jx = DMatrix::from_row_slice(2, 2, &[c * (1.0 - x1 * x1), c, -1.0 / c, -b / c]);
        let jt = DMatrix::from_row_slice(
            2,
            3,
            &[0.0, 0.0, x1 - x1 * x1 * x1 / 3.0 + x2, 1.0 / c, -x2 / c, s / (c * c)],
        );
        (jx, jt)
    }

    fn hessians(&self, x: &[f64], _t: f64, theta: &[f64]) -> Vec<DMatrix<f64>> {
        // u = (x1, x2, a, b, c)
        let (x1, x2) = (x[0], x[1]);
        let (a, b, c) = (theta[0], theta[1], theta[2]);
        let s = x1 - a + b * x2;
        let c2 = c * c;

        let mut h1 = DMatrix::zeros(5, 5);
        add_sym(&mut h1, 0, 0, -2.0 * c * x1);
        add_sym(&mut h1, 0, 4, 1.0 - x1 * x1);
        add_sym(&mut h1, 1, 4, 1.0);

        let mut h2 = DMatrix::zeros(5, 5);
        add_sym(&mut h2, 0, 4, 1.0 / c2);
        add_sym(&mut h2, 1, 3, -1.0 / c);
        add_sym(&mut h2, 1, 4, b / c2);
        add_sym(&mut h2, 2, 4, -1.0 / c2);
        add_sym(&mut h2, 3, 4, x2 / c2);
        add_sym(&mut h2, 4, 4, -2.0 * s / (c2 * c));
        vec![h1, h2]
    }

    fn check_params(&self, theta: &[f64]) -> Result<()> {
        if theta[2] == 0.0 || !theta[2].is_finite() {
            return Err(Error::Domain(format!(
                "fitzhugh-nagumo requires a finite non-zero third parameter, got {}",
                theta[2]
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{eval_hessians, eval_jacobians, eval_rhs};

    #[test]
    fn rhs_at_reference_point() {
        let f = eval_rhs(&FitzHughNagumo, &[-1.0, -1.0], 3.7, &[0.2, 0.2, 3.0]).unwrap();
        assert!((f[0] + 5.0).abs() < 1e-14);
        assert!((f[1] - 1.4 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn jacobian_at_origin() {
        let (jx, _) = eval_jacobians(&FitzHughNagumo, &[0.0, 0.0], 0.0, &[0.2, 0.2, 3.0]).unwrap();
        assert_eq!(jx[(0, 0)], 3.0);
    }

    #[test]
    fn curvature_in_first_state() {
        let h = eval_hessians(&FitzHughNagumo, &[-1.0, 0.5], 0.0, &[0.2, 0.2, 3.0]).unwrap();
        assert_eq!(h[0][(0, 0)], 6.0);
    }

    #[test]
    fn zero_time_scale_rejected() {
        assert!(matches!(
            eval_rhs(&FitzHughNagumo, &[0.0, 0.0], 0.0, &[0.2, 0.2, 0.0]),
            Err(Error::Domain(_))
        ));
    }
}
