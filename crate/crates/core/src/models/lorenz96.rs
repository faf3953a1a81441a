use nalgebra::DMatrix;

use super::{add_sym, OdeModel};
use crate::error::{Error, Result};

/// Lorenz-96 with per-component parameters:
///
/// `dXⱼ/dt = θ₁ⱼ (Xⱼ₊₁ − Xⱼ₋₂) Xⱼ₋₁ − θ₂ⱼ Xⱼ + θ₃ⱼ`, indices cyclic.
///
/// The parameter vector is grouped per component:
/// `θ = (θ₁₁, θ₂₁, θ₃₁, θ₁₂, θ₂₂, θ₃₂, …)`.
#[derive(Debug, Clone)]
pub struct Lorenz96 {
    p: usize,
}

impl Lorenz96 {
    pub fn new(p: usize) -> Result<Self> {
        if p < 3 {
            return Err(Error::Input(format!("lorenz96 needs p >= 3, got {p}")));
        }
        Ok(Self { p })
    }

    /// Cyclic neighbours `(j+1, j−1, j−2)`.
    #[inline]
    fn neighbours(&self, j: usize) -> (usize, usize, usize) {
        let p = self.p;
        ((j + 1) % p, (j + p - 1) % p, (j + p - 2) % p)
    }
}

impl OdeModel for Lorenz96 {
    fn name(&self) -> &str {
        "lorenz96"
    }

    fn state_dim(&self) -> usize {
        self.p
    }

    fn param_dim(&self) -> usize {
        3 * self.p
    }

    fn rhs(&self, x: &[f64], _t: f64, theta: &[f64], out: &mut [f64]) {
        for j in 0..self.p {
            let (jp1, jm1, jm2) = self.neighbours(j);
            let th = &theta[3 * j..3 * j + 3];
            out[j] = th[0] * (x[jp1] - x[jm2]) * x[jm1] - th[1] * x[j] + th[2];
        }
    }

    fn jacobians(&self, x: &[f64], _t: f64, theta: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let p = self.p;
        let mut jx = DMatrix::zeros(p, p);
        let mut jt = DMatrix::zeros(p, 3 * p);
        for j in 0..p {
            let (jp1, jm1, jm2) = self.neighbours(j);
            let th = &theta[3 * j..3 * j + 3];
            // accumulate: for p = 3, j+1 and j−2 coincide
            jx[(j, jp1)] += th[0] * x[jm1];
            jx[(j, jm2)] -= th[0] * x[jm1];
            jx[(j, jm1)] += th[0] * (x[jp1] - x[jm2]);
            jx[(j, j)] -= th[1];
            jt[(j, 3 * j)] = (x[jp1] - x[jm2]) * x[jm1];
            jt[(j, 3 * j + 1)] = -x[j];
            jt[(j, 3 * j + 2)] = 1.0;
        }
        (jx, jt)
    }

    fn hessians(&self, x: &[f64], _t: f64, theta: &[f64]) -> Vec<DMatrix<f64>> {
        let p = self.p;
        let d = 4 * p;
        (0..p)
            .map(|j| {
                let (jp1, jm1, jm2) = self.neighbours(j);
                let th1 = theta[3 * j];
                let (a1, a2) = (p + 3 * j, p + 3 * j + 1);
                let mut h = DMatrix::zeros(d, d);
                add_sym(&mut h, jp1, jm1, th1);
                add_sym(&mut h, jm2, jm1, -th1);
                add_sym(&mut h, jp1, a1, x[jm1]);
                add_sym(&mut h, jm2, a1, -x[jm1]);
                add_sym(&mut h, jm1, a1, x[jp1] - x[jm2]);
                add_sym(&mut h, j, a2, -1.0);
                h
            })
            .collect()
    }

    fn param_labels(&self) -> Vec<String> {
        (1..=self.p)
            .flat_map(|j| (1..=3).map(move |k| format!("theta{k}_{j}")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{eval_hessians, eval_rhs};

    #[test]
    fn cyclic_first_component() {
        let m = Lorenz96::new(4).unwrap();
        let theta = [1.0, 1.0, 8.0].repeat(4);
        let f = eval_rhs(&m, &[1.0, 8.0, 4.0, 3.0], 0.0, &theta).unwrap();
        assert_eq!(f[0], 19.0);
    }

    #[test]
    fn pure_parameter_block_vanishes() {
        let m = Lorenz96::new(5).unwrap();
        let theta: Vec<f64> = (0..15).map(|k| 0.5 + k as f64 * 0.1).collect();
        let x = [0.3, -1.0, 2.0, 4.0, 1.5];
        for h in eval_hessians(&m, &x, 0.0, &theta).unwrap() {
            for a in 5..20 {
                for b in 5..20 {
                    assert_eq!(h[(a, b)], 0.0);
                }
            }
        }
    }

    #[test]
    fn rotation_invariance() {
        let m = Lorenz96::new(6).unwrap();
        let x = [0.3, -1.0, 2.0, 4.0, 1.5, 7.0];
        let theta: Vec<f64> = (0..18).map(|k| 0.5 + (k as f64 * 0.37).sin()).collect();
        let f = eval_rhs(&m, &x, 0.0, &theta).unwrap();
        for shift in 1..6 {
            let xr: Vec<f64> = (0..6).map(|j| x[(j + shift) % 6]).collect();
            let tr: Vec<f64> = (0..18).map(|k| theta[(k + 3 * shift) % 18]).collect();
            let fr = eval_rhs(&m, &xr, 0.0, &tr).unwrap();
            for j in 0..6 {
                assert_eq!(fr[j], f[(j + shift) % 6]);
            }
        }
    }

    #[test]
    fn rejects_small_dimension() {
        assert!(Lorenz96::new(2).is_err());
    }
}
