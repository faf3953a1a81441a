//! ODE models with analytic derivative oracles.
//!
//! Every model exposes `f(x, t; θ)`, the Jacobians `∂f/∂x` (p×p) and
//! `∂f/∂θ` (p×q), and one symmetric `(p+q)×(p+q)` Hessian per output
//! component, taken with respect to the joined vector `u = (xᵀ, θᵀ)ᵀ`.

mod fitzhugh_nagumo;
mod linear;
mod lorenz96;
mod sir;
mod spline;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fitzhugh_nagumo::FitzHughNagumo;
pub use linear::LinearTest;
pub use lorenz96::Lorenz96;
pub use sir::{make_sir_model, TimeVaryingSir};
pub use spline::{eval_spline_basis, SplineBasis};

/// An ODE right-hand side `ẋ = f(x, t; θ)` with hand-coded derivatives.
///
/// Implementations are immutable and may be shared between threads.
pub trait OdeModel: Send + Sync {
    fn name(&self) -> &str;

    /// State dimension `p`.
    fn state_dim(&self) -> usize;

    /// Parameter dimension `q`.
    fn param_dim(&self) -> usize;

    /// Writes `f(x, t; θ)` into `out` (length `p`).
    fn rhs(&self, x: &[f64], t: f64, theta: &[f64], out: &mut [f64]);

    /// Returns `(∂f/∂x, ∂f/∂θ)`.
    fn jacobians(&self, x: &[f64], t: f64, theta: &[f64]) -> (DMatrix<f64>, DMatrix<f64>);

    /// One symmetric Hessian per output component, w.r.t. `u = (x, θ)`.
    fn hessians(&self, x: &[f64], t: f64, theta: &[f64]) -> Vec<DMatrix<f64>>;

    /// Rejects parameter vectors for which the right-hand side is undefined.
    fn check_params(&self, _theta: &[f64]) -> Result<()> {
        Ok(())
    }

    fn state_labels(&self) -> Vec<String> {
        (1..=self.state_dim()).map(|j| format!("x{j}")).collect()
    }

    fn param_labels(&self) -> Vec<String> {
        (1..=self.param_dim()).map(|k| format!("theta{k}")).collect()
    }
}

/// Model selection block as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Lorenz96Config {
    #[serde(default = "default_l96_p")]
    p: usize,
}

fn default_l96_p() -> usize {
    4
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SirConfig {
    #[serde(default = "default_n_basis")]
    n_basis_beta: usize,
    #[serde(default = "default_n_basis")]
    n_basis_gamma: usize,
    #[serde(rename = "N")]
    population: f64,
    window: (f64, f64),
}

fn default_n_basis() -> usize {
    30
}

/// Builds a registered model from its name and JSON config block.
///
/// Names: `fitzhugh-nagumo`, `lorenz96` (`{"p": 4}`), `linear-test`, and
/// `sir-tv` (`{"n_basis_beta", "n_basis_gamma", "N", "window": [t0, t1]}`).
pub fn build_model(spec: &ModelSpec) -> Result<Arc<dyn OdeModel>> {
    let cfg = if spec.config.is_null() {
        serde_json::Value::Object(Default::default())
    } else {
        spec.config.clone()
    };
    match spec.name.as_str() {
        "fitzhugh-nagumo" => Ok(Arc::new(FitzHughNagumo)),
        "linear-test" => Ok(Arc::new(LinearTest)),
        "lorenz96" => {
            let c: Lorenz96Config = serde_json::from_value(cfg)
                .map_err(|e| Error::Input(format!("lorenz96 config: {e}")))?;
            Ok(Arc::new(Lorenz96::new(c.p)?))
        }
        "sir-tv" => {
            let c: SirConfig = serde_json::from_value(cfg)
                .map_err(|e| Error::Input(format!("sir-tv config: {e}")))?;
            let (t0, t1) = c.window;
            let beta = SplineBasis::clamped_uniform(c.n_basis_beta, t0, t1)?;
            let gamma = SplineBasis::clamped_uniform(c.n_basis_gamma, t0, t1)?;
            Ok(Arc::new(make_sir_model(beta, gamma, c.population)?))
        }
        other => Err(Error::Input(format!("unknown model '{other}'"))),
    }
}

fn check_dims(model: &dyn OdeModel, x: &[f64], theta: &[f64]) -> Result<()> {
    if x.len() != model.state_dim() {
        return Err(Error::Dimension(format!(
            "{}: state has length {}, expected {}",
            model.name(),
            x.len(),
            model.state_dim()
        )));
    }
    if theta.len() != model.param_dim() {
        return Err(Error::Dimension(format!(
            "{}: parameter vector has length {}, expected {}",
            model.name(),
            theta.len(),
            model.param_dim()
        )));
    }
    model.check_params(theta)
}

pub fn eval_rhs(model: &dyn OdeModel, x: &[f64], t: f64, theta: &[f64]) -> Result<DVector<f64>> {
    check_dims(model, x, theta)?;
    let mut out = DVector::zeros(model.state_dim());
    model.rhs(x, t, theta, out.as_mut_slice());
    Ok(out)
}

pub fn eval_jacobians(
    model: &dyn OdeModel,
    x: &[f64],
    t: f64,
    theta: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_dims(model, x, theta)?;
    Ok(model.jacobians(x, t, theta))
}

pub fn eval_hessians(
    model: &dyn OdeModel,
    x: &[f64],
    t: f64,
    theta: &[f64],
) -> Result<Vec<DMatrix<f64>>> {
    check_dims(model, x, theta)?;
    Ok(model.hessians(x, t, theta))
}

/// Output of [`fd_derivative_oracle`].
#[derive(Debug, Clone)]
pub enum FdDerivatives {
    First { jac_x: DMatrix<f64>, jac_theta: DMatrix<f64> },
    Second { hessians: Vec<DMatrix<f64>> },
}

/// Default relative step for central differences.
pub const FD_REL_STEP: f64 = 1e-5;

/// Central-difference step for a coordinate of magnitude `value`.
pub fn fd_step(rel: f64, value: f64) -> f64 {
    rel * value.abs().max(1.0)
}

/// Central finite-difference counterparts of the analytic derivatives.
///
/// Order 1 differentiates `rhs`; order 2 differentiates the analytic
/// Jacobians (one derivative order lower), so a passing order-2 check
/// certifies the Hessians relative to Jacobians already certified by order 1.
/// Second-order output is symmetrised.
pub fn fd_derivative_oracle(
    model: &dyn OdeModel,
    x: &[f64],
    t: f64,
    theta: &[f64],
    order: u8,
    rel_step: Option<f64>,
) -> Result<FdDerivatives> {
    check_dims(model, x, theta)?;
    let rel = rel_step.unwrap_or(FD_REL_STEP);
    let (p, q) = (model.state_dim(), model.param_dim());
    let mut u: Vec<f64> = x.iter().chain(theta.iter()).copied().collect();
    match order {
        1 => {
            let mut jac = DMatrix::zeros(p, p + q);
            let mut fp = vec![0.0; p];
            let mut fm = vec![0.0; p];
            for a in 0..p + q {
                let h = fd_step(rel, u[a]);
                let orig = u[a];
                u[a] = orig + h;
                model.rhs(&u[..p], t, &u[p..], &mut fp);
                u[a] = orig - h;
                model.rhs(&u[..p], t, &u[p..], &mut fm);
                u[a] = orig;
                for j in 0..p {
                    jac[(j, a)] = (fp[j] - fm[j]) / (2.0 * h);
                }
            }
            Ok(FdDerivatives::First {
                jac_x: jac.columns(0, p).into_owned(),
                jac_theta: jac.columns(p, q).into_owned(),
            })
        }
        2 => {
            let d = p + q;
            let mut hess = vec![DMatrix::zeros(d, d); p];
            for b in 0..d {
                let h = fd_step(rel, u[b]);
                let orig = u[b];
                u[b] = orig + h;
                let (jxp, jtp) = model.jacobians(&u[..p], t, &u[p..]);
                u[b] = orig - h;
                let (jxm, jtm) = model.jacobians(&u[..p], t, &u[p..]);
                u[b] = orig;
                for (j, hj) in hess.iter_mut().enumerate() {
                    for a in 0..d {
                        let (vp, vm) = if a < p {
                            (jxp[(j, a)], jxm[(j, a)])
                        } else {
                            (jtp[(j, a - p)], jtm[(j, a - p)])
                        };
                        hj[(a, b)] = (vp - vm) / (2.0 * h);
                    }
                }
            }
            for hj in hess.iter_mut() {
                let sym = (&*hj + hj.transpose()) * 0.5;
                *hj = sym;
            }
            Ok(FdDerivatives::Second { hessians: hess })
        }
        other => Err(Error::Input(format!("finite-difference order must be 1 or 2, got {other}"))),
    }
}

/// Adds `v` at `(a, b)` and `(b, a)` of a Hessian; for `a == b` adds once.
pub(crate) fn add_sym(h: &mut DMatrix<f64>, a: usize, b: usize, v: f64) {
    h[(a, b)] += v;
    if a != b {
        h[(b, a)] += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rel_err;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_points(model: &dyn OdeModel, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, Vec<f64>) {
        let p = model.state_dim();
        let q = model.param_dim();
        match model.name() {
            "sir-tv" => {
                let i = rng.random_range(10.0..2000.0);
                let r = rng.random_range(0.0..3000.0);
                let theta = (0..q).map(|_| rng.random_range(-3.0..-0.5)).collect();
                (vec![i, r], rng.random_range(0.0..50.0), theta)
            }
            "fitzhugh-nagumo" => (
                (0..p).map(|_| rng.random_range(-2.5..2.5)).collect(),
                rng.random_range(0.0..20.0),
                vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(1.0..5.0)],
            ),
            _ => (
                (0..p).map(|_| rng.random_range(-5.0..10.0)).collect(),
                rng.random_range(0.0..5.0),
                (0..q).map(|_| rng.random_range(0.2..2.0)).collect(),
            ),
        }
    }

    fn registered() -> Vec<Arc<dyn OdeModel>> {
        vec![
            build_model(&ModelSpec { name: "fitzhugh-nagumo".into(), config: serde_json::Value::Null }).unwrap(),
            build_model(&ModelSpec { name: "lorenz96".into(), config: serde_json::json!({"p": 4}) }).unwrap(),
            build_model(&ModelSpec { name: "lorenz96".into(), config: serde_json::json!({"p": 3}) }).unwrap(),
            build_model(&ModelSpec { name: "linear-test".into(), config: serde_json::Value::Null }).unwrap(),
            build_model(&ModelSpec {
                name: "sir-tv".into(),
                config: serde_json::json!({"n_basis_beta": 6, "n_basis_gamma": 5, "N": 10000.0, "window": [0.0, 50.0]}),
            })
            .unwrap(),
        ]
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for model in registered() {
            for _ in 0..100 {
                let (x, t, theta) = sample_points(model.as_ref(), &mut rng);
                let (jx, jt) = eval_jacobians(model.as_ref(), &x, t, &theta).unwrap();
                let FdDerivatives::First { jac_x, jac_theta } =
                    fd_derivative_oracle(model.as_ref(), &x, t, &theta, 1, Some(1e-6)).unwrap()
                else {
                    unreachable!()
                };
                assert!(rel_err(&jx, &jac_x) <= 1e-6, "{} jac_x", model.name());
                assert!(rel_err(&jt, &jac_theta) <= 1e-6, "{} jac_theta", model.name());
                let hs = eval_hessians(model.as_ref(), &x, t, &theta).unwrap();
                let FdDerivatives::Second { hessians } =
                    fd_derivative_oracle(model.as_ref(), &x, t, &theta, 2, None).unwrap()
                else {
                    unreachable!()
                };
                for (h, fd) in hs.iter().zip(&hessians) {
                    assert!(rel_err(h, fd) <= 1e-5, "{} hessian", model.name());
                    assert_eq!(h, &h.transpose(), "{} hessian symmetry", model.name());
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_input_error() {
        let m = FitzHughNagumo;
        assert!(matches!(eval_rhs(&m, &[1.0], 0.0, &[0.2, 0.2, 3.0]), Err(Error::Dimension(_))));
        assert!(matches!(eval_jacobians(&m, &[1.0, 1.0], 0.0, &[0.2]), Err(Error::Dimension(_))));
    }

    #[test]
    fn fd_first_order_on_linear_model() {
        let m = LinearTest;
        let FdDerivatives::First { jac_x, jac_theta } =
            fd_derivative_oracle(&m, &[2.0], 0.0, &[-1.0], 1, None).unwrap()
        else {
            unreachable!()
        };
        assert!((jac_x[(0, 0)] + 1.0).abs() < 1e-8);
        assert!((jac_theta[(0, 0)] - 2.0).abs() < 1e-8);
    }

    struct ConstantField;

    impl OdeModel for ConstantField {
        fn name(&self) -> &str {
            "constant"
        }
        fn state_dim(&self) -> usize {
            2
        }
        fn param_dim(&self) -> usize {
            1
        }
        fn rhs(&self, _x: &[f64], _t: f64, _theta: &[f64], out: &mut [f64]) {
            out.copy_from_slice(&[1.5, -0.5]);
        }
        fn jacobians(&self, _x: &[f64], _t: f64, _theta: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
            (DMatrix::zeros(2, 2), DMatrix::zeros(2, 1))
        }
        fn hessians(&self, _x: &[f64], _t: f64, _theta: &[f64]) -> Vec<DMatrix<f64>> {
            vec![DMatrix::zeros(3, 3); 2]
        }
    }

    #[test]
    fn fd_second_order_on_constant_rhs_is_zero() {
        let FdDerivatives::Second { hessians } =
            fd_derivative_oracle(&ConstantField, &[0.3, 7.0], 1.0, &[2.0], 2, None).unwrap()
        else {
            unreachable!()
        };
        for h in &hessians {
            assert_eq!(h, &DMatrix::zeros(3, 3));
        }
        let FdDerivatives::First { jac_x, .. } =
            fd_derivative_oracle(&ConstantField, &[0.3, 7.0], 1.0, &[2.0], 1, None).unwrap()
        else {
            unreachable!()
        };
        assert_eq!(jac_x, DMatrix::zeros(2, 2));
    }

    #[test]
    fn unknown_model_name_rejected() {
        let r = build_model(&ModelSpec { name: "van-der-pol".into(), config: serde_json::Value::Null });
        assert!(matches!(r, Err(Error::Input(_))));
    }
}
