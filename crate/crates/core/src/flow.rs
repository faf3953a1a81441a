//! The RK4 transition map and exact derivative propagation.
//!
//! One step of classical RK4,
//!
//! ```text
//! g(x, t, θ) = x + (K₁ + 2K₂ + 2K₃ + K₄) / 6
//! K₁ = h f(x, t; θ)
//! K₂ = h f(x + K₁/2, t + h/2; θ)
//! K₃ = h f(x + K₂/2, t + h/2; θ)
//! K₄ = h f(x + K₃,   t + h;   θ)
//! ```
//!
//! is differentiated forward through the four stages with respect to
//! `u = (x, θ)`. Stage `s` evaluates `f` at `v = (x + c·K_{s−1}, θ)`, whose
//! Jacobian is the block matrix `[[I + c·∂K/∂x, c·∂K/∂θ], [0, I]]`, so the
//! stage Hessian is the `f`-Jacobian-weighted previous-stage Hessian plus
//! the sandwich `J_vᵀ H_f J_v`. The m-fold composition with inner step
//! `h/m` repeats the same chain rule once per substep.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::mirror_upper;
use crate::models::OdeModel;

/// Observation-interval length `h` and its subdivision count `m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub h: f64,
    pub m: usize,
}

impl StepConfig {
    pub fn new(h: f64, m: usize) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Input(format!("step length must be positive, got {h}")));
        }
        if m == 0 {
            return Err(Error::Input("subdivision count m must be at least 1".into()));
        }
        Ok(Self { h, m })
    }
}

/// Value, Jacobians and per-output Hessians (w.r.t. `u = (x, θ)`) of a flow map.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDerivatives {
    pub value: DVector<f64>,
    pub jac_x: DMatrix<f64>,
    pub jac_theta: DMatrix<f64>,
    pub hessians: Vec<DMatrix<f64>>,
}

/// How many derivative orders to propagate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    Value,
    First,
    Second,
}

struct Propagated {
    value: DVector<f64>,
    /// `p × (p+q)` Jacobian w.r.t. `u`.
    jac: DMatrix<f64>,
    hess: Vec<DMatrix<f64>>,
}

fn check_inputs(model: &dyn OdeModel, x: &[f64], theta: &[f64], h: f64) -> Result<()> {
    if x.len() != model.state_dim() || theta.len() != model.param_dim() {
        return Err(Error::Dimension(format!(
            "{}: expected state/parameter lengths {}/{}, got {}/{}",
            model.name(),
            model.state_dim(),
            model.param_dim(),
            x.len(),
            theta.len()
        )));
    }
    if !(h >= 0.0) || !h.is_finite() {
        return Err(Error::Input(format!("step length must be non-negative, got {h}")));
    }
    model.check_params(theta)
}

fn ensure_finite(v: &[f64], stage: usize) -> Result<()> {
    if v.iter().all(|z| z.is_finite()) {
        Ok(())
    } else {
        Err(Error::Overflow { stage })
    }
}

/// `Aᵀ H A` for symmetric `H`, returned exactly symmetric.
fn sandwich(a: &DMatrix<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
    let ha = h * a;
    let mut out = a.transpose() * ha;
    mirror_upper(&mut out);
    out
}

/// One RK4 step with derivatives up to `order`; no input validation.
fn rk4_raw(model: &dyn OdeModel, x: &[f64], t: f64, theta: &[f64], h: f64, order: Order) -> Result<Propagated> {
    let p = model.state_dim();
    let q = model.param_dim();
    let d = p + q;
    const COEF: [f64; 4] = [0.0, 0.5, 0.5, 1.0];
    const WEIGHT: [f64; 4] = [1.0, 2.0, 2.0, 1.0];

    let mut value = DVector::from_column_slice(x);
    let mut jac = if order >= Order::First {
        let mut j = DMatrix::zeros(p, d);
        j.view_mut((0, 0), (p, p)).fill_with_identity();
        j
    } else {
        DMatrix::zeros(0, 0)
    };
    let mut hess = if order >= Order::Second { vec![DMatrix::zeros(d, d); p] } else { Vec::new() };

    let mut k_prev = vec![0.0; p];
    let mut jk_prev: Option<DMatrix<f64>> = None;
    let mut hk_prev: Vec<DMatrix<f64>> = Vec::new();
    let mut v = vec![0.0; p];
    let mut f = vec![0.0; p];

    for s in 0..4 {
        let c = COEF[s];
        for i in 0..p {
            v[i] = x[i] + c * k_prev[i];
        }
        let ts = t + c * h;
        model.rhs(&v, ts, theta, &mut f);
        let k: Vec<f64> = f.iter().map(|fi| h * fi).collect();
        ensure_finite(&k, s + 1)?;

        let mut jk = None;
        let mut hk = Vec::new();
        if order >= Order::First {
            let (jfx, jft) = model.jacobians(&v, ts, theta);
            // top block of J_v: [I_p, 0] + c·J_{K_prev}
            let mut top = DMatrix::zeros(p, d);
            top.view_mut((0, 0), (p, p)).fill_with_identity();
            if let Some(jp) = &jk_prev {
                top += jp * c;
            }
            let mut j_stage = &jfx * &top;
            {
                let mut right = j_stage.view_mut((0, p), (p, q));
                right += &jft;
            }
            j_stage *= h;
            ensure_finite(j_stage.as_slice(), s + 1)?;

            if order >= Order::Second {
                let hf = model.hessians(&v, ts, theta);
                let mut jv = DMatrix::zeros(d, d);
                jv.view_mut((0, 0), (p, d)).copy_from(&top);
                jv.view_mut((p, p), (q, q)).fill_with_identity();
                for j in 0..p {
                    let mut hj = sandwich(&jv, &hf[j]);
                    if !hk_prev.is_empty() {
                        for (kk, hprev) in hk_prev.iter().enumerate() {
                            let w = jfx[(j, kk)] * c;
                            if w != 0.0 {
                                hj += hprev * w;
                            }
                        }
                    }
                    hj *= h;
                    ensure_finite(hj.as_slice(), s + 1)?;
                    hk.push(hj);
                }
            }
            jk = Some(j_stage);
        }

        let w = WEIGHT[s] / 6.0;
        for i in 0..p {
            value[i] += w * k[i];
        }
        if let Some(j_stage) = &jk {
            jac += j_stage * w;
        }
        for (acc, hs) in hess.iter_mut().zip(&hk) {
            *acc += hs * w;
        }
        k_prev = k;
        jk_prev = jk;
        hk_prev = hk;
    }
    for hj in hess.iter_mut() {
        mirror_upper(hj);
    }
    Ok(Propagated { value, jac, hess })
}

/// m-fold composition with inner step `h/m`; no input validation.
fn compose_raw(
    model: &dyn OdeModel,
    x: &[f64],
    t: f64,
    theta: &[f64],
    h: f64,
    m: usize,
    order: Order,
) -> Result<Propagated> {
    let p = model.state_dim();
    let q = model.param_dim();
    let d = p + q;
    let hs = h / m as f64;
    let mut acc = rk4_raw(model, x, t, theta, hs, order)?;
    for k in 1..m {
        let tk = t + k as f64 * hs;
        let outer = rk4_raw(model, acc.value.as_slice(), tk, theta, hs, order)?;
        if order == Order::Value {
            acc.value = outer.value;
            continue;
        }
        let ox = outer.jac.view((0, 0), (p, p)).into_owned();
        // J_v = [[J_prev], [0, I_q]]
        let mut jv = DMatrix::zeros(d, d);
        jv.view_mut((0, 0), (p, d)).copy_from(&acc.jac);
        jv.view_mut((p, p), (q, q)).fill_with_identity();
        let jac = &outer.jac * &jv;

        if order == Order::Second {
            let hess: Vec<DMatrix<f64>> = (0..p)
                .map(|j| {
                    let mut hj = sandwich(&jv, &outer.hess[j]);
                    for (kk, hprev) in acc.hess.iter().enumerate() {
                        let w = ox[(j, kk)];
                        if w != 0.0 {
                            hj += hprev * w;
                        }
                    }
                    mirror_upper(&mut hj);
                    hj
                })
                .collect();
            acc.hess = hess;
        }
        acc.value = outer.value;
        acc.jac = jac;
    }
    Ok(acc)
}

fn into_flow(p: usize, prop: Propagated) -> FlowDerivatives {
    let (jac_x, jac_theta) = if prop.jac.nrows() == p {
        let q = prop.jac.ncols() - p;
        (prop.jac.columns(0, p).into_owned(), prop.jac.columns(p, q).into_owned())
    } else {
        (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
    };
    FlowDerivatives { value: prop.value, jac_x, jac_theta, hessians: prop.hess }
}

/// One RK4 step `g(x, t, θ)` with step `h`.
pub fn rk4_step(model: &dyn OdeModel, x: &[f64], t: f64, theta: &[f64], h: f64) -> Result<DVector<f64>> {
    check_inputs(model, x, theta, h)?;
    Ok(rk4_raw(model, x, t, theta, h, Order::Value)?.value)
}

/// `(∂g/∂x, ∂g/∂θ)` of one RK4 step.
pub fn rk4_jacobian(
    model: &dyn OdeModel,
    x: &[f64],
    t: f64,
    theta: &[f64],
    h: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_inputs(model, x, theta, h)?;
    let f = into_flow(model.state_dim(), rk4_raw(model, x, t, theta, h, Order::First)?);
    Ok((f.jac_x, f.jac_theta))
}

/// Per-output Hessians of one RK4 step w.r.t. `u = (x, θ)`.
pub fn rk4_hessian(model: &dyn OdeModel, x: &[f64], t: f64, theta: &[f64], h: f64) -> Result<Vec<DMatrix<f64>>> {
    check_inputs(model, x, theta, h)?;
    Ok(rk4_raw(model, x, t, theta, h, Order::Second)?.hess)
}

/// Value, Jacobians and Hessians of the m-fold RK4 composition over one
/// observation interval.
pub fn compose_flow(
    model: &dyn OdeModel,
    x: &[f64],
    t: f64,
    theta: &[f64],
    config: StepConfig,
) -> Result<FlowDerivatives> {
    compose_flow_to(model, x, t, theta, config, Order::Second)
}

/// [`compose_flow`] truncated at the requested derivative order; omitted
/// fields are left empty.
pub fn compose_flow_to(
    model: &dyn OdeModel,
    x: &[f64],
    t: f64,
    theta: &[f64],
    config: StepConfig,
    order: Order,
) -> Result<FlowDerivatives> {
    check_inputs(model, x, theta, config.h)?;
    if config.m == 0 {
        return Err(Error::Input("subdivision count m must be at least 1".into()));
    }
    let prop = compose_raw(model, x, t, theta, config.h, config.m, order)?;
    Ok(into_flow(model.state_dim(), prop))
}
