//! Negative log posteriors, gradients and Hessians.
//!
//! Relaxed state-space model, parameters `(λ, θ, x₀, …, xₙ)`:
//!
//! ```text
//! L = −a log λ + B₀λ + (1/2τ) Σᵢ ‖xᵢ − g(xᵢ₋₁, θ)‖² + (λ/2) Σᵢ ‖yᵢ − xᵢ‖²
//! a = p(n+1)/2 + A₀ − 1
//! ```
//!
//! Original ODE model, parameters `(λ, θ, x₀)`:
//!
//! ```text
//! L = −a log λ + B₀λ + (λ/2) Σᵢ ‖yᵢ − x(tᵢ; θ, x₀)‖²
//! ```
//!
//! Uniform priors on `θ` and `x₀` contribute nothing inside their support
//! and a domain error outside it. The additive constant is 0.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{compose_flow_to, FlowDerivatives, Order, StepConfig};
use crate::laplace::SymmetricMatrix;
use crate::models::OdeModel;
use crate::sensitivity::{
    check_grid, solve_first_order_with, solve_fixed, solve_reference, solve_second_order_with, SensitivityBundle,
    SensitivityOptions,
};

/// Gamma(A₀, B₀) prior on λ and box-uniform priors on θ and x₀.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub a0: f64,
    pub b0: f64,
    pub theta_bounds: Vec<(f64, f64)>,
    pub x0_bounds: Vec<(f64, f64)>,
}

impl Prior {
    pub fn new(a0: f64, b0: f64, theta_bounds: Vec<(f64, f64)>, x0_bounds: Vec<(f64, f64)>) -> Result<Self> {
        let prior = Self { a0, b0, theta_bounds, x0_bounds };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a0 > 0.0 && self.a0.is_finite()) || !(self.b0 > 0.0 && self.b0.is_finite()) {
            return Err(Error::Input(format!("gamma prior needs A0, B0 > 0, got {}, {}", self.a0, self.b0)));
        }
        for (name, bounds) in [("theta", &self.theta_bounds), ("x0", &self.x0_bounds)] {
            for (k, &(lo, hi)) in bounds.iter().enumerate() {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::Input(format!("{name} bound {k} is not an interval: ({lo}, {hi})")));
                }
            }
        }
        Ok(())
    }

    /// Checks that the bound vectors fit the model.
    pub fn check_model(&self, model: &dyn OdeModel) -> Result<()> {
        if self.theta_bounds.len() != model.param_dim() || self.x0_bounds.len() != model.state_dim() {
            return Err(Error::Dimension(format!(
                "prior has {}/{} theta/x0 bounds, model {} needs {}/{}",
                self.theta_bounds.len(),
                self.x0_bounds.len(),
                model.name(),
                model.param_dim(),
                model.state_dim()
            )));
        }
        Ok(())
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        check_box("theta", theta, &self.theta_bounds)
    }

    pub fn check_x0(&self, x0: &[f64]) -> Result<()> {
        check_box("x0", x0, &self.x0_bounds)
    }

    pub fn theta_midpoint(&self) -> DVector<f64> {
        DVector::from_iterator(self.theta_bounds.len(), self.theta_bounds.iter().map(|(a, b)| 0.5 * (a + b)))
    }

    /// Effective gamma shape `p(n+1)/2 + A₀ − 1` for `points = n+1` observations.
    pub fn shape(&self, p: usize, points: usize) -> f64 {
        (p * points) as f64 / 2.0 + self.a0 - 1.0
    }

    /// Closed-form conditional mode of λ for a residual sum of squares `ssq`.
    pub fn lambda_mode(&self, p: usize, points: usize, ssq: f64) -> f64 {
        self.shape(p, points) / (self.b0 + 0.5 * ssq)
    }
}

fn check_box(name: &str, v: &[f64], bounds: &[(f64, f64)]) -> Result<()> {
    if v.len() != bounds.len() {
        return Err(Error::Dimension(format!("{name} has length {}, bounds {}", v.len(), bounds.len())));
    }
    for (k, (&x, &(lo, hi))) in v.iter().zip(bounds).enumerate() {
        if !(x >= lo && x <= hi) {
            return Err(Error::Domain(format!("{name}[{k}] = {x} outside prior support [{lo}, {hi}]")));
        }
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!("noise precision must be positive, got {lambda}")));
    }
    Ok(())
}

/// Observation times `t₀..tₙ` and the `(n+1)×p` observation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub times: Vec<f64>,
    pub y: DMatrix<f64>,
}

impl Dataset {
    pub fn new(times: Vec<f64>, y: DMatrix<f64>) -> Result<Self> {
        check_grid(&times)?;
        if y.nrows() != times.len() {
            return Err(Error::Dimension(format!("{} times but {} observation rows", times.len(), y.nrows())));
        }
        if y.ncols() == 0 {
            return Err(Error::Dimension("observations have no columns".into()));
        }
        if let Some(k) = y.iter().position(|v| !v.is_finite()) {
            let (r, c) = (k % y.nrows(), k / y.nrows());
            return Err(Error::Input(format!("non-finite observation at row {r}, column {c}")));
        }
        Ok(Self { times, y })
    }

    /// Number of observation points `n + 1`.
    pub fn points(&self) -> usize {
        self.times.len()
    }

    pub fn intervals(&self) -> usize {
        self.times.len() - 1
    }

    pub fn state_dim(&self) -> usize {
        self.y.ncols()
    }

    /// Every `stride`-th observation, starting from the first.
    pub fn subsample(&self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Input("subsample stride must be positive".into()));
        }
        let rows: Vec<usize> = (0..self.points()).step_by(stride).collect();
        let times = rows.iter().map(|&i| self.times[i]).collect();
        let y = DMatrix::from_fn(rows.len(), self.state_dim(), |i, j| self.y[(rows[i], j)]);
        Self::new(times, y)
    }

    fn check_model(&self, model: &dyn OdeModel) -> Result<()> {
        if self.state_dim() != model.state_dim() {
            return Err(Error::Dimension(format!(
                "dataset has {} columns, model {} has {} states",
                self.state_dim(),
                model.name(),
                model.state_dim()
            )));
        }
        Ok(())
    }
}

/// Point in the relaxed model's parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedParams {
    pub lambda: f64,
    pub theta: DVector<f64>,
    /// `(n+1)×p`, one row per observation time.
    pub states: DMatrix<f64>,
}

impl RelaxedParams {
    /// Flatten as `(λ, θ, x₀, …, xₙ)` with states row-major.
    pub fn to_vector(&self) -> DVector<f64> {
        let (q, rows, p) = (self.theta.len(), self.states.nrows(), self.states.ncols());
        let mut v = DVector::zeros(1 + q + rows * p);
        v[0] = self.lambda;
        v.rows_mut(1, q).copy_from(&self.theta);
        for i in 0..rows {
            for j in 0..p {
                v[1 + q + i * p + j] = self.states[(i, j)];
            }
        }
        v
    }

    pub fn from_vector(v: &DVector<f64>, q: usize, p: usize) -> Result<Self> {
        if v.len() < 1 + q || (v.len() - 1 - q) % p != 0 {
            return Err(Error::Dimension(format!("vector of length {} does not split as 1+{q}+k·{p}", v.len())));
        }
        let rows = (v.len() - 1 - q) / p;
        Ok(Self {
            lambda: v[0],
            theta: v.rows(1, q).into_owned(),
            states: DMatrix::from_fn(rows, p, |i, j| v[1 + q + i * p + j]),
        })
    }
}

/// Point in the original model's parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct OriginalParams {
    pub lambda: f64,
    pub theta: DVector<f64>,
    pub x0: DVector<f64>,
}

impl OriginalParams {
    /// Flatten as `(λ, θ, x₀)`.
    pub fn to_vector(&self) -> DVector<f64> {
        let (q, p) = (self.theta.len(), self.x0.len());
        let mut v = DVector::zeros(1 + q + p);
        v[0] = self.lambda;
        v.rows_mut(1, q).copy_from(&self.theta);
        v.rows_mut(1 + q, p).copy_from(&self.x0);
        v
    }

    pub fn from_vector(v: &DVector<f64>, q: usize, p: usize) -> Result<Self> {
        if v.len() != 1 + q + p {
            return Err(Error::Dimension(format!("expected length {}, got {}", 1 + q + p, v.len())));
        }
        Ok(Self { lambda: v[0], theta: v.rows(1, q).into_owned(), x0: v.rows(1 + q, p).into_owned() })
    }
}

/// `lambda`, the model's parameter labels, then `x{i}_{j}` for each state.
pub fn relaxed_labels(model: &dyn OdeModel, points: usize) -> Vec<String> {
    let mut labels = vec!["lambda".to_string()];
    labels.extend(model.param_labels());
    for i in 0..points {
        for j in 0..model.state_dim() {
            labels.push(format!("x{i}_{}", j + 1));
        }
    }
    labels
}

pub fn original_labels(model: &dyn OdeModel) -> Vec<String> {
    relaxed_labels(model, 1)
}

fn check_relaxed(
    model: &dyn OdeModel,
    params: &RelaxedParams,
    data: &Dataset,
    tau: f64,
    prior: &Prior,
    m: usize,
) -> Result<()> {
    data.check_model(model)?;
    prior.check_model(model)?;
    if params.states.shape() != data.y.shape() {
        return Err(Error::Dimension(format!(
            "state matrix is {:?}, observations are {:?}",
            params.states.shape(),
            data.y.shape()
        )));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Input(format!("relaxation variance must be positive, got {tau}")));
    }
    if m == 0 {
        return Err(Error::Input("subdivision count m must be at least 1".into()));
    }
    check_lambda(params.lambda)?;
    prior.check_theta(params.theta.as_slice())?;
    let x0: Vec<f64> = params.states.row(0).iter().copied().collect();
    prior.check_x0(&x0)?;
    model.check_params(params.theta.as_slice())
}

fn interval_flows(
    model: &dyn OdeModel,
    params: &RelaxedParams,
    data: &Dataset,
    m: usize,
    order: Order,
) -> Result<Vec<FlowDerivatives>> {
    let theta = params.theta.as_slice();
    (1..data.points())
        .into_par_iter()
        .map(|i| {
            let x: Vec<f64> = params.states.row(i - 1).iter().copied().collect();
            let cfg = StepConfig::new(data.times[i] - data.times[i - 1], m)?;
            compose_flow_to(model, &x, data.times[i - 1], theta, cfg, order)
        })
        .collect()
}

fn state_residual(params: &RelaxedParams, i: usize, g: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(g.len(), params.states.row(i).iter().zip(g.iter()).map(|(x, gx)| x - gx))
}

fn obs_ssq(states: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    (states - y).norm_squared()
}

/// `Σᵢ ‖xᵢ − g⁽ᵐ⁾(xᵢ₋₁, θ)‖²`, the unscaled transition misfit.
pub fn transition_misfit(
    model: &dyn OdeModel,
    params: &RelaxedParams,
    data: &Dataset,
    m: usize,
) -> Result<f64> {
    let flows = interval_flows(model, params, data, m, Order::Value)?;
    Ok(flows.iter().enumerate().map(|(k, f)| state_residual(params, k + 1, &f.value).norm_squared()).sum())
}

pub fn relaxed_nll(
    model: &dyn OdeModel,
    params: &RelaxedParams,
    data: &Dataset,
    tau: f64,
    prior: &Prior,
    m: usize,
) -> Result<f64> {
    check_relaxed(model, params, data, tau, prior, m)?;
    let sg = transition_misfit(model, params, data, m)?;
    let so = obs_ssq(&params.states, &data.y);
    let a = prior.shape(data.state_dim(), data.points());
    Ok(-a * params.lambda.ln() + prior.b0 * params.lambda + sg / (2.0 * tau) + 0.5 * params.lambda * so)
}

/// Gradient over `(λ, θ, x₀, …, xₙ)`.
pub fn relaxed_gradient(
    model: &dyn OdeModel,
    params: &RelaxedParams,
    data: &Dataset,
    tau: f64,
    prior: &Prior,
    m: usize,
) -> Result<DVector<f64>> {
    check_relaxed(model, params, data, tau, prior, m)?;
    let (p, q) = (data.state_dim(), model.param_dim());
    let xi = |i: usize| 1 + q + i * p;
    let flows = interval_flows(model, params, data, m, Order::First)?;
    let mut g = DVector::zeros(1 + q + data.points() * p);

    let so = obs_ssq(&params.states, &data.y);
    g[0] = -prior.shape(p, data.points()) / params.lambda + prior.b0 + 0.5 * so;
    for i in 0..data.points() {
        for j in 0..p {
            g[xi(i) + j] += params.lambda * (params.states[(i, j)] - data.y[(i, j)]);
        }
    }
    for (k, f) in flows.iter().enumerate() {
        let i = k + 1;
        let r = state_residual(params, i, &f.value) / tau;
        let gx = f.jac_x.tr_mul(&r);
        let gt = f.jac_theta.tr_mul(&r);
        for j in 0..p {
            g[xi(i) + j] += r[j];
            g[xi(i - 1) + j] -= gx[j];
        }
        for k in 0..q {
            g[1 + k] -= gt[k];
        }
    }
    Ok(g)
}

/// Full Hessian over `(λ, θ, x₀, …, xₙ)`.
///
/// Per interval, with `z = (xᵢ₋₁, θ)`, `rᵢ = xᵢ − g(z)` and `J = ∂g/∂z`:
/// the `zz` block gains `(JᵀJ − Σⱼ rᵢⱼ ∇²gⱼ)/τ`, the `xᵢxᵢ` block `I/τ` and
/// the `xᵢz` block `−J/τ`. The observation term adds `λI` on each state
/// block and `xᵢ − yᵢ` in the λ row.
pub fn relaxed_hessian(
    model: &dyn OdeModel,
    params: &RelaxedParams,
    data: &Dataset,
    tau: f64,
    prior: &Prior,
    m: usize,
) -> Result<SymmetricMatrix> {
    check_relaxed(model, params, data, tau, prior, m)?;
    let (p, q) = (data.state_dim(), model.param_dim());
    let d = p + q;
    let xi = |i: usize| 1 + q + i * p;
    let flows = interval_flows(model, params, data, m, Order::Second)?;
    let dim = 1 + q + data.points() * p;
    let mut h = DMatrix::<f64>::zeros(dim, dim);

    for (k, f) in flows.iter().enumerate() {
        let i = k + 1;
        let r = state_residual(params, i, &f.value);
        let mut jg = DMatrix::zeros(p, d);
        jg.view_mut((0, 0), (p, p)).copy_from(&f.jac_x);
        jg.view_mut((0, p), (p, q)).copy_from(&f.jac_theta);
        let mut hzz = jg.tr_mul(&jg);
        for (j, hj) in f.hessians.iter().enumerate() {
            hzz -= hj * r[j];
        }
        let z: Vec<usize> = (xi(i - 1)..xi(i - 1) + p).chain(1..1 + q).collect();
        for a in 0..d {
            for b in 0..d {
                h[(z[a], z[b])] += hzz[(a, b)] / tau;
            }
        }
        for a in 0..p {
            h[(xi(i) + a, xi(i) + a)] += 1.0 / tau;
            for b in 0..d {
                let v = -jg[(a, b)] / tau;
                h[(xi(i) + a, z[b])] += v;
                h[(z[b], xi(i) + a)] += v;
            }
        }
    }

    let lam = params.lambda;
    h[(0, 0)] = prior.shape(p, data.points()) / (lam * lam);
    for i in 0..data.points() {
        for j in 0..p {
            let c = xi(i) + j;
            let e = params.states[(i, j)] - data.y[(i, j)];
            h[(0, c)] = e;
            h[(c, 0)] = e;
            h[(c, c)] += lam;
        }
    }
    SymmetricMatrix::from_upper(&h)
}

/// How the original model's ODE solution is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resolution {
    /// Refined until successive halvings agree.
    #[default]
    Reference,
    /// Fixed RK4 substep count per observation interval.
    Fixed(usize),
}

fn check_original(model: &dyn OdeModel, params: &OriginalParams, data: &Dataset, prior: &Prior) -> Result<()> {
    data.check_model(model)?;
    prior.check_model(model)?;
    check_lambda(params.lambda)?;
    prior.check_theta(params.theta.as_slice())?;
    prior.check_x0(params.x0.as_slice())?;
    model.check_params(params.theta.as_slice())
}

pub fn original_nll(model: &dyn OdeModel, params: &OriginalParams, data: &Dataset, prior: &Prior) -> Result<f64> {
    original_nll_with(model, params, data, prior, Resolution::Reference)
}

pub fn original_nll_with(
    model: &dyn OdeModel,
    params: &OriginalParams,
    data: &Dataset,
    prior: &Prior,
    resolution: Resolution,
) -> Result<f64> {
    check_original(model, params, data, prior)?;
    let (theta, x0) = (params.theta.as_slice(), params.x0.as_slice());
    let sol = match resolution {
        Resolution::Reference => solve_reference(model, x0, theta, &data.times)?,
        Resolution::Fixed(s) => solve_fixed(model, x0, theta, &data.times, s)?,
    };
    let a = prior.shape(data.state_dim(), data.points());
    Ok(-a * params.lambda.ln() + prior.b0 * params.lambda + 0.5 * params.lambda * obs_ssq(&sol, &data.y))
}

fn sensitivity_options(resolution: Resolution) -> SensitivityOptions {
    SensitivityOptions {
        fixed_substeps: match resolution {
            Resolution::Reference => None,
            Resolution::Fixed(s) => Some(s),
        },
        ..SensitivityOptions::default()
    }
}

/// `Σᵢ Sᵢᵀ eᵢ` with `eᵢ = yᵢ − x(tᵢ)` and `Sᵢ = ∂x(tᵢ)/∂(θ, x₀)`.
fn weighted_residual(bundle: &SensitivityBundle, data: &Dataset) -> DVector<f64> {
    let r = bundle.jac_theta[0].ncols() + data.state_dim();
    let mut acc = DVector::zeros(r);
    for i in 0..data.points() {
        let e = (data.y.row(i) - bundle.states.row(i)).transpose();
        acc += bundle.jacobian(i).tr_mul(&e);
    }
    acc
}

/// Gradient over `(λ, θ, x₀)`.
pub fn original_gradient(
    model: &dyn OdeModel,
    params: &OriginalParams,
    data: &Dataset,
    prior: &Prior,
    resolution: Resolution,
) -> Result<DVector<f64>> {
    check_original(model, params, data, prior)?;
    let bundle = solve_first_order_with(
        model,
        params.x0.as_slice(),
        params.theta.as_slice(),
        &data.times,
        &sensitivity_options(resolution),
    )?;
    let p = data.state_dim();
    let mut g = DVector::zeros(1 + model.param_dim() + p);
    g[0] = -prior.shape(p, data.points()) / params.lambda
        + prior.b0
        + 0.5 * obs_ssq(&bundle.states, &data.y);
    let w = weighted_residual(&bundle, data);
    g.rows_mut(1, w.len()).copy_from(&(-params.lambda * w));
    Ok(g)
}

/// Original-model Hessian and any conditioning warnings raised by the
/// second-order sensitivity solve.
#[derive(Debug, Clone)]
pub struct OriginalHessian {
    pub hessian: SymmetricMatrix,
    pub warnings: Vec<String>,
    pub substeps: usize,
}

/// Full Hessian over `(λ, θ, x₀)`:
///
/// ```text
/// ∂²L/∂λ²   = a/λ²
/// ∂²L/∂φ∂λ  = −Σᵢ Sᵢᵀ eᵢ
/// ∂²L/∂φ∂φᵀ = λ Σᵢ (SᵢᵀSᵢ − Σⱼ eᵢⱼ Wᵢʲ)
/// ```
///
/// with `φ = (θ, x₀)`; the `i = 0` term supplies the `λI` in the `x₀x₀` block.
pub fn original_hessian(
    model: &dyn OdeModel,
    params: &OriginalParams,
    data: &Dataset,
    prior: &Prior,
) -> Result<OriginalHessian> {
    original_hessian_with(model, params, data, prior, Resolution::Reference)
}

pub fn original_hessian_with(
    model: &dyn OdeModel,
    params: &OriginalParams,
    data: &Dataset,
    prior: &Prior,
    resolution: Resolution,
) -> Result<OriginalHessian> {
    check_original(model, params, data, prior)?;
    let bundle = solve_second_order_with(
        model,
        params.x0.as_slice(),
        params.theta.as_slice(),
        &data.times,
        &sensitivity_options(resolution),
    )?;
    let p = data.state_dim();
    let r = model.param_dim() + p;
    let lam = params.lambda;
    let mut phi = DMatrix::<f64>::zeros(r, r);
    for i in 0..data.points() {
        let s = bundle.jacobian(i);
        phi += s.tr_mul(&s);
        for j in 0..p {
            let e = data.y[(i, j)] - bundle.states[(i, j)];
            if e != 0.0 {
                phi -= &bundle.hess[i][j] * e;
            }
        }
    }
    let cross = -weighted_residual(&bundle, data);
    let mut h = DMatrix::zeros(1 + r, 1 + r);
    h[(0, 0)] = prior.shape(p, data.points()) / (lam * lam);
    for a in 0..r {
        h[(0, 1 + a)] = cross[a];
        for b in a..r {
            h[(1 + a, 1 + b)] = lam * phi[(a, b)];
        }
    }
    Ok(OriginalHessian { hessian: SymmetricMatrix::from_upper(&h)?, warnings: bundle.warnings, substeps: bundle.substeps })
}
