//! Mode finding, the MCMC oracle and covariance comparisons.

mod compare;
mod mcmc;

pub use compare::{compare_reports, frobenius_distance, Comparison, PairDistance, VarianceRow};
pub use mcmc::{
    run_chain, run_mcmc, sample_covariance, Chain, GaussianTarget, McmcSettings, PosteriorTarget, Target,
};

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::OdeModel;
use crate::posterior::{
    relaxed_gradient, relaxed_hessian, relaxed_nll, Dataset, OriginalParams, Prior, RelaxedParams,
};

/// Where a mode came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Optimized,
    Loaded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeMeta {
    pub model: String,
    pub tau: f64,
    pub m: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Projected-gradient sup norm at the mode, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
}

/// Point estimate `(λ̂, θ̂, X̂)` of the relaxed posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeEstimate {
    pub lambda: f64,
    pub theta: DVector<f64>,
    pub states: DMatrix<f64>,
    pub provenance: Provenance,
    pub meta: ModeMeta,
}

#[derive(Serialize, Deserialize)]
struct ModeFile {
    lambda: f64,
    theta: Vec<f64>,
    #[serde(rename = "X")]
    x: Vec<Vec<f64>>,
    meta: ModeMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

impl ModeEstimate {
    pub fn relaxed(&self) -> RelaxedParams {
        RelaxedParams { lambda: self.lambda, theta: self.theta.clone(), states: self.states.clone() }
    }

    pub fn original(&self) -> OriginalParams {
        OriginalParams {
            lambda: self.lambda,
            theta: self.theta.clone(),
            x0: self.states.row(0).transpose(),
        }
    }

    /// JSON document `{lambda, theta, X, meta, config_hash?}`.
    pub fn to_json(&self, config_hash: Option<&str>) -> Result<String> {
        let file = ModeFile {
            lambda: self.lambda,
            theta: self.theta.iter().copied().collect(),
            x: self.states.row_iter().map(|r| r.iter().copied().collect()).collect(),
            meta: self.meta.clone(),
            config_hash: config_hash.map(str::to_string),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Input(format!("mode serialisation: {e}")))
    }

    pub fn save(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        std::fs::write(path, self.to_json(config_hash)?)
            .map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))
    }

    /// Parse and validate against `prior`; provenance becomes loaded.
    pub fn from_json(text: &str, prior: &Prior) -> Result<Self> {
        let file: ModeFile =
            serde_json::from_str(text).map_err(|e| Error::Input(format!("mode file does not parse: {e}")))?;
        let p = prior.x0_bounds.len();
        if file.theta.len() != prior.theta_bounds.len() {
            return Err(Error::Input(format!(
                "mode has {} parameters, prior expects {}",
                file.theta.len(),
                prior.theta_bounds.len()
            )));
        }
        if file.x.is_empty() {
            return Err(Error::Input("mode has no states".into()));
        }
        if let Some(i) = file.x.iter().position(|r| r.len() != p) {
            return Err(Error::Input(format!("state row {i} has length {}, expected {p}", file.x[i].len())));
        }
        let finite = file.lambda.is_finite()
            && file.theta.iter().all(|v| v.is_finite())
            && file.x.iter().flatten().all(|v| v.is_finite());
        if !finite || !(file.lambda > 0.0) {
            return Err(Error::Input("mode has non-finite entries or non-positive lambda".into()));
        }
        let as_input = |e: Error| match e {
            Error::Domain(msg) => Error::Input(msg),
            other => other,
        };
        prior.check_theta(&file.theta).map_err(as_input)?;
        prior.check_x0(&file.x[0]).map_err(as_input)?;
        let rows = file.x.len();
        Ok(Self {
            lambda: file.lambda,
            theta: DVector::from_vec(file.theta),
            states: DMatrix::from_fn(rows, p, |i, j| file.x[i][j]),
            provenance: Provenance::Loaded,
            meta: file.meta,
        })
    }
}

/// Read and validate a mode file.
pub fn load_mode(path: &Path, prior: &Prior) -> Result<ModeEstimate> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    ModeEstimate::from_json(&text, prior)
}

/// Optimiser controls for [`fit_map`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapSettings {
    /// Projected-gradient sup norm at which the final stage stops.
    pub tol: f64,
    pub max_sweeps: usize,
    /// First relaxation variance of the continuation; `None` starts at the target.
    pub tau_start: Option<f64>,
    pub tau_factor: f64,
    /// Sweep cap and tolerance for the intermediate continuation stages.
    pub stage_sweeps: usize,
    pub stage_tol: f64,
}

impl Default for MapSettings {
    fn default() -> Self {
        Self { tol: 1e-6, max_sweeps: 200, tau_start: Some(1.0), tau_factor: 0.1, stage_sweeps: 40, stage_tol: 1e-3 }
    }
}

/// One row of the optimisation ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub tau: f64,
    pub sweep: usize,
    pub lambda: f64,
    /// Objective after the λ update, before the `(θ, X)` step.
    pub start: f64,
    /// Objective after the `(θ, X)` step.
    pub end: f64,
    pub grad_norm: f64,
    pub damping: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct MapFit {
    pub mode: ModeEstimate,
    pub log: Vec<SweepRecord>,
    pub converged: bool,
}

struct Problem<'a> {
    model: &'a dyn OdeModel,
    data: &'a Dataset,
    prior: &'a Prior,
    m: usize,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl<'a> Problem<'a> {
    fn new(model: &'a dyn OdeModel, data: &'a Dataset, prior: &'a Prior, m: usize) -> Self {
        let (p, q) = (model.state_dim(), model.param_dim());
        let n = 1 + q + data.points() * p;
        let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
        let mut upper = DVector::from_element(n, f64::INFINITY);
        lower[0] = 0.0;
        for (k, &(a, b)) in prior.theta_bounds.iter().enumerate() {
            lower[1 + k] = a;
            upper[1 + k] = b;
        }
        for (j, &(a, b)) in prior.x0_bounds.iter().enumerate() {
            lower[1 + q + j] = a;
            upper[1 + q + j] = b;
        }
        Self { model, data, prior, m, lower, upper }
    }

    fn params(&self, v: &DVector<f64>) -> RelaxedParams {
        RelaxedParams::from_vector(v, self.model.param_dim(), self.model.state_dim()).expect("layout fixed")
    }

    fn nll(&self, v: &DVector<f64>, tau: f64) -> Result<f64> {
        relaxed_nll(self.model, &self.params(v), self.data, tau, self.prior, self.m)
    }

    fn lambda_star(&self, v: &DVector<f64>) -> f64 {
        let pt = self.params(v);
        let ssq = (&pt.states - &self.data.y).norm_squared();
        self.prior.lambda_mode(self.data.state_dim(), self.data.points(), ssq)
    }

    /// Coordinates pinned at a bound by an outward-pointing gradient.
    fn active(&self, v: &DVector<f64>, g: &DVector<f64>) -> Vec<bool> {
        (0..v.len())
            .map(|k| (v[k] <= self.lower[k] && g[k] > 0.0) || (v[k] >= self.upper[k] && g[k] < 0.0))
            .collect()
    }

    fn projected_norm(&self, v: &DVector<f64>, g: &DVector<f64>) -> f64 {
        let act = self.active(v, g);
        g.iter().zip(&act).filter(|(_, &a)| !a).map(|(x, _)| x.abs()).fold(0.0, f64::max)
    }

    fn project(&self, v: &mut DVector<f64>) {
        for k in 1..v.len() {
            v[k] = v[k].clamp(self.lower[k], self.upper[k]);
        }
    }
}

fn lm_direction(h: &DMatrix<f64>, g: &DVector<f64>, free: &[usize], mu: f64) -> Option<DVector<f64>> {
    let k = free.len();
    let mut a = DMatrix::from_fn(k, k, |i, j| h[(free[i], free[j])]);
    let scale = (0..k).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    for i in 0..k {
        a[(i, i)] += mu * a[(i, i)].abs().max(1e-12 * scale);
    }
    let rhs = DVector::from_fn(k, |i, _| -g[free[i]]);
    let chol = Cholesky::new(a)?;
    Some(chol.solve(&rhs))
}

/// MAP estimate of the relaxed posterior by block-coordinate descent.
///
/// Each sweep sets λ to its conditional mode and then takes one damped
/// Newton step in `(θ, X)` using the analytic Hessian, with Marquardt
/// damping, backtracking and projection onto the prior box. The relaxation
/// variance is lowered geometrically from `settings.tau_start` to `tau`.
pub fn fit_map(
    data: &Dataset,
    model: &dyn OdeModel,
    tau: f64,
    m: usize,
    prior: &Prior,
    init: Option<RelaxedParams>,
    settings: &MapSettings,
) -> Result<MapFit> {
    prior.check_model(model)?;
    let prob = Problem::new(model, data, prior, m);
    let init = init.unwrap_or_else(|| {
        let mut states = data.y.clone();
        for (j, &(a, b)) in prior.x0_bounds.iter().enumerate() {
            states[(0, j)] = states[(0, j)].clamp(a, b);
        }
        RelaxedParams { lambda: 1.0, theta: prior.theta_midpoint(), states }
    });
    let mut v = init.to_vector();
    prob.nll(&v, tau)?;
    v[0] = prob.lambda_star(&v);

    let mut taus = Vec::new();
    if let Some(t0) = settings.tau_start {
        let g = relaxed_gradient(model, &prob.params(&v), data, tau, prior, m)?;
        let already = prob.projected_norm(&v, &g) <= settings.tol;
        let mut t = t0;
        while !already && t > tau * 1.000001 && settings.tau_factor < 1.0 {
            taus.push(t);
            t *= settings.tau_factor;
        }
    }
    taus.push(tau);

    let mut log = Vec::new();
    let mut converged = false;
    let last = taus.len() - 1;
    for (stage, &t) in taus.iter().enumerate() {
        let final_stage = stage == last;
        let (tol, cap) =
            if final_stage { (settings.tol, settings.max_sweeps) } else { (settings.stage_tol, settings.stage_sweeps) };
        let out = descend(&prob, &mut v, t, tol, cap, &mut log)?;
        if final_stage {
            converged = out;
        }
    }
    let grad_norm = log.last().map(|r| r.grad_norm);
    let pt = prob.params(&v);
    Ok(MapFit {
        mode: ModeEstimate {
            lambda: pt.lambda,
            theta: pt.theta,
            states: pt.states,
            provenance: Provenance::Optimized,
            meta: ModeMeta { model: model.name().to_string(), tau, m, seed: None, grad_norm },
        },
        log,
        converged,
    })
}

/// Sweeps at fixed τ until the projected gradient drops to `tol`.
fn descend(
    prob: &Problem,
    v: &mut DVector<f64>,
    tau: f64,
    tol: f64,
    cap: usize,
    log: &mut Vec<SweepRecord>,
) -> Result<bool> {
    let (model, data, prior, m) = (prob.model, prob.data, prob.prior, prob.m);
    let mut mu = 1e-3;
    for sweep in 1..=cap {
        v[0] = prob.lambda_star(v);
        let f0 = prob.nll(v, tau)?;
        let g = relaxed_gradient(model, &prob.params(v), data, tau, prior, m)?;
        let gnorm = prob.projected_norm(v, &g);
        let mut record =
            SweepRecord { tau, sweep, lambda: v[0], start: f0, end: f0, grad_norm: gnorm, damping: mu, step: 0.0 };
        if gnorm <= tol {
            log.push(record);
            return Ok(true);
        }
        let h = relaxed_hessian(model, &prob.params(v), data, tau, prior, m)?.to_dense();
        let act = prob.active(v, &g);
        let free: Vec<usize> = (1..v.len()).filter(|&k| !act[k]).collect();
        let slack = 10.0 * f64::EPSILON * f0.abs().max(1.0);

        let mut accepted = None;
        while mu < 1e16 {
            let Some(d) = lm_direction(&h, &g, &free, mu) else {
                mu *= 10.0;
                continue;
            };
            let mut alpha = 1.0;
            while alpha > 1e-8 {
                let mut trial = v.clone();
                for (i, &k) in free.iter().enumerate() {
                    trial[k] += alpha * d[i];
                }
                prob.project(&mut trial);
                let dv = &trial - &*v;
                let slope = g.dot(&dv);
                if let Ok(f1) = prob.nll(&trial, tau) {
                    if slope < 0.0 && f1 <= f0 + 1e-4 * slope + slack {
                        accepted = Some((trial, f1, dv.amax()));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                mu = if alpha == 1.0 { (mu / 3.0).max(1e-12) } else { mu };
                break;
            }
            mu *= 10.0;
        }
        let Some((trial, f1, step)) = accepted else {
            log.push(record);
            return Err(Error::Stalled { sweeps: log.len(), objective: f0, grad_norm: gnorm });
        };
        record.end = f1;
        record.damping = mu;
        record.step = step;
        log.push(record);
        *v = trial;
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{compose_flow_to, Order, StepConfig};
    use crate::models::{FitzHughNagumo, LinearTest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn fn_prior() -> Prior {
        Prior::new(1.0, 1.0, vec![(0.0, 1.0), (0.0, 1.0), (1.0, 5.0)], vec![(-3.0, 3.0); 2]).unwrap()
    }

    fn recursion(theta: &[f64], x0: &[f64], times: &[f64], m: usize) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(times.len(), x0.len());
        x.row_mut(0).copy_from_slice(x0);
        for i in 1..times.len() {
            let prev: Vec<f64> = x.row(i - 1).iter().copied().collect();
            let cfg = StepConfig::new(times[i] - times[i - 1], m).unwrap();
            let f = compose_flow_to(&FitzHughNagumo, &prev, times[i - 1], theta, cfg, Order::Value).unwrap();
            x.row_mut(i).copy_from(&f.value.transpose());
        }
        x
    }

    #[test]
    fn noiseless_start_at_truth_is_immediate() {
        let times: Vec<f64> = (0..=40).map(|i| 0.1 * i as f64).collect();
        let truth = [0.2, 0.2, 3.0];
        let x = recursion(&truth, &[-1.0, 1.0], &times, 1);
        let data = Dataset::new(times, x.clone()).unwrap();
        let init = RelaxedParams { lambda: 1.0, theta: DVector::from_row_slice(&truth), states: x };
        let fit = fit_map(&data, &FitzHughNagumo, 1e-5, 1, &fn_prior(), Some(init), &MapSettings::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.log.len() <= 2);
        for k in 0..3 {
            assert!((fit.mode.theta[k] - truth[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn noisy_fit_descends_monotonically() {
        let times: Vec<f64> = (0..=100).map(|i| 0.1 * i as f64).collect();
        let truth = [0.2, 0.2, 3.0];
        let x = recursion(&truth, &[-1.0, 1.0], &times, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let y = x.map(|v| v + noise.sample(&mut rng));
        let data = Dataset::new(times, y).unwrap();
        let fit = fit_map(&data, &FitzHughNagumo, 1e-5, 1, &fn_prior(), None, &MapSettings::default()).unwrap();
        assert!(fit.converged, "{:?}", fit.log.last());
        for r in &fit.log {
            assert!(r.end <= r.start + 1e-9 * r.start.abs().max(1.0), "{r:?}");
        }
        for k in 0..3 {
            assert!((fit.mode.theta[k] - truth[k]).abs() < 0.3, "{:?}", fit.mode.theta);
        }
    }

    #[test]
    fn lambda_update_closed_form() {
        let prior = Prior::new(1.5, 1.0, vec![(-5.0, 5.0)], vec![(-5.0, 5.0)]).unwrap();
        assert!((prior.lambda_mode(1, 1, 2.0) - 0.5).abs() < 1e-15);
        let data = Dataset::new(vec![0.0, 1.0], DMatrix::from_row_slice(2, 1, &[1.0, 0.3])).unwrap();
        let prob = Problem::new(&LinearTest, &data, &prior, 1);
        let v = DVector::from_vec(vec![1.0, -0.5, 1.2, 0.6]);
        let ssq = 0.2f64.powi(2) + 0.3f64.powi(2);
        assert!((prob.lambda_star(&v) - 1.5 / (1.0 + 0.5 * ssq)).abs() < 1e-14);
    }

    #[test]
    fn mode_json_round_trip_and_validation() {
        let mode = ModeEstimate {
            lambda: 4.0,
            theta: DVector::from_vec(vec![0.2, 0.2, 3.0]),
            states: DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, -0.5, 0.9]),
            provenance: Provenance::Optimized,
            meta: ModeMeta { model: "fitzhugh-nagumo".into(), tau: 1e-5, m: 1, seed: Some(3), grad_norm: None },
        };
        let text = mode.to_json(Some("abc")).unwrap();
        let back = ModeEstimate::from_json(&text, &fn_prior()).unwrap();
        assert_eq!(back.provenance, Provenance::Loaded);
        assert_eq!(back.theta, mode.theta);
        assert_eq!(back.states, mode.states);
        assert_eq!(back.lambda, mode.lambda);

        let bad = text.replace("3.0", "9.0");
        let err = ModeEstimate::from_json(&bad, &fn_prior()).unwrap_err();
        assert!(matches!(&err, Error::Input(msg) if msg.contains("theta[2]")), "{err:?}");
        let cut = &text[..text.len() / 2];
        assert!(matches!(ModeEstimate::from_json(cut, &fn_prior()), Err(Error::Input(_))));
    }
}
