//! Adaptive Metropolis with optional delayed rejection.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ModeEstimate;
use crate::error::{Error, Result};
use crate::laplace::{CovarianceReport, Method, SymmetricMatrix};
use crate::models::OdeModel;
use crate::posterior::{original_labels, original_nll_with, Dataset, OriginalParams, Prior, Resolution};
use crate::sensitivity::Refinement;

/// Unnormalised log density sampled by [`run_chain`].
pub trait Target: Sync {
    fn dim(&self) -> usize;
    /// `None` outside the support or where evaluation fails.
    fn log_density(&self, x: &DVector<f64>) -> Option<f64>;
}

/// Multivariate normal target, used to validate the sampler.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
}

impl GaussianTarget {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let precision = Cholesky::new(cov.clone()).ok_or(Error::NotPositiveDefinite { pivot: 0 })?.inverse();
        Ok(Self { mean, precision })
    }
}

impl Target for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &DVector<f64>) -> Option<f64> {
        let d = x - &self.mean;
        Some(-0.5 * d.dot(&(&self.precision * &d)))
    }
}

/// Original-model posterior over `(λ, θ, x₀)`.
///
/// The ODE is solved at a fixed resolution chosen once by step halving at
/// the starting point, so the density is a smooth deterministic function.
/// Halving stops when the log density moves by less than `tol`.
pub struct PosteriorTarget<'a> {
    model: &'a dyn OdeModel,
    data: &'a Dataset,
    prior: &'a Prior,
    resolution: Resolution,
}

impl<'a> PosteriorTarget<'a> {
    pub fn new(
        model: &'a dyn OdeModel,
        data: &'a Dataset,
        prior: &'a Prior,
        start: &OriginalParams,
        tol: f64,
    ) -> Result<Self> {
        let max = Refinement::default().max_substeps;
        let mut s = 1;
        let mut coarse: Option<f64> = None;
        let mut last = Error::Divergence { time: data.times[0] };
        loop {
            // coarse levels may blow up; that only means more substeps are needed
            let fine = original_nll_with(model, start, data, prior, Resolution::Fixed(s)).ok();
            if let (Some(a), Some(b)) = (coarse, fine) {
                let diff = (a - b).abs();
                if diff < tol {
                    return Ok(Self { model, data, prior, resolution: Resolution::Fixed(s) });
                }
                last = Error::NotConverged { tol, substeps: s, diff };
            }
            if 2 * s > max {
                return Err(last);
            }
            coarse = fine;
            s *= 2;
        }
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }
}

impl Target for PosteriorTarget<'_> {
    fn dim(&self) -> usize {
        1 + self.model.param_dim() + self.model.state_dim()
    }

    fn log_density(&self, x: &DVector<f64>) -> Option<f64> {
        let pt = OriginalParams::from_vector(x, self.model.param_dim(), self.model.state_dim()).ok()?;
        original_nll_with(self.model, &pt, self.data, self.prior, self.resolution).ok().map(|v| -v)
    }
}

/// Sampler controls. `iterations` counts the retained window after burn-in,
/// so each chain keeps `iterations / thin` draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcSettings {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// 1 for plain adaptive Metropolis, 2 adds one delayed-rejection stage.
    pub dr_stages: usize,
    pub dr_scale: f64,
    pub adapt_start: usize,
    pub adapt_interval: usize,
    pub regularization: f64,
    pub chains: usize,
    pub seed: u64,
    pub min_acceptance: f64,
    /// Change in log density between step halvings below which the ODE
    /// resolution of the target is fixed.
    pub solver_tol: f64,
}

impl Default for McmcSettings {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            burn_in: 5_000,
            thin: 30,
            dr_stages: 2,
            dr_scale: 0.5,
            adapt_start: 1_000,
            adapt_interval: 100,
            regularization: 1e-8,
            chains: 1,
            seed: 1,
            min_acceptance: 0.005,
            solver_tol: 1e-3,
        }
    }
}

impl McmcSettings {
    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 || self.iterations < self.thin {
            return Err(Error::Input(format!("thin {} must be in 1..=iterations {}", self.thin, self.iterations)));
        }
        if !(1..=2).contains(&self.dr_stages) {
            return Err(Error::Input(format!("dr_stages must be 1 or 2, got {}", self.dr_stages)));
        }
        if self.chains == 0 || self.adapt_interval == 0 {
            return Err(Error::Input("chains and adapt_interval must be positive".into()));
        }
        if !(self.dr_scale > 0.0 && self.dr_scale < 1.0) {
            return Err(Error::Input(format!("dr_scale must lie in (0, 1), got {}", self.dr_scale)));
        }
        if !(self.solver_tol > 0.0) {
            return Err(Error::Input(format!("solver_tol must be positive, got {}", self.solver_tol)));
        }
        Ok(())
    }

    pub fn draws_per_chain(&self) -> usize {
        self.iterations / self.thin
    }

    pub fn total_iterations(&self) -> usize {
        self.burn_in + self.iterations
    }
}

/// Retained draws of one or more merged chains.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub labels: Vec<String>,
    /// `draws × dim`, chains concatenated in order.
    pub samples: DMatrix<f64>,
    /// Accepted proposals after burn-in, summed over chains.
    pub accepted: usize,
    pub acceptance_rate: f64,
    pub chain_acceptance: Vec<f64>,
    /// Per coordinate: |mean of first half − mean of second half| / sd.
    pub split_half: Vec<f64>,
    pub settings: McmcSettings,
}

struct Welford {
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl Welford {
    fn new(d: usize) -> Self {
        Self { n: 0, mean: DVector::zeros(d), m2: DMatrix::zeros(d, d) }
    }

    fn push(&mut self, x: &DVector<f64>) {
        self.n += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    fn covariance(&self) -> DMatrix<f64> {
        let c = &self.m2 / (self.n.max(2) - 1) as f64;
        0.5 * (&c + c.transpose())
    }
}

fn neg_log(target: &dyn Target, x: &DVector<f64>) -> Option<f64> {
    target.log_density(x).filter(|v| v.is_finite()).map(|v| -v)
}

/// Finite-difference curvature of the target at `x`, turned into a
/// starting proposal covariance. Falls back to axis curvatures, then to a
/// small isotropic scale.
fn initial_covariance(target: &dyn Target, x: &DVector<f64>) -> DMatrix<f64> {
    let d = x.len();
    let f0 = match neg_log(target, x) {
        Some(v) => v,
        None => return DMatrix::identity(d, d) * 1e-4,
    };
    let steps: Vec<f64> = x.iter().map(|v| 1e-4 * v.abs().max(1e-2)).collect();
    let eval = |moves: &[(usize, f64)]| {
        let mut y = x.clone();
        for &(k, s) in moves {
            y[k] += s;
        }
        neg_log(target, &y)
    };
    let mut h = DMatrix::zeros(d, d);
    let mut complete = true;
    'outer: for a in 0..d {
        let ha = steps[a];
        match (eval(&[(a, ha)]), eval(&[(a, -ha)])) {
            (Some(up), Some(dn)) => h[(a, a)] = (up - 2.0 * f0 + dn) / (ha * ha),
            _ => {
                complete = false;
                break 'outer;
            }
        }
        for b in 0..a {
            let hb = steps[b];
            let vals = [
                eval(&[(a, ha), (b, hb)]),
                eval(&[(a, ha), (b, -hb)]),
                eval(&[(a, -ha), (b, hb)]),
                eval(&[(a, -ha), (b, -hb)]),
            ];
            if let [Some(pp), Some(pm), Some(mp), Some(mm)] = vals {
                let v = (pp - pm - mp + mm) / (4.0 * ha * hb);
                h[(a, b)] = v;
                h[(b, a)] = v;
            } else {
                complete = false;
                break 'outer;
            }
        }
    }
    if complete {
        if let Some(c) = Cholesky::new(h.clone()) {
            return c.inverse();
        }
    }
    DMatrix::from_fn(d, d, |i, j| {
        if i != j {
            0.0
        } else if h[(i, i)] > 0.0 && h[(i, i)].is_finite() {
            1.0 / h[(i, i)]
        } else {
            (1e-2 * x[i].abs().max(1e-2)).powi(2)
        }
    })
}

fn fill_normal(rng: &mut ChaCha8Rng, z: &mut DVector<f64>) {
    for v in z.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

struct SingleRun {
    draws: Vec<DVector<f64>>,
    accepted: usize,
}

fn single_chain(
    target: &dyn Target,
    start: &DVector<f64>,
    init_cov: &DMatrix<f64>,
    settings: &McmcSettings,
    stream: u64,
) -> Result<SingleRun> {
    let d = start.len();
    let sd = 2.38 * 2.38 / d as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    rng.set_stream(stream);
    let mut chol = Cholesky::new(init_cov * sd)
        .or_else(|| Cholesky::new(DMatrix::identity(d, d) * 1e-4))
        .expect("identity is positive definite");
    let mut x = start.clone();
    let mut lx = target
        .log_density(&x)
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Input("starting point has zero target density".into()))?;
    let mut stats = Welford::new(d);
    let mut draws = Vec::with_capacity(settings.draws_per_chain());
    let mut accepted = 0;
    let mut z = DVector::zeros(d);

    for it in 0..settings.total_iterations() {
        if it >= settings.adapt_start && it > 0 && it % settings.adapt_interval == 0 && stats.n >= 2 {
            let c = (stats.covariance() + DMatrix::identity(d, d) * settings.regularization) * sd;
            if let Some(ch) = Cholesky::new(c) {
                chol = ch;
            }
        }
        let lmat = chol.l();
        fill_normal(&mut rng, &mut z);
        let y1 = &x + &lmat * &z;
        let l1 = target.log_density(&y1).filter(|v| v.is_finite());
        let a1 = l1.map_or(0.0, |v| (v - lx).exp().min(1.0));
        let u: f64 = rng.random();
        let mut moved = false;
        if u < a1 {
            x = y1;
            lx = l1.expect("accepted point has density");
            moved = true;
        } else if settings.dr_stages == 2 {
            let z1 = z.clone();
            fill_normal(&mut rng, &mut z);
            let y2 = &x + (&lmat * &z) * settings.dr_scale;
            let u2: f64 = rng.random();
            if let Some(l2) = target.log_density(&y2).filter(|v| v.is_finite()) {
                let a1_rev = l1.map_or(0.0, |v| (v - l2).exp().min(1.0));
                if a1_rev < 1.0 {
                    // first-stage proposal density ratio q₁(y₂→y₁) / q₁(x→y₁)
                    let w = lmat.solve_lower_triangular(&(&x + &lmat * &z1 - &y2)).expect("factor is nonsingular");
                    let log_q = -0.5 * (w.norm_squared() - z1.norm_squared());
                    let log_a2 = l2 - lx + log_q + (1.0 - a1_rev).ln() - (1.0 - a1).ln();
                    if u2.ln() < log_a2 {
                        x = y2;
                        lx = l2;
                        moved = true;
                    }
                }
            }
        }
        stats.push(&x);
        if it >= settings.burn_in {
            if moved {
                accepted += 1;
            }
            if (it - settings.burn_in + 1) % settings.thin == 0 {
                draws.push(x.clone());
            }
        }
    }
    Ok(SingleRun { draws, accepted })
}

/// Runs `settings.chains` independent chains from `start` (concurrently,
/// chain `k` on stream `k` of the seeded generator) and concatenates their
/// retained draws.
pub fn run_chain(target: &dyn Target, start: &DVector<f64>, labels: Vec<String>, settings: &McmcSettings) -> Result<Chain> {
    settings.validate()?;
    if start.len() != target.dim() || labels.len() != target.dim() {
        return Err(Error::Dimension(format!(
            "target has dimension {}, start {}, labels {}",
            target.dim(),
            start.len(),
            labels.len()
        )));
    }
    let init_cov = initial_covariance(target, start);
    let runs = (0..settings.chains)
        .into_par_iter()
        .map(|k| single_chain(target, start, &init_cov, settings, k as u64))
        .collect::<Result<Vec<_>>>()?;
    let chain_acceptance: Vec<f64> =
        runs.iter().map(|r| r.accepted as f64 / settings.iterations as f64).collect();
    let accepted: usize = runs.iter().map(|r| r.accepted).sum();
    let acceptance_rate = accepted as f64 / (settings.iterations * settings.chains) as f64;
    if acceptance_rate < settings.min_acceptance {
        return Err(Error::Mixing { rate: acceptance_rate });
    }
    let all: Vec<&DVector<f64>> = runs.iter().flat_map(|r| r.draws.iter()).collect();
    let d = start.len();
    let samples = DMatrix::from_fn(all.len(), d, |i, j| all[i][j]);
    let split_half = split_half(&samples);
    Ok(Chain { labels, samples, accepted, acceptance_rate, chain_acceptance, split_half, settings: settings.clone() })
}

fn split_half(samples: &DMatrix<f64>) -> Vec<f64> {
    let n = samples.nrows();
    (0..samples.ncols())
        .map(|j| {
            let col = samples.column(j);
            if n < 4 {
                return 0.0;
            }
            let mean = col.mean();
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            let a = col.rows(0, n / 2).mean();
            let b = col.rows(n / 2, n - n / 2).mean();
            if sd > 0.0 {
                (a - b).abs() / sd
            } else {
                0.0
            }
        })
        .collect()
}

/// Samples the original-model posterior over `(λ, θ, x₀)` starting at the mode.
pub fn run_mcmc(
    data: &Dataset,
    model: &dyn OdeModel,
    prior: &Prior,
    start: &ModeEstimate,
    settings: &McmcSettings,
) -> Result<Chain> {
    prior.check_model(model)?;
    let origin = start.original();
    prior.check_theta(origin.theta.as_slice())?;
    prior.check_x0(origin.x0.as_slice())?;
    let target = PosteriorTarget::new(model, data, prior, &origin, settings.solver_tol)?;
    run_chain(&target, &origin.to_vector(), original_labels(model), settings)
}

/// Unbiased sample covariance of the kept coordinates.
pub fn sample_covariance(chain: &Chain, keep: &[usize]) -> Result<CovarianceReport> {
    let n = chain.samples.nrows();
    if n < 2 {
        return Err(Error::Input(format!("need at least 2 draws, chain has {n}")));
    }
    if let Some(&k) = keep.iter().find(|&&k| k >= chain.samples.ncols()) {
        return Err(Error::Dimension(format!("keep index {k} out of range")));
    }
    let cols: Vec<DVector<f64>> = keep.iter().map(|&k| chain.samples.column(k).into_owned()).collect();
    let means: Vec<f64> = cols.iter().map(|c| c.mean()).collect();
    let mut cov = SymmetricMatrix::zeros(keep.len());
    for a in 0..keep.len() {
        for b in a..keep.len() {
            let s: f64 = cols[a].iter().zip(cols[b].iter()).map(|(x, y)| (x - means[a]) * (y - means[b])).sum();
            cov.set(a, b, s / (n - 1) as f64);
        }
    }
    let labels = keep.iter().map(|&k| chain.labels[k].clone()).collect();
    let mut report = CovarianceReport::new(Method::McmcOracle, labels, cov)?;
    report.meta = serde_json::json!({
        "draws": n,
        "acceptance_rate": chain.acceptance_rate,
    });
    Ok(report)
}
