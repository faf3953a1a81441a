//! In-process pipeline steps shared by the commands and the test suites.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use odelap::inference::{
    compare_reports, fit_map, run_mcmc, sample_covariance, Chain, Comparison, MapFit, ModeEstimate,
};
use odelap::laplace::{
    credible_band, invert_full, invert_lu, nearest_pd, schur_complement, CovarianceReport, CredibleBand, Method,
    SymmetricMatrix,
};
use odelap::models::{build_model, OdeModel};
use odelap::posterior::{original_hessian, original_labels, relaxed_hessian, relaxed_labels, Dataset, Prior};
use odelap::sensitivity::solve_reference;
use odelap::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, Keep, LaplaceSettings, Reduce, SimulateSpec, Variant};
use crate::error::{CliError, CliResult};
use crate::io;

/// A validated config with its model and prior built.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: Arc<dyn OdeModel>,
    pub prior: Prior,
    pub hash: String,
}

/// Simulated data plus the noiseless curve it was drawn around.
pub struct Simulation {
    pub data: Dataset,
    pub truth: DMatrix<f64>,
}

/// Outcome of a Laplace run. A precision that failed Cholesky with repair
/// off still yields a report (from an LU inverse) carrying a flag.
#[derive(Debug, Clone)]
pub struct LaplaceOutcome {
    pub report: CovarianceReport,
    pub not_pd_pivot: Option<usize>,
    pub repaired: bool,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> CliResult<Self> {
        config.validate()?;
        let model = build_model(&config.model)?;
        let prior = config.prior()?;
        prior.check_model(model.as_ref())?;
        let hash = config.hash();
        Ok(Self { config, model, prior, hash })
    }

    pub fn model(&self) -> &dyn OdeModel {
        self.model.as_ref()
    }

    /// Seed of the simulated dataset, if the config simulates one.
    pub fn data_seed(&self) -> Option<u64> {
        match &self.config.data {
            DataSource::Simulate(s) => Some(s.seed),
            DataSource::File(_) => None,
        }
    }

    pub fn simulate(&self) -> CliResult<Simulation> {
        match &self.config.data {
            DataSource::Simulate(spec) => simulate(self.model(), spec),
            DataSource::File(path) => {
                Err(CliError::Input(format!("config reads data from {}; nothing to simulate", path.display())))
            }
        }
    }

    /// The configured dataset: simulated in memory or read from file.
    pub fn dataset(&self) -> CliResult<Dataset> {
        let data = match &self.config.data {
            DataSource::Simulate(spec) => simulate(self.model(), spec)?.data,
            DataSource::File(path) => io::read_dataset(path)?.0,
        };
        self.check_data(&data)?;
        Ok(data)
    }

    pub fn check_data(&self, data: &Dataset) -> CliResult<()> {
        if data.state_dim() != self.model.state_dim() {
            return Err(CliError::Input(format!(
                "dataset has {} state columns, {} expects {}",
                data.state_dim(),
                self.model.name(),
                self.model.state_dim()
            )));
        }
        Ok(())
    }

    pub fn fit(&self, data: &Dataset) -> CliResult<MapFit> {
        self.check_data(data)?;
        let cfg = &self.config;
        let mut fit = fit_map(data, self.model(), cfg.tau, cfg.m, &self.prior, None, &cfg.optimizer)?;
        fit.mode.meta.seed = self.data_seed();
        Ok(fit)
    }

    /// Indices of the kept block within `(λ, θ, x₀, …)`.
    pub fn keep_indices(&self, keep: Keep) -> Vec<usize> {
        let end = 1 + self.model.param_dim() + self.model.state_dim();
        match keep {
            Keep::LambdaThetaX0 => (0..end).collect(),
            Keep::ThetaX0 => (1..end).collect(),
        }
    }

    pub fn keep_labels(&self, keep: Keep) -> Vec<String> {
        let all = original_labels(self.model());
        self.keep_indices(keep).into_iter().map(|k| all[k].clone()).collect()
    }

    pub fn laplace(&self, data: &Dataset, mode: &ModeEstimate, settings: &LaplaceSettings) -> CliResult<LaplaceOutcome> {
        self.check_data(data)?;
        let cfg = &self.config;
        let (hessian, labels, method, warnings, substeps) = match settings.variant {
            Variant::Relaxed => {
                let h = relaxed_hessian(self.model(), &mode.relaxed(), data, cfg.tau, &self.prior, cfg.m)?;
                (h, relaxed_labels(self.model(), data.points()), Method::LaplaceRelaxed, Vec::new(), None)
            }
            Variant::Original => {
                let h = original_hessian(self.model(), &mode.original(), data, &self.prior)?;
                (h.hessian, original_labels(self.model()), Method::LaplaceOriginal, h.warnings, Some(h.substeps))
            }
        };
        let keep = self.keep_indices(settings.keep);
        laplace_covariance(&hessian, &labels, &keep, method, settings).map(|mut out| {
            out.report.meta = serde_json::json!({
                "variant": settings.variant,
                "reduce": settings.reduce,
                "repair": settings.repair,
                "tau": cfg.tau,
                "m": cfg.m,
                "pd_status": out.report.covariance.pd_status(),
                "not_pd_pivot": out.not_pd_pivot,
                "repaired": out.repaired,
                "sensitivity_warnings": warnings,
                "substeps": substeps,
            });
            out
        })
    }

    pub fn mcmc(&self, data: &Dataset, mode: &ModeEstimate, keep: Keep) -> CliResult<(Chain, CovarianceReport)> {
        self.check_data(data)?;
        let chain = run_mcmc(data, self.model(), &self.prior, mode, &self.config.mcmc)?;
        let report = sample_covariance(&chain, &self.keep_indices(keep))?;
        Ok((chain, report))
    }

    /// 95% band for the ODE solution on the data grid, from `(θ, x₀)` at
    /// the mode and the matching block of `report`.
    pub fn band(&self, times: &[f64], mode: &ModeEstimate, report: &CovarianceReport) -> CliResult<CredibleBand> {
        let labels = self.keep_labels(Keep::ThetaX0);
        let block = report.select(&labels)?;
        let origin = mode.original();
        let mean = DVector::from_iterator(
            labels.len(),
            origin.theta.iter().chain(origin.x0.iter()).copied(),
        );
        let b = &self.config.band;
        Ok(credible_band(self.model(), &mean, &block.covariance, times, b.count, b.seed)?)
    }
}

/// Truth by the refined reference integrator, plus `N(0, σ²)` noise.
pub fn simulate(model: &dyn OdeModel, spec: &SimulateSpec) -> CliResult<Simulation> {
    let times = spec.grid.times()?;
    let truth = solve_reference(model, &spec.x0, &spec.theta, &times)?;
    let mut y = truth.clone();
    if spec.noise_variance > 0.0 {
        let noise = Normal::new(0.0, spec.noise_variance.sqrt())
            .map_err(|e| CliError::Input(format!("noise distribution: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for i in 0..y.nrows() {
            for j in 0..y.ncols() {
                y[(i, j)] += noise.sample(&mut rng);
            }
        }
    }
    Ok(Simulation { data: Dataset::new(times, y)?, truth })
}

/// Inverts a precision onto the `keep` block.
///
/// With `Reduce::Schur` the complement `A − B D⁻¹ C` is formed first. With
/// repair on, a non-PD precision (after reduction) is projected by
/// [`nearest_pd`] before inversion; with repair off it is inverted by LU
/// and the report is flagged.
pub fn laplace_covariance(
    hessian: &SymmetricMatrix,
    labels: &[String],
    keep: &[usize],
    method: Method,
    settings: &LaplaceSettings,
) -> CliResult<LaplaceOutcome> {
    let precision = match settings.reduce {
        Reduce::Schur => schur_complement(hessian, keep)?,
        Reduce::Full => hessian.clone(),
    };
    let mut not_pd_pivot = None;
    let mut repaired = false;
    let cov = match invert_full(&precision) {
        Ok(c) => c,
        Err(Error::NotPositiveDefinite { .. }) if settings.repair => {
            repaired = true;
            invert_full(&nearest_pd(&precision, settings.floor)?)?
        }
        Err(Error::NotPositiveDefinite { pivot }) => {
            not_pd_pivot = Some(pivot);
            invert_lu(&precision)?
        }
        Err(e) => return Err(e.into()),
    };
    let cov = match settings.reduce {
        Reduce::Schur => cov,
        Reduce::Full => cov.select(keep),
    };
    let kept: Vec<String> = keep.iter().map(|&k| labels[k].clone()).collect();
    let mut report = CovarianceReport::new(method, kept, cov)?;
    if let Some(pivot) = not_pd_pivot {
        report.flags.push(format!("precision is not positive definite (first failing pivot at index {pivot})"));
    }
    Ok(LaplaceOutcome { report, not_pd_pivot, repaired })
}

pub fn compare(reports: &[CovarianceReport]) -> CliResult<Comparison> {
    if reports.len() < 2 {
        return Err(CliError::Input(format!("compare needs at least 2 reports, got {}", reports.len())));
    }
    Ok(compare_reports(reports)?)
}

/// Largest tolerated ratio between Laplace and oracle variances.
pub const VARIANCE_FACTOR: f64 = 5.0;
/// Largest tolerated |Δr| on entries where the oracle correlation is strong.
pub const CORRELATION_DIFF: f64 = 0.35;
/// Oracle |r| above which an entry counts as strong.
pub const STRONG_CORRELATION: f64 = 0.2;
/// Largest tolerated Frobenius distance between correlation matrices.
pub const CORRELATION_FROBENIUS: f64 = 1.0;

/// Agreement between a Laplace report and the sampling oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    /// max over coordinates of max(a/b, b/a) for the variances.
    pub worst_variance_factor: f64,
    pub worst_variance_label: String,
    /// Largest |Δr| over strongly correlated oracle entries.
    pub worst_correlation_diff: f64,
    pub strong_entries: usize,
    pub correlation_frobenius: f64,
    pub covariance_frobenius: f64,
    pub variances_ok: bool,
    pub correlations_ok: bool,
    pub frobenius_ok: bool,
}

impl Agreement {
    pub fn passed(&self) -> bool {
        self.variances_ok && self.correlations_ok && self.frobenius_ok
    }
}

pub fn agreement(laplace: &CovarianceReport, oracle: &CovarianceReport) -> CliResult<Agreement> {
    if laplace.labels != oracle.labels {
        return Err(CliError::Input("reports cover different coordinates".into()));
    }
    let mut worst = (1.0, String::new());
    for (k, label) in laplace.labels.iter().enumerate() {
        let (a, b) = (laplace.variances[k], oracle.variances[k]);
        let f = if a > 0.0 && b > 0.0 { (a / b).max(b / a) } else { f64::INFINITY };
        if !(f <= worst.0) {
            worst = (f, label.clone());
        }
    }
    let d = laplace.labels.len();
    let (mut diff, mut strong) = (0.0f64, 0usize);
    for i in 0..d {
        for j in (i + 1)..d {
            let r = oracle.correlation.get(i, j);
            if r.abs() > STRONG_CORRELATION {
                strong += 1;
                diff = diff.max((laplace.correlation.get(i, j) - r).abs());
            }
        }
    }
    let cmp = compare_reports(&[laplace.clone(), oracle.clone()])?;
    let (corr_f, cov_f) = cmp
        .pairs
        .first()
        .map(|p| (p.correlation, p.covariance))
        .unwrap_or((f64::INFINITY, f64::INFINITY));
    Ok(Agreement {
        worst_variance_factor: worst.0,
        worst_variance_label: worst.1,
        worst_correlation_diff: diff,
        strong_entries: strong,
        correlation_frobenius: corr_f,
        covariance_frobenius: cov_f,
        variances_ok: worst.0 <= VARIANCE_FACTOR,
        correlations_ok: diff <= CORRELATION_DIFF,
        frobenius_ok: corr_f <= CORRELATION_FROBENIUS,
    })
}

/// Everything one end-to-end run produces.
pub struct PipelineRun {
    pub data: Dataset,
    pub fit: MapFit,
    pub laplace: LaplaceOutcome,
    pub chain: Chain,
    pub oracle: CovarianceReport,
    pub agreement: Agreement,
}

/// simulate or load → fit → Laplace → sampling oracle → agreement.
pub fn run_pipeline(exp: &Experiment) -> CliResult<PipelineRun> {
    let data = exp.dataset()?;
    let fit = exp.fit(&data)?;
    if !fit.converged {
        return Err(CliError::Convergence(format!(
            "MAP fit hit the sweep cap (gradient sup norm {:e})",
            fit.mode.meta.grad_norm.unwrap_or(f64::NAN)
        )));
    }
    let settings = &exp.config.laplace;
    let laplace = exp.laplace(&data, &fit.mode, settings)?;
    let (chain, oracle) = exp.mcmc(&data, &fit.mode, settings.keep)?;
    let agreement = agreement(&laplace.report, &oracle)?;
    Ok(PipelineRun { data, fit, laplace, chain, oracle, agreement })
}

/// One dataset of a repeat experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatRow {
    pub index: usize,
    pub data_seed: u64,
    pub mcmc_seed: u64,
    pub agreement: Option<Agreement>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub rows: Vec<RepeatRow>,
    /// Counts of correlation-matrix Frobenius distances.
    pub histogram: Vec<HistogramBin>,
    pub median_correlation_frobenius: f64,
    pub median_covariance_frobenius: f64,
    /// Runs that errored or failed the variance or correlation checks.
    pub failures: Vec<usize>,
}

/// Re-runs the pipeline on `count` datasets with seeds offset by the index.
/// Datasets run concurrently.
pub fn repeat_experiment(base: &ExperimentConfig, count: usize, bins: usize) -> CliResult<RepeatSummary> {
    if count == 0 {
        return Err(CliError::Input("repeat count must be positive".into()));
    }
    let DataSource::Simulate(spec) = &base.data else {
        return Err(CliError::Input("repeat experiments need a simulated data source".into()));
    };
    let rows: Vec<RepeatRow> = (0..count)
        .into_par_iter()
        .map(|k| {
            let mut cfg = base.clone();
            let data_seed = spec.seed + k as u64;
            let mcmc_seed = base.mcmc.seed + 1000 * k as u64;
            if let DataSource::Simulate(s) = &mut cfg.data {
                s.seed = data_seed;
            }
            cfg.mcmc.seed = mcmc_seed;
            let result = Experiment::new(cfg).and_then(|exp| run_pipeline(&exp));
            let (agreement, error) = match result {
                Ok(run) => (Some(run.agreement), None),
                Err(e) => (None, Some(e.to_string())),
            };
            RepeatRow { index: k, data_seed, mcmc_seed, agreement, error }
        })
        .collect();
    let failures = rows
        .iter()
        .filter(|r| r.agreement.as_ref().is_none_or(|a| !(a.variances_ok && a.correlations_ok)))
        .map(|r| r.index)
        .collect();
    let corr: Vec<f64> = rows.iter().filter_map(|r| r.agreement.as_ref().map(|a| a.correlation_frobenius)).collect();
    let cov: Vec<f64> = rows.iter().filter_map(|r| r.agreement.as_ref().map(|a| a.covariance_frobenius)).collect();
    Ok(RepeatSummary {
        histogram: histogram(&corr, bins),
        median_correlation_frobenius: median(&corr),
        median_covariance_frobenius: median(&cov),
        rows,
        failures,
    })
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Equal-width bins over `[0, max]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    let bins = bins.max(1);
    let top = values.iter().copied().fold(0.0, f64::max);
    let width = if top > 0.0 { top / bins as f64 } else { 1.0 };
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin { lower: b as f64 * width, upper: (b + 1) as f64 * width, count: 0 })
        .collect();
    for &v in values {
        let b = ((v / width) as usize).min(bins - 1);
        out[b].count += 1;
    }
    out
}
