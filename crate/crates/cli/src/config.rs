//! Experiment configuration, named presets and the config hash.

use std::path::{Path, PathBuf};

use odelap::inference::{MapSettings, McmcSettings};
use odelap::models::ModelSpec;
use odelap::posterior::Prior;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const PRESETS: [&str; 3] = ["fn-s3.1", "lorenz96-s3.2", "sir-s4-synthetic"];

/// Observation times, either listed or equidistant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    Uniform { t0: f64, t1: f64, points: usize },
    Explicit(Vec<f64>),
}

impl Grid {
    pub fn times(&self) -> CliResult<Vec<f64>> {
        let times = match self {
            Grid::Uniform { t0, t1, points } => {
                if *points < 2 {
                    return Err(CliError::Input("a uniform grid needs at least 2 points".into()));
                }
                (0..*points).map(|i| t0 + (t1 - t0) * i as f64 / (*points - 1) as f64).collect()
            }
            Grid::Explicit(v) => v.clone(),
        };
        if times.is_empty() || times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(CliError::Input("grid times must be finite and strictly increasing".into()));
        }
        Ok(times)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSpec {
    pub theta: Vec<f64>,
    pub x0: Vec<f64>,
    pub grid: Grid,
    /// Observation noise variance `1/λ`.
    pub noise_variance: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Simulate(SimulateSpec),
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Relaxed,
    Original,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Reduce {
    Full,
    Schur,
}

/// Which coordinates a Laplace report covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Keep {
    /// `(λ, θ, x₀)`
    LambdaThetaX0,
    /// `(θ, x₀)`
    ThetaX0,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaplaceSettings {
    pub variant: Variant,
    pub reduce: Reduce,
    pub repair: bool,
    pub keep: Keep,
    /// Eigenvalue floor for repair; default is `1e-10 · max diagonal`.
    pub floor: Option<f64>,
}

impl Default for LaplaceSettings {
    fn default() -> Self {
        Self { variant: Variant::Relaxed, reduce: Reduce::Schur, repair: false, keep: Keep::LambdaThetaX0, floor: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandSettings {
    pub count: usize,
    pub seed: u64,
}

impl Default for BandSettings {
    fn default() -> Self {
        Self { count: 1000, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub a0: f64,
    pub b0: f64,
    pub theta_bounds: Vec<(f64, f64)>,
    pub x0_bounds: Vec<(f64, f64)>,
}

/// A complete, self-describing experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSpec,
    pub data: DataSource,
    pub prior: PriorConfig,
    pub tau: f64,
    pub m: usize,
    #[serde(default)]
    pub optimizer: MapSettings,
    #[serde(default)]
    pub mcmc: McmcSettings,
    #[serde(default)]
    pub laplace: LaplaceSettings,
    #[serde(default)]
    pub band: BandSettings,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn validate(&self) -> CliResult<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(CliError::Input(format!("tau must be positive, got {}", self.tau)));
        }
        if self.m == 0 {
            return Err(CliError::Input("m must be at least 1".into()));
        }
        if let DataSource::Simulate(s) = &self.data {
            s.grid.times()?;
            if !(s.noise_variance >= 0.0) || !s.noise_variance.is_finite() {
                return Err(CliError::Input(format!("noise variance must be non-negative, got {}", s.noise_variance)));
            }
        }
        self.prior()?;
        self.mcmc.validate()?;
        Ok(())
    }

    pub fn prior(&self) -> CliResult<Prior> {
        Ok(Prior::new(self.prior.a0, self.prior.b0, self.prior.theta_bounds.clone(), self.prior.x0_bounds.clone())?)
    }

    /// SHA-256 of the canonical (compact, key-sorted) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        let canonical = serde_json::to_string(&value).expect("value serialises");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("{}: invalid config: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(name: &str) -> CliResult<Self> {
        let cfg = match name {
            "fn-s3.1" => fitzhugh_nagumo(),
            "lorenz96-s3.2" => lorenz96(),
            "sir-s4-synthetic" => sir_synthetic(),
            other => {
                return Err(CliError::Input(format!("unknown preset {other}; known: {}", PRESETS.join(", "))));
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn fitzhugh_nagumo() -> ExperimentConfig {
    ExperimentConfig {
        name: "fn-s3.1".into(),
        model: ModelSpec { name: "fitzhugh-nagumo".into(), config: json!({}) },
        data: DataSource::Simulate(SimulateSpec {
            theta: vec![0.2, 0.2, 3.0],
            x0: vec![-1.0, 1.0],
            grid: Grid::Uniform { t0: 0.0, t1: 20.0, points: 201 },
            noise_variance: 0.25,
            seed: 31,
        }),
        prior: PriorConfig {
            a0: 1.0,
            b0: 1.0,
            theta_bounds: vec![(0.0, 1.0), (0.0, 1.0), (1.0, 5.0)],
            x0_bounds: vec![(-3.0, 3.0), (-3.0, 3.0)],
        },
        tau: 1e-5,
        m: 1,
        optimizer: MapSettings::default(),
        mcmc: McmcSettings { iterations: 30_000, burn_in: 5_000, thin: 30, chains: 1, seed: 131, ..Default::default() },
        laplace: LaplaceSettings::default(),
        band: BandSettings::default(),
        output_dir: PathBuf::from("out/fn-s3.1"),
    }
}

fn lorenz96() -> ExperimentConfig {
    let theta: Vec<f64> = (0..4).flat_map(|_| [1.0, 1.0, 8.0]).collect();
    let theta_bounds = (0..4).flat_map(|_| [(0.0, 2.0), (0.0, 2.0), (4.0, 12.0)]).collect();
    ExperimentConfig {
        name: "lorenz96-s3.2".into(),
        model: ModelSpec { name: "lorenz96".into(), config: json!({ "p": 4 }) },
        data: DataSource::Simulate(SimulateSpec {
            theta,
            x0: vec![1.0, 8.0, 4.0, 3.0],
            grid: Grid::Uniform { t0: 0.0, t1: 5.0, points: 51 },
            noise_variance: 1.0,
            seed: 32,
        }),
        prior: PriorConfig { a0: 1.0, b0: 1.0, theta_bounds, x0_bounds: vec![(-5.0, 15.0); 4] },
        tau: 1e-4,
        m: 2,
        optimizer: MapSettings::default(),
        mcmc: McmcSettings { iterations: 200_000, burn_in: 100_000, thin: 800, chains: 4, seed: 132, ..Default::default() },
        // agreement is judged over θ and x₀
        laplace: LaplaceSettings { keep: Keep::ThetaX0, ..Default::default() },
        band: BandSettings::default(),
        output_dir: PathBuf::from("out/lorenz96-s3.2"),
    }
}

fn sir_synthetic() -> ExperimentConfig {
    let (nb, ng) = (30usize, 30usize);
    let t1 = 100.0;
    // smooth log-rate curves evaluated near each basis function's centre
    let centre = |k: usize, n: usize| t1 * k as f64 / (n - 1) as f64;
    let mut theta: Vec<f64> = (0..nb)
        .map(|k| (0.25 + 0.1 * (2.0 * std::f64::consts::PI * centre(k, nb) / t1).cos()).ln())
        .collect();
    theta.extend((0..ng).map(|k| (0.1 + 0.02 * centre(k, ng) / t1).ln()));
    let mut theta_bounds = vec![(-6.0, 1.0); nb];
    theta_bounds.extend(vec![(-6.0, 1.0); ng]);
    ExperimentConfig {
        name: "sir-s4-synthetic".into(),
        model: ModelSpec {
            name: "sir-tv".into(),
            config: json!({ "n_basis_beta": nb, "n_basis_gamma": ng, "N": 1.0e6, "window": [0.0, t1] }),
        },
        data: DataSource::Simulate(SimulateSpec {
            theta,
            x0: vec![100.0, 0.0],
            grid: Grid::Uniform { t0: 0.0, t1, points: 101 },
            noise_variance: 100.0,
            seed: 4,
        }),
        prior: PriorConfig { a0: 1.0, b0: 1.0, theta_bounds, x0_bounds: vec![(1.0, 1000.0), (0.0, 1000.0)] },
        tau: 1.0,
        m: 1,
        optimizer: MapSettings { tau_start: Some(1e4), ..MapSettings::default() },
        mcmc: McmcSettings::default(),
        laplace: LaplaceSettings { repair: true, keep: Keep::ThetaX0, ..LaplaceSettings::default() },
        band: BandSettings::default(),
        output_dir: PathBuf::from("out/sir-s4-synthetic"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_hash_stably() {
        for name in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            let text = serde_json::to_string(&cfg).unwrap();
            let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back.hash(), cfg.hash());
            assert_eq!(cfg.hash().len(), 64);
        }
        let mut cfg = ExperimentConfig::preset("fn-s3.1").unwrap();
        let h = cfg.hash();
        cfg.tau = 1e-4;
        assert_ne!(cfg.hash(), h);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ExperimentConfig::preset("fn-s3.1").unwrap();
        cfg.m = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::preset("fn-s3.1").unwrap();
        cfg.data = DataSource::Simulate(SimulateSpec {
            theta: vec![0.2, 0.2, 3.0],
            x0: vec![-1.0, 1.0],
            grid: Grid::Explicit(vec![0.0, 1.0, 0.5]),
            noise_variance: 0.25,
            seed: 1,
        });
        assert!(cfg.validate().is_err());
    }
}
