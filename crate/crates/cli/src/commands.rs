//! The `odelap` subcommands: each reads a config, runs one pipeline step,
//! writes its artifacts under the output directory and a run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use odelap::inference::{load_mode, ModeEstimate};
use odelap::laplace::CovarianceReport;
use odelap::posterior::Dataset;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{DataSource, ExperimentConfig, Keep, LaplaceSettings, Reduce, Variant};
use crate::error::{CliError, CliResult};
use crate::io;
use crate::pipeline::{self, Experiment};

/// File names inside the output directory.
pub const DATA_FILE: &str = "data.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const MODE_FILE: &str = "mode.json";
pub const FIT_LOG_FILE: &str = "fit_log.csv";
pub const CHAIN_FILE: &str = "chain.csv";
pub const ORACLE_FILE: &str = "report-mcmc-oracle.json";
pub const BAND_FILE: &str = "band.csv";

pub fn laplace_file(settings: &LaplaceSettings) -> String {
    let variant = match settings.variant {
        Variant::Relaxed => "relaxed",
        Variant::Original => "original",
    };
    let reduce = match settings.reduce {
        Reduce::Schur => "schur",
        Reduce::Full => "full",
    };
    let repair = if settings.repair { "-repaired" } else { "" };
    format!("report-laplace-{variant}-{reduce}{repair}.json")
}

/// What a command wrote, with timings and validity flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<PathBuf>,
    pub timings: BTreeMap<String, f64>,
    pub flags: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, hash: &str) -> Self {
        Self { command: command.into(), config_hash: hash.into(), ..Default::default() }
    }

    fn time<T>(&mut self, step: &str, f: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
        let start = Instant::now();
        let out = f();
        self.timings.insert(step.into(), start.elapsed().as_secs_f64());
        out
    }

    fn wrote(&mut self, path: PathBuf) {
        self.artifacts.push(path);
    }

    pub fn path(dir: &Path, command: &str) -> PathBuf {
        dir.join(format!("manifest-{command}.json"))
    }

    pub fn save(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = Self::path(dir, &self.command);
        io::write_json(&path, self, &self.config_hash)?;
        Ok(path)
    }

    /// Every artifact exists and records this manifest's hash.
    pub fn verify(&self) -> CliResult<()> {
        for path in &self.artifacts {
            match io::recorded_hash(path)? {
                Some(h) if h == self.config_hash => {}
                Some(h) => {
                    return Err(CliError::Validity(format!("{} carries hash {h}, expected {}", path.display(), self.config_hash)))
                }
                None => return Err(CliError::Validity(format!("{} carries no config hash", path.display()))),
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let v = io::read_json_value(path)?;
        serde_json::from_value(v).map_err(|e| CliError::Input(format!("{}: not a run manifest: {e}", path.display())))
    }
}

/// Where a command finds its inputs; defaults live in the output directory.
#[derive(Debug, Clone, Default)]
pub struct Inputs {
    pub data: Option<PathBuf>,
    pub mode: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

pub struct Context {
    pub exp: Experiment,
    pub out: PathBuf,
}

impl Context {
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>) -> CliResult<Self> {
        let out = out.unwrap_or_else(|| config.output_dir.clone());
        Ok(Self { exp: Experiment::new(config)?, out })
    }

    fn hash(&self) -> &str {
        &self.exp.hash
    }

    fn manifest(&self, command: &str) -> RunManifest {
        let mut m = RunManifest::new(command, self.hash());
        if let Some(s) = self.exp.data_seed() {
            m.seeds.insert("data".into(), s);
        }
        m
    }

    fn finish(&self, m: &RunManifest) -> CliResult<()> {
        m.save(&self.out)?;
        Ok(())
    }

    /// `--data` if given, else `data.csv` in the output directory, else the
    /// config's own source.
    pub fn dataset(&self, inputs: &Inputs) -> CliResult<Dataset> {
        let default = self.out.join(DATA_FILE);
        let data = match (&inputs.data, &self.exp.config.data) {
            (Some(path), _) => io::read_dataset(path)?.0,
            (None, DataSource::File(path)) => io::read_dataset(path)?.0,
            (None, DataSource::Simulate(_)) if default.exists() => io::read_dataset(&default)?.0,
            (None, DataSource::Simulate(_)) => self.exp.dataset()?,
        };
        self.exp.check_data(&data)?;
        Ok(data)
    }

    pub fn mode(&self, inputs: &Inputs) -> CliResult<ModeEstimate> {
        let path = inputs.mode.clone().unwrap_or_else(|| self.out.join(MODE_FILE));
        if !path.exists() {
            return Err(CliError::Input(format!("mode file {} not found; run `fit` first", path.display())));
        }
        Ok(load_mode(&path, &self.exp.prior)?)
    }
}

pub fn simulate(ctx: &Context) -> CliResult<RunManifest> {
    let mut m = ctx.manifest("simulate");
    let sim = m.time("simulate", || ctx.exp.simulate())?;
    let data_path = ctx.out.join(DATA_FILE);
    io::write_dataset(&data_path, &sim.data, ctx.hash())?;
    m.wrote(data_path);
    let DataSource::Simulate(spec) = &ctx.exp.config.data else { unreachable!("simulate checked the source") };
    let truth = json!({
        "theta": spec.theta,
        "x0": spec.x0,
        "noise_variance": spec.noise_variance,
        "seed": spec.seed,
        "times": sim.data.times,
        "states": (0..sim.truth.nrows()).map(|i| sim.truth.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
    });
    let truth_path = ctx.out.join(TRUTH_FILE);
    io::write_json(&truth_path, &truth, ctx.hash())?;
    m.wrote(truth_path);
    ctx.finish(&m)?;
    Ok(m)
}

pub fn fit(ctx: &Context, inputs: &Inputs) -> CliResult<RunManifest> {
    let mut m = ctx.manifest("fit");
    let data = ctx.dataset(inputs)?;
    let fit = m.time("fit", || ctx.exp.fit(&data));
    let fit = match fit {
        Ok(f) => f,
        Err(e) => {
            let diag = ctx.out.join("fit_diagnostics.json");
            io::write_json(&diag, &json!({ "error": e.to_string() }), ctx.hash())?;
            m.wrote(diag);
            m.flags.push(e.to_string());
            ctx.finish(&m)?;
            return Err(e);
        }
    };
    let log_path = ctx.out.join(FIT_LOG_FILE);
    let rows: Vec<Vec<String>> = fit
        .log
        .iter()
        .map(|r| {
            vec![
                format!("{:?}", r.tau),
                r.sweep.to_string(),
                format!("{:?}", r.lambda),
                format!("{:?}", r.start),
                format!("{:?}", r.end),
                format!("{:?}", r.grad_norm),
                format!("{:?}", r.damping),
                format!("{:?}", r.step),
            ]
        })
        .collect();
    io::write_rows(&log_path, &["tau", "sweep", "lambda", "start", "end", "grad_norm", "damping", "step"], &rows, ctx.hash())?;
    m.wrote(log_path);
    let mode_path = ctx.out.join(MODE_FILE);
    fit.mode.save(&mode_path, Some(ctx.hash()))?;
    m.wrote(mode_path);
    if !fit.converged {
        let msg = format!(
            "MAP fit stopped at the sweep cap with gradient sup norm {:e}",
            fit.mode.meta.grad_norm.unwrap_or(f64::NAN)
        );
        m.flags.push(msg.clone());
        ctx.finish(&m)?;
        return Err(CliError::Convergence(msg));
    }
    ctx.finish(&m)?;
    Ok(m)
}

fn write_report(m: &mut RunManifest, path: PathBuf, report: &CovarianceReport, hash: &str) -> CliResult<()> {
    io::write_json(&path, report, hash)?;
    m.wrote(path);
    Ok(())
}

/// Writes the report even when it is flagged; a flagged report exits 3.
pub fn laplace(ctx: &Context, inputs: &Inputs, settings: &LaplaceSettings) -> CliResult<RunManifest> {
    let mut m = ctx.manifest("laplace");
    let data = ctx.dataset(inputs)?;
    let mode = ctx.mode(inputs)?;
    let out = m.time("laplace", || ctx.exp.laplace(&data, &mode, settings))?;
    write_report(&mut m, ctx.out.join(laplace_file(settings)), &out.report, ctx.hash())?;
    m.flags.extend(out.report.flags.iter().cloned());
    ctx.finish(&m)?;
    if let Some(pivot) = out.not_pd_pivot {
        return Err(CliError::Validity(format!(
            "precision is not positive definite (first failing pivot at index {pivot}); rerun with --repair on to project it"
        )));
    }
    if !out.report.is_valid() {
        return Err(CliError::Validity(format!("covariance report is invalid: {}", out.report.flags.join("; "))));
    }
    Ok(m)
}

pub fn mcmc(ctx: &Context, inputs: &Inputs, keep: Keep) -> CliResult<RunManifest> {
    let mut m = ctx.manifest("mcmc");
    m.seeds.insert("mcmc".into(), ctx.exp.config.mcmc.seed);
    let data = ctx.dataset(inputs)?;
    let mode = ctx.mode(inputs)?;
    let result = m.time("mcmc", || ctx.exp.mcmc(&data, &mode, keep));
    let (chain, report) = match result {
        Ok(v) => v,
        Err(e) => {
            m.flags.push(e.to_string());
            ctx.finish(&m)?;
            return Err(e);
        }
    };
    let chain_path = ctx.out.join(CHAIN_FILE);
    io::write_chain(&chain_path, &chain, ctx.hash())?;
    m.wrote(chain_path);
    let diag_path = ctx.out.join("mcmc_diagnostics.json");
    let diag = json!({
        "acceptance_rate": chain.acceptance_rate,
        "chain_acceptance": chain.chain_acceptance,
        "split_half": chain.labels.iter().zip(&chain.split_half).map(|(l, v)| (l.clone(), *v)).collect::<BTreeMap<_, _>>(),
        "draws": chain.samples.nrows(),
        "settings": chain.settings,
    });
    io::write_json(&diag_path, &diag, ctx.hash())?;
    m.wrote(diag_path);
    write_report(&mut m, ctx.out.join(ORACLE_FILE), &report, ctx.hash())?;
    m.flags.extend(report.flags.iter().cloned());
    ctx.finish(&m)?;
    Ok(m)
}

pub fn band(ctx: &Context, inputs: &Inputs) -> CliResult<RunManifest> {
    let mut m = ctx.manifest("band");
    m.seeds.insert("band".into(), ctx.exp.config.band.seed);
    let data = ctx.dataset(inputs)?;
    let mode = ctx.mode(inputs)?;
    let report_path = inputs
        .report
        .clone()
        .unwrap_or_else(|| ctx.out.join(laplace_file(&ctx.exp.config.laplace)));
    let report = io::read_report(&report_path)?;
    let band = m.time("band", || ctx.exp.band(&data.times, &mode, &report))?;
    let path = ctx.out.join(BAND_FILE);
    io::write_band(&path, &band, ctx.hash())?;
    m.wrote(path);
    if band.dropped > 0 {
        m.flags.push(format!("{} of {} sample curves failed to integrate", band.dropped, band.count));
    }
    ctx.finish(&m)?;
    Ok(m)
}

/// Hash for outputs derived from several files: their shared hash, or a
/// digest of all of them.
fn combined_hash(paths: &[PathBuf]) -> CliResult<String> {
    let hashes = paths.iter().map(|p| io::recorded_hash(p)).collect::<CliResult<Vec<_>>>()?;
    if let Some(Some(first)) = hashes.first() {
        if hashes.iter().all(|h| h.as_deref() == Some(first.as_str())) {
            return Ok(first.clone());
        }
    }
    let mut d = Sha256::new();
    for h in &hashes {
        d.update(h.as_deref().unwrap_or("-").as_bytes());
        d.update(b"\n");
    }
    Ok(d.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn compare(reports: &[PathBuf], out: &Path) -> CliResult<RunManifest> {
    let hash = combined_hash(reports)?;
    let mut m = RunManifest::new("compare", &hash);
    let loaded = reports.iter().map(|p| io::read_report(p)).collect::<CliResult<Vec<_>>>()?;
    let cmp = pipeline::compare(&loaded)?;
    let json_path = out.join("comparison.json");
    io::write_json(&json_path, &cmp, &hash)?;
    m.wrote(json_path);

    let mut header = vec!["label".to_string()];
    header.extend(cmp.methods.iter().map(|k| format!("variance:{k}")));
    header.extend(cmp.methods.iter().map(|k| format!("relative:{k}")));
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
    let rows: Vec<Vec<String>> = cmp
        .variances
        .iter()
        .map(|r| {
            let mut row = vec![r.label.clone()];
            row.extend(r.variances.iter().map(|v| cell(*v)));
            row.extend(r.relative.iter().map(|v| cell(*v)));
            row
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let var_path = out.join("relative_variances.csv");
    io::write_rows(&var_path, &header_refs, &rows, &hash)?;
    m.wrote(var_path);

    let pair_rows: Vec<Vec<String>> = cmp
        .pairs
        .iter()
        .map(|p| {
            vec![
                cmp.methods[p.first].clone(),
                cmp.methods[p.second].clone(),
                format!("{:?}", p.covariance),
                format!("{:?}", p.correlation),
            ]
        })
        .collect();
    let pair_path = out.join("frobenius.csv");
    io::write_rows(&pair_path, &["first", "second", "covariance", "correlation"], &pair_rows, &hash)?;
    m.wrote(pair_path);

    for (k, r) in loaded.iter().enumerate() {
        let path = out.join(format!("correlation-{k}-{}.csv", r.method.as_str()));
        io::write_matrix(&path, &r.labels, &r.correlation, &hash)?;
        m.wrote(path);
    }
    for (k, ok) in cmp.valid.iter().enumerate() {
        if !ok {
            m.flags.push(format!("report {k} excluded: {}", cmp.flags[k].join("; ")));
        }
    }
    m.save(out)?;
    Ok(m)
}

pub fn repeat(ctx: &Context, count: usize, bins: usize) -> CliResult<RunManifest> {
    let mut m = ctx.manifest("repeat");
    let summary = m.time("repeat", || pipeline::repeat_experiment(&ctx.exp.config, count, bins))?;
    let json_path = ctx.out.join("repeat.json");
    io::write_json(&json_path, &summary, ctx.hash())?;
    m.wrote(json_path);
    let rows: Vec<Vec<String>> = summary
        .rows
        .iter()
        .map(|r| {
            let a = r.agreement.as_ref();
            let f = |g: fn(&pipeline::Agreement) -> f64| a.map_or(String::new(), |a| format!("{:?}", g(a)));
            vec![
                r.index.to_string(),
                r.data_seed.to_string(),
                r.mcmc_seed.to_string(),
                f(|a| a.covariance_frobenius),
                f(|a| a.correlation_frobenius),
                f(|a| a.worst_variance_factor),
                f(|a| a.worst_correlation_diff),
                a.map_or("error".into(), |a| (a.variances_ok && a.correlations_ok).to_string()),
                r.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    let table = ctx.out.join("repeat_runs.csv");
    io::write_rows(
        &table,
        &["run", "data_seed", "mcmc_seed", "cov_frobenius", "corr_frobenius", "variance_factor", "corr_diff", "passed", "error"],
        &rows,
        ctx.hash(),
    )?;
    m.wrote(table);
    let hist_rows: Vec<Vec<String>> = summary
        .histogram
        .iter()
        .map(|b| vec![format!("{:?}", b.lower), format!("{:?}", b.upper), b.count.to_string()])
        .collect();
    let hist = ctx.out.join("repeat_histogram.csv");
    io::write_rows(&hist, &["lower", "upper", "count"], &hist_rows, ctx.hash())?;
    m.wrote(hist);
    m.flags.extend(summary.failures.iter().map(|k| format!("run {k} failed the agreement checks")));
    ctx.finish(&m)?;
    if !summary.failures.is_empty() {
        return Err(CliError::Validity(format!("{} of {count} runs failed the agreement checks", summary.failures.len())));
    }
    Ok(m)
}

/// simulate (when configured) → fit → Laplace → oracle → compare → band.
pub fn pipeline(ctx: &Context) -> CliResult<RunManifest> {
    let inputs = Inputs::default();
    let mut m = ctx.manifest("pipeline");
    let absorb = |m: &mut RunManifest, sub: RunManifest| {
        m.artifacts.extend(sub.artifacts);
        m.timings.extend(sub.timings);
        m.flags.extend(sub.flags);
        m.seeds.extend(sub.seeds);
    };
    if matches!(ctx.exp.config.data, DataSource::Simulate(_)) {
        let sub = simulate(ctx)?;
        absorb(&mut m, sub);
    }
    let sub = fit(ctx, &inputs)?;
    absorb(&mut m, sub);
    let settings = ctx.exp.config.laplace.clone();
    let sub = laplace(ctx, &inputs, &settings)?;
    absorb(&mut m, sub);
    let sub = mcmc(ctx, &inputs, settings.keep)?;
    absorb(&mut m, sub);
    let reports = [ctx.out.join(laplace_file(&settings)), ctx.out.join(ORACLE_FILE)];
    let cmp_dir = ctx.out.join("compare");
    let sub = compare(&reports, &cmp_dir)?;
    absorb(&mut m, sub);
    let sub = band(ctx, &inputs)?;
    absorb(&mut m, sub);
    ctx.finish(&m)?;
    Ok(m)
}

/// Validation outcome of an ingested file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub source: PathBuf,
    pub schema: String,
    pub rows: usize,
    pub columns: Vec<String>,
    pub problems: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Schema {
    /// time plus infected and removed counts, both non-negative
    Sir,
    /// time plus any number of value columns
    Generic,
}

/// Normalises an external CSV to `t,x1..xp`, listing every problem found.
pub fn ingest(source: &Path, schema: Schema, out: &Path) -> CliResult<IngestReport> {
    let table = io::read_table(source)?;
    let schema_name = match schema {
        Schema::Sir => "sir",
        Schema::Generic => "generic",
    };
    let mut problems = Vec::new();
    let p = table.header.len().saturating_sub(1);
    if p == 0 {
        problems.push("need a time column and at least one value column".to_string());
    }
    if schema == Schema::Sir && p != 2 {
        problems.push(format!("sir schema expects 2 value columns (I, R), found {p}"));
    }
    for (k, row) in table.rows.iter().enumerate() {
        let line = k + 1;
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            problems.push(format!("row {line}: non-finite value in column {}", c + 1));
        }
        if k > 0 && !(row[0] > table.rows[k - 1][0]) {
            problems.push(format!("row {line}: time {} does not increase", row[0]));
        }
        if schema == Schema::Sir {
            for (c, name) in [(1, "I"), (2, "R")] {
                if row.get(c).is_some_and(|&v| v < 0.0) {
                    problems.push(format!("row {line}: negative {name} ({})", row[c]));
                }
            }
        }
    }
    if table.rows.is_empty() {
        problems.push("no data rows".to_string());
    }
    let report = IngestReport {
        source: source.to_path_buf(),
        schema: schema_name.into(),
        rows: table.rows.len(),
        columns: table.header.clone(),
        problems,
    };
    if !report.problems.is_empty() {
        return Err(CliError::Input(format!("{}: {}", source.display(), report.problems.join("; "))));
    }
    let hash = match table.hash {
        Some(h) => h,
        None => {
            let bytes = std::fs::read(source).map_err(|e| CliError::io(source, e))?;
            Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
        }
    };
    let times: Vec<f64> = table.rows.iter().map(|r| r[0]).collect();
    let y = nalgebra::DMatrix::from_fn(table.rows.len(), p, |i, j| table.rows[i][j + 1]);
    let data = Dataset::new(times, y).map_err(|e| CliError::Input(format!("{}: {e}", source.display())))?;
    io::write_dataset(out, &data, &hash)?;
    let report_path = out.with_extension("validation.json");
    io::write_json(&report_path, &report, &hash)?;
    Ok(report)
}
