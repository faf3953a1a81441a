use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use odelap_cli::commands::{self, Context, Inputs, RunManifest, Schema};
use odelap_cli::config::{Keep, Reduce, Variant, PRESETS};
use odelap_cli::{CliError, CliResult, ExperimentConfig};

/// Laplace-approximated posterior covariances for ODE parameter inference.
///
/// Exit codes: 0 success, 2 input error, 3 numerical-validity failure,
/// 4 convergence or mixing failure.
#[derive(Parser)]
#[command(name = "odelap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Named preset instead of a config file.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory, overriding the config's.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct InputArgs {
    /// Dataset CSV (default: data.csv in the output directory).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Mode JSON (default: mode.json in the output directory).
    #[arg(long)]
    mode: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Print a preset config as JSON.
    Preset { name: String },
    /// Generate a dataset from the configured truth.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit the MAP mode of the relaxed posterior.
    Fit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        inputs: InputArgs,
    },
    /// Laplace covariance at the mode.
    Laplace {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        inputs: InputArgs,
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        #[arg(long, value_enum)]
        reduce: Option<Reduce>,
        #[arg(long, value_enum)]
        repair: Option<Toggle>,
        #[arg(long, value_enum)]
        keep: Option<Keep>,
        /// Eigenvalue floor for repair.
        #[arg(long)]
        floor: Option<f64>,
    },
    /// Run the adaptive Metropolis / delayed rejection oracle from the mode.
    Mcmc {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        inputs: InputArgs,
        #[arg(long, value_enum)]
        keep: Option<Keep>,
    },
    /// Compare covariance reports.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "out/compare")]
        out: PathBuf,
    },
    /// Re-run the pipeline over seeded datasets and tabulate distances.
    Repeat {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 30)]
        count: usize,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    /// 95% credible band of the solution curves.
    Band {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        inputs: InputArgs,
        /// Covariance report (default: the configured Laplace report).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Validate and normalise an external dataset.
    Ingest {
        path: PathBuf,
        #[arg(long, value_enum, default_value = "generic")]
        schema: Schema,
        #[arg(long)]
        out: PathBuf,
    },
    /// simulate → fit → laplace → mcmc → compare → band.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Check that a manifest's artifacts exist and carry its hash.
    Verify { manifest: PathBuf },
}

fn load(cfg: &ConfigArgs) -> CliResult<ExperimentConfig> {
    match (&cfg.config, &cfg.preset) {
        (Some(path), _) => ExperimentConfig::load(path),
        (None, Some(name)) => ExperimentConfig::preset(name),
        (None, None) => Err(CliError::Input(format!("pass --config or --preset ({})", PRESETS.join(", ")))),
    }
}

fn context(cfg: &ConfigArgs, edit: impl FnOnce(&mut ExperimentConfig)) -> CliResult<Context> {
    let mut config = load(cfg)?;
    edit(&mut config);
    Context::new(config, cfg.out.clone())
}

fn inputs(args: &InputArgs) -> Inputs {
    Inputs { data: args.data.clone(), mode: args.mode.clone(), report: None }
}

fn report(m: &RunManifest) {
    for path in &m.artifacts {
        println!("{}", path.display());
    }
    for flag in &m.flags {
        eprintln!("flag: {flag}");
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let manifest = match cli.command {
        Command::Preset { name } => {
            let cfg = ExperimentConfig::preset(&name)?;
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serialises"));
            return Ok(());
        }
        Command::Simulate { cfg } => commands::simulate(&context(&cfg, |_| {})?)?,
        Command::Fit { cfg, inputs: i } => commands::fit(&context(&cfg, |_| {})?, &inputs(&i))?,
        Command::Laplace { cfg, inputs: i, variant, reduce, repair, keep, floor } => {
            let ctx = context(&cfg, |c| {
                let l = &mut c.laplace;
                l.variant = variant.unwrap_or(l.variant);
                l.reduce = reduce.unwrap_or(l.reduce);
                l.keep = keep.unwrap_or(l.keep);
                l.floor = floor.or(l.floor);
                if let Some(t) = repair {
                    l.repair = matches!(t, Toggle::On);
                }
            })?;
            let settings = ctx.exp.config.laplace.clone();
            commands::laplace(&ctx, &inputs(&i), &settings)?
        }
        Command::Mcmc { cfg, inputs: i, keep } => {
            let ctx = context(&cfg, |c| c.laplace.keep = keep.unwrap_or(c.laplace.keep))?;
            let keep = ctx.exp.config.laplace.keep;
            commands::mcmc(&ctx, &inputs(&i), keep)?
        }
        Command::Compare { reports, out } => commands::compare(&reports, &out)?,
        Command::Repeat { cfg, count, bins } => commands::repeat(&context(&cfg, |_| {})?, count, bins)?,
        Command::Band { cfg, inputs: i, report } => {
            let mut inp = inputs(&i);
            inp.report = report;
            commands::band(&context(&cfg, |_| {})?, &inp)?
        }
        Command::Ingest { path, schema, out } => {
            let r = commands::ingest(&path, schema, &out)?;
            println!("{}: {} rows, columns {}", out.display(), r.rows, r.columns.join(","));
            return Ok(());
        }
        Command::Pipeline { cfg } => commands::pipeline(&context(&cfg, |_| {})?)?,
        Command::Verify { manifest } => {
            let m = RunManifest::load(&manifest)?;
            m.verify()?;
            println!("{} artifacts verified against {}", m.artifacts.len(), m.config_hash);
            return Ok(());
        }
    };
    report(&manifest);
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
