use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use survborrow::bench::{run_benchmark, run_prss, BenchmarkConfig, PrssConfig};
use survborrow::eif::write_influence_csv;
use survborrow::estimator::{cross_fit, CrossFitMode};
use survborrow::selector::PenaltyKind;
use survborrow::sim::DEFAULT_BETA_C;
use survborrow::{estimate, load_dataset, simulate, write_dataset, EstimatorKind, EstimatorOptions, Setting, SimulationConfig};

#[derive(Parser, Debug)]
#[command(name = "survborrow", version, about = "RMST treatment effects with selective borrowing of external controls")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a trial plus external-control dataset and write it as CSV.
    Simulate(SimulateArgs),
    /// Estimate the RMST difference from a dataset CSV and write a JSON report.
    Estimate(EstimateArgs),
    /// Run the Monte Carlo benchmark and write the metrics table as CSV.
    Benchmark(BenchmarkArgs),
    /// Subsampling probability of study success for a dataset CSV.
    Prss(PrssArgs),
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Simulation setting 1-5.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=5))]
    setting: u8,
    #[arg(long, default_value_t = 3)]
    p: usize,
    /// Censoring intensity β_C (default gives about 40% trial censoring).
    #[arg(long, default_value_t = DEFAULT_BETA_C, allow_negative_numbers = true)]
    beta_c: f64,
    #[arg(long, default_value_t = 2.0)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, default_value_t = 400)]
    n_trial: usize,
    #[arg(long, default_value_t = 500)]
    n_external: usize,
    #[arg(long, default_value_t = 200)]
    n_treated: usize,
    /// TOML simulation config; overrides the individual flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum KindArg {
    Aipw,
    Acw,
    Adapt,
}

impl From<KindArg> for EstimatorKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Aipw => EstimatorKind::Aipw,
            KindArg::Acw => EstimatorKind::Acw,
            KindArg::Adapt => EstimatorKind::Adapt,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PenaltyArg {
    AdaptiveLasso,
    Scad,
    Mcp,
}

impl From<PenaltyArg> for PenaltyKind {
    fn from(p: PenaltyArg) -> Self {
        match p {
            PenaltyArg::AdaptiveLasso => PenaltyKind::AdaptiveLasso,
            PenaltyArg::Scad => PenaltyKind::Scad,
            PenaltyArg::Mcp => PenaltyKind::Mcp,
        }
    }
}

#[derive(Args, Debug)]
struct EstimatorArgs {
    #[arg(long, default_value_t = 2)]
    folds: usize,
    /// Train on one half and evaluate on the other instead of swapping.
    #[arg(long)]
    single_split: bool,
    #[arg(long, value_enum, default_value_t = PenaltyArg::AdaptiveLasso)]
    penalty: PenaltyArg,
    /// Fixed penalty level (default: chosen by BIC).
    #[arg(long)]
    lambda: Option<f64>,
    /// Bootstrap resamples for standard errors.
    #[arg(long, default_value_t = 50)]
    bootstrap: usize,
    /// Re-select the penalty level in every bootstrap resample.
    #[arg(long)]
    refit_lambda: bool,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

impl EstimatorArgs {
    fn options(&self) -> EstimatorOptions {
        EstimatorOptions {
            folds: self.folds,
            mode: if self.single_split { CrossFitMode::SingleSplit } else { CrossFitMode::Swap },
            penalty: self.penalty.into(),
            lambda: self.lambda,
            bootstrap: self.bootstrap,
            refit_lambda: self.refit_lambda,
            level: self.level,
            ..EstimatorOptions::default()
        }
    }
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// Dataset CSV (default: stdin).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Number of covariate columns.
    #[arg(long, default_value_t = 3)]
    p: usize,
    #[arg(long)]
    tau: f64,
    #[arg(long, value_enum, default_value_t = KindArg::Adapt)]
    kind: KindArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    estimator: EstimatorArgs,
    /// Also write per-subject influence values as CSV.
    #[arg(long)]
    influence: Option<PathBuf>,
    /// Also write the per-external selection table as CSV.
    #[arg(long)]
    selection: Option<PathBuf>,
    /// Output JSON (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, default_value_t = 200)]
    n_treated: usize,
    #[arg(long, default_value_t = 500)]
    n_external: usize,
    /// Concurrent-control sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "200")]
    n0: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    replications: usize,
    /// Use the full 500 replications.
    #[arg(long, conflicts_with = "replications")]
    full: bool,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "aipw,acw,adapt")]
    kinds: Vec<KindArg>,
    /// Power threshold: tests H1: θ > threshold.
    #[arg(long, default_value_t = -0.3, allow_negative_numbers = true)]
    threshold: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 1_000_000)]
    truth_draws: usize,
    #[command(flatten)]
    estimator: EstimatorArgs,
    /// Output directory for metrics.csv and replications.json (default: metrics to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PrssArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    p: usize,
    /// Control subsample sizes, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    repeats: usize,
    /// Detection thresholds (success means θ < threshold), comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "0")]
    thresholds: Vec<f64>,
    /// Horizons, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    tau: Vec<f64>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    estimator: EstimatorArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&*e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(1)
        }
    }
}

type CliResult<T = ()> = Result<T, Box<dyn std::error::Error>>;

fn sink(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).map_err(|e| format!("cannot create {}: {e}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn read_input(path: Option<&Path>, p: usize) -> CliResult<survborrow::Dataset> {
    let mut text = String::new();
    match path {
        Some(path) if path != Path::new("-") => {
            File::open(path)
                .map_err(|e| format!("cannot open {}: {e}", path.display()))?
                .read_to_string(&mut text)?;
        }
        _ => {
            io::stdin().read_to_string(&mut text)?;
        }
    }
    Ok(load_dataset(text.as_bytes(), p)?)
}

fn sim_config(args: &SimArgs, n_trial: usize, n_external: usize, n_treated: usize) -> CliResult<SimulationConfig> {
    let setting = Setting::try_from(args.setting)?;
    let mut c = SimulationConfig::new(setting, n_trial, n_external, n_treated);
    c.p = args.p;
    c.beta_c = args.beta_c;
    c.tau = args.tau;
    c.seed = args.seed;
    Ok(c)
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Simulate(a) => {
            let config = match &a.config {
                Some(path) => SimulationConfig::from_toml_str(&fs::read_to_string(path)?)?,
                None => sim_config(&a.sim, a.n_trial, a.n_external, a.n_treated)?,
            };
            let data = simulate(&config)?;
            write_dataset(&data, sink(a.out.as_deref())?)?;
        }
        Command::Estimate(a) => {
            let data = read_input(a.input.as_deref(), a.p)?;
            let options = a.estimator.options();
            let report = estimate(&data, a.kind.into(), a.tau, &options, a.seed)?;
            if a.influence.is_some() || a.selection.is_some() {
                let fit = cross_fit(&data, a.tau, &options, a.seed)?;
                if let Some(path) = &a.influence {
                    write_influence_csv(&fit.rows, File::create(path)?)?;
                }
                if let Some(path) = &a.selection {
                    match &fit.selection {
                        Some(sel) => sel.write_csv(File::create(path)?)?,
                        None => log::warn!("no external controls: selection table not written"),
                    }
                }
            }
            let mut out = sink(a.out.as_deref())?;
            writeln!(out, "{}", report.to_json()?)?;
        }
        Command::Benchmark(a) => {
            let base = sim_config(&a.sim, a.n_treated, a.n_external, a.n_treated)?;
            let mut config = BenchmarkConfig::new(base);
            config.replications = if a.full { 500 } else { a.replications };
            config.kinds = a.kinds.iter().map(|&k| k.into()).collect();
            config.n0_grid = a.n0.clone();
            config.bootstrap = a.estimator.bootstrap;
            config.threshold = a.threshold;
            config.alpha = a.alpha;
            config.truth_draws = a.truth_draws;
            config.estimator = a.estimator.options();
            let result = run_benchmark(&config)?;
            if result.failures > 0 {
                log::warn!("{} replications failed and were excluded", result.failures);
            }
            match &a.out {
                Some(dir) => {
                    fs::create_dir_all(dir)?;
                    result.table.write_csv(File::create(dir.join("metrics.csv"))?)?;
                    serde_json::to_writer_pretty(File::create(dir.join("replications.json"))?, &result.replications)?;
                }
                None => result.table.write_csv(io::stdout().lock())?,
            }
        }
        Command::Prss(a) => {
            let data = read_input(a.input.as_deref(), a.p)?;
            let config = PrssConfig {
                subsample_sizes: a.sizes.clone(),
                repeats: a.repeats,
                thresholds: a.thresholds.clone(),
                taus: a.tau.clone(),
                alpha: a.alpha,
                seed: a.seed,
                estimator: a.estimator.options(),
            };
            run_prss(&data, &config)?.write_csv(sink(a.out.as_deref())?)?;
        }
    }
    Ok(())
}
