use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use goalleak_core::markov::build_chain;
use goalleak_core::oracle;
use goalleak_core::policy::{policy_analytics, solve_optimal_policy, tune_periodic};
use goalleak_core::sim::PolicyChoice;
use goalleak_core::sweep::{emit_trace, run_sweep, write_rows, OutputFormat, SweepSpec};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "goalleak",
    version,
    about = "Timing side-channel leakage of goal-oriented remote monitoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (beta, theta, D, policy) cell and write one row per cell.
    Sweep {
        #[command(flatten)]
        grid: GridArgs,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run one episode of the first configured cell and export its trace.
    Trace {
        #[command(flatten)]
        grid: GridArgs,
        /// Episode stream under the master seed.
        #[arg(long, default_value_t = 0)]
        stream: u64,
    },
    /// Print the optimal and tuned periodic schedules with their timing analytics.
    Policy {
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Run the brute-force verification suites.
    Oracle {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "csv")]
        format: OutputFormat,
    },
}

/// Experiment settings; flags override the config file.
#[derive(Args)]
struct GridArgs {
    /// TOML file with sweep settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    beta: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    theta: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    dmax: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    policy: Vec<PolicyChoice>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lmin: Option<f64>,
    #[arg(long)]
    lmax: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tmax: Option<usize>,
    /// Number of source states.
    #[arg(long)]
    size: Option<usize>,
    /// Leakage weight in Bob's penalized reward.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<OutputFormat>,
}

impl GridArgs {
    fn spec(&self) -> Result<SweepSpec> {
        let mut spec = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                SweepSpec::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => SweepSpec::default(),
        };
        if !self.beta.is_empty() {
            spec.betas = self.beta.clone();
        }
        if !self.theta.is_empty() {
            spec.thetas = self.theta.clone();
        }
        if !self.dmax.is_empty() {
            spec.d_values = self.dmax.clone();
        }
        if !self.policy.is_empty() {
            spec.policies = self.policy.clone();
        }
        spec.seed = self.seed.unwrap_or(spec.seed);
        spec.episodes = self.episodes.unwrap_or(spec.episodes);
        spec.steps = self.steps.unwrap_or(spec.steps);
        spec.l_min = self.lmin.unwrap_or(spec.l_min);
        spec.l_max = self.lmax.unwrap_or(spec.l_max);
        spec.gamma = self.gamma.unwrap_or(spec.gamma);
        spec.t_max = self.tmax.unwrap_or(spec.t_max);
        spec.size = self.size.unwrap_or(spec.size);
        spec.epsilon = self.epsilon.unwrap_or(spec.epsilon);
        spec.validate()?;
        Ok(spec)
    }

    fn format(&self) -> OutputFormat {
        self.format
            .unwrap_or_else(|| match self.out.as_ref().and_then(|p| p.extension()) {
                Some(ext) if ext == "json" => OutputFormat::Json,
                _ => OutputFormat::Csv,
            })
    }

    fn writer(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(path) => {
                let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
                Box::new(BufWriter::new(file))
            }
            None => Box::new(io::stdout().lock()),
        })
    }
}

fn sweep(grid: &GridArgs, jobs: Option<usize>) -> Result<bool> {
    let spec = grid.spec()?;
    let rows = run_sweep(&spec, jobs)?;
    let mut out = grid.writer()?;
    write_rows(&rows, grid.format(), &mut out)?;
    out.flush()?;
    let failed: Vec<_> = rows.iter().filter(|r| !r.is_ok()).collect();
    for row in &failed {
        eprintln!(
            "cell beta={} theta={} D={} policy={} failed: {}",
            row.beta,
            row.theta,
            row.d,
            row.policy.name(),
            row.error.as_deref().unwrap_or_default()
        );
    }
    Ok(failed.is_empty())
}

fn trace(grid: &GridArgs, stream: u64) -> Result<bool> {
    let Some(out) = &grid.out else {
        bail!("trace needs --out");
    };
    let spec = grid.spec()?;
    let (trace, files) = emit_trace(&spec, stream, out)?;
    eprintln!(
        "wrote {} steps, {} requests to {} (settings in {})",
        trace.steps.len(),
        trace.epochs().len(),
        files.steps.display(),
        files.meta.display()
    );
    Ok(true)
}

fn policy(grid: &GridArgs) -> Result<bool> {
    let spec = grid.spec()?;
    let mut reports = Vec::new();
    for &beta in &spec.betas {
        for &theta in &spec.thetas {
            let chain = build_chain(spec.size, theta)?;
            let mpi = solve_optimal_policy(&chain, beta, spec.gamma, spec.t_max)?;
            let periodic = tune_periodic(&chain, beta, spec.t_max)?;
            let analytics = policy_analytics(&chain, &mpi.sigma)?;
            reports.push(json!({
                "beta": beta,
                "theta": theta,
                "gamma": spec.gamma,
                "t_max": spec.t_max,
                "sigma": mpi.sigma,
                "period": periodic.period,
                "timing_entropy": analytics.timing_entropy,
                "tx_prob": analytics.transmission_prob,
                "timing_distribution": analytics.timing_distribution,
                "embedded_stationary": analytics.embedded_stationary,
            }));
        }
    }
    let mut out = grid.writer()?;
    serde_json::to_writer_pretty(&mut out, &reports)?;
    writeln!(out)?;
    out.flush()?;
    Ok(true)
}

fn run_oracles(seed: u64, format: OutputFormat) -> Result<bool> {
    let reports = oracle::run_all(seed)?;
    let mut out = io::stdout().lock();
    match format {
        OutputFormat::Json => {
            serde_json::to_writer_pretty(&mut out, &reports)?;
            writeln!(out)?;
        }
        OutputFormat::Csv => {
            writeln!(out, "suite,cases,failures,max_error,tolerance,status")?;
            for r in &reports {
                writeln!(
                    out,
                    "{},{},{},{:e},{:e},{}",
                    r.suite,
                    r.cases.len(),
                    r.failures(),
                    r.max_error(),
                    r.tolerance,
                    if r.passed() { "pass" } else { "fail" }
                )?;
            }
        }
    }
    for r in &reports {
        for case in r.cases.iter().filter(|c| !c.passed) {
            eprintln!("{} {}: error {:e} ({})", r.suite, case.name, case.error, case.detail);
        }
    }
    Ok(reports.iter().all(|r| r.passed()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Sweep { grid, jobs } => sweep(grid, *jobs),
        Command::Trace { grid, stream } => trace(grid, *stream),
        Command::Policy { grid } => policy(grid),
        Command::Oracle { seed, format } => run_oracles(*seed, *format),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
