//! Parameter sweeps over `(β, θ, D, policy)` cells and trace export.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ade::AdeMode;
use crate::error::{Error, Result};
use crate::markov;
use crate::policy::{policy_analytics, DEFAULT_GAMMA};
use crate::sim::{
    compute_metrics, AdeThresholds, EpisodeTrace, MetricsOptions, PolicyChoice, RunParams, Scenario, ScenarioParams,
};

/// A grid of experiment cells and the settings shared by all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub size: usize,
    pub t_max: usize,
    pub gamma: f64,
    pub betas: Vec<f64>,
    pub thetas: Vec<f64>,
    pub d_values: Vec<usize>,
    pub policies: Vec<PolicyChoice>,
    pub episodes: usize,
    pub steps: usize,
    pub seed: u64,
    pub l_min: f64,
    pub l_max: f64,
    /// ADE starts in the periodic mode when set.
    pub ade_start_periodic: bool,
    pub epsilon: f64,
    pub count_transmissions_correct: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            size: 30,
            t_max: 10,
            gamma: DEFAULT_GAMMA,
            betas: vec![1.0],
            thetas: vec![32.0],
            d_values: vec![5],
            policies: vec![PolicyChoice::Mpi, PolicyChoice::Pp, PolicyChoice::Ade],
            episodes: 10,
            steps: 200,
            seed: 42,
            l_min: 0.4,
            l_max: 0.6,
            ade_start_periodic: false,
            epsilon: 0.0,
            count_transmissions_correct: true,
        }
    }
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("betas", self.betas.is_empty()),
            ("thetas", self.thetas.is_empty()),
            ("d_values", self.d_values.is_empty()),
            ("policies", self.policies.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::config(format!("{name} must not be empty")));
        }
        if self.episodes == 0 || self.steps == 0 {
            return Err(Error::config("episodes and steps must be positive"));
        }
        if self.l_min.is_nan() || self.l_max.is_nan() || self.l_min >= self.l_max {
            return Err(Error::config(format!(
                "leakage thresholds must satisfy l_min < l_max, got {} and {}",
                self.l_min, self.l_max
            )));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::config("epsilon must be non-negative"));
        }
        Ok(())
    }

    pub fn thresholds(&self) -> AdeThresholds {
        AdeThresholds {
            l_min: self.l_min,
            l_max: self.l_max,
            initial: if self.ade_start_periodic {
                AdeMode::Periodic
            } else {
                AdeMode::GoalOriented
            },
        }
    }

    pub fn cell_count(&self) -> usize {
        self.betas.len() * self.thetas.len() * self.d_values.len() * self.policies.len()
    }

    fn scenario_params(&self, beta: f64, theta: f64) -> ScenarioParams {
        ScenarioParams {
            size: self.size,
            theta,
            beta,
            gamma: self.gamma,
            t_max: self.t_max,
        }
    }
}

/// One output row. Metric fields are empty when the cell failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub theta: f64,
    #[serde(rename = "D")]
    pub d: usize,
    pub policy: PolicyChoice,
    pub mean_reward: Option<f64>,
    pub sd_reward: Option<f64>,
    pub mean_leakage: Option<f64>,
    pub max_leakage: Option<f64>,
    #[serde(rename = "eta_B")]
    pub eta_b: Option<f64>,
    #[serde(rename = "eta_E")]
    pub eta_e: Option<f64>,
    pub timing_entropy: Option<f64>,
    pub tx_prob: Option<f64>,
    pub fallback_count: Option<usize>,
    pub error: Option<String>,
}

impl SweepRow {
    fn failed(beta: f64, theta: f64, d: usize, policy: PolicyChoice, error: String) -> Self {
        SweepRow {
            beta,
            theta,
            d,
            policy,
            mean_reward: None,
            sd_reward: None,
            mean_leakage: None,
            max_leakage: None,
            eta_b: None,
            eta_e: None,
            timing_entropy: None,
            tx_prob: None,
            fallback_count: None,
            error: Some(error),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Entropy and rate of the intervals actually used across `traces`.
fn empirical_timing(traces: &[EpisodeTrace]) -> (f64, f64) {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut steps = 0;
    let mut transmissions = 0;
    for trace in traces {
        for tau in trace.intervals() {
            *counts.entry(tau).or_default() += 1;
        }
        steps += trace.steps.len();
        transmissions += trace.steps.iter().filter(|s| s.transmitted).count();
    }
    let total: usize = counts.values().sum();
    let entropy = if total == 0 {
        0.0
    } else {
        let dist = Array1::from_iter(counts.values().map(|&c| c as f64 / total as f64));
        markov::entropy_bits(dist.view())
    };
    (entropy, transmissions as f64 / steps.max(1) as f64)
}

fn run_cell(spec: &SweepSpec, scenario: &Scenario, d: usize, policy: PolicyChoice) -> Result<SweepRow> {
    let run = RunParams {
        d_max: d,
        n_steps: spec.steps,
        seed: spec.seed,
        thresholds: spec.thresholds(),
    };
    let options = MetricsOptions {
        count_transmissions_correct: spec.count_transmissions_correct,
    };
    let mut traces = Vec::with_capacity(spec.episodes);
    let mut reports = Vec::with_capacity(spec.episodes);
    for episode in 0..spec.episodes {
        let trace = scenario.run(policy, &run, episode as u64)?;
        reports.push(compute_metrics(&trace, d, spec.epsilon, options)?);
        traces.push(trace);
    }
    let rewards: Vec<f64> = reports.iter().map(|r| r.mean_reward).collect();
    let (mean_reward, sd_reward) = mean_sd(&rewards);
    let avg = |f: fn(&crate::sim::MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
    let (timing_entropy, tx_prob) = match policy {
        PolicyChoice::Mpi => {
            let a = policy_analytics(&scenario.chain, &scenario.mpi.sigma)?;
            (a.timing_entropy, a.transmission_prob)
        }
        PolicyChoice::Pp => (0.0, 1.0 / scenario.period() as f64),
        PolicyChoice::Ade => empirical_timing(&traces),
    };
    Ok(SweepRow {
        beta: scenario.params.beta,
        theta: scenario.params.theta,
        d,
        policy,
        mean_reward: Some(mean_reward),
        sd_reward: Some(sd_reward),
        mean_leakage: Some(avg(|r| r.mean_leakage)),
        max_leakage: Some(reports.iter().map(|r| r.max_leakage).fold(0.0, f64::max)),
        eta_b: Some(avg(|r| r.eta_b)),
        eta_e: Some(avg(|r| r.eta_e)),
        timing_entropy: Some(timing_entropy),
        tx_prob: Some(tx_prob),
        fallback_count: Some(reports.iter().map(|r| r.fallback_count).sum()),
        error: None,
    })
}

/// Runs every cell of `spec`, in parallel on `jobs` threads (all cores when
/// `None`). Failing cells are reported in their row's `error` field. Rows
/// come out ordered by `β`, `θ`, `D` and policy, regardless of scheduling.
pub fn run_sweep(spec: &SweepSpec, jobs: Option<usize>) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = jobs {
        builder = builder.num_threads(jobs.max(1));
    }
    let pool = builder.build().map_err(|e| Error::config(e.to_string()))?;
    pool.install(|| {
        let pairs: Vec<(f64, f64)> = spec
            .betas
            .iter()
            .flat_map(|&b| spec.thetas.iter().map(move |&t| (b, t)))
            .collect();
        let scenarios: Vec<Result<Scenario, String>> = pairs
            .par_iter()
            .map(|&(beta, theta)| Scenario::build(spec.scenario_params(beta, theta)).map_err(|e| e.to_string()))
            .collect();

        let mut cells = Vec::with_capacity(spec.cell_count());
        for (i, &(beta, theta)) in pairs.iter().enumerate() {
            for &d in &spec.d_values {
                for &policy in &spec.policies {
                    cells.push((i, beta, theta, d, policy));
                }
            }
        }
        let mut rows: Vec<SweepRow> = cells
            .into_par_iter()
            .map(|(i, beta, theta, d, policy)| match &scenarios[i] {
                Ok(scenario) => run_cell(spec, scenario, d, policy)
                    .unwrap_or_else(|e| SweepRow::failed(beta, theta, d, policy, e.to_string())),
                Err(e) => SweepRow::failed(beta, theta, d, policy, e.clone()),
            })
            .collect();
        rows.sort_by(|a, b| {
            a.beta
                .total_cmp(&b.beta)
                .then(a.theta.total_cmp(&b.theta))
                .then(a.d.cmp(&b.d))
                .then(a.policy.cmp(&b.policy))
        });
        Ok(rows)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::config(format!("unknown format {other:?}; expected csv or json"))),
        }
    }
}

pub fn write_rows<W: Write>(rows: &[SweepRow], format: OutputFormat, out: W) -> Result<()> {
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for row in rows {
                w.serialize(row)?;
            }
            w.flush().map_err(|e| Error::io("<csv output>", e))?;
        }
        OutputFormat::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, rows)?;
            writeln!(out).map_err(|e| Error::io("<json output>", e))?;
        }
    }
    Ok(())
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Settings recorded next to an exported trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub size: usize,
    pub theta: f64,
    pub beta: f64,
    pub gamma: f64,
    pub t_max: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub policy: PolicyChoice,
    pub seed: u64,
    pub stream: u64,
    pub steps: usize,
    pub l_min: f64,
    pub l_max: f64,
    pub period: usize,
    pub sigma: Vec<usize>,
}

/// Files written by [`emit_trace`].
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFiles {
    pub steps: PathBuf,
    pub meta: PathBuf,
    pub decisions: Option<PathBuf>,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Runs one episode of the first `(β, θ, D, policy)` cell of `spec` and
/// writes its per-step trace to `out`, its settings to `<stem>.meta.json`
/// and, for ADE, its switching decisions to `<stem>.decisions.csv`.
pub fn emit_trace(spec: &SweepSpec, stream: u64, out: &Path) -> Result<(EpisodeTrace, TraceFiles)> {
    spec.validate()?;
    let (beta, theta, d, policy) = (spec.betas[0], spec.thetas[0], spec.d_values[0], spec.policies[0]);
    let scenario = Scenario::build(spec.scenario_params(beta, theta))?;
    let run = RunParams {
        d_max: d,
        n_steps: spec.steps,
        seed: spec.seed,
        thresholds: spec.thresholds(),
    };
    let trace = scenario.run(policy, &run, stream)?;

    trace.write_csv(create(out)?)?;
    let meta = TraceMeta {
        size: spec.size,
        theta,
        beta,
        gamma: spec.gamma,
        t_max: spec.t_max,
        d,
        policy,
        seed: spec.seed,
        stream,
        steps: spec.steps,
        l_min: spec.l_min,
        l_max: spec.l_max,
        period: scenario.period(),
        sigma: scenario.mpi.sigma.clone(),
    };
    let meta_path = sibling(out, ".meta.json");
    let mut w = create(&meta_path)?;
    serde_json::to_writer_pretty(&mut w, &meta)?;
    w.flush().map_err(|e| Error::io(&meta_path, e))?;

    let decisions = if policy == PolicyChoice::Ade {
        let path = sibling(out, ".decisions.csv");
        trace.write_decisions_csv(create(&path)?)?;
        Some(path)
    } else {
        None
    };
    Ok((
        trace,
        TraceFiles {
            steps: out.to_path_buf(),
            meta: meta_path,
            decisions,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SweepSpec {
        SweepSpec {
            size: 8,
            t_max: 4,
            betas: vec![1.0, 0.5],
            thetas: vec![2.0],
            d_values: vec![2],
            episodes: 2,
            steps: 30,
            ..SweepSpec::default()
        }
    }

    #[test]
    fn defaults_from_empty_toml() {
        assert_eq!(SweepSpec::from_toml("").unwrap(), SweepSpec::default());
        let spec = SweepSpec::from_toml("betas = [0.2, 2.0]\npolicies = [\"pp\"]").unwrap();
        assert_eq!(spec.betas, vec![0.2, 2.0]);
        assert_eq!(spec.policies, vec![PolicyChoice::Pp]);
        assert!(SweepSpec::from_toml("unknown = 1").is_err());
    }

    #[test]
    fn validation() {
        let mut spec = small_spec();
        spec.l_min = 0.7;
        assert!(spec.validate().is_err());
        let mut spec = small_spec();
        spec.policies.clear();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn rows_sorted_and_complete() {
        let rows = run_sweep(&small_spec(), Some(2)).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(SweepRow::is_ok));
        assert_eq!(rows[0].beta, 0.5);
        assert_eq!(rows[0].policy, PolicyChoice::Mpi);
        assert_eq!(rows[2].policy, PolicyChoice::Ade);
        let pp = rows.iter().find(|r| r.policy == PolicyChoice::Pp).unwrap();
        assert_eq!(pp.timing_entropy, Some(0.0));
    }

    #[test]
    fn failing_cell_is_reported() {
        let mut spec = small_spec();
        spec.size = 3;
        let rows = run_sweep(&spec, Some(1)).unwrap();
        assert!(rows.iter().all(|r| r.error.is_some() && r.mean_reward.is_none()));
    }

    #[test]
    fn csv_round_trip() {
        let rows = run_sweep(&small_spec(), Some(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        write_rows(&rows, OutputFormat::Csv, File::create(&path).unwrap()).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with(
            "beta,theta,D,policy,mean_reward,sd_reward,mean_leakage,max_leakage,eta_B,eta_E,timing_entropy,tx_prob,fallback_count,error\n"
        ));
        assert_eq!(read_rows_csv(&path).unwrap(), rows);
    }
}
