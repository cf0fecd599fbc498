//! Episode simulation: Alice's source, Bob's scheduler and estimator, and
//! Eve listening to the request times.

use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ade::{ade_schedule, AdeConfig, AdeDecision, AdeMode, IntervalHypothesis, ModeTracker};
use crate::error::{Error, Result};
use crate::eve::EveState;
use crate::markov::{self, build_chain, MarkovChain, MatrixPowerCache};
use crate::policy::{bob_estimate, solve_optimal_policy, tune_periodic, SchedulingPolicy};

/// Bob's per-step reward: `1 - β` for a transmission, otherwise 1 for a correct
/// estimate and 0 for a wrong one.
pub fn reward(state: usize, transmitted: bool, estimate: usize, beta: f64) -> f64 {
    if transmitted {
        1.0 - beta
    } else if state == estimate {
        1.0
    } else {
        0.0
    }
}

/// Bob's scheduling rule for an episode.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    GoalOriented(Vec<usize>),
    Periodic(usize),
    Adaptive { config: AdeConfig, initial: AdeMode },
}

impl Strategy {
    fn max_interval(&self) -> usize {
        match self {
            Strategy::GoalOriented(sigma) => sigma.iter().copied().max().unwrap_or(1),
            Strategy::Periodic(period) => *period,
            Strategy::Adaptive { config, .. } => config.sigma.iter().copied().max().unwrap_or(1).max(config.period),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSetup {
    pub beta: f64,
    pub d_max: usize,
    pub n_steps: usize,
    pub seed: u64,
    /// Independent random stream per episode under one master seed.
    pub stream: u64,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub n: usize,
    pub state: usize,
    pub transmitted: bool,
    pub estimate: usize,
    pub reward: f64,
    pub mode: AdeMode,
    pub leakage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecisionRecord {
    pub epoch: usize,
    pub state: usize,
    pub decision: AdeDecision,
}

#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    pub beta: f64,
    pub d_max: usize,
    pub steps: Vec<StepRecord>,
    pub decisions: Vec<DecisionRecord>,
    /// Eve's state at the end of the episode; every request is in it.
    pub eve: EveState,
    pub fallbacks: usize,
}

impl EpisodeTrace {
    pub fn epochs(&self) -> &[usize] {
        self.eve.epochs()
    }

    pub fn intervals(&self) -> Vec<usize> {
        self.eve.intervals()
    }

    /// Columns `n,s,a,s_hat,r,xi,leakage`; states are 1-based.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "s", "a", "s_hat", "r", "xi", "leakage"])?;
        for step in &self.steps {
            w.write_record([
                step.n.to_string(),
                (step.state + 1).to_string(),
                u8::from(step.transmitted).to_string(),
                (step.estimate + 1).to_string(),
                step.reward.to_string(),
                step.mode.xi().to_string(),
                step.leakage.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("trace", e))?;
        Ok(())
    }

    /// Columns `epoch,s,L_sem,L_per,xi_before,xi_after,interval`.
    pub fn write_decisions_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "s", "L_sem", "L_per", "xi_before", "xi_after", "interval"])?;
        for r in &self.decisions {
            w.write_record([
                r.epoch.to_string(),
                (r.state + 1).to_string(),
                r.decision.l_sem.to_string(),
                r.decision.l_per.to_string(),
                r.decision.mode_before.xi().to_string(),
                r.decision.mode_after.xi().to_string(),
                r.decision.interval.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("decisions", e))?;
        Ok(())
    }

    /// Eve's belief for every step and delay, columns
    /// `n,d,entropy,leakage,map_state`; `leakage` is the single-belief term.
    pub fn write_beliefs_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "d", "entropy", "leakage", "map_state"])?;
        let h_mu = self.eve.reference_entropy();
        for n in 0..self.steps.len() {
            let window = self.eve.beliefs(n, self.d_max)?;
            for (d, belief) in window.beliefs.iter().enumerate() {
                let h = belief.entropy();
                w.write_record([
                    n.to_string(),
                    d.to_string(),
                    h.to_string(),
                    (1.0 - h / h_mu).clamp(0.0, 1.0).to_string(),
                    (belief.map_state() + 1).to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("beliefs", e))?;
        Ok(())
    }
}

/// The interval Bob commits to after a transmission, and what Eve expects.
struct Commitment {
    interval: usize,
    eve_map: Vec<usize>,
    hypothesis: Option<IntervalHypothesis>,
}

/// Simulates one episode of `setup.n_steps` steps, starting with a forced
/// transmission at step 0.
pub fn simulate(
    chain: &Arc<MarkovChain>,
    powers: &Arc<MatrixPowerCache>,
    setup: &EpisodeSetup,
) -> Result<EpisodeTrace> {
    if setup.n_steps == 0 {
        return Err(Error::config("episodes need at least one step"));
    }
    if setup.d_max > setup.n_steps {
        return Err(Error::config("delay window longer than the episode"));
    }
    let size = chain.size();
    match &setup.strategy {
        Strategy::GoalOriented(sigma) if sigma.len() != size => {
            return Err(Error::config("interval map does not match the chain"))
        }
        Strategy::Adaptive { config, .. } if config.sigma.len() != size => {
            return Err(Error::config("interval map does not match the chain"))
        }
        _ => {}
    }
    if setup.strategy.max_interval() == 0 {
        return Err(Error::config("intervals must be at least 1"));
    }
    powers.warm(setup.strategy.max_interval());

    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    rng.set_stream(setup.stream);

    let mut eve = EveState::new(Arc::clone(chain), Arc::clone(powers))?;
    let (mut mode, mut tracker) = match &setup.strategy {
        Strategy::Adaptive { config, initial } => (*initial, Some(ModeTracker::new(config.clone(), *initial))),
        _ => (AdeMode::GoalOriented, None),
    };
    let mut decisions = Vec::new();
    let mut fallbacks = 0;

    let mut commit = |state: usize,
                      epoch: usize,
                      mode: &mut AdeMode,
                      eve: &EveState,
                      tracker: &Option<ModeTracker>|
     -> Result<Commitment> {
        Ok(match &setup.strategy {
            Strategy::GoalOriented(sigma) => Commitment {
                interval: sigma[state],
                eve_map: sigma.clone(),
                hypothesis: None,
            },
            Strategy::Periodic(period) => Commitment {
                interval: *period,
                eve_map: vec![*period; size],
                hypothesis: None,
            },
            Strategy::Adaptive { config, .. } => {
                let decision = ade_schedule(state, config, *mode, eve)?;
                *mode = decision.mode_after;
                decisions.push(DecisionRecord { epoch, state, decision });
                let hypothesis = tracker.as_ref().expect("adaptive runs track modes").hypothesis(eve)?;
                Commitment {
                    interval: decision.interval,
                    eve_map: hypothesis.sigma_eff.clone(),
                    hypothesis: Some(hypothesis),
                }
            }
        })
    };

    let mut state = markov::sample_index(chain.initial_dist().view(), &mut rng);
    let mut last_state = state;
    let mut last_tx = 0;
    let mut pending = commit(state, 0, &mut mode, &eve, &tracker)?;
    let (leak, fb) = eve.leakage_at(0, setup.d_max)?;
    fallbacks += fb;
    let mut steps = Vec::with_capacity(setup.n_steps);
    steps.push(StepRecord {
        n: 0,
        state,
        transmitted: true,
        estimate: state,
        reward: reward(state, true, state, setup.beta),
        mode,
        leakage: leak,
    });

    for n in 1..setup.n_steps {
        state = chain.step(state, &mut rng);
        let elapsed = n - last_tx;
        let transmitted = elapsed == pending.interval;
        let estimate = if transmitted {
            if let (Some(tracker), Some(hypothesis)) = (tracker.as_mut(), pending.hypothesis.as_ref()) {
                let prior = eve.forwards().last().expect("f_0 is always present");
                tracker.resolve(hypothesis, elapsed, prior.view());
            }
            eve.observe(elapsed, std::mem::take(&mut pending.eve_map))?;
            last_tx = n;
            last_state = state;
            pending = commit(state, n, &mut mode, &eve, &tracker)?;
            state
        } else {
            bob_estimate(powers, last_state, elapsed)
        };
        let (leak, fb) = eve.leakage_at(n, setup.d_max)?;
        fallbacks += fb;
        steps.push(StepRecord {
            n,
            state,
            transmitted,
            estimate,
            reward: reward(state, transmitted, estimate, setup.beta),
            mode,
            leakage: leak,
        });
    }
    fallbacks += eve.forward_fallbacks();

    Ok(EpisodeTrace {
        beta: setup.beta,
        d_max: setup.d_max,
        steps,
        decisions,
        eve,
        fallbacks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsOptions {
    /// Count transmission steps as correct estimates in `eta_b`.
    pub count_transmissions_correct: bool,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        MetricsOptions {
            count_transmissions_correct: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub steps: usize,
    pub mean_reward: f64,
    pub mean_leakage: f64,
    pub max_leakage: f64,
    pub eta_b: f64,
    pub eta_e: f64,
    /// Per-step average of `r(n) - ε L_E(n; D)`.
    pub r_b: f64,
    pub epsilon: f64,
    pub transmission_rate: f64,
    pub fallback_count: usize,
}

/// Aggregates a trace. Eve estimates the state at time `n` from her belief
/// at horizon `n + d_max` (clipped to the last step), taking the most likely
/// state.
pub fn compute_metrics(
    trace: &EpisodeTrace,
    d_max: usize,
    epsilon: f64,
    options: MetricsOptions,
) -> Result<MetricsReport> {
    let steps = &trace.steps;
    let total = steps.len();
    if total == 0 {
        return Err(Error::config("empty trace"));
    }
    let count = total as f64;
    let mean = |f: &dyn Fn(&StepRecord) -> f64| steps.iter().map(f).sum::<f64>() / count;

    let mean_reward = mean(&|s| s.reward);
    let mean_leakage = mean(&|s| s.leakage);
    let max_leakage = steps.iter().map(|s| s.leakage).fold(0.0, f64::max);
    let r_b = mean(&|s| s.reward - epsilon * s.leakage);
    let transmission_rate = mean(&|s| f64::from(u8::from(s.transmitted)));

    let bob_steps: Vec<&StepRecord> = steps
        .iter()
        .filter(|s| options.count_transmissions_correct || !s.transmitted)
        .collect();
    let eta_b = if bob_steps.is_empty() {
        1.0
    } else {
        bob_steps.iter().filter(|s| s.state == s.estimate).count() as f64 / bob_steps.len() as f64
    };

    let mut eve_hits = 0usize;
    for step in steps {
        let horizon = (step.n + d_max).min(total - 1);
        let belief = trace.eve.belief_at(horizon, horizon - step.n)?;
        if belief.map_state() == step.state {
            eve_hits += 1;
        }
    }

    Ok(MetricsReport {
        steps: total,
        mean_reward,
        mean_leakage,
        max_leakage,
        eta_b,
        eta_e: eve_hits as f64 / count,
        r_b,
        epsilon,
        transmission_rate,
        fallback_count: trace.fallbacks,
    })
}

/// Which of Bob's schedules to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyChoice {
    Mpi,
    Pp,
    Ade,
}

impl PolicyChoice {
    pub fn name(self) -> &'static str {
        match self {
            PolicyChoice::Mpi => "mpi",
            PolicyChoice::Pp => "pp",
            PolicyChoice::Ade => "ade",
        }
    }
}

impl std::str::FromStr for PolicyChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mpi" => Ok(PolicyChoice::Mpi),
            "pp" => Ok(PolicyChoice::Pp),
            "ade" => Ok(PolicyChoice::Ade),
            other => Err(Error::config(format!(
                "unknown policy {other:?}; expected mpi, pp or ade"
            ))),
        }
    }
}

/// Source and cost parameters shared by every episode of an experiment cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub size: usize,
    pub theta: f64,
    pub beta: f64,
    pub gamma: f64,
    pub t_max: usize,
}

/// A source together with Bob's optimal and tuned periodic schedules.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub params: ScenarioParams,
    pub chain: Arc<MarkovChain>,
    pub powers: Arc<MatrixPowerCache>,
    pub mpi: SchedulingPolicy,
    pub periodic: SchedulingPolicy,
}

impl Scenario {
    pub fn build(params: ScenarioParams) -> Result<Self> {
        let chain = build_chain(params.size, params.theta)?;
        let mpi = solve_optimal_policy(&chain, params.beta, params.gamma, params.t_max)?;
        let periodic = tune_periodic(&chain, params.beta, params.t_max)?;
        let powers = Arc::new(MatrixPowerCache::new(&chain));
        powers.warm(params.t_max);
        Ok(Scenario {
            params,
            chain: Arc::new(chain),
            powers,
            mpi,
            periodic,
        })
    }

    pub fn period(&self) -> usize {
        self.periodic.period.expect("tuned periodic policy has a period")
    }

    pub fn strategy(&self, choice: PolicyChoice, thresholds: AdeThresholds, d_max: usize) -> Result<Strategy> {
        Ok(match choice {
            PolicyChoice::Mpi => Strategy::GoalOriented(self.mpi.sigma.clone()),
            PolicyChoice::Pp => Strategy::Periodic(self.period()),
            PolicyChoice::Ade => Strategy::Adaptive {
                config: AdeConfig::new(
                    thresholds.l_min,
                    thresholds.l_max,
                    self.period(),
                    self.mpi.sigma.clone(),
                    d_max,
                )?,
                initial: thresholds.initial,
            },
        })
    }

    pub fn run(&self, choice: PolicyChoice, run: &RunParams, stream: u64) -> Result<EpisodeTrace> {
        let setup = EpisodeSetup {
            beta: self.params.beta,
            d_max: run.d_max,
            n_steps: run.n_steps,
            seed: run.seed,
            stream,
            strategy: self.strategy(choice, run.thresholds, run.d_max)?,
        };
        simulate(&self.chain, &self.powers, &setup)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdeThresholds {
    pub l_min: f64,
    pub l_max: f64,
    pub initial: AdeMode,
}

impl Default for AdeThresholds {
    fn default() -> Self {
        AdeThresholds {
            l_min: 0.4,
            l_max: 0.6,
            initial: AdeMode::GoalOriented,
        }
    }
}

/// Per-episode parameters that do not affect the schedules themselves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunParams {
    pub d_max: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub thresholds: AdeThresholds,
}
