//! Bob's scheduling policies.
//!
//! The optimal goal-oriented schedule is computed by value iteration over
//! `(last received state, steps since that update)`. A transmission resets
//! the elapsed counter, so a policy is fully described by the interval
//! `σ(s)` Bob waits after receiving `s`.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::{self, MarkovChain, MatrixPowerCache};

pub const DEFAULT_GAMMA: f64 = 0.95;
/// Sup-norm change at which value iteration stops.
pub const VALUE_ITERATION_TOL: f64 = 1e-10;
/// A request must beat waiting by more than this to be chosen.
pub const TIE_TOL: f64 = 1e-9;
const VALUE_ITERATION_MAX_SWEEPS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    GoalOriented,
    Periodic,
    Adaptive,
}

/// Inter-transmission intervals, one per state.
///
/// Serialized as `{kind, sigma, period, t_max}`; `period` is `null` for a
/// purely goal-oriented policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulingPolicy {
    pub kind: PolicyKind,
    pub sigma: Vec<usize>,
    pub period: Option<usize>,
    pub t_max: usize,
    #[serde(skip)]
    pub value_table: Option<Array2<f64>>,
}

impl SchedulingPolicy {
    pub fn goal_oriented(sigma: Vec<usize>, t_max: usize) -> Result<Self> {
        check_intervals(&sigma, t_max)?;
        Ok(SchedulingPolicy {
            kind: PolicyKind::GoalOriented,
            sigma,
            period: None,
            t_max,
            value_table: None,
        })
    }

    pub fn periodic(period: usize, size: usize, t_max: usize) -> Result<Self> {
        check_intervals(&[period], t_max)?;
        Ok(SchedulingPolicy {
            kind: PolicyKind::Periodic,
            sigma: vec![period; size],
            period: Some(period),
            t_max,
            value_table: None,
        })
    }

    /// Goal-oriented intervals with a periodic fallback, as used by ADE.
    pub fn adaptive(sigma: Vec<usize>, period: usize, t_max: usize) -> Result<Self> {
        check_intervals(&sigma, t_max)?;
        check_intervals(&[period], t_max)?;
        Ok(SchedulingPolicy {
            kind: PolicyKind::Adaptive,
            sigma,
            period: Some(period),
            t_max,
            value_table: None,
        })
    }

    pub fn interval(&self, state: usize) -> usize {
        self.sigma[state]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn check_intervals(intervals: &[usize], t_max: usize) -> Result<()> {
    if t_max == 0 {
        return Err(Error::domain("t_max must be at least 1"));
    }
    match intervals.iter().find(|&&t| t == 0 || t > t_max) {
        Some(t) => Err(Error::domain(format!("interval {t} outside 1..={t_max}"))),
        None => Ok(()),
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Bob's estimate `Δ` steps after receiving `state`: the most likely state
/// under `P^Δ`.
pub fn bob_estimate(powers: &MatrixPowerCache, state: usize, elapsed: usize) -> usize {
    argmax(powers.power(elapsed).row(state))
}

/// The Bellman operator of the scheduling problem.
///
/// Values are indexed `[state, Δ - 1]` for `Δ` in `1..=t_max`.
#[derive(Debug, Clone)]
pub struct BellmanOperator {
    beta: f64,
    gamma: f64,
    t_max: usize,
    /// `P^Δ` for `Δ = 1..=t_max`.
    powers: Vec<Array2<f64>>,
    /// `max_j (P^Δ)_{s,j}`, the expected reward of estimating without polling.
    stay_reward: Array2<f64>,
}

impl BellmanOperator {
    pub fn new(chain: &MarkovChain, beta: f64, gamma: f64, t_max: usize) -> Result<Self> {
        if !(0.0..=2.0).contains(&beta) {
            return Err(Error::domain(format!("transmission cost {beta} outside [0, 2]")));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::domain(format!("discount {gamma} outside (0, 1)")));
        }
        if t_max == 0 {
            return Err(Error::domain("t_max must be at least 1"));
        }
        let cache = MatrixPowerCache::new(chain);
        let powers: Vec<Array2<f64>> = (1..=t_max).map(|d| (*cache.power(d)).clone()).collect();
        let size = chain.size();
        let mut stay_reward = Array2::zeros((size, t_max));
        for (d, p) in powers.iter().enumerate() {
            for s in 0..size {
                stay_reward[[s, d]] = p.row(s).fold(0.0, |m: f64, &x| m.max(x));
            }
        }
        Ok(BellmanOperator {
            beta,
            gamma,
            t_max,
            powers,
            stay_reward,
        })
    }

    pub fn size(&self) -> usize {
        self.stay_reward.nrows()
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// `(request, stay)` action values; `stay` is -inf at `Δ = t_max`.
    fn action_values(&self, values: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let restart = values.column(0).to_owned();
        let size = self.size();
        let mut request = Array2::zeros((size, self.t_max));
        let mut stay = Array2::from_elem((size, self.t_max), f64::NEG_INFINITY);
        for d in 0..self.t_max {
            let expected = self.powers[d].dot(&restart);
            for s in 0..size {
                request[[s, d]] = (1.0 - self.beta) + self.gamma * expected[s];
                if d + 1 < self.t_max {
                    stay[[s, d]] = self.stay_reward[[s, d]] + self.gamma * values[[s, d + 1]];
                }
            }
        }
        (request, stay)
    }

    pub fn apply(&self, values: &Array2<f64>) -> Array2<f64> {
        let (request, stay) = self.action_values(values);
        let mut out = request;
        out.zip_mut_with(&stay, |r, &w| *r = r.max(w));
        out
    }

    /// `π(s, Δ)`: whether Bob polls. Waiting wins ties; polling is forced
    /// at `Δ = t_max`.
    pub fn decisions(&self, values: &Array2<f64>) -> Array2<bool> {
        let (request, stay) = self.action_values(values);
        let mut table = Array2::from_elem(request.raw_dim(), false);
        for ((s, d), poll) in table.indexed_iter_mut() {
            *poll = d + 1 == self.t_max || request[[s, d]] > stay[[s, d]] + TIE_TOL;
        }
        table
    }

    /// Iterates from zero until the sup-norm change drops below `tol`.
    pub fn solve(&self, tol: f64) -> Result<(Array2<f64>, usize)> {
        let mut values = Array2::zeros((self.size(), self.t_max));
        let mut change = f64::INFINITY;
        for sweep in 1..=VALUE_ITERATION_MAX_SWEEPS {
            let next = self.apply(&values);
            change = sup_norm_diff(&next, &values);
            values = next;
            if change < tol {
                return Ok((values, sweep));
            }
            if !change.is_finite() {
                break;
            }
        }
        Err(Error::NonConvergence {
            what: "value iteration",
            iterations: VALUE_ITERATION_MAX_SWEEPS,
            residual: change,
        })
    }
}

pub(crate) fn sup_norm_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Optimal goal-oriented schedule for transmission cost `beta` and
/// discount `gamma`, with a forced poll after `t_max` steps.
pub fn solve_optimal_policy(chain: &MarkovChain, beta: f64, gamma: f64, t_max: usize) -> Result<SchedulingPolicy> {
    let bellman = BellmanOperator::new(chain, beta, gamma, t_max)?;
    let (values, _) = bellman.solve(VALUE_ITERATION_TOL)?;
    let table = bellman.decisions(&values);
    let mut policy = SchedulingPolicy::goal_oriented(extract_sigma(&table, t_max), t_max)?;
    policy.value_table = Some(values);
    Ok(policy)
}

/// `σ(s) = min{Δ : π(s, Δ) = 1}`, or `t_max` when no earlier poll is chosen.
///
/// `table` is indexed `[state, Δ - 1]`.
pub fn extract_sigma(table: &Array2<bool>, t_max: usize) -> Vec<usize> {
    table
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .take(t_max.saturating_sub(1))
                .position(|&poll| poll)
                .map_or(t_max, |d| d + 1)
        })
        .collect()
}

/// Long-run reward per step of polling every `period` steps.
///
/// The state at polling instants is distributed as the steady state, which
/// is invariant under `P^period`.
pub fn periodic_average_reward(chain: &MarkovChain, powers: &MatrixPowerCache, beta: f64, period: usize) -> f64 {
    let mu = chain.steady_state();
    let estimation: f64 = (1..period)
        .map(|j| {
            let p = powers.power(j);
            mu.iter()
                .enumerate()
                .map(|(s, &m)| m * p.row(s).fold(0.0, |a: f64, &x| a.max(x)))
                .sum::<f64>()
        })
        .sum();
    ((1.0 - beta) + estimation) / period as f64
}

/// Best fixed polling period in `1..=t_max`; longer periods win ties.
pub fn tune_periodic(chain: &MarkovChain, beta: f64, t_max: usize) -> Result<SchedulingPolicy> {
    if t_max == 0 {
        return Err(Error::domain("t_max must be at least 1"));
    }
    let powers = MatrixPowerCache::new(chain);
    let mut best = (1, f64::NEG_INFINITY);
    for period in 1..=t_max {
        let reward = periodic_average_reward(chain, &powers, beta, period);
        if reward >= best.1 - 1e-12 {
            best = (period, reward);
        }
    }
    SchedulingPolicy::periodic(best.0, chain.size(), t_max)
}

/// Timing statistics of a schedule, seen at transmission instants.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyAnalytics {
    /// Entropy in bits of the interval between consecutive transmissions.
    pub timing_entropy: f64,
    /// Long-run fraction of steps carrying a transmission.
    pub transmission_prob: f64,
    /// Stationary distribution of the state received at transmissions.
    pub embedded_stationary: Vec<f64>,
    /// Probability of each interval `1..=max σ`, index `t - 1`.
    pub timing_distribution: Vec<f64>,
}

/// Analyses the embedded chain `Q_{s,s'} = (P^{σ(s)})_{s,s'}` of states
/// received at transmission instants.
pub fn policy_analytics(chain: &MarkovChain, sigma: &[usize]) -> Result<PolicyAnalytics> {
    let size = chain.size();
    if sigma.len() != size {
        return Err(Error::domain("sigma must give one interval per state"));
    }
    if sigma.contains(&0) {
        return Err(Error::domain("intervals must be at least 1"));
    }
    let powers = MatrixPowerCache::new(chain);
    let mut kernel = Array2::zeros((size, size));
    for (s, &t) in sigma.iter().enumerate() {
        kernel.row_mut(s).assign(&powers.power(t).row(s));
    }
    let nu = markov::steady_state(&kernel)?;
    let longest = sigma.iter().copied().max().unwrap_or(1);
    let mut timing = vec![0.0; longest];
    for (s, &t) in sigma.iter().enumerate() {
        timing[t - 1] += nu[s];
    }
    let total: f64 = timing.iter().sum();
    timing.iter_mut().for_each(|p| *p /= total);
    let mean_interval: f64 = nu.iter().zip(sigma).map(|(&n, &t)| n * t as f64).sum();
    Ok(PolicyAnalytics {
        timing_entropy: markov::entropy_bits(Array1::from(timing.clone()).view()),
        transmission_prob: 1.0 / mean_interval,
        embedded_stationary: nu.to_vec(),
        timing_distribution: timing,
    })
}
