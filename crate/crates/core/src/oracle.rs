//! Brute-force reference computations for checking the fast paths.
//!
//! Nothing here shares code with the solver or the estimator: matrix powers
//! and linear solves go through `nalgebra`, policies are enumerated
//! exhaustively and posteriors are obtained by summing over every state
//! trajectory. Everything is exponential in the problem size and only meant
//! for small instances.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eve::EveState;
use crate::markov::{build_chain, MarkovChain, MatrixPowerCache};
use crate::policy::solve_optimal_policy;

/// One checked instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCase {
    pub name: String,
    pub error: f64,
    pub passed: bool,
    pub detail: String,
}

/// Results of one verification suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub suite: String,
    pub tolerance: f64,
    pub cases: Vec<OracleCase>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.cases.iter().map(|c| c.error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> usize {
        self.cases.iter().filter(|c| !c.passed).count()
    }
}

fn dense(chain: &MarkovChain) -> DMatrix<f64> {
    let p = chain.transitions();
    DMatrix::from_fn(p.nrows(), p.ncols(), |i, j| p[[i, j]])
}

/// `P^0 ..= P^k_max` by repeated multiplication.
fn powers_up_to(p: &DMatrix<f64>, k_max: usize) -> Vec<DMatrix<f64>> {
    let mut out = vec![DMatrix::identity(p.nrows(), p.ncols())];
    for k in 1..=k_max {
        let next = &out[k - 1] * p;
        out.push(next);
    }
    out
}

fn row_max(m: &DMatrix<f64>, row: usize) -> f64 {
    m.row(row).iter().fold(0.0, |a: f64, &x| a.max(x))
}

fn row_argmax(m: &DMatrix<f64>, row: usize) -> usize {
    let r = m.row(row);
    let mut best = 0;
    for j in 1..r.len() {
        if r[j] > r[best] {
            best = j;
        }
    }
    best
}

/// Exact discounted value of the threshold policy `sigma`, measured right
/// after each state is received.
///
/// Receiving `s` earns `Σ_{Δ<σ(s)} γ^{Δ-1} max_j (P^Δ)_{s,j}` while waiting,
/// then `γ^{σ(s)-1}(1-β)` for the request, after which the process restarts
/// from the newly received state, discounted by `γ^{σ(s)}`.
pub fn threshold_policy_values(chain: &MarkovChain, sigma: &[usize], beta: f64, gamma: f64) -> Result<Vec<f64>> {
    let size = chain.size();
    if sigma.len() != size || sigma.contains(&0) {
        return Err(Error::domain("sigma must give a positive interval per state"));
    }
    let longest = *sigma.iter().max().expect("non-empty");
    let powers = powers_up_to(&dense(chain), longest);
    let mut system = DMatrix::<f64>::identity(size, size);
    let mut rhs = DVector::<f64>::zeros(size);
    for (s, &t) in sigma.iter().enumerate() {
        let waiting: f64 = (1..t).map(|d| gamma.powi(d as i32 - 1) * row_max(&powers[d], s)).sum();
        rhs[s] = waiting + gamma.powi(t as i32 - 1) * (1.0 - beta);
        let discount = gamma.powi(t as i32);
        for j in 0..size {
            system[(s, j)] -= discount * powers[t][(s, j)];
        }
    }
    let solution = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::domain("policy evaluation system is singular"))?;
    Ok(solution.iter().copied().collect())
}

/// Best threshold policy found by exhaustive search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnumeratedOptimum {
    pub sigma: Vec<usize>,
    pub values: Vec<f64>,
    /// Pointwise maximum over every enumerated policy.
    pub envelope: Vec<f64>,
    pub policies: usize,
}

/// Evaluates all `t_max^|S|` threshold policies.
pub fn enumerate_threshold_policies(
    chain: &MarkovChain,
    beta: f64,
    gamma: f64,
    t_max: usize,
) -> Result<EnumeratedOptimum> {
    let size = chain.size();
    if t_max == 0 {
        return Err(Error::domain("t_max must be at least 1"));
    }
    let mut sigma = vec![1; size];
    let mut best: Option<(Vec<usize>, Vec<f64>)> = None;
    let mut envelope = vec![f64::NEG_INFINITY; size];
    let mut policies = 0;
    loop {
        let values = threshold_policy_values(chain, &sigma, beta, gamma)?;
        policies += 1;
        for (e, &v) in envelope.iter_mut().zip(&values) {
            *e = e.max(v);
        }
        let total: f64 = values.iter().sum();
        if best.as_ref().is_none_or(|(_, b)| total > b.iter().sum::<f64>()) {
            best = Some((sigma.clone(), values));
        }
        let Some(pos) = sigma.iter().position(|&t| t < t_max) else {
            break;
        };
        sigma[..pos].iter_mut().for_each(|t| *t = 1);
        sigma[pos] += 1;
    }
    let (sigma, values) = best.expect("at least one policy");
    Ok(EnumeratedOptimum {
        sigma,
        values,
        envelope,
        policies,
    })
}

/// Compares the dynamic-programming schedule against exhaustive search.
///
/// The error is how far the solver's schedule falls below the best value
/// any threshold policy reaches, over all states.
pub fn check_optimal_policy(
    chain: &MarkovChain,
    beta: f64,
    gamma: f64,
    t_max: usize,
    tolerance: f64,
) -> Result<OracleCase> {
    let solved = solve_optimal_policy(chain, beta, gamma, t_max)?;
    let solved_values = threshold_policy_values(chain, &solved.sigma, beta, gamma)?;
    let optimum = enumerate_threshold_policies(chain, beta, gamma, t_max)?;
    let error = optimum
        .envelope
        .iter()
        .zip(&solved_values)
        .map(|(best, v)| (best - v).max(0.0))
        .fold(0.0, f64::max);
    Ok(OracleCase {
        name: String::new(),
        error,
        passed: error <= tolerance,
        detail: format!(
            "solver sigma {:?}, enumerated sigma {:?} ({} policies)",
            solved.sigma, optimum.sigma, optimum.policies
        ),
    })
}

/// Solver against enumeration on every four-state chain with
/// `β ∈ {0, 0.5, 1}`, `θ ∈ {1, 8}`, `t_max = 3`, `γ = 0.9`.
pub fn policy_suite() -> Result<OracleReport> {
    const TOLERANCE: f64 = 1e-9;
    let mut cases = Vec::new();
    for &theta in &[1.0, 8.0] {
        for &beta in &[0.0, 0.5, 1.0] {
            let chain = build_chain(4, theta)?;
            let mut case = check_optimal_policy(&chain, beta, 0.9, 3, TOLERANCE)?;
            case.name = format!("size=4 theta={theta} beta={beta}");
            cases.push(case);
        }
    }
    Ok(OracleReport {
        suite: "policy".into(),
        tolerance: TOLERANCE,
        cases,
    })
}

/// Posterior of the state at each transmission, given every observed
/// interval, by summing over all state trajectories.
///
/// `maps[k]` is the interval map in force for interval `k`; a trajectory is
/// consistent when the state received at each transmission maps to the
/// interval that followed it. The horizon is the last transmission.
pub fn enumerate_posteriors(chain: &MarkovChain, intervals: &[usize], maps: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let size = chain.size();
    if intervals.len() != maps.len() {
        return Err(Error::domain("one interval map per interval is required"));
    }
    if intervals.contains(&0) || maps.iter().any(|m| m.len() != size) {
        return Err(Error::domain(
            "intervals must be positive and maps must cover every state",
        ));
    }
    let p = chain.transitions();
    let mut epochs = vec![0];
    for &tau in intervals {
        epochs.push(epochs.last().expect("non-empty") + tau);
    }
    let horizon = *epochs.last().expect("non-empty");
    let mut joint = vec![vec![0.0; size]; epochs.len()];
    let mut path = vec![0; horizon + 1];

    struct Walk<'a> {
        p: &'a ndarray::Array2<f64>,
        epochs: &'a [usize],
        maps: &'a [Vec<usize>],
        horizon: usize,
        size: usize,
    }

    fn visit(w: &Walk<'_>, path: &mut Vec<usize>, t: usize, weight: f64, joint: &mut [Vec<f64>]) {
        if weight == 0.0 {
            return;
        }
        if let Some(k) = w.epochs.iter().position(|&e| e == t) {
            if k < w.maps.len() && w.maps[k][path[t]] != w.epochs[k + 1] - t {
                return;
            }
        }
        if t == w.horizon {
            for (k, &e) in w.epochs.iter().enumerate() {
                joint[k][path[e]] += weight;
            }
            return;
        }
        for next in 0..w.size {
            path[t + 1] = next;
            visit(w, path, t + 1, weight * w.p[[path[t], next]], joint);
        }
    }

    let walk = Walk {
        p,
        epochs: &epochs,
        maps,
        horizon,
        size,
    };
    for start in 0..size {
        path[0] = start;
        visit(&walk, &mut path, 0, chain.initial_dist()[start], &mut joint);
    }
    let evidence: f64 = joint[0].iter().sum();
    if evidence <= 0.0 {
        return Err(Error::domain("observed intervals have zero probability"));
    }
    Ok(joint
        .into_iter()
        .map(|row| row.into_iter().map(|x| x / evidence).collect())
        .collect())
}

fn random_chain<R: Rng>(size: usize, rng: &mut R) -> Result<MarkovChain> {
    let rows: Vec<Vec<f64>> = (0..size)
        .map(|_| {
            let raw: Vec<f64> = (0..size)
                .map(|_| {
                    if rng.random_bool(0.2) {
                        0.0
                    } else {
                        rng.random::<f64>() + 0.05
                    }
                })
                .collect();
            let total: f64 = raw.iter().sum();
            if total == 0.0 {
                vec![1.0 / size as f64; size]
            } else {
                raw.into_iter().map(|x| x / total).collect()
            }
        })
        .collect();
    let initial: Vec<f64> = (0..size).map(|_| rng.random::<f64>() + 0.1).collect();
    let total: f64 = initial.iter().sum();
    MarkovChain::from_rows(rows)?.with_initial(initial.into_iter().map(|x| x / total).collect())
}

/// Forward-backward posteriors at transmission instants against trajectory
/// enumeration, on random three-state chains with one to three observed
/// intervals drawn from the model itself.
pub fn smoothing_suite(cases: usize, seed: u64) -> Result<OracleReport> {
    const TOLERANCE: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases);
    for case in 0..cases {
        let chain = Arc::new(random_chain(3, &mut rng)?);
        let count = rng.random_range(1..=3);
        let maps: Vec<Vec<usize>> = (0..count)
            .map(|_| (0..3).map(|_| rng.random_range(1..=3)).collect())
            .collect();

        let p = dense(&chain);
        let mut state = WeightedIndex::new(chain.initial_dist().iter().copied())
            .map_err(|e| Error::domain(e.to_string()))?
            .sample(&mut rng);
        let mut intervals = Vec::with_capacity(count);
        for map in &maps {
            let tau = map[state];
            for _ in 0..tau {
                let row: Vec<f64> = p.row(state).iter().copied().collect();
                state = WeightedIndex::new(row)
                    .map_err(|e| Error::domain(e.to_string()))?
                    .sample(&mut rng);
            }
            intervals.push(tau);
        }

        let exact = enumerate_posteriors(&chain, &intervals, &maps)?;
        let powers = Arc::new(MatrixPowerCache::new(&chain));
        let mut eve = EveState::new(Arc::clone(&chain), powers)?;
        for (&tau, map) in intervals.iter().zip(&maps) {
            eve.observe(tau, map.clone())?;
        }
        let horizon = eve.last_epoch();
        let mut error: f64 = 0.0;
        for (k, &epoch) in eve.epochs().iter().enumerate() {
            let belief = eve.belief_at(horizon, horizon - epoch)?;
            for (a, b) in belief.dist.iter().zip(&exact[k]) {
                error = error.max((a - b).abs());
            }
        }
        out.push(OracleCase {
            name: format!("case {case}"),
            error,
            passed: error <= TOLERANCE,
            detail: format!("intervals {intervals:?}, maps {maps:?}"),
        });
    }
    Ok(OracleReport {
        suite: "smoothing".into(),
        tolerance: TOLERANCE,
        cases: out,
    })
}

/// Empirical interval distribution and transmission rate of `sigma`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulatedTiming {
    /// Frequency of each interval `1..=max σ`, index `t - 1`.
    pub histogram: Vec<f64>,
    pub transmission_prob: f64,
    pub transmissions: usize,
}

/// Runs the schedule `sigma` for `n_steps` steps, starting from a
/// transmission in a state drawn from the steady state.
pub fn simulated_timing(chain: &MarkovChain, sigma: &[usize], n_steps: usize, seed: u64) -> Result<SimulatedTiming> {
    if sigma.len() != chain.size() || sigma.contains(&0) {
        return Err(Error::domain("sigma must give a positive interval per state"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = chain.transitions();
    let rows: Vec<WeightedIndex<f64>> = p
        .rows()
        .into_iter()
        .map(|r| WeightedIndex::new(r.iter().copied()).map_err(|e| Error::domain(e.to_string())))
        .collect::<Result<_>>()?;
    let mut state = WeightedIndex::new(chain.steady_state().iter().copied())
        .map_err(|e| Error::domain(e.to_string()))?
        .sample(&mut rng);
    let longest = *sigma.iter().max().expect("non-empty");
    let mut counts = vec![0usize; longest];
    let mut due = sigma[state];
    let mut elapsed = 0;
    let mut transmissions = 0;
    for _ in 0..n_steps {
        state = rows[state].sample(&mut rng);
        elapsed += 1;
        if elapsed == due {
            counts[due - 1] += 1;
            transmissions += 1;
            elapsed = 0;
            due = sigma[state];
        }
    }
    let total = transmissions.max(1) as f64;
    Ok(SimulatedTiming {
        histogram: counts.iter().map(|&c| c as f64 / total).collect(),
        transmission_prob: transmissions as f64 / n_steps as f64,
        transmissions,
    })
}

/// Long-run reward per step of polling every `period` steps, estimated by
/// simulation with Bob estimating the most likely state in between.
pub fn simulated_periodic_reward(
    chain: &MarkovChain,
    period: usize,
    beta: f64,
    n_steps: usize,
    seed: u64,
) -> Result<f64> {
    if period == 0 {
        return Err(Error::domain("period must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let powers = powers_up_to(&dense(chain), period);
    let rows: Vec<WeightedIndex<f64>> = chain
        .transitions()
        .rows()
        .into_iter()
        .map(|r| WeightedIndex::new(r.iter().copied()).map_err(|e| Error::domain(e.to_string())))
        .collect::<Result<_>>()?;
    let mut state = WeightedIndex::new(chain.steady_state().iter().copied())
        .map_err(|e| Error::domain(e.to_string()))?
        .sample(&mut rng);
    let mut received = state;
    let mut total = 0.0;
    for n in 1..=n_steps {
        state = rows[state].sample(&mut rng);
        let elapsed = n % period;
        if elapsed == 0 {
            total += 1.0 - beta;
            received = state;
        } else if row_argmax(&powers[elapsed], received) == state {
            total += 1.0;
        }
    }
    Ok(total / n_steps as f64)
}

/// Analytic interval distribution and transmission rate against simulation
/// for the optimal schedules of `|S| = 30`, `θ ∈ {1, 8, 32}`, `β = 1`, plus
/// a fixed period.
pub fn timing_suite(n_steps: usize, tolerance: f64, seed: u64) -> Result<OracleReport> {
    let mut cases = Vec::new();
    for &theta in &[1.0, 8.0, 32.0] {
        let chain = build_chain(30, theta)?;
        let mpi = solve_optimal_policy(&chain, 1.0, crate::policy::DEFAULT_GAMMA, 10)?;
        for (label, sigma) in [("optimal", mpi.sigma.clone()), ("period 4", vec![4; 30])] {
            let analytic = crate::policy::policy_analytics(&chain, &sigma)?;
            let sim = simulated_timing(&chain, &sigma, n_steps, seed)?;
            let tv = 0.5
                * analytic
                    .timing_distribution
                    .iter()
                    .zip(&sim.histogram)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
            let error = tv.max((analytic.transmission_prob - sim.transmission_prob).abs());
            cases.push(OracleCase {
                name: format!("theta={theta} {label}"),
                error,
                passed: error <= tolerance,
                detail: format!(
                    "tx analytic {:.4} simulated {:.4}, total variation {:.4}",
                    analytic.transmission_prob, sim.transmission_prob, tv
                ),
            });
        }
    }
    Ok(OracleReport {
        suite: "timing".into(),
        tolerance,
        cases,
    })
}

/// Every suite with its default size.
pub fn run_all(seed: u64) -> Result<Vec<OracleReport>> {
    Ok(vec![
        policy_suite()?,
        smoothing_suite(200, seed)?,
        timing_suite(100_000, 0.02, seed)?,
    ])
}
