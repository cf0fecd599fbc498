//! The monitored source: a finite, recurrent, discrete-time Markov chain.
//!
//! States are 0-based internally. The parameterized family produced by
//! [`build_chain`] follows the 1-based numbering used in experiment output,
//! so `g_factor` takes a 1-based index.

use std::sync::{Arc, RwLock};

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on row sums of transition matrices and their powers.
pub const ROW_SUM_TOL: f64 = 1e-9;
/// Tolerance on the normalization of user-supplied distributions.
pub const DIST_SUM_TOL: f64 = 1e-6;

const STEADY_STATE_TOL: f64 = 1e-12;
const STEADY_STATE_MAX_ITER: usize = 1_000_000;

/// A row-stochastic transition matrix together with its initial and
/// steady-state distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ChainRepr", try_from = "ChainRepr")]
pub struct MarkovChain {
    transitions: Array2<f64>,
    initial: Array1<f64>,
    steady: Array1<f64>,
}

#[derive(Serialize, Deserialize)]
struct ChainRepr {
    size: usize,
    transitions: Vec<Vec<f64>>,
    initial_dist: Vec<f64>,
    steady_state: Vec<f64>,
}

impl From<MarkovChain> for ChainRepr {
    fn from(chain: MarkovChain) -> Self {
        ChainRepr {
            size: chain.size(),
            transitions: chain.transitions.rows().into_iter().map(|r| r.to_vec()).collect(),
            initial_dist: chain.initial.to_vec(),
            steady_state: chain.steady.to_vec(),
        }
    }
}

impl TryFrom<ChainRepr> for MarkovChain {
    type Error = Error;

    fn try_from(repr: ChainRepr) -> Result<Self> {
        let chain = MarkovChain::from_rows(repr.transitions)?.with_initial(Array1::from(repr.initial_dist))?;
        if chain.size() != repr.size {
            return Err(Error::InvalidChain(format!(
                "declared size {} but matrix has {} rows",
                repr.size,
                chain.size()
            )));
        }
        Ok(chain)
    }
}

impl MarkovChain {
    /// Validates `transitions`, sets a uniform initial distribution and
    /// computes the steady state.
    pub fn new(transitions: Array2<f64>) -> Result<Self> {
        let size = transitions.nrows();
        if size == 0 || transitions.ncols() != size {
            return Err(Error::InvalidChain(format!(
                "transition matrix must be square and non-empty, got {:?}",
                transitions.shape()
            )));
        }
        for (i, row) in transitions.rows().into_iter().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidChain(format!("row {i} has an entry outside [0, 1]")));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidChain(format!("row {i} sums to {sum}")));
            }
        }
        let steady = steady_state(&transitions)?;
        Ok(MarkovChain {
            initial: Array1::from_elem(size, 1.0 / size as f64),
            transitions,
            steady,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::InvalidChain("transition rows must all have length |S|".into()));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let matrix = Array2::from_shape_vec((size, size), flat).map_err(|e| Error::InvalidChain(e.to_string()))?;
        Self::new(matrix)
    }

    /// Replaces the initial distribution μ₀.
    pub fn with_initial(mut self, initial: Array1<f64>) -> Result<Self> {
        if initial.len() != self.size() {
            return Err(Error::domain("initial distribution has the wrong length"));
        }
        check_distribution(initial.view())?;
        self.initial = initial;
        Ok(self)
    }

    /// Identity chain on `size` states: every state is absorbing.
    pub fn identity(size: usize) -> Result<Self> {
        Self::new(Array2::eye(size))
    }

    /// Deterministic cycle `i -> i + 1 (mod size)`.
    pub fn cycle(size: usize) -> Result<Self> {
        let mut p = Array2::zeros((size, size));
        for i in 0..size {
            p[[i, (i + 1) % size]] = 1.0;
        }
        Self::new(p)
    }

    pub fn size(&self) -> usize {
        self.transitions.nrows()
    }

    pub fn transitions(&self) -> &Array2<f64> {
        &self.transitions
    }

    pub fn initial_dist(&self) -> &Array1<f64> {
        &self.initial
    }

    pub fn steady_state(&self) -> &Array1<f64> {
        &self.steady
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Draws the successor of `state`.
    pub fn step<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        sample_index(self.transitions.row(state), rng)
    }
}

/// Density-decay weight of state `i` (1-based): `(|2i - |S||)^θ / |S|^θ`.
pub fn g_factor(i: usize, theta: f64, size: usize) -> Result<f64> {
    if i == 0 || i > size {
        return Err(Error::domain(format!("state index {i} outside 1..={size}")));
    }
    if theta.is_nan() || theta <= 0.0 || !theta.is_finite() {
        return Err(Error::domain(format!("density decay must be positive, got {theta}")));
    }
    let base = (2.0 * i as f64 - size as f64).abs() / size as f64;
    Ok(base.powf(theta))
}

/// Builds the parameterized test source.
///
/// From state `i` the chain moves to `i+1`, `i+3` or `i-2` (mod |S|). Every
/// fourth state (`i mod 4 == 2`) favours the two far targets instead of the
/// next state. Rows are divided by their raw weight sum, since the weights of
/// the reversed rows add up to more than one.
pub fn build_chain(size: usize, theta: f64) -> Result<MarkovChain> {
    if size < 4 {
        return Err(Error::domain(format!("chain needs at least 4 states, got {size}")));
    }
    let mut p = Array2::<f64>::zeros((size, size));
    for i in 1..=size {
        let g = g_factor(i, theta, size)?;
        let row = i - 1;
        let next = (row + 1) % size;
        let far = [(row + 3) % size, (row + size - 2) % size];
        let (w_next, w_far) = if i % 4 == 2 {
            ((2.0 - 2.0 * g) / 3.0, (2.0 + g) / 3.0)
        } else {
            ((1.0 + 2.0 * g) / 3.0, (1.0 - g) / 3.0)
        };
        p[[row, next]] += w_next;
        for j in far {
            p[[row, j]] += w_far;
        }
        let sum = p.row(row).sum();
        if sum.is_nan() || sum <= 0.0 {
            return Err(Error::InvalidChain(format!("row {i} has raw weight sum {sum}")));
        }
        p.row_mut(row).mapv_inplace(|x| x / sum);
    }
    MarkovChain::new(p)
}

/// Stationary distribution by damped power iteration from the uniform vector.
///
/// Each sweep averages the current iterate with its image, i.e. it iterates
/// the lazy kernel `(I + P) / 2`, which has the same fixed points and no
/// periodic oscillation.
pub fn steady_state(transitions: &Array2<f64>) -> Result<Array1<f64>> {
    let size = transitions.nrows();
    let mut x = Array1::from_elem(size, 1.0 / size as f64);
    let mut residual = f64::INFINITY;
    for _ in 0..STEADY_STATE_MAX_ITER {
        let image = x.dot(transitions);
        residual = max_abs_diff(&image, &x);
        if residual < STEADY_STATE_TOL {
            let total = image.sum();
            return Ok(image / total);
        }
        x = (&x + &image) * 0.5;
        let total = x.sum();
        x /= total;
    }
    Err(Error::NonConvergence {
        what: "steady-state power iteration",
        iterations: STEADY_STATE_MAX_ITER,
        residual,
    })
}

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn entropy(dist: ArrayView1<'_, f64>) -> Result<f64> {
    check_distribution(dist)?;
    Ok(entropy_bits(dist))
}

pub(crate) fn entropy_bits(dist: ArrayView1<'_, f64>) -> f64 {
    0.0 - dist.iter().filter(|&&p| p > 0.0).map(|&p| p * p.log2()).sum::<f64>()
}

fn check_distribution(dist: ArrayView1<'_, f64>) -> Result<()> {
    if dist.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::domain("distribution has a negative or non-finite entry"));
    }
    let sum = dist.sum();
    if (sum - 1.0).abs() > DIST_SUM_TOL {
        return Err(Error::domain(format!("distribution sums to {sum}")));
    }
    Ok(())
}

/// Samples a trajectory of `n_steps` transitions; the result has
/// `n_steps + 1` entries and starts at `start`.
pub fn sample_path<R: Rng + ?Sized>(
    chain: &MarkovChain,
    start: usize,
    n_steps: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if start >= chain.size() {
        return Err(Error::domain(format!("start state {start} outside the chain")));
    }
    let mut path = Vec::with_capacity(n_steps + 1);
    let mut state = start;
    path.push(state);
    for _ in 0..n_steps {
        state = chain.step(state, rng);
        path.push(state);
    }
    Ok(path)
}

/// Inverse-CDF draw from a probability vector.
pub(crate) fn sample_index<R: Rng + ?Sized>(weights: ArrayView1<'_, f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (j, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last_positive = j;
        if u < acc {
            return j;
        }
    }
    // rounding left u above the cumulative sum
    last_positive
}

pub(crate) fn max_abs_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Memoized powers `P^k` of a transition matrix.
///
/// Lookups on a miss extend the table under a write lock, so a shared cache
/// can be used from several threads.
#[derive(Debug)]
pub struct MatrixPowerCache {
    powers: RwLock<Vec<Arc<Array2<f64>>>>,
}

impl MatrixPowerCache {
    pub fn new(chain: &MarkovChain) -> Self {
        Self::from_matrix(chain.transitions().clone())
    }

    pub fn from_matrix(transitions: Array2<f64>) -> Self {
        let identity = Array2::eye(transitions.nrows());
        MatrixPowerCache {
            powers: RwLock::new(vec![Arc::new(identity), Arc::new(transitions)]),
        }
    }

    /// `P^k`.
    pub fn power(&self, k: usize) -> Arc<Array2<f64>> {
        if let Some(p) = self.powers.read().expect("power cache poisoned").get(k) {
            return Arc::clone(p);
        }
        let mut powers = self.powers.write().expect("power cache poisoned");
        while powers.len() <= k {
            let next = powers[powers.len() - 1].dot(&*powers[1]);
            powers.push(Arc::new(next));
        }
        Arc::clone(&powers[k])
    }

    /// Pre-computes every power up to `k_max`.
    pub fn warm(&self, k_max: usize) {
        self.power(k_max);
    }

    pub fn cached(&self) -> usize {
        self.powers.read().expect("power cache poisoned").len()
    }
}
