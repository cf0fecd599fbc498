//! Eve's estimator.
//!
//! Eve treats the sequence of inter-request intervals as the observations of
//! a hidden Markov model. Knowing the interval map in force for each
//! interval, she filters forward at every observed request and smooths
//! backward from the latest one, which gives her a belief over the source
//! state at any past time.

use std::sync::Arc;

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::markov::{self, MarkovChain, MatrixPowerCache};
use crate::policy::argmax;

/// Eve's belief over the state at time `target`, having listened up to
/// `horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub target: usize,
    pub horizon: usize,
    pub dist: Array1<f64>,
}

impl Belief {
    pub fn entropy(&self) -> f64 {
        markov::entropy_bits(self.dist.view())
    }

    pub fn map_state(&self) -> usize {
        map_estimate(self.dist.view())
    }
}

fn uniform(size: usize) -> Array1<f64> {
    Array1::from_elem(size, 1.0 / size as f64)
}

/// Scales `v` to sum to one; `None` when it has no mass.
fn normalized(mut v: Array1<f64>) -> Option<Array1<f64>> {
    let total = v.sum();
    if total > 0.0 && total.is_finite() {
        v /= total;
        Some(v)
    } else {
        None
    }
}

/// Filters `f_prev` through one observed interval.
///
/// `f_k(s) ∝ Σ_{s'} (P^τ)_{s',s} δ(τ, σ_eff(s')) f_prev(s')`. If no state is
/// compatible with `tau`, the compatibility mask is dropped (a blind update)
/// and the returned flag is set.
pub fn forward_update(
    f_prev: ArrayView1<'_, f64>,
    tau: usize,
    sigma_eff: &[usize],
    powers: &MatrixPowerCache,
) -> (Array1<f64>, bool) {
    let p = powers.power(tau);
    let masked = Array1::from_iter(
        f_prev
            .iter()
            .zip(sigma_eff)
            .map(|(&f, &sigma)| if sigma == tau { f } else { 0.0 }),
    );
    if let Some(f) = normalized(masked.dot(&*p)) {
        return (f, false);
    }
    let blind = normalized(f_prev.dot(&*p)).unwrap_or_else(|| uniform(f_prev.len()));
    (blind, true)
}

/// `φ_k(s) ∝ f_k(s) b_k(s)`. Falls back to uniform (flagged) when the
/// product has no mass.
pub fn smooth_at_transmission(forward: ArrayView1<'_, f64>, backward: ArrayView1<'_, f64>) -> (Array1<f64>, bool) {
    match normalized(&forward * &backward) {
        Some(phi) => (phi, false),
        None => (uniform(forward.len()), true),
    }
}

/// Belief `ell` steps after transmission `k`, combining the smoothed beliefs
/// at the two surrounding transmissions:
/// `φ_{k,ℓ}(s) ∝ (φ_k P^ℓ)(s) · (P^{τ-ℓ} φ_{k+1})(s)`.
pub fn smooth_between(
    phi_k: ArrayView1<'_, f64>,
    phi_next: ArrayView1<'_, f64>,
    ell: usize,
    tau: usize,
    powers: &MatrixPowerCache,
) -> Result<(Array1<f64>, bool)> {
    if ell > tau {
        return Err(Error::domain(format!("offset {ell} beyond interval {tau}")));
    }
    let ahead = phi_k.dot(&*powers.power(ell));
    let behind = powers.power(tau - ell).dot(&phi_next);
    Ok(match normalized(ahead * behind) {
        Some(phi) => (phi, false),
        None => (uniform(phi_k.len()), true),
    })
}

/// Normalized entropy deficit of the most informative belief:
/// `max_d [1 - H(φ_d) / H(μ)]`, clamped to `[0, 1]`.
pub fn leakage(beliefs: &[Belief], mu: &Array1<f64>) -> Result<f64> {
    let h_mu = markov::entropy(mu.view())?;
    if h_mu <= 0.0 {
        return Err(Error::config("steady state has zero entropy; leakage is undefined"));
    }
    Ok(leakage_with_reference(beliefs, h_mu))
}

pub(crate) fn leakage_with_reference(beliefs: &[Belief], h_mu: f64) -> f64 {
    beliefs
        .iter()
        .map(|b| 1.0 - b.entropy() / h_mu)
        .fold(0.0, f64::max)
        .clamp(0.0, 1.0)
}

/// Most likely state, lowest index on ties.
pub fn map_estimate(dist: ArrayView1<'_, f64>) -> usize {
    argmax(dist)
}

/// Backward vectors `b_k(·; n)` for `k` in `first..=K(n)`.
#[derive(Debug, Clone)]
pub struct BackwardPass {
    pub first: usize,
    pub vectors: Vec<Array1<f64>>,
    pub fallbacks: usize,
}

impl BackwardPass {
    pub fn get(&self, k: usize) -> &Array1<f64> {
        &self.vectors[k - self.first]
    }
}

/// Beliefs `φ_E(n; d)` for `d = 0..=d_max` at one horizon.
#[derive(Debug, Clone)]
pub struct BeliefWindow {
    pub beliefs: Vec<Belief>,
    pub fallbacks: usize,
}

/// Everything Eve has observed, and her forward filter over it.
#[derive(Debug, Clone)]
pub struct EveState {
    chain: Arc<MarkovChain>,
    powers: Arc<MatrixPowerCache>,
    h_mu: f64,
    epochs: Vec<usize>,
    /// Interval map in force for each observed interval; entry `k - 1`
    /// belongs to interval `k`.
    sigma_eff: Vec<Vec<usize>>,
    forwards: Vec<Array1<f64>>,
    forward_fallbacks: usize,
}

impl EveState {
    /// Starts listening with a transmission at time 0 and `f_0 = μ₀`.
    pub fn new(chain: Arc<MarkovChain>, powers: Arc<MatrixPowerCache>) -> Result<Self> {
        let h_mu = markov::entropy_bits(chain.steady_state().view());
        if h_mu <= 0.0 {
            return Err(Error::config("steady state has zero entropy; leakage is undefined"));
        }
        let f0 = chain.initial_dist().clone();
        Ok(EveState {
            chain,
            powers,
            h_mu,
            epochs: vec![0],
            sigma_eff: Vec::new(),
            forwards: vec![f0],
            forward_fallbacks: 0,
        })
    }

    pub fn chain(&self) -> &Arc<MarkovChain> {
        &self.chain
    }

    pub fn powers(&self) -> &Arc<MatrixPowerCache> {
        &self.powers
    }

    pub fn epochs(&self) -> &[usize] {
        &self.epochs
    }

    pub fn intervals(&self) -> Vec<usize> {
        self.epochs.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn forwards(&self) -> &[Array1<f64>] {
        &self.forwards
    }

    pub fn sigma_history(&self) -> &[Vec<usize>] {
        &self.sigma_eff
    }

    pub fn last_epoch(&self) -> usize {
        *self.epochs.last().expect("epoch 0 is always present")
    }

    pub fn forward_fallbacks(&self) -> usize {
        self.forward_fallbacks
    }

    /// Entropy of the steady state, the leakage reference.
    pub fn reference_entropy(&self) -> f64 {
        self.h_mu
    }

    /// `K(n)`: index of the last transmission at or before `n`.
    pub fn last_index_at(&self, n: usize) -> usize {
        self.epochs.partition_point(|&t| t <= n) - 1
    }

    /// Records a request `tau` steps after the previous one, made under the
    /// interval map `sigma_eff`.
    pub fn observe(&mut self, tau: usize, sigma_eff: Vec<usize>) -> Result<()> {
        if tau == 0 {
            return Err(Error::domain("intervals must be at least 1"));
        }
        if sigma_eff.len() != self.chain.size() {
            return Err(Error::domain("interval map must cover every state"));
        }
        let prev = self.forwards.last().expect("f_0 is always present");
        let (f, fallback) = forward_update(prev.view(), tau, &sigma_eff, &self.powers);
        self.forward_fallbacks += usize::from(fallback);
        self.forwards.push(f);
        self.sigma_eff.push(sigma_eff);
        self.epochs.push(self.last_epoch() + tau);
        Ok(())
    }

    /// Backward vectors for every transmission up to `K(n)`.
    pub fn backward_pass(&self, n: usize) -> BackwardPass {
        self.backward_from(n, 0)
    }

    fn backward_from(&self, n: usize, first: usize) -> BackwardPass {
        let last = self.last_index_at(n);
        let size = self.chain.size();
        let mut vectors = vec![uniform(size)];
        let mut fallbacks = 0;
        for k in (first..last).rev() {
            let tau = self.epochs[k + 1] - self.epochs[k];
            let sigma = &self.sigma_eff[k];
            let propagated = self.powers.power(tau).dot(vectors.last().expect("non-empty"));
            let masked = Array1::from_iter(
                propagated
                    .iter()
                    .zip(sigma)
                    .map(|(&b, &s)| if s == tau { b } else { 0.0 }),
            );
            let b = normalized(masked).unwrap_or_else(|| {
                fallbacks += 1;
                uniform(size)
            });
            vectors.push(b);
        }
        vectors.reverse();
        BackwardPass {
            first: first.min(last),
            vectors,
            fallbacks,
        }
    }

    /// `φ_E(n; d)`, Eve's belief at time `n - d` given requests up to `n`.
    pub fn belief_at(&self, n: usize, d: usize) -> Result<Belief> {
        if d > n {
            return Err(Error::domain(format!("delay {d} exceeds horizon {n}")));
        }
        let window = self.window(n, n - d, n)?;
        Ok(window.beliefs.into_iter().next().expect("one target requested"))
    }

    /// Beliefs for `d = 0..=min(d_max, n)`, sharing one backward pass.
    pub fn beliefs(&self, n: usize, d_max: usize) -> Result<BeliefWindow> {
        let oldest = n.saturating_sub(d_max);
        let mut window = self.window(n, oldest, n)?;
        window.beliefs.reverse();
        Ok(window)
    }

    /// `L_E(n; D)` and the number of numeric fallbacks it needed.
    pub fn leakage_at(&self, n: usize, d_max: usize) -> Result<(f64, usize)> {
        let window = self.beliefs(n, d_max)?;
        Ok((leakage_with_reference(&window.beliefs, self.h_mu), window.fallbacks))
    }

    /// Beliefs about every time in `oldest..=newest` at horizon `n`, in
    /// increasing target order.
    fn window(&self, n: usize, oldest: usize, newest: usize) -> Result<BeliefWindow> {
        debug_assert!(oldest <= newest && newest <= n);
        let last = self.last_index_at(n);
        let first = self.last_index_at(oldest);
        let backward = self.backward_from(n, first);
        let mut fallbacks = backward.fallbacks;

        let mut smoothed = Vec::with_capacity(last - first + 1);
        for k in first..=last {
            let (phi, fb) = smooth_at_transmission(self.forwards[k].view(), backward.get(k).view());
            fallbacks += usize::from(fb);
            smoothed.push(phi);
        }
        let phi = |k: usize| &smoothed[k - first];

        let t_last = self.epochs[last];
        let mut beliefs = Vec::with_capacity(newest - oldest + 1);
        for m in oldest..=newest {
            let dist = if m > t_last {
                let ahead = phi(last).dot(&*self.powers.power(m - t_last));
                normalized(ahead).unwrap_or_else(|| uniform(self.chain.size()))
            } else {
                let k = self.last_index_at(m);
                let t_k = self.epochs[k];
                if m == t_k {
                    phi(k).clone()
                } else {
                    let tau = self.epochs[k + 1] - t_k;
                    let (between, fb) = smooth_between(phi(k).view(), phi(k + 1).view(), m - t_k, tau, &self.powers)?;
                    fallbacks += usize::from(fb);
                    between
                }
            };
            beliefs.push(Belief {
                target: m,
                horizon: n,
                dist,
            });
        }
        Ok(BeliefWindow { beliefs, fallbacks })
    }

    /// Copy of this state with one more (hypothetical) request appended.
    pub fn with_observation(&self, tau: usize, sigma_eff: Vec<usize>) -> Result<Self> {
        let mut next = self.clone();
        next.observe(tau, sigma_eff)?;
        Ok(next)
    }
}
