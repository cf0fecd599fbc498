//! Adaptive Dual Estimation (ADE).
//!
//! At every transmission Bob predicts how much Eve would learn from the next
//! request under each of his two schedules and switches with hysteresis:
//! goal-oriented scheduling is abandoned when its predicted leakage reaches
//! `l_max`, and resumed once the periodic schedule's predicted leakage falls
//! below `l_min`.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eve::EveState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdeMode {
    GoalOriented,
    Periodic,
}

impl AdeMode {
    /// The binary mode flag ξ.
    pub fn xi(self) -> u8 {
        match self {
            AdeMode::GoalOriented => 0,
            AdeMode::Periodic => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdeConfig {
    pub l_min: f64,
    pub l_max: f64,
    pub period: usize,
    pub sigma: Vec<usize>,
    pub d_max: usize,
}

impl AdeConfig {
    /// Thresholds only need `l_min < l_max`; values outside `[0, 1]` make a
    /// switch unreachable, which pins ADE to one of its two schedules.
    pub fn new(l_min: f64, l_max: f64, period: usize, sigma: Vec<usize>, d_max: usize) -> Result<Self> {
        if !(l_min.is_finite() && l_max.is_finite() && l_min < l_max) {
            return Err(Error::config(format!("need l_min < l_max, got {l_min} and {l_max}")));
        }
        if period == 0 || sigma.contains(&0) {
            return Err(Error::config("intervals must be at least 1"));
        }
        Ok(AdeConfig {
            l_min,
            l_max,
            period,
            sigma,
            d_max,
        })
    }

    fn periodic_map(&self) -> Vec<usize> {
        vec![self.period; self.sigma.len()]
    }
}

/// Leakage Eve would reach at the next request if it came `tau` steps after
/// the last one, under the interval map `sigma_eff`.
pub fn predict_leakage(shadow: &EveState, tau: usize, sigma_eff: &[usize], d_max: usize) -> Result<f64> {
    let next = shadow.with_observation(tau, sigma_eff.to_vec())?;
    let (value, _) = next.leakage_at(next.last_epoch(), d_max)?;
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdeDecision {
    pub interval: usize,
    pub mode_before: AdeMode,
    pub mode_after: AdeMode,
    pub l_sem: f64,
    pub l_per: f64,
}

/// One ADE step: chooses the next interval after receiving `state`.
///
/// `shadow` is Bob's copy of Eve's knowledge; he sees the same requests she
/// does.
pub fn ade_schedule(state: usize, cfg: &AdeConfig, mode: AdeMode, shadow: &EveState) -> Result<AdeDecision> {
    let l_sem = predict_leakage(shadow, cfg.sigma[state], &cfg.sigma, cfg.d_max)?;
    let l_per = predict_leakage(shadow, cfg.period, &cfg.periodic_map(), cfg.d_max)?;
    let mode_after = match mode {
        AdeMode::GoalOriented if l_sem >= cfg.l_max => AdeMode::Periodic,
        AdeMode::GoalOriented => AdeMode::GoalOriented,
        AdeMode::Periodic if l_per < cfg.l_min => AdeMode::GoalOriented,
        AdeMode::Periodic => AdeMode::Periodic,
    };
    let interval = match mode_after {
        AdeMode::GoalOriented => cfg.sigma[state],
        AdeMode::Periodic => cfg.period,
    };
    Ok(AdeDecision {
        interval,
        mode_before: mode,
        mode_after,
        l_sem,
        l_per,
    })
}

/// What Eve expects of the coming interval: the interval Bob would use from
/// each state, and the mode he would be in afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalHypothesis {
    pub sigma_eff: Vec<usize>,
    pub next_mode: Vec<AdeMode>,
}

/// Eve's replay of Bob's ADE mode.
///
/// Eve knows the ADE rule and its parameters, and she holds exactly the
/// information Bob's predictions are based on, so she can evaluate his
/// switching rule for every state he might have received. When a request
/// interval is consistent with both modes she keeps the one carrying more
/// forward probability.
#[derive(Debug, Clone)]
pub struct ModeTracker {
    cfg: AdeConfig,
    mode: AdeMode,
}

impl ModeTracker {
    pub fn new(cfg: AdeConfig, initial: AdeMode) -> Self {
        ModeTracker { cfg, mode: initial }
    }

    pub fn mode(&self) -> AdeMode {
        self.mode
    }

    pub fn hypothesis(&self, shadow: &EveState) -> Result<IntervalHypothesis> {
        let size = self.cfg.sigma.len();
        match self.mode {
            AdeMode::Periodic => {
                let l_per = predict_leakage(shadow, self.cfg.period, &self.cfg.periodic_map(), self.cfg.d_max)?;
                Ok(if l_per < self.cfg.l_min {
                    IntervalHypothesis {
                        sigma_eff: self.cfg.sigma.clone(),
                        next_mode: vec![AdeMode::GoalOriented; size],
                    }
                } else {
                    IntervalHypothesis {
                        sigma_eff: self.cfg.periodic_map(),
                        next_mode: vec![AdeMode::Periodic; size],
                    }
                })
            }
            AdeMode::GoalOriented => {
                let longest = self.cfg.sigma.iter().copied().max().unwrap_or(1);
                let mut switches: Vec<Option<bool>> = vec![None; longest + 1];
                let mut sigma_eff = Vec::with_capacity(size);
                let mut next_mode = Vec::with_capacity(size);
                for &sigma in &self.cfg.sigma {
                    let switch = match switches[sigma] {
                        Some(flag) => flag,
                        None => {
                            let l_sem = predict_leakage(shadow, sigma, &self.cfg.sigma, self.cfg.d_max)?;
                            let flag = l_sem >= self.cfg.l_max;
                            switches[sigma] = Some(flag);
                            flag
                        }
                    };
                    if switch {
                        sigma_eff.push(self.cfg.period);
                        next_mode.push(AdeMode::Periodic);
                    } else {
                        sigma_eff.push(sigma);
                        next_mode.push(AdeMode::GoalOriented);
                    }
                }
                Ok(IntervalHypothesis { sigma_eff, next_mode })
            }
        }
    }

    /// Settles Bob's mode after observing `tau`, weighting the compatible
    /// states by `prior`, Eve's forward belief at the previous request.
    pub fn resolve(&mut self, hypothesis: &IntervalHypothesis, tau: usize, prior: ArrayView1<'_, f64>) {
        let (mut goal, mut periodic) = (0.0, 0.0);
        for (s, (&interval, &mode)) in hypothesis.sigma_eff.iter().zip(&hypothesis.next_mode).enumerate() {
            if interval == tau {
                match mode {
                    AdeMode::GoalOriented => goal += prior[s],
                    AdeMode::Periodic => periodic += prior[s],
                }
            }
        }
        self.mode = if goal == 0.0 && periodic == 0.0 {
            // nothing in Eve's model explains the interval
            if tau == self.cfg.period {
                AdeMode::Periodic
            } else {
                AdeMode::GoalOriented
            }
        } else if periodic >= goal {
            AdeMode::Periodic
        } else {
            AdeMode::GoalOriented
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::{MarkovChain, MatrixPowerCache};
    use ndarray::Array1;
    use std::sync::Arc;

    fn eve_for(chain: MarkovChain) -> EveState {
        let chain = Arc::new(chain);
        let powers = Arc::new(MatrixPowerCache::new(&chain));
        EveState::new(chain, powers).unwrap()
    }

    fn swap_chain_eve() -> EveState {
        eve_for(MarkovChain::from_rows(vec![vec![0.1, 0.9], vec![0.9, 0.1]]).unwrap())
    }

    #[test]
    fn config_validation() {
        assert!(AdeConfig::new(0.6, 0.4, 2, vec![1, 2], 5).is_err());
        assert!(AdeConfig::new(0.4, 0.4, 2, vec![1, 2], 5).is_err());
        assert!(AdeConfig::new(0.4, 0.6, 0, vec![1, 2], 5).is_err());
        assert!(AdeConfig::new(-0.1, 1.1, 2, vec![1, 2], 5).is_ok());
    }

    #[test]
    fn periodic_prediction_after_mixing_is_small() {
        let mut eve = swap_chain_eve();
        for _ in 0..20 {
            eve.observe(2, vec![2, 2]).unwrap();
        }
        assert!(predict_leakage(&eve, 2, &[2, 2], 5).unwrap() < 1e-6);
    }

    #[test]
    fn revealing_interval_from_a_point_mass_leaks_everything() {
        let chain = MarkovChain::identity(3)
            .unwrap()
            .with_initial(Array1::from(vec![0.0, 1.0, 0.0]))
            .unwrap();
        let eve = eve_for(chain);
        // identity chain has a uniform steady state, so H(μ) > 0
        let leak = predict_leakage(&eve, 2, &[1, 2, 3], 3).unwrap();
        assert_eq!(leak, 1.0);
    }

    fn fixed_cfg(l_min: f64, l_max: f64) -> AdeConfig {
        AdeConfig::new(l_min, l_max, 3, vec![1, 2], 2).unwrap()
    }

    #[test]
    fn switching_rule() {
        // From a point-mass prior any interval is revealing: both
        // predictions are 1 on a deterministic swap chain.
        let chain = MarkovChain::from_rows(vec![vec![0.0, 1.0], vec![1.0, 0.0]])
            .unwrap()
            .with_initial(Array1::from(vec![1.0, 0.0]))
            .unwrap();
        let eve = eve_for(chain);

        let d = ade_schedule(0, &fixed_cfg(0.4, 0.6), AdeMode::GoalOriented, &eve).unwrap();
        assert!(d.l_sem >= 0.6);
        assert_eq!((d.interval, d.mode_after), (3, AdeMode::Periodic));

        let d = ade_schedule(0, &fixed_cfg(0.4, 1.5), AdeMode::GoalOriented, &eve).unwrap();
        assert_eq!((d.interval, d.mode_after), (1, AdeMode::GoalOriented));

        let d = ade_schedule(1, &fixed_cfg(0.4, 0.6), AdeMode::Periodic, &eve).unwrap();
        assert!(d.l_per >= 0.4);
        assert_eq!((d.interval, d.mode_after), (3, AdeMode::Periodic));

        let d = ade_schedule(1, &fixed_cfg(1.2, 1.5), AdeMode::Periodic, &eve).unwrap();
        assert_eq!((d.interval, d.mode_after), (2, AdeMode::GoalOriented));
    }

    #[test]
    fn tracker_replays_the_decision() {
        let eve = swap_chain_eve();
        let cfg = fixed_cfg(-1.0, 2.0);
        let tracker = ModeTracker::new(cfg.clone(), AdeMode::GoalOriented);
        let hyp = tracker.hypothesis(&eve).unwrap();
        assert_eq!(hyp.sigma_eff, cfg.sigma);
        assert_eq!(hyp.next_mode, vec![AdeMode::GoalOriented; 2]);

        let mut tracker = ModeTracker::new(fixed_cfg(-1.0, 0.0), AdeMode::GoalOriented);
        let hyp = tracker.hypothesis(&eve).unwrap();
        assert_eq!(hyp.sigma_eff, vec![3, 3]);
        tracker.resolve(&hyp, 3, eve.forwards()[0].view());
        assert_eq!(tracker.mode(), AdeMode::Periodic);
    }

    #[test]
    fn ambiguous_interval_goes_to_the_heavier_mode() {
        let cfg = AdeConfig::new(0.4, 0.6, 2, vec![2, 1, 1], 2).unwrap();
        let hyp = IntervalHypothesis {
            sigma_eff: vec![2, 2, 1],
            next_mode: vec![AdeMode::GoalOriented, AdeMode::Periodic, AdeMode::GoalOriented],
        };
        let mut tracker = ModeTracker::new(cfg.clone(), AdeMode::GoalOriented);
        tracker.resolve(&hyp, 2, Array1::from(vec![0.5, 0.3, 0.2]).view());
        assert_eq!(tracker.mode(), AdeMode::GoalOriented);
        tracker.resolve(&hyp, 2, Array1::from(vec![0.2, 0.6, 0.2]).view());
        assert_eq!(tracker.mode(), AdeMode::Periodic);
        tracker.resolve(&hyp, 1, Array1::from(vec![0.2, 0.6, 0.2]).view());
        assert_eq!(tracker.mode(), AdeMode::GoalOriented);
    }
}
