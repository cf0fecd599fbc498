//! Simulation of timing side-channel leakage in pull-based, goal-oriented
//! monitoring of a Markov source.
//!
//! Bob polls Alice for the state of a Markov chain, choosing how long to
//! wait after each update based on the state he received. Eve cannot read
//! the updates but sees when they happen, and runs forward-backward
//! smoothing over the request timings. The crate covers the source model,
//! Bob's optimal and periodic schedules, Eve's estimator, the ADE
//! hysteresis countermeasure, the episode simulator and experiment sweeps.

pub mod ade;
pub mod error;
pub mod eve;
pub mod markov;
pub mod oracle;
pub mod policy;
pub mod sim;
pub mod sweep;

pub use ade::{AdeConfig, AdeMode};
pub use error::{Error, Result};
pub use eve::{Belief, EveState};
pub use markov::{build_chain, entropy, g_factor, sample_path, steady_state, MarkovChain, MatrixPowerCache};
pub use policy::{
    policy_analytics, solve_optimal_policy, tune_periodic, PolicyAnalytics, PolicyKind, SchedulingPolicy,
};
pub use sim::{
    compute_metrics, simulate, EpisodeTrace, MetricsReport, PolicyChoice, RunParams, Scenario, ScenarioParams,
};
pub use sweep::{run_sweep, SweepRow, SweepSpec};
