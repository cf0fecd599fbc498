use goalleak_core::markov::{build_chain, MarkovChain, MatrixPowerCache};
use goalleak_core::oracle::{
    check_optimal_policy, enumerate_posteriors, simulated_periodic_reward, simulated_timing, smoothing_suite,
    timing_suite,
};
use goalleak_core::policy::{periodic_average_reward, policy_analytics, solve_optimal_policy, tune_periodic};

#[test]
fn solver_matches_enumeration_beyond_the_reference_grid() {
    for size in [4, 5, 6] {
        for &theta in &[0.5, 2.0, 16.0] {
            for &beta in &[0.2, 0.8, 1.5, 2.0] {
                for &(gamma, t_max) in &[(0.8, 3), (0.95, 4)] {
                    if size == 6 && t_max == 4 {
                        continue;
                    }
                    let chain = build_chain(size, theta).unwrap();
                    let case = check_optimal_policy(&chain, beta, gamma, t_max, 1e-9).unwrap();
                    assert!(
                        case.passed,
                        "size {size} theta {theta} beta {beta} gamma {gamma}: gap {} ({})",
                        case.error, case.detail
                    );
                }
            }
        }
    }
}

#[test]
fn zero_cost_polls_every_step_except_ties() {
    let chain = build_chain(4, 1.0).unwrap();
    let policy = solve_optimal_policy(&chain, 0.0, 0.9, 3).unwrap();
    assert_eq!(policy.sigma, vec![1, 1, 1, 2]);
    let eager = goalleak_core::oracle::threshold_policy_values(&chain, &[1; 4], 0.0, 0.9).unwrap();
    let solved = goalleak_core::oracle::threshold_policy_values(&chain, &policy.sigma, 0.0, 0.9).unwrap();
    for (a, b) in eager.iter().zip(&solved) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn smoothing_matches_enumeration_on_many_chains() {
    let report = smoothing_suite(1_000, 7).unwrap();
    assert!(report.passed(), "max error {}", report.max_error());
}

#[test]
fn deterministic_schedule_pins_the_state() {
    let chain = MarkovChain::from_rows(vec![vec![0.3, 0.3, 0.4], vec![0.5, 0.25, 0.25], vec![0.1, 0.6, 0.3]]).unwrap();
    let posts = enumerate_posteriors(&chain, &[2, 1, 3], &[vec![1, 2, 3], vec![1, 2, 3], vec![1, 2, 3]]).unwrap();
    assert_eq!(posts[0], vec![0.0, 1.0, 0.0]);
    assert_eq!(posts[1], vec![1.0, 0.0, 0.0]);
    assert_eq!(posts[2], vec![0.0, 0.0, 1.0]);
}

#[test]
fn long_run_timing_histogram_matches_analytics() {
    let report = timing_suite(1_000_000, 0.01, 11).unwrap();
    for case in &report.cases {
        assert!(case.passed, "{}: {}", case.name, case.detail);
    }
}

#[test]
fn periodic_reward_matches_simulation() {
    for &theta in &[1.0, 8.0, 32.0] {
        let chain = build_chain(30, theta).unwrap();
        let powers = MatrixPowerCache::new(&chain);
        for period in [1, 2, 4, 7] {
            let analytic = periodic_average_reward(&chain, &powers, 1.0, period);
            let simulated = simulated_periodic_reward(&chain, period, 1.0, 400_000, 5).unwrap();
            assert!(
                (analytic - simulated).abs() < 0.01,
                "theta {theta} period {period}: {analytic} vs {simulated}"
            );
        }
    }
}

#[test]
fn tuned_period_is_best_by_simulation() {
    let chain = build_chain(30, 4.0).unwrap();
    let tuned = tune_periodic(&chain, 1.0, 10).unwrap().period.unwrap();
    let best = simulated_periodic_reward(&chain, tuned, 1.0, 400_000, 9).unwrap();
    for period in 1..=10 {
        let other = simulated_periodic_reward(&chain, period, 1.0, 400_000, 9).unwrap();
        assert!(
            other <= best + 0.01,
            "period {period} beats tuned {tuned}: {other} > {best}"
        );
    }
}

#[test]
fn analytics_match_simulation_across_costs() {
    let chain = build_chain(30, 2.0).unwrap();
    for &beta in &[0.2, 0.5, 1.0, 2.0] {
        let sigma = solve_optimal_policy(&chain, beta, 0.95, 10).unwrap().sigma;
        let analytic = policy_analytics(&chain, &sigma).unwrap();
        let sim = simulated_timing(&chain, &sigma, 200_000, 3).unwrap();
        assert!((analytic.transmission_prob - sim.transmission_prob).abs() < 0.02);
        let tv: f64 = analytic
            .timing_distribution
            .iter()
            .zip(&sim.histogram)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.02, "beta {beta}: total variation {tv}");
    }
}
