mod support;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reverb::dynamics::StateVector;
use reverb::sensing::{place_agents, Placement, SensingAgentSpec};
use reverb::Fleet64;
use support::rng;

const N: usize = 100_000;

fn noise_draws(agent: &SensingAgentSpec<f64>, state: &StateVector<f64>, seed: u64) -> Vec<f64> {
    let clean = agent.observe_noiseless(state, 0).unwrap().values[0];
    let mut r = rng(seed);
    (0..N)
        .map(|t| agent.observe(state, t as u64, &mut r).unwrap().values[0] - clean)
        .collect()
}

#[test]
fn observation_noise_has_the_configured_variance() {
    let state = StateVector::from_slice(&[-0.5, 0.01]);
    for (feature, variance) in [(0, 1e-3), (0, 0.1), (1, 1e-4), (1, 1e-2)] {
        let agent = SensingAgentSpec::scalar(1, feature, 2, variance, 2.0).unwrap();
        let e = noise_draws(&agent, &state, 42 + feature as u64);
        let mean = e.iter().sum::<f64>() / N as f64;
        let var = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (N - 1) as f64;
        assert!((var / variance - 1.0).abs() <= 0.05, "variance {var} vs {variance}");
        assert!(mean.abs() <= 4.0 * (variance / N as f64).sqrt());
    }
}

#[test]
fn observation_noise_is_white() {
    let agent = SensingAgentSpec::scalar(1, 0, 2, 0.01, 2.0).unwrap();
    let e = noise_draws(&agent, &StateVector::from_slice(&[0.1, 0.0]), 9);
    let mean = e.iter().sum::<f64>() / N as f64;
    let c0: f64 = e.iter().map(|x| (x - mean).powi(2)).sum();
    for lag in 1..=10 {
        let c: f64 = e.windows(lag + 1).map(|w| (w[0] - mean) * (w[lag] - mean)).sum();
        let rho = c / c0;
        assert!(rho.abs() <= 3.0 / (N as f64).sqrt(), "lag {lag} autocorrelation {rho}");
    }
}

#[test]
fn observations_are_linear_in_the_state() {
    let agent = SensingAgentSpec::scalar(1, 1, 2, 1e-3, 2.0).unwrap();
    let s1 = [0.2, 0.03];
    let s2 = [-0.7, -0.01];
    let sum = StateVector::from_slice(&[s1[0] + s2[0], s1[1] + s2[1]]);
    let mut r = rng(5);
    let n = 20_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let a = agent.observe(&sum, 0, &mut r).unwrap().values[0];
        let b = agent.observe(&StateVector::from_slice(&s2), 0, &mut r).unwrap().values[0];
        acc += a - b;
    }
    let mean = acc / n as f64;
    let se = (2.0 * 1e-3 / n as f64).sqrt();
    assert!((mean - s1[1]).abs() <= 4.0 * se, "mean difference {mean}");
}

#[test]
fn generated_fleets_cover_every_feature() {
    for count in [2, 3, 5, 20, 50] {
        for seed in 0..50 {
            let placement = Placement { count, ..Default::default() };
            let fleet: Fleet64 = place_agents(&placement, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(fleet.covers(2));
            assert_eq!(fleet.len(), count);
            for a in fleet.agents() {
                assert!(a.distance() > 1.0 && a.distance() <= 20.0);
            }
            let back = Fleet64::from_records(&fleet.to_records().unwrap(), 2).unwrap();
            assert_eq!(back.to_records().unwrap(), fleet.to_records().unwrap());
        }
    }
}
