//! One bandit task solved three ways: plain OFUL (bias 0), OFUL biased towards
//! a good guess of the task vector, and biased towards a bad one.
//!
//! cargo run --example biased_oful

use bandit_meta::bandit::{self, ConfidenceParams, GapMode, TaskState};
use bandit_meta::env::{RewardMode, SyntheticEnv, SyntheticEnvConfig};
use bandit_meta::meta::TaskEnvironment;
use bandit_meta::RealVector;

fn main() -> bandit_meta::Result<()> {
    let env = SyntheticEnv::new(SyntheticEnvConfig {
        d: 8,
        arms: 8,
        horizon: 200,
        mean: vec![0.3, -0.2, 0.2, 0.1, 0.3, -0.1, 0.2, 0.1],
        task_std: 0.05,
        noise_mean: 0.0,
        noise_std: 0.3,
        reward_mode: RewardMode::LinearNoisy,
        shift_scale: 1.0,
        seed: 11,
    })?;
    let w = env.task_vector(0)?;
    let params = ConfidenceParams::new(0.3, env.config().norm_bound(), 1.0, 1.0 / 200.0, 8)?;
    let lambda = 10.0;

    let biases = [
        ("no bias", RealVector::zeros(8)),
        ("mean task", env.mean_task()),
        ("wrong sign", -env.mean_task()),
    ];
    for (name, h) in biases {
        let mut state = TaskState::new(8, lambda)?;
        let mut chosen = Vec::new();
        let mut sets = Vec::new();
        for t in 0..env.horizon() {
            let ds = env.decision_set(0, t)?;
            let arm = bandit::optimistic_choice(&state, &params, &h, &GapMode::PracticalBound, &ds)?;
            let y = env.rewards(0, t, &ds, &w).rewards[arm];
            state.update(ds.arm(arm), y)?;
            chosen.push(arm);
            sets.push(ds);
        }
        let regret = bandit_meta::meta::pseudo_regret(&chosen, &sets, &w)?;
        let err = (state.biased_ridge_estimate(&h)? - &w).norm();
        let beta = bandit::beta_biased(&state, &params, &h, &GapMode::PracticalBound)?;
        println!(
            "{name:<11} regret {:>7.3}  final ‖ŵ − w‖ {err:.4}  radius {beta:.3}",
            regret.iter().sum::<f64>()
        );
    }
    Ok(())
}
