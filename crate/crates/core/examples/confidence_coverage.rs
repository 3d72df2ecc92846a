//! Empirical coverage of the biased confidence ellipsoid: the fraction of
//! episodes in which the true task vector stays inside the set at every round,
//! for the exact gap and for the norm-based upper bound on it.
//!
//! cargo run --release --example confidence_coverage

use bandit_meta::bandit::{self, ConfidenceParams, GapMode, TaskState};
use bandit_meta::env::{RewardMode, SyntheticEnv, SyntheticEnvConfig};
use bandit_meta::meta::TaskEnvironment;

fn main() -> bandit_meta::Result<()> {
    let (d, horizon, episodes, delta) = (5, 30, 500, 0.1);
    for exact in [true, false] {
        let mut covered = 0;
        let mut mean_radius = 0.0;
        for e in 0..episodes {
            let env = SyntheticEnv::new(SyntheticEnvConfig {
                d,
                arms: 5,
                horizon,
                mean: vec![0.4, -0.3, 0.2, 0.1, 0.3],
                task_std: 0.15,
                noise_mean: 0.0,
                noise_std: 0.5,
                reward_mode: RewardMode::LinearNoisy,
                shift_scale: 1.0,
                seed: e,
            })?;
            let w = env.task_vector(0)?;
            let h = env.mean_task();
            let params = ConfidenceParams::new(0.5, env.config().norm_bound(), 1.0, delta, d)?;
            let mode = if exact { GapMode::OracleGap(w.clone()) } else { GapMode::PracticalBound };
            let mut state = TaskState::new(d, 1.0)?;
            let mut inside = true;
            for t in 0..horizon {
                let ds = env.decision_set(0, t)?;
                let arm = bandit::optimistic_choice(&state, &params, &h, &mode, &ds)?;
                let y = env.rewards(0, t, &ds, &w).rewards[arm];
                state.update(ds.arm(arm), y)?;
                let err = state.biased_ridge_estimate(&h)? - &w;
                inside &= state.design().quad_form(&err).sqrt() <= bandit::beta_biased(&state, &params, &h, &mode)?;
            }
            mean_radius += bandit::beta_biased(&state, &params, &h, &mode)? / episodes as f64;
            covered += usize::from(inside);
        }
        println!(
            "{:<15} coverage {:.3} (target ≥ {:.2}), mean final radius {mean_radius:.3}",
            if exact { "exact gap" } else { "bounded gap" },
            covered as f64 / episodes as f64,
            1.0 - delta
        );
    }
    Ok(())
}
