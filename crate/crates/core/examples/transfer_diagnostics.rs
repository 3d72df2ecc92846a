//! Transfer diagnostics: how well the training tasks cover the feature space
//! (smallest pooled eigenvalue, misalignment), how far the learned bias is
//! from the mean task, and the high-probability bound on the averaging
//! estimator's error.
//!
//! cargo run --example transfer_diagnostics

use bandit_meta::bandit::ConfidenceParams;
use bandit_meta::env::{task_std_for_variance, RewardMode, SyntheticEnv, SyntheticEnvConfig};
use bandit_meta::meta::{self, BiasUpdate, Estimator, GapKind, LambdaMode, MetaConfig, TaskEnvironment};

fn main() -> bandit_meta::Result<()> {
    let d = 5;
    let lambda = 1.0;
    let delta = 0.1;
    for n in [5, 20, 80] {
        let env = SyntheticEnv::new(SyntheticEnvConfig {
            d,
            arms: 5,
            horizon: 60,
            mean: vec![0.3; d],
            task_std: task_std_for_variance(0.25, d),
            noise_mean: 0.0,
            noise_std: 0.1,
            reward_mode: RewardMode::LinearNoisy,
            shift_scale: 1.0,
            seed: 17,
        })?;
        let params = ConfidenceParams::new(0.1, env.config().norm_bound(), 1.0, delta, d)?;
        let cfg = MetaConfig {
            estimator: Estimator::Avg,
            lambda_mode: LambdaMode::Fixed(lambda),
            horizon: env.horizon(),
            n_tasks: n,
            params,
            gap: GapKind::PracticalBound,
            bias_update: BiasUpdate::Live,
        };
        let run = meta::run_meta(&env, &cfg, 0)?;
        let diag = run.diagnostics;
        let w_bar = env.mean_task();
        let var0 = w_bar.norm_squared() + env.config().task_variance();
        let bound = meta::bennett_bound(n, env.config().norm_bound(), var0, delta)?
            + meta::avg_variance_term(
                run.state.global.per_task_designs(),
                run.state.global.per_task_rounds(),
                &params,
                lambda,
            )?;
        println!(
            "N={n:<3} ν_min={:>9.2} max misalignment={:.4} (1/N={:.4}) ‖ĥ − w̄‖={:.4} bound={:.4} H_ρ={:.4}",
            diag.nu_min,
            diag.max_misalignment,
            1.0 / n as f64,
            diag.eps.sqrt(),
            bound,
            diag.h_rho
        );
    }
    Ok(())
}
