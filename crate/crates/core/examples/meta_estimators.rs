//! Learning the bias across tasks. Trains the averaging and the pooled ridge
//! estimators on growing numbers of tasks and reports how close the learned
//! bias gets to the true mean task, and the regret on fresh test tasks.
//!
//! cargo run --example meta_estimators

use bandit_meta::bandit::ConfidenceParams;
use bandit_meta::env::{task_std_for_variance, RewardMode, SyntheticEnv, SyntheticEnvConfig};
use bandit_meta::meta::{self, BiasUpdate, Estimator, GapKind, LambdaMode, MetaConfig, TaskEnvironment};

fn main() -> bandit_meta::Result<()> {
    let d = 5;
    let env = SyntheticEnv::new(SyntheticEnvConfig {
        d,
        arms: 5,
        horizon: 100,
        mean: vec![0.4; d],
        task_std: task_std_for_variance(0.1, d),
        noise_mean: 0.0,
        noise_std: 0.2,
        reward_mode: RewardMode::LinearNoisy,
        shift_scale: 1.0,
        seed: 3,
    })?;
    let params = ConfidenceParams::new(0.2, env.config().norm_bound(), 1.0, 0.01, d)?;
    let w_bar = env.mean_task();

    println!("{:<9} {:>4} {:>10} {:>12}", "estimator", "N", "‖ĥ − w̄‖", "test regret");
    for (name, estimator) in [("ITL", Estimator::Itl), ("Avg", Estimator::Avg), ("GlobalRR", Estimator::GlobalRR)] {
        for n in [2, 8, 32] {
            let cfg = MetaConfig {
                estimator: estimator.clone(),
                lambda_mode: LambdaMode::Fixed(1.0),
                horizon: env.horizon(),
                n_tasks: n,
                params,
                gap: GapKind::PracticalBound,
                bias_update: BiasUpdate::Live,
            };
            let run = meta::run_meta(&env, &cfg, 20)?;
            let test_regret: f64 =
                run.test.iter().map(|t| t.cumulative_regret()).sum::<f64>() / run.test.len() as f64;
            println!(
                "{name:<9} {n:>4} {:>10.4} {test_regret:>12.3}",
                (&run.trained_bias - &w_bar).norm()
            );
        }
    }
    Ok(())
}
