//! From a ratings file to bandit tasks: parse, filter, embed with a truncated
//! SVD, group users into tasks (nearest neighbours and k-means), and run the
//! meta-learner on the resulting environment.
//!
//! cargo run --release --example ratings_pipeline

use bandit_meta::bandit::ConfidenceParams;
use bandit_meta::data::{self, RatingEnv, RatingFormat, RatingsConfig, TaskConstruction};
use bandit_meta::env::RewardMode;
use bandit_meta::meta::{self, BiasUpdate, Estimator, GapKind, LambdaMode, MetaConfig, TaskEnvironment};
use bandit_meta::rng;

fn main() -> bandit_meta::Result<()> {
    // A stand-in for a real dataset: three planted taste groups.
    let text = data::generate_planted_ratings(300, 400, 5)?;
    let raw = data::parse_ratings(&text, &RatingFormat::default())?;
    let filtered = data::filter_min_counts(&raw, 20, 20)?;
    println!(
        "ratings: {} users × {} items → {} × {} after filtering",
        raw.n_users(),
        raw.n_items(),
        filtered.n_users(),
        filtered.n_items()
    );

    let d = 8;
    let emb = data::truncated_svd(&filtered, d)?;
    let sv: Vec<String> = emb.singular_values.iter().map(|s| format!("{s:.1}")).collect();
    println!("leading singular values: {}", sv.join(" "));

    let clusters = data::kmeans_tasks(&emb, 3, 0.1, 20, &mut rng::from_seed(1))?;
    let sizes: Vec<usize> = clusters.tasks.iter().map(|t| t.user_indices.len()).collect();
    println!("k-means: silhouette {:.3}, cluster sizes {sizes:?}", clusters.silhouette);

    let near = data::nearest_users(&emb, 0, 10, false)?;
    println!("10 nearest users to user 0: {:?}", near.user_indices);

    let cfg = RatingsConfig {
        path: "unused".into(),
        format: RatingFormat::default(),
        min_item_ratings: 20,
        min_user_ratings: 20,
        d,
        tasks: TaskConstruction::NearestUsers {
            anchor: 0,
            n: 60,
            include_anchor: false,
        },
        arms: 5,
        horizon: 40,
        high_threshold: 4.0,
        low_threshold: 3.0,
        noise_mean: 0.0,
        noise_std: 0.5,
        reward_mode: RewardMode::LinearNoisy,
        seed: 2,
    };
    let env = RatingEnv::from_matrix(&raw, &cfg)?;
    println!("environment: {} tasks, S = {:.3}", env.users().len(), env.norm_bound());

    let params = ConfidenceParams::new(0.5, env.norm_bound(), emb_arm_bound(&env), 1.0 / 40.0, d)?;
    for (name, estimator) in [("ITL", Estimator::Itl), ("Avg", Estimator::Avg), ("GlobalRR", Estimator::GlobalRR)] {
        let mc = MetaConfig {
            estimator,
            lambda_mode: LambdaMode::Fixed(10.0),
            horizon: env.horizon(),
            n_tasks: 40,
            params,
            gap: GapKind::PracticalBound,
            bias_update: BiasUpdate::Live,
        };
        let run = meta::run_meta(&env, &mc, 20)?;
        let regret = run.test.iter().map(|t| t.cumulative_regret()).sum::<f64>() / run.test.len() as f64;
        println!("{name:<9} mean test regret {regret:.3}");
    }
    Ok(())
}

fn emb_arm_bound(env: &RatingEnv) -> f64 {
    let items = &env.embedding().item_vectors;
    (0..items.nrows()).map(|i| items.row(i).norm()).fold(0.0, f64::max)
}
