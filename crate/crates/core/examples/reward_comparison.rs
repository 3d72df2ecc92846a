//! The five-policy benchmark on the binarized synthetic environment. Reads a
//! config (default `configs/reward_comparison.json`), prints the summary
//! table and, with `--out <dir>`, writes the CSVs the plotting scripts use.
//!
//! cargo run --release --example reward_comparison -- [config] [--out dir]

use bandit_meta::bench::{self, ExperimentConfig};

fn main() -> bandit_meta::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.iter().position(|a| a == "--out").and_then(|i| args.get(i + 1)).cloned();
    let path = args
        .iter()
        .find(|a| a.ends_with(".json"))
        .cloned()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/reward_comparison.json").into());
    let cfg = ExperimentConfig::load(std::path::Path::new(&path))?;
    cfg.validate()?;
    let result = bench::run_experiment(&cfg)?;

    println!("{:<8} {:>7} {:>16} {:>16}", "policy", "lambda", "test reward", "test regret");
    for s in &result.summaries {
        println!(
            "{:<8} {:>7} {:>9.3} ± {:<5.3} {:>9.3} ± {:<5.3}{}",
            s.policy.name(),
            s.lambda,
            s.mean_cum_reward,
            s.se_cum_reward,
            s.mean_cum_regret,
            s.se_cum_regret,
            if s.best_lambda { "  *" } else { "" }
        );
    }
    if let Some(dir) = out {
        let files = bench::write_outputs(&cfg, &result, std::path::Path::new(&dir))?;
        println!("wrote {} files to {dir}", files.len());
    }
    Ok(())
}
