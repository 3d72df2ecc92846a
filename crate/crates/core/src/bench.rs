//! Experiment runner: sweeps λ and meta-seeds over a policy roster, records
//! per-round traces and writes the CSV/JSON files the plotting scripts read.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::ConfidenceParams;
use crate::data::{RatingEnv, RatingsConfig};
use crate::env::{SyntheticEnv, SyntheticEnvConfig};
use crate::error::{Error, Result};
use crate::meta::{
    self, BiasUpdate, Estimator, GapKind, LambdaMode, MetaConfig, RoundRecord, TaskEnvironment, TransferDiagnostics,
};
use crate::rng;

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));
pub const TRACE_HEADER: &str = "policy,lambda,seed,task,round,inst_regret,cum_regret,reward,arm";
pub const SUMMARY_HEADER: &str = "policy,lambda,n_seeds,n_test_tasks,mean_cum_regret,se_cum_regret,\
mean_cum_reward,se_cum_reward,eps,h_rho,nu_min,max_misalignment,h_tilde_max,best_lambda";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "OPT")]
    Opt,
    Oracle,
    #[serde(rename = "ITL")]
    Itl,
    AvgOful,
    RrOful,
}

impl Policy {
    pub const ALL: [Policy; 5] = [Policy::Opt, Policy::Oracle, Policy::Itl, Policy::AvgOful, Policy::RrOful];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Opt => "OPT",
            Policy::Oracle => "Oracle",
            Policy::Itl => "ITL",
            Policy::AvgOful => "AvgOful",
            Policy::RrOful => "RrOful",
        }
    }

    /// The estimator this policy runs, given the environment's mean task.
    pub fn estimator<E: TaskEnvironment + ?Sized>(self, env: &E) -> Estimator {
        match self {
            Policy::Opt => Estimator::Optimal,
            Policy::Oracle => Estimator::Oracle(env.mean_task()),
            Policy::Itl => Estimator::Itl,
            Policy::AvgOful => Estimator::Avg,
            Policy::RrOful => Estimator::GlobalRR,
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvConfig {
    Synthetic(SyntheticEnvConfig),
    Ratings(RatingsConfig),
}

/// Meta-learning settings shared by every policy of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSettings {
    /// Sub-gaussian noise scale `R` used in the radii.
    pub noise_scale: f64,
    /// Confidence level; `1/T` when absent.
    #[serde(default)]
    pub delta: Option<f64>,
    /// Task norm bound `S`; taken from the environment when absent.
    #[serde(default)]
    pub norm_bound: Option<f64>,
    /// Arm norm bound `L`.
    #[serde(default = "one")]
    pub arm_bound: f64,
    #[serde(default)]
    pub gap: GapKind,
    #[serde(default)]
    pub bias_update: BiasUpdate,
}

fn one() -> f64 {
    1.0
}

impl Default for MetaSettings {
    fn default() -> Self {
        MetaSettings {
            noise_scale: 1.0,
            delta: None,
            norm_bound: None,
            arm_bound: 1.0,
            gap: GapKind::default(),
            bias_update: BiasUpdate::default(),
        }
    }
}

fn default_grid() -> Vec<f64> {
    vec![0.1, 1.0, 10.0, 100.0]
}

fn default_policies() -> Vec<Policy> {
    Policy::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    #[serde(default = "default_policies")]
    pub policies: Vec<Policy>,
    #[serde(default)]
    pub meta: MetaSettings,
    #[serde(default = "default_grid")]
    pub lambda_grid: Vec<f64>,
    pub n_train_tasks: usize,
    pub n_test_tasks: usize,
    pub n_meta_seeds: usize,
    /// Root of the seed tree; meta-seed `s` uses the subtree at `s`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty() {
            return Err(Error::Config("lambda_grid is empty".into()));
        }
        if let Some(l) = self.lambda_grid.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("lambda {l} is not a positive number")));
        }
        if self.policies.is_empty() {
            return Err(Error::Config("no policies selected".into()));
        }
        if self.n_meta_seeds == 0 || self.n_test_tasks == 0 {
            return Err(Error::Config("n_meta_seeds and n_test_tasks must be ≥ 1".into()));
        }
        if !(self.meta.noise_scale >= 0.0) {
            return Err(Error::Config("meta.noise_scale must be ≥ 0".into()));
        }
        match &self.env {
            EnvConfig::Synthetic(s) => s.validate().map_err(|e| Error::Config(e.to_string())),
            EnvConfig::Ratings(r) => r.validate(),
        }
    }

    pub fn horizon(&self) -> usize {
        match &self.env {
            EnvConfig::Synthetic(s) => s.horizon,
            EnvConfig::Ratings(r) => r.horizon,
        }
    }
}

/// Per-round record of one (policy, λ, seed, task).
#[derive(Debug, Clone, PartialEq)]
pub struct RegretTrace {
    pub policy: Policy,
    pub lambda: f64,
    pub seed: usize,
    pub task: usize,
    pub test: bool,
    pub rounds: Vec<RoundRecord>,
}

impl RegretTrace {
    pub fn cumulative_regret(&self) -> f64 {
        self.rounds.last().map_or(0.0, |r| r.cum_regret)
    }

    pub fn cumulative_reward(&self) -> f64 {
        self.rounds.iter().map(|r| r.reward).sum()
    }
}

/// Aggregates over test tasks for one (policy, λ). Standard errors are
/// across meta-seeds of the per-seed test-task means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSummary {
    pub policy: Policy,
    pub lambda: f64,
    pub n_seeds: usize,
    pub n_test_tasks: usize,
    pub mean_cum_regret: f64,
    pub se_cum_regret: f64,
    pub mean_cum_reward: f64,
    pub se_cum_reward: f64,
    /// Seed-averaged diagnostics of the trained meta state.
    pub diagnostics: TransferDiagnostics,
    /// Whether this λ has the lowest mean regret for the policy.
    pub best_lambda: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub traces: Vec<RegretTrace>,
    pub summaries: Vec<TransferSummary>,
}

impl ExperimentResult {
    pub fn summary(&self, policy: Policy, lambda: f64) -> Option<&TransferSummary> {
        self.summaries.iter().find(|s| s.policy == policy && s.lambda == lambda)
    }

    pub fn traces_for(&self, policy: Policy, lambda: f64) -> impl Iterator<Item = &RegretTrace> {
        self.traces.iter().filter(move |t| t.policy == policy && t.lambda == lambda)
    }
}

/// The environment of one meta-seed.
pub enum SeededEnv {
    Synthetic(SyntheticEnv),
    Ratings(RatingEnv),
}

impl SeededEnv {
    fn as_dyn(&self) -> &(dyn TaskEnvironment + Sync) {
        match self {
            SeededEnv::Synthetic(e) => e,
            SeededEnv::Ratings(e) => e,
        }
    }

    fn norm_bound(&self) -> f64 {
        match self {
            SeededEnv::Synthetic(e) => e.config().norm_bound(),
            SeededEnv::Ratings(e) => e.norm_bound(),
        }
    }
}

/// Builds the environments of every meta-seed. All policies and λ values of
/// one seed share its environment, hence its tasks, arms and noise.
pub fn seeded_envs(cfg: &ExperimentConfig) -> Result<Vec<SeededEnv>> {
    let base_ratings = match &cfg.env {
        EnvConfig::Ratings(r) => Some(RatingEnv::from_config(r)?),
        EnvConfig::Synthetic(_) => None,
    };
    (0..cfg.n_meta_seeds)
        .map(|s| {
            let seed = rng::derive_seed(cfg.seed, &[s as u64]);
            match (&cfg.env, &base_ratings) {
                (EnvConfig::Synthetic(sc), _) => Ok(SeededEnv::Synthetic(SyntheticEnv::new(SyntheticEnvConfig {
                    seed,
                    ..sc.clone()
                })?)),
                (EnvConfig::Ratings(_), Some(base)) => Ok(SeededEnv::Ratings(base.with_seed(seed))),
                (EnvConfig::Ratings(_), None) => unreachable!("ratings environment is built above"),
            }
        })
        .collect()
}

/// The meta configuration a policy runs with at a given λ.
pub fn meta_config(cfg: &ExperimentConfig, env: &SeededEnv, policy: Policy, lambda: f64) -> Result<MetaConfig> {
    let e = env.as_dyn();
    let horizon = e.horizon();
    let params = ConfidenceParams::new(
        cfg.meta.noise_scale,
        cfg.meta.norm_bound.unwrap_or_else(|| env.norm_bound()),
        cfg.meta.arm_bound,
        cfg.meta.delta.unwrap_or(1.0 / horizon as f64),
        e.dim(),
    )
    .map_err(|err| Error::Config(err.to_string()))?;
    Ok(MetaConfig {
        estimator: policy.estimator(e),
        lambda_mode: LambdaMode::Fixed(lambda),
        horizon,
        n_tasks: cfg.n_train_tasks,
        params,
        gap: cfg.meta.gap,
        bias_update: cfg.meta.bias_update,
    })
}

struct Cell {
    lambda_index: usize,
    seed: usize,
    traces: Vec<RegretTrace>,
    diagnostics: Vec<(Policy, TransferDiagnostics)>,
}

fn run_cell(cfg: &ExperimentConfig, env: &SeededEnv, lambda_index: usize, seed: usize) -> Result<Cell> {
    let lambda = cfg.lambda_grid[lambda_index];
    let mut traces = Vec::new();
    let mut diagnostics = Vec::new();
    for &policy in &cfg.policies {
        let mc = meta_config(cfg, env, policy, lambda)?;
        let run = meta::run_meta(env.as_dyn(), &mc, cfg.n_test_tasks)?;
        for (outcomes, test) in [(&run.train, false), (&run.test, true)] {
            traces.extend(outcomes.iter().map(|o| RegretTrace {
                policy,
                lambda,
                seed,
                task: o.task,
                test,
                rounds: o.rounds.clone(),
            }));
        }
        diagnostics.push((policy, run.diagnostics));
    }
    Ok(Cell {
        lambda_index,
        seed,
        traces,
        diagnostics,
    })
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn mean_diagnostics(ds: &[TransferDiagnostics]) -> TransferDiagnostics {
    let avg = |f: fn(&TransferDiagnostics) -> f64| ds.iter().map(f).sum::<f64>() / ds.len() as f64;
    TransferDiagnostics {
        eps: avg(|d| d.eps),
        h_rho: avg(|d| d.h_rho),
        h_rho_unweighted: avg(|d| d.h_rho_unweighted),
        nu_min: avg(|d| d.nu_min),
        max_misalignment: avg(|d| d.max_misalignment),
        h_tilde_max: avg(|d| d.h_tilde_max),
    }
}

/// Summaries recomputed from traces; per-policy best λ is flagged.
pub fn summarize(
    cfg: &ExperimentConfig,
    traces: &[RegretTrace],
    diagnostics: &[(Policy, f64, TransferDiagnostics)],
) -> Vec<TransferSummary> {
    let mut out = Vec::new();
    for &policy in &cfg.policies {
        for &lambda in &cfg.lambda_grid {
            let mut regret = Vec::new();
            let mut reward = Vec::new();
            for seed in 0..cfg.n_meta_seeds {
                let test: Vec<&RegretTrace> = traces
                    .iter()
                    .filter(|t| t.policy == policy && t.lambda == lambda && t.seed == seed && t.test)
                    .collect();
                if test.is_empty() {
                    continue;
                }
                regret.push(test.iter().map(|t| t.cumulative_regret()).sum::<f64>() / test.len() as f64);
                reward.push(test.iter().map(|t| t.cumulative_reward()).sum::<f64>() / test.len() as f64);
            }
            let (mean_cum_regret, se_cum_regret) = mean_se(&regret);
            let (mean_cum_reward, se_cum_reward) = mean_se(&reward);
            let diags: Vec<TransferDiagnostics> = diagnostics
                .iter()
                .filter(|(p, l, _)| *p == policy && *l == lambda)
                .map(|(_, _, d)| *d)
                .collect();
            out.push(TransferSummary {
                policy,
                lambda,
                n_seeds: regret.len(),
                n_test_tasks: cfg.n_test_tasks,
                mean_cum_regret,
                se_cum_regret,
                mean_cum_reward,
                se_cum_reward,
                diagnostics: mean_diagnostics(&diags),
                best_lambda: false,
            });
        }
    }
    for &policy in &cfg.policies {
        let best = out
            .iter()
            .enumerate()
            .filter(|(_, s)| s.policy == policy)
            .min_by(|a, b| a.1.mean_cum_regret.total_cmp(&b.1.mean_cum_regret))
            .map(|(i, _)| i);
        if let Some(i) = best {
            out[i].best_lambda = true;
        }
    }
    out
}

/// Runs every (λ, meta-seed) cell in parallel, each policy on identical
/// task, arm and noise streams.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let envs = seeded_envs(cfg)?;
    let jobs: Vec<(usize, usize)> = (0..cfg.lambda_grid.len())
        .flat_map(|l| (0..cfg.n_meta_seeds).map(move |s| (l, s)))
        .collect();
    let mut cells = jobs
        .par_iter()
        .map(|&(l, s)| run_cell(cfg, &envs[s], l, s))
        .collect::<Result<Vec<Cell>>>()?;
    cells.sort_by_key(|c| (c.lambda_index, c.seed));

    let mut traces = Vec::new();
    let mut diagnostics = Vec::new();
    for cell in cells {
        let lambda = cfg.lambda_grid[cell.lambda_index];
        diagnostics.extend(cell.diagnostics.into_iter().map(|(p, d)| (p, lambda, d)));
        traces.extend(cell.traces);
    }
    let summaries = summarize(cfg, &traces, &diagnostics);
    Ok(ExperimentResult { traces, summaries })
}

/// File name of the trace CSV of one (policy, λ).
pub fn trace_file_name(policy: Policy, lambda: f64) -> String {
    format!("traces_{}_lambda_{}.csv", policy.name(), lambda)
}

/// CSV text for the traces of one (policy, λ), ordered by seed, task, round.
pub fn traces_csv<'a>(traces: impl IntoIterator<Item = &'a RegretTrace>) -> String {
    let mut sorted: Vec<&RegretTrace> = traces.into_iter().collect();
    sorted.sort_by_key(|t| (t.seed, t.task));
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for t in sorted {
        for (i, r) in t.rounds.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                t.policy.name(),
                t.lambda,
                t.seed,
                t.task,
                i + 1,
                r.inst_regret,
                r.cum_regret,
                r.reward,
                r.arm
            );
        }
    }
    out
}

pub fn summary_csv(summaries: &[TransferSummary]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in summaries {
        let d = &s.diagnostics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.policy.name(),
            s.lambda,
            s.n_seeds,
            s.n_test_tasks,
            s.mean_cum_regret,
            s.se_cum_regret,
            s.mean_cum_reward,
            s.se_cum_reward,
            d.eps,
            d.h_rho,
            d.nu_min,
            d.max_misalignment,
            d.h_tilde_max,
            s.best_lambda
        );
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes one trace CSV per (policy, λ) of the config, `summary.csv` and
/// `config.json`. Returns the paths written.
pub fn write_outputs(cfg: &ExperimentConfig, result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for &policy in &cfg.policies {
        for &lambda in &cfg.lambda_grid {
            let path = dir.join(trace_file_name(policy, lambda));
            write(&path, &traces_csv(result.traces_for(policy, lambda)))?;
            written.push(path);
        }
    }
    let path = dir.join("summary.csv");
    write(&path, &summary_csv(&result.summaries))?;
    written.push(path);

    // Task indices below n_train_tasks are training tasks.
    let echo = serde_json::json!({
        "version": VERSION,
        "train_tasks": format!("task < {}", cfg.n_train_tasks),
        "config": cfg,
    });
    let path = dir.join("config.json");
    write(&path, &(serde_json::to_string_pretty(&echo)? + "\n"))?;
    written.push(path);

    if let EnvConfig::Ratings(r) = &cfg.env {
        let manifest = RatingEnv::from_config(r)?.manifest().clone();
        let path = dir.join("task_manifest.json");
        manifest.write(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Diagnostics of the two meta-estimators for one (λ, seed).
#[derive(Debug, Clone, PartialEq)]
pub struct DiagReport {
    pub policy: Policy,
    pub lambda: f64,
    pub seed: usize,
    pub diagnostics: TransferDiagnostics,
    pub per_task_misalignment: Vec<f64>,
    pub bias_norm: f64,
}

/// Trains AvgOful and RrOful at every λ on meta-seed 0 and reports the
/// diagnostics of the trained state.
pub fn diagnose(cfg: &ExperimentConfig) -> Result<Vec<DiagReport>> {
    cfg.validate()?;
    let one_seed = ExperimentConfig {
        n_meta_seeds: 1,
        ..cfg.clone()
    };
    let envs = seeded_envs(&one_seed)?;
    let env = &envs[0];
    let mut out = Vec::new();
    for &lambda in &cfg.lambda_grid {
        for policy in [Policy::AvgOful, Policy::RrOful] {
            let mc = meta_config(cfg, env, policy, lambda)?;
            let run = meta::run_meta(env.as_dyn(), &mc, 0)?;
            let pooled = run.state.global.pooled_completed_raw();
            let per_task_misalignment = run
                .state
                .global
                .per_task_designs()
                .iter()
                .map(|v| meta::misalignment(v, &pooled).unwrap_or(f64::NAN))
                .collect();
            out.push(DiagReport {
                policy,
                lambda,
                seed: 0,
                diagnostics: run.diagnostics,
                per_task_misalignment,
                bias_norm: run.trained_bias.norm(),
            });
        }
    }
    Ok(out)
}
