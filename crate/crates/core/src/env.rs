//! Synthetic task environment: Gaussian task vectors around a mean, arms built
//! from a random orthonormal basis, and the shifted-and-binarized reward model.

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bandit::DecisionSet;
use crate::error::{Error, Result};
use crate::linalg::{self, RealVector};
use crate::rng::{self, tag, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// `xᵀw + N(0, noise_std²)`.
    LinearNoisy,
    /// 1 for the arm with the largest shifted noisy score, 0 for the others.
    BinarizedBest,
}

fn default_shift_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEnvConfig {
    pub d: usize,
    #[serde(rename = "K")]
    pub arms: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    /// Mean task vector `w̄`.
    pub mean: Vec<f64>,
    /// Per-coordinate standard deviation; `Var_ρ = d·task_std²`.
    pub task_std: f64,
    pub noise_mean: f64,
    pub noise_std: f64,
    pub reward_mode: RewardMode,
    #[serde(default = "default_shift_scale")]
    pub shift_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticEnvConfig {
    /// The configuration used for the cumulative-reward comparison:
    /// `d = 20`, `K = 5`, `T = 50`, all-ones mean, `Var_ρ = 1`, noise `N(0.5, 1)`,
    /// best-arm binarization.
    pub fn reward_comparison() -> Self {
        let d = 20;
        SyntheticEnvConfig {
            d,
            arms: 5,
            horizon: 50,
            mean: vec![1.0; d],
            task_std: task_std_for_variance(1.0, d),
            noise_mean: 0.5,
            noise_std: 1.0,
            reward_mode: RewardMode::BinarizedBest,
            shift_scale: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.arms == 0 || self.horizon == 0 {
            return Err(Error::InvalidParams("d, K and T must be ≥ 1".into()));
        }
        if self.mean.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: self.mean.len(),
            });
        }
        if self.arms > self.d {
            return Err(Error::InvalidParams(format!(
                "K = {} exceeds d = {}: each arm needs its own basis direction",
                self.arms, self.d
            )));
        }
        if !(self.task_std >= 0.0 && self.noise_std >= 0.0 && self.shift_scale >= 0.0) {
            return Err(Error::InvalidParams("standard deviations and shift must be ≥ 0".into()));
        }
        if self.mean.iter().any(|v| !v.is_finite()) || !self.noise_mean.is_finite() {
            return Err(Error::InvalidParams("non-finite environment parameter".into()));
        }
        Ok(())
    }

    pub fn mean_vector(&self) -> RealVector {
        RealVector::from_column_slice(&self.mean)
    }

    /// `Var_ρ = d·task_std²`.
    pub fn task_variance(&self) -> f64 {
        self.d as f64 * self.task_std * self.task_std
    }

    /// Norm bound `S = ‖w̄‖ + 3·√d·task_std`; sampled tasks are projected onto it.
    pub fn norm_bound(&self) -> f64 {
        let s = self.mean_vector().norm() + 3.0 * (self.d as f64).sqrt() * self.task_std;
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }
}

/// Per-coordinate std giving total variance `var` in dimension `d`.
pub fn task_std_for_variance(var: f64, d: usize) -> f64 {
    (var / d as f64).sqrt()
}

/// One draw from ρ: `w̄ + task_std·z`, rescaled to norm `S` if it exceeds it.
pub fn sample_task(cfg: &SyntheticEnvConfig, rng: &mut Rng) -> RealVector {
    let mut w = cfg.mean_vector();
    if cfg.task_std > 0.0 {
        for wi in w.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *wi += cfg.task_std * z;
        }
    }
    let s = cfg.norm_bound();
    let n = w.norm();
    if n > s {
        w *= s / n;
    }
    w
}

/// `K` unit arms, arm `k` = normalize(shift_scale·Q[:,k] + g) with g standard normal.
pub fn build_decision_set(basis: &DMatrix<f64>, cfg: &SyntheticEnvConfig, rng: &mut Rng) -> Result<DecisionSet> {
    if cfg.arms > cfg.d {
        return Err(Error::InvalidParams(format!("K = {} exceeds d = {}", cfg.arms, cfg.d)));
    }
    if basis.nrows() != cfg.d || basis.ncols() < cfg.arms {
        return Err(Error::DimensionMismatch {
            expected: cfg.d,
            found: basis.nrows(),
        });
    }
    let arms = (0..cfg.arms)
        .map(|k| {
            loop {
                let g = RealVector::from_fn(cfg.d, |_, _| StandardNormal.sample(rng));
                let x = basis.column(k) * cfg.shift_scale + g;
                let n = x.norm();
                if n > 0.0 {
                    break x / n;
                }
            }
        })
        .collect();
    DecisionSet::new(arms)
}

/// Per-arm outcome of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSample {
    /// Noisy per-arm scores before binarization.
    pub raw: Vec<f64>,
    /// What the learner observes for each arm.
    pub rewards: Vec<f64>,
    /// `argmax xᵀw`, the arm regret is measured against.
    pub optimal_arm: usize,
}

impl RewardSample {
    pub fn reward(&self, arm: usize) -> f64 {
        self.rewards[arm]
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    values
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bk, bv), (k, v)| if v > bv { (k, v) } else { (bk, bv) })
        .0
}

/// Maps a linear score into `[0, 1]` with `s ↦ (s + ‖w‖)/(2‖w‖)`, exact for unit arms.
pub fn shift_score(score: f64, w_norm: f64) -> f64 {
    if w_norm > 0.0 {
        (score + w_norm) / (2.0 * w_norm)
    } else {
        0.5
    }
}

/// Draws every arm's reward for one round. One noise draw per arm is consumed
/// in either mode.
pub fn realize_rewards(ds: &DecisionSet, w: &RealVector, cfg: &SyntheticEnvConfig, rng: &mut Rng) -> RewardSample {
    realize_with(ds, w, cfg.reward_mode, cfg.noise_mean, cfg.noise_std, rng)
}

pub(crate) fn realize_with(
    ds: &DecisionSet,
    w: &RealVector,
    mode: RewardMode,
    noise_mean: f64,
    noise_std: f64,
    rng: &mut Rng,
) -> RewardSample {
    let scores: Vec<f64> = ds.arms().iter().map(|x| x.dot(w)).collect();
    let optimal_arm = argmax(scores.iter().copied());
    let noise: Vec<f64> = (0..ds.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            noise_std * z
        })
        .collect();
    match mode {
        RewardMode::LinearNoisy => {
            let raw: Vec<f64> = scores.iter().zip(&noise).map(|(s, n)| s + n).collect();
            RewardSample {
                rewards: raw.clone(),
                raw,
                optimal_arm,
            }
        }
        RewardMode::BinarizedBest => {
            let w_norm = w.norm();
            let raw: Vec<f64> = scores
                .iter()
                .zip(&noise)
                .map(|(s, n)| shift_score(*s, w_norm) + noise_mean + n)
                .collect();
            let best = argmax(raw.iter().copied());
            let rewards = (0..raw.len()).map(|k| if k == best { 1.0 } else { 0.0 }).collect();
            RewardSample {
                raw,
                rewards,
                optimal_arm,
            }
        }
    }
}

/// A synthetic environment bound to one seed. Streams are addressed by
/// (task index, round index) so every consumer sees the same draws.
#[derive(Debug, Clone)]
pub struct SyntheticEnv {
    cfg: SyntheticEnvConfig,
    basis: DMatrix<f64>,
}

impl SyntheticEnv {
    pub fn new(cfg: SyntheticEnvConfig) -> Result<Self> {
        cfg.validate()?;
        let basis = linalg::qr_orthonormal_basis(rng::derive_seed(cfg.seed, &[tag::BASIS]), cfg.d);
        Ok(SyntheticEnv { cfg, basis })
    }

    pub fn config(&self) -> &SyntheticEnvConfig {
        &self.cfg
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn task(&self, task: usize) -> RealVector {
        sample_task(&self.cfg, &mut rng::stream(self.cfg.seed, &[tag::TASK, task as u64]))
    }

    pub fn decision_set(&self, task: usize, round: usize) -> Result<DecisionSet> {
        let mut r = rng::stream(self.cfg.seed, &[tag::ARMS, task as u64, round as u64]);
        build_decision_set(&self.basis, &self.cfg, &mut r)
    }

    pub fn rewards(&self, task: usize, round: usize, ds: &DecisionSet, w: &RealVector) -> RewardSample {
        let mut r = rng::stream(self.cfg.seed, &[tag::NOISE, task as u64, round as u64]);
        realize_rewards(ds, w, &self.cfg, &mut r)
    }
}

/// Moments of the task distribution relative to a bias vector.
#[derive(Debug, Clone)]
pub struct EnvMoments {
    /// `w̄`.
    pub mean: RealVector,
    /// `Var_{w̄}`.
    pub var_mean: f64,
    /// `Var_0 = E‖w‖²`.
    pub second_moment: f64,
    gaussian: Option<(RealVector, f64)>,
    samples: Vec<RealVector>,
}

impl EnvMoments {
    /// `Var_h = E‖w − h‖²`; closed form for Gaussian configurations.
    pub fn var_at(&self, h: &RealVector) -> f64 {
        match &self.gaussian {
            Some((mean, var)) => (mean - h).norm_squared() + var,
            None => self.var_at_mc(h).0,
        }
    }

    /// Monte-Carlo `Var_h` with its standard error.
    pub fn var_at_mc(&self, h: &RealVector) -> (f64, f64) {
        mean_and_se(self.samples.iter().map(|w| (w - h).norm_squared()))
    }

    /// `Mar_h = E‖w − h‖`, always by Monte Carlo.
    pub fn mar_at(&self, h: &RealVector) -> f64 {
        self.mar_at_mc(h).0
    }

    pub fn mar_at_mc(&self, h: &RealVector) -> (f64, f64) {
        mean_and_se(self.samples.iter().map(|w| (w - h).norm()))
    }

    pub fn samples(&self) -> &[RealVector] {
        &self.samples
    }

    /// `Var_{w̄} / Var_0`; small values mean the low-variance regime where
    /// biasing toward the mean pays off.
    pub fn variance_ratio(&self) -> f64 {
        if self.second_moment > 0.0 {
            self.var_mean / self.second_moment
        } else {
            0.0
        }
    }
}

pub(crate) fn mean_and_se(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let values: Vec<f64> = values.collect();
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

/// Moments of ρ. Gaussian configurations get closed forms for the mean and
/// variances; `n_samples` draws back the Monte-Carlo estimates.
pub fn env_moments(cfg: &SyntheticEnvConfig, n_samples: usize, rng: &mut Rng) -> Result<EnvMoments> {
    cfg.validate()?;
    let samples: Vec<RealVector> = (0..n_samples).map(|_| sample_task(cfg, rng)).collect();
    let mean = cfg.mean_vector();
    let var = cfg.task_variance();
    Ok(EnvMoments {
        var_mean: var,
        second_moment: mean.norm_squared() + var,
        gaussian: Some((mean.clone(), var)),
        mean,
        samples,
    })
}

/// Moments of an empirical (finite) task collection.
pub fn empirical_moments(tasks: &[RealVector]) -> Result<EnvMoments> {
    let first = tasks.first().ok_or_else(|| Error::InvalidParams("no tasks".into()))?;
    let mut mean = RealVector::zeros(first.len());
    for w in tasks {
        mean += w;
    }
    mean /= tasks.len() as f64;
    let var_mean = tasks.iter().map(|w| (w - &mean).norm_squared()).sum::<f64>() / tasks.len() as f64;
    let second_moment = tasks.iter().map(|w| w.norm_squared()).sum::<f64>() / tasks.len() as f64;
    Ok(EnvMoments {
        mean,
        var_mean,
        second_moment,
        gaussian: None,
        samples: tasks.to_vec(),
    })
}

/// Gaussian with explicit mean and std.
pub(crate) fn gaussian(rng: &mut Rng, mean: f64, std: f64) -> f64 {
    Normal::new(mean, std).map(|n| n.sample(rng)).unwrap_or(mean)
}
