//! Cross-task layer.
//!
//! Two estimators of the mean task vector feed the bias of biased OFUL:
//! the averaging estimator (round-weighted mean of per-task plain ridge
//! estimates) and the global ridge regression (one ridge solve over the
//! pooled sufficient statistics of every task seen so far). Both include the
//! live task's partial data, so the bias moves every round.
//!
//! The module also carries the quantities used to reason about the two
//! estimators: the λ schedule, the vector Bennett bound, the misalignment
//! `σ_max(V_j Ṽ⁻¹)` and the transfer diagnostics record.

use serde::{Deserialize, Serialize};

use crate::bandit::{self, ConfidenceParams, DecisionSet, GapMode, TaskState};
use crate::env::RewardSample;
use crate::error::{Error, Result};
use crate::linalg::{self, RealVector, SymMatrix};

/// Floor applied by [`LambdaMode::VarSchedule`].
pub const LAMBDA_FLOOR: f64 = 1e-6;

/// How the bias of each task is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimator {
    /// Independent task learning: `h = 0`.
    Itl,
    /// A fixed, known bias (the true mean task for the Oracle policy).
    Oracle(RealVector),
    /// Round-weighted average of per-task plain ridge estimates.
    Avg,
    /// Global ridge regression over pooled statistics.
    GlobalRR,
    /// Not an estimator: acts by `argmax xᵀw*` with the true task vector.
    /// This is the reference policy regret is measured against.
    Optimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Fixed(f64),
    /// `λ = max(1/(T·Var), λ_floor)`.
    VarSchedule(f64),
}

/// Whether the bias follows the live task round by round or is frozen at
/// the start of each task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasUpdate {
    #[default]
    Live,
    Frozen,
}

/// Whether the radius uses the exact gap (simulation) or the norm split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapKind {
    Oracle,
    #[default]
    PracticalBound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    pub estimator: Estimator,
    pub lambda_mode: LambdaMode,
    pub horizon: usize,
    pub n_tasks: usize,
    pub params: ConfidenceParams,
    pub gap: GapKind,
    pub bias_update: BiasUpdate,
}

impl MetaConfig {
    pub fn lambda(&self) -> Result<f64> {
        lambda_schedule(self.lambda_mode, self.horizon)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.lambda()?;
        if self.horizon == 0 {
            return Err(Error::InvalidParams("horizon must be ≥ 1".into()));
        }
        if let Estimator::Oracle(h) = &self.estimator {
            if h.len() != self.params.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.params.dim,
                    found: h.len(),
                });
            }
        }
        Ok(())
    }
}

/// `Fixed(λ) → λ`; `VarSchedule(v) → max(1/(T·v), 1e-6)`.
pub fn lambda_schedule(mode: LambdaMode, horizon: usize) -> Result<f64> {
    match mode {
        LambdaMode::Fixed(lambda) if lambda > 0.0 && lambda.is_finite() => Ok(lambda),
        LambdaMode::Fixed(lambda) => Err(Error::InvalidParams(format!("lambda must be positive, got {lambda}"))),
        LambdaMode::VarSchedule(var) if var > 0.0 && var.is_finite() && horizon > 0 => {
            Ok((1.0 / (horizon as f64 * var)).max(LAMBDA_FLOOR))
        }
        LambdaMode::VarSchedule(var) => Err(Error::InvalidParams(format!(
            "variance schedule needs var > 0 and T ≥ 1, got var = {var}, T = {horizon}"
        ))),
    }
}

/// Accumulator of the averaging estimator:
/// `ĥ = (Σ_j T_j·ŵ_j + t·ŵ_live) / (Σ_j T_j + t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AvgBiasState {
    completed_sum: RealVector,
    completed_weight: usize,
    completed: usize,
    live: Option<(RealVector, usize)>,
}

impl AvgBiasState {
    pub fn new(dim: usize) -> Self {
        AvgBiasState {
            completed_sum: RealVector::zeros(dim),
            completed_weight: 0,
            completed: 0,
            live: None,
        }
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    /// `N·T + t`.
    pub fn total_weight(&self) -> usize {
        self.completed_weight + self.live.as_ref().map_or(0, |(_, t)| *t)
    }

    /// `Σ_j T_j·ŵ_j + t·ŵ_live`.
    pub fn weighted_sum(&self) -> RealVector {
        match &self.live {
            Some((w, t)) if *t > 0 => &self.completed_sum + w * (*t as f64),
            _ => self.completed_sum.clone(),
        }
    }

    /// Sets the live task's current plain ridge estimate after `t` rounds.
    pub fn set_live(&mut self, estimate: RealVector, t: usize) {
        self.live = Some((estimate, t));
    }

    /// Folds a finished task's final estimate in with weight `rounds`.
    pub fn complete_task(&mut self, estimate: &RealVector, rounds: usize) {
        self.completed_sum.axpy(rounds as f64, estimate, 1.0);
        self.completed_weight += rounds;
        self.completed += 1;
        self.live = None;
    }

    pub fn clear_live(&mut self) {
        self.live = None;
    }
}

/// The averaging estimate; zero before any data.
pub fn avg_bias(state: &AvgBiasState) -> RealVector {
    let total = state.total_weight();
    let sum = state.weighted_sum();
    if total == 0 {
        RealVector::zeros(sum.len())
    } else {
        sum / total as f64
    }
}

/// Pooled statistics for the global ridge regression.
#[derive(Debug, Clone)]
pub struct GlobalRRState {
    lambda: f64,
    /// `λI + Σ_j Σ_s xxᵀ`, all tasks including the live one.
    v_tilde: SymMatrix,
    b_tilde: RealVector,
    per_task_v: Vec<SymMatrix>,
    per_task_b: Vec<RealVector>,
    per_task_rounds: Vec<usize>,
    live_v: SymMatrix,
    live_b: RealVector,
    live_rounds: usize,
}

impl GlobalRRState {
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidParams(format!("lambda must be positive, got {lambda}")));
        }
        Ok(GlobalRRState {
            lambda,
            v_tilde: SymMatrix::scaled_identity(dim, lambda),
            b_tilde: RealVector::zeros(dim),
            per_task_v: Vec::new(),
            per_task_b: Vec::new(),
            per_task_rounds: Vec::new(),
            live_v: SymMatrix::zeros(dim),
            live_b: RealVector::zeros(dim),
            live_rounds: 0,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dim(&self) -> usize {
        self.b_tilde.len()
    }

    /// Adds one observation of the live task.
    pub fn observe(&mut self, x: &RealVector, y: f64) {
        self.v_tilde.add_outer(x);
        self.live_v.add_outer(x);
        self.b_tilde.axpy(y, x, 1.0);
        self.live_b.axpy(y, x, 1.0);
        self.live_rounds += 1;
    }

    /// Closes the live task, keeping its raw statistics.
    pub fn complete_task(&mut self) {
        let d = self.dim();
        self.per_task_v
            .push(std::mem::replace(&mut self.live_v, SymMatrix::zeros(d)));
        self.per_task_b
            .push(std::mem::replace(&mut self.live_b, RealVector::zeros(d)));
        self.per_task_rounds.push(self.live_rounds);
        self.live_rounds = 0;
    }

    /// `Ṽ^λ`, including the live task.
    pub fn v_tilde(&self) -> &SymMatrix {
        &self.v_tilde
    }

    pub fn b_tilde(&self) -> &RealVector {
        &self.b_tilde
    }

    /// Raw `V_{j,T}` of each completed task.
    pub fn per_task_designs(&self) -> &[SymMatrix] {
        &self.per_task_v
    }

    pub fn per_task_responses(&self) -> &[RealVector] {
        &self.per_task_b
    }

    pub fn per_task_rounds(&self) -> &[usize] {
        &self.per_task_rounds
    }

    pub fn live_rounds(&self) -> usize {
        self.live_rounds
    }

    /// `Σ_j V_{j,T}` over completed tasks, without λ.
    pub fn pooled_completed_raw(&self) -> SymMatrix {
        self.per_task_v
            .iter()
            .fold(SymMatrix::zeros(self.dim()), |acc, v| acc.add(v))
    }
}

/// `(Ṽ^λ)⁻¹ b̃`.
pub fn global_rr_bias(state: &GlobalRRState) -> Result<RealVector> {
    linalg::spd_solve(&state.v_tilde, &state.b_tilde)
}

/// `σ_max(V_j Ṽ⁻¹)` for a raw per-task design and the raw pooled design.
pub fn misalignment(v_j: &SymMatrix, v_tilde_raw: &SymMatrix) -> Result<f64> {
    if v_j.dim() != v_tilde_raw.dim() {
        return Err(Error::DimensionMismatch {
            expected: v_tilde_raw.dim(),
            found: v_j.dim(),
        });
    }
    let (min_eig, _) = linalg::eig_extremes(v_tilde_raw)?;
    if !(min_eig > 1e-12) {
        return Err(Error::SingularGlobalMatrix { min_eig });
    }
    let chol = nalgebra::Cholesky::new(v_tilde_raw.as_matrix().clone()).ok_or(Error::SingularGlobalMatrix { min_eig })?;
    // Ṽ⁻¹V_j, whose transpose is V_jṼ⁻¹; both share singular values.
    let z = chol.solve(v_j.as_matrix());
    linalg::max_singular(&z)
}

/// Vector Bennett bound on the distance between an empirical mean of `N`
/// bounded vectors and their expectation:
/// `2·log(2/δ)·S/N + √(2·log(2/δ)·Var_0/N)`.
pub fn bennett_bound(n: usize, s: f64, var0: f64, delta: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidParams("N must be ≥ 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParams(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(s >= 0.0 && var0 >= 0.0) {
        return Err(Error::InvalidParams("S and Var_0 must be ≥ 0".into()));
    }
    let log = (2.0 / delta).ln();
    let n = n as f64;
    Ok(2.0 * log * s / n + (2.0 * log * var0 / n).sqrt())
}

/// Worst per-task variance term of the averaging estimator:
/// `max_j β^λ_j(1/T_j) / √λ_min(λI + V_j)`.
pub fn avg_variance_term(raw_designs: &[SymMatrix], rounds: &[usize], params: &ConfidenceParams, lambda: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (v, &t) in raw_designs.iter().zip(rounds) {
        let p = ConfidenceParams {
            delta: 1.0 / t.max(1) as f64,
            ..*params
        };
        let beta = bandit::beta_oful(&p, lambda, t)?;
        let (min_eig, _) = linalg::eig_extremes(&v.add(&SymMatrix::scaled_identity(v.dim(), lambda)))?;
        worst = worst.max(beta / min_eig.sqrt());
    }
    Ok(worst)
}

/// Everything the bias estimators accumulate across tasks.
#[derive(Debug, Clone)]
pub struct MetaState {
    pub avg: AvgBiasState,
    pub global: GlobalRRState,
    /// True task vectors and round counts of completed tasks (simulation only).
    true_tasks: Vec<(RealVector, usize)>,
}

impl MetaState {
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        Ok(MetaState {
            avg: AvgBiasState::new(dim),
            global: GlobalRRState::new(dim, lambda)?,
            true_tasks: Vec::new(),
        })
    }

    pub fn completed(&self) -> usize {
        self.avg.completed()
    }

    pub fn true_tasks(&self) -> &[(RealVector, usize)] {
        &self.true_tasks
    }

    fn observe(&mut self, state: &TaskState, x: &RealVector, y: f64) -> Result<()> {
        self.global.observe(x, y);
        self.avg.set_live(state.ridge_estimate()?, state.rounds());
        Ok(())
    }

    fn complete_task(&mut self, state: &TaskState, w_star: &RealVector) -> Result<()> {
        self.avg.complete_task(&state.ridge_estimate()?, state.rounds());
        self.global.complete_task();
        self.true_tasks.push((w_star.clone(), state.rounds()));
        Ok(())
    }

    /// The bias the estimator prescribes given everything observed so far.
    pub fn bias(&self, estimator: &Estimator) -> Result<RealVector> {
        let d = self.global.dim();
        match estimator {
            Estimator::Itl | Estimator::Optimal => Ok(RealVector::zeros(d)),
            Estimator::Oracle(h) => Ok(h.clone()),
            Estimator::Avg => Ok(avg_bias(&self.avg)),
            Estimator::GlobalRR => global_rr_bias(&self.global),
        }
    }
}

/// A source of tasks, decision sets and rewards addressed by
/// (task index, round index).
pub trait TaskEnvironment {
    fn dim(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Upper bound on the task index, if the environment is finite.
    fn n_tasks(&self) -> Option<usize> {
        None
    }
    fn task_vector(&self, task: usize) -> Result<RealVector>;
    fn decision_set(&self, task: usize, round: usize) -> Result<DecisionSet>;
    fn rewards(&self, task: usize, round: usize, ds: &DecisionSet, w: &RealVector) -> Result<RewardSample>;
    /// The mean task `w̄` handed to the Oracle policy.
    fn mean_task(&self) -> RealVector;
}

impl TaskEnvironment for crate::env::SyntheticEnv {
    fn dim(&self) -> usize {
        self.config().d
    }

    fn horizon(&self) -> usize {
        self.config().horizon
    }

    fn task_vector(&self, task: usize) -> Result<RealVector> {
        Ok(self.task(task))
    }

    fn decision_set(&self, task: usize, round: usize) -> Result<DecisionSet> {
        crate::env::SyntheticEnv::decision_set(self, task, round)
    }

    fn rewards(&self, task: usize, round: usize, ds: &DecisionSet, w: &RealVector) -> Result<RewardSample> {
        Ok(crate::env::SyntheticEnv::rewards(self, task, round, ds, w))
    }

    fn mean_task(&self) -> RealVector {
        self.config().mean_vector()
    }
}

/// One round of an episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundRecord {
    pub arm: usize,
    pub optimal_arm: usize,
    pub inst_regret: f64,
    pub cum_regret: f64,
    pub reward: f64,
}

/// Everything one task produced.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub task: usize,
    pub w_star: RealVector,
    pub rounds: Vec<RoundRecord>,
    /// The interaction log `(x_t, y_t)`.
    pub dataset: Vec<(RealVector, f64)>,
    /// Bias used at each round; empty for the optimal policy.
    pub bias_trajectory: Vec<RealVector>,
    /// Final plain ridge estimate of the task.
    pub ridge_estimate: RealVector,
}

impl TaskOutcome {
    pub fn cumulative_regret(&self) -> f64 {
        self.rounds.last().map_or(0.0, |r| r.cum_regret)
    }

    pub fn cumulative_reward(&self) -> f64 {
        self.rounds.iter().map(|r| r.reward).sum()
    }
}

/// Instantaneous pseudo-regret `max_x xᵀw* − x_chosenᵀw*` per round.
pub fn pseudo_regret(chosen: &[usize], decision_sets: &[DecisionSet], w_star: &RealVector) -> Result<Vec<f64>> {
    if chosen.len() != decision_sets.len() {
        return Err(Error::DimensionMismatch {
            expected: decision_sets.len(),
            found: chosen.len(),
        });
    }
    chosen
        .iter()
        .zip(decision_sets)
        .map(|(&arm, ds)| {
            let best = bandit::oracle_select(ds, w_star)?;
            if arm >= ds.len() {
                return Err(Error::InvalidParams(format!("arm {arm} out of range")));
            }
            Ok((ds.arm(best).dot(w_star) - ds.arm(arm).dot(w_star)).max(0.0))
        })
        .collect()
}

/// Runs biased OFUL (or the optimal policy) on one task for `T` rounds,
/// feeding every observation to the meta accumulators.
pub fn run_task<E: TaskEnvironment + ?Sized>(
    env: &E,
    task: usize,
    cfg: &MetaConfig,
    meta: &mut MetaState,
) -> Result<TaskOutcome> {
    let d = env.dim();
    let lambda = cfg.lambda()?;
    let w_star = env.task_vector(task)?;
    let gap = match cfg.gap {
        GapKind::Oracle => GapMode::OracleGap(w_star.clone()),
        GapKind::PracticalBound => GapMode::PracticalBound,
    };
    let mut state = TaskState::new(d, lambda)?;
    let frozen = meta.bias(&cfg.estimator)?;
    let mut rounds = Vec::with_capacity(cfg.horizon);
    let mut dataset = Vec::with_capacity(cfg.horizon);
    let mut bias_trajectory = Vec::new();
    let mut cum = 0.0;

    for t in 0..cfg.horizon {
        let ds = env.decision_set(task, t)?;
        let sample = env.rewards(task, t, &ds, &w_star)?;
        let arm = if cfg.estimator == Estimator::Optimal {
            bandit::oracle_select(&ds, &w_star)?
        } else {
            let h = match cfg.bias_update {
                BiasUpdate::Live => meta.bias(&cfg.estimator)?,
                BiasUpdate::Frozen => frozen.clone(),
            };
            let arm = bandit::optimistic_choice(&state, &cfg.params, &h, &gap, &ds)?;
            bias_trajectory.push(h);
            arm
        };
        let x = ds.arm(arm).clone();
        let y = sample.reward(arm);
        let best = ds.arm(sample.optimal_arm).dot(&w_star);
        let inst = (best - x.dot(&w_star)).max(0.0);
        cum += inst;
        state.update(&x, y)?;
        meta.observe(&state, &x, y)?;
        rounds.push(RoundRecord {
            arm,
            optimal_arm: sample.optimal_arm,
            inst_regret: inst,
            cum_regret: cum,
            reward: y,
        });
        dataset.push((x, y));
    }
    if !state.design().is_finite() {
        return Err(Error::InvariantViolation(format!("task {task}: non-finite design matrix")));
    }
    let ridge_estimate = state.ridge_estimate()?;
    meta.complete_task(&state, &w_star)?;
    Ok(TaskOutcome {
        task,
        w_star,
        rounds,
        dataset,
        bias_trajectory,
        ridge_estimate,
    })
}

/// Transfer diagnostics of a meta state against the true task vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferDiagnostics {
    /// `‖w̄ − ĥ‖²`.
    pub eps: f64,
    /// `‖w̄ − Σ T_j w_j / Σ T_j‖`.
    pub h_rho: f64,
    /// Same with unit weights per task.
    pub h_rho_unweighted: f64,
    /// Smallest eigenvalue of the pooled raw design.
    pub nu_min: f64,
    /// `max_j σ_max(V_j Ṽ⁻¹)`; NaN when the pooled design is singular.
    pub max_misalignment: f64,
    /// `max_j ‖w_j − mean(w_1..w_j)‖·σ_max(V_j Ṽ⁻¹)`; NaN when singular.
    pub h_tilde_max: f64,
}

/// Diagnostics of the completed tasks in `meta` for bias `h` and true mean `w_bar`.
pub fn transfer_diagnostics(meta: &MetaState, h: &RealVector, w_bar: &RealVector) -> Result<TransferDiagnostics> {
    let eps = (w_bar - h).norm_squared();
    let d = w_bar.len();

    // Running means are updated as m += (w − m)·(T/total) so identical
    // vectors leave the mean, and the distance, exactly unchanged.
    let mut running = RealVector::zeros(d);
    let mut total = 0usize;
    let mut prefix_errors = Vec::with_capacity(meta.true_tasks.len());
    for (w, t) in &meta.true_tasks {
        if total == 0 {
            running = w.clone();
        } else {
            let step = *t as f64 / (total + t) as f64;
            running += (w - &running) * step;
        }
        total += t;
        prefix_errors.push((w - &running).norm());
    }
    let h_rho = if total == 0 { 0.0 } else { (w_bar - &running).norm() };
    let h_rho_unweighted = if meta.true_tasks.is_empty() {
        0.0
    } else {
        let mut m = RealVector::zeros(d);
        for (w, _) in &meta.true_tasks {
            m += w;
        }
        (w_bar - m / meta.true_tasks.len() as f64).norm()
    };

    let pooled = meta.global.pooled_completed_raw();
    let (nu_min, _) = linalg::eig_extremes(&pooled)?;
    let mut max_misalignment = f64::NAN;
    let mut h_tilde_max = f64::NAN;
    if !meta.global.per_task_designs().is_empty() {
        let per_task: Result<Vec<f64>> = meta
            .global
            .per_task_designs()
            .iter()
            .map(|v| misalignment(v, &pooled))
            .collect();
        if let Ok(values) = per_task {
            max_misalignment = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            h_tilde_max = values
                .iter()
                .zip(&prefix_errors)
                .map(|(m, e)| m * e)
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    Ok(TransferDiagnostics {
        eps,
        h_rho,
        h_rho_unweighted,
        nu_min,
        max_misalignment,
        h_tilde_max,
    })
}

/// Outcome of a meta run: training tasks, test tasks, the bias after
/// training and its diagnostics.
#[derive(Debug, Clone)]
pub struct MetaRun {
    pub train: Vec<TaskOutcome>,
    pub test: Vec<TaskOutcome>,
    pub trained_bias: RealVector,
    pub diagnostics: TransferDiagnostics,
    pub state: MetaState,
}

/// Trains the estimator on `cfg.n_tasks` tasks (indices `0..N`) in order,
/// then evaluates on `n_test` fresh tasks (indices `N..N+n_test`).
///
/// Every test task starts from the post-training state; the live task's data
/// moves the bias during the task but is discarded afterwards.
pub fn run_meta<E: TaskEnvironment + ?Sized>(env: &E, cfg: &MetaConfig, n_test: usize) -> Result<MetaRun> {
    cfg.validate()?;
    if let Some(available) = env.n_tasks() {
        if cfg.n_tasks + n_test > available {
            return Err(Error::InvalidParams(format!(
                "{} tasks requested but the environment provides {available}",
                cfg.n_tasks + n_test
            )));
        }
    }
    let mut meta = MetaState::new(env.dim(), cfg.lambda()?)?;
    let mut train = Vec::with_capacity(cfg.n_tasks);
    for j in 0..cfg.n_tasks {
        train.push(run_task(env, j, cfg, &mut meta)?);
    }
    let trained_bias = meta.bias(&cfg.estimator)?;
    let diagnostics = transfer_diagnostics(&meta, &trained_bias, &env.mean_task())?;
    let mut test = Vec::with_capacity(n_test);
    for i in 0..n_test {
        let mut scratch = meta.clone();
        test.push(run_task(env, cfg.n_tasks + i, cfg, &mut scratch)?);
    }
    Ok(MetaRun {
        train,
        test,
        trained_bias,
        diagnostics,
        state: meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{RewardMode, SyntheticEnv, SyntheticEnvConfig};
    use crate::rng;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::Rng as _;

    fn v(xs: &[f64]) -> RealVector {
        DVector::from_column_slice(xs)
    }

    fn e(d: usize, i: usize) -> RealVector {
        let mut x = RealVector::zeros(d);
        x[i] = 1.0;
        x
    }

    /// Hand-specified episodes: explicit arms, noiseless linear rewards.
    struct FixedEnv {
        tasks: Vec<RealVector>,
        sets: Vec<DecisionSet>,
        horizon: usize,
    }

    impl TaskEnvironment for FixedEnv {
        fn dim(&self) -> usize {
            self.tasks[0].len()
        }
        fn horizon(&self) -> usize {
            self.horizon
        }
        fn task_vector(&self, task: usize) -> Result<RealVector> {
            Ok(self.tasks[task % self.tasks.len()].clone())
        }
        fn decision_set(&self, _task: usize, round: usize) -> Result<DecisionSet> {
            Ok(self.sets[round % self.sets.len()].clone())
        }
        fn rewards(&self, _task: usize, _round: usize, ds: &DecisionSet, w: &RealVector) -> Result<RewardSample> {
            let rewards: Vec<f64> = ds.arms().iter().map(|x| x.dot(w)).collect();
            let optimal_arm = bandit::oracle_select(ds, w)?;
            Ok(RewardSample {
                raw: rewards.clone(),
                rewards,
                optimal_arm,
            })
        }
        fn mean_task(&self) -> RealVector {
            let mut m = RealVector::zeros(self.dim());
            for w in &self.tasks {
                m += w;
            }
            m / self.tasks.len() as f64
        }
    }

    fn cfg(estimator: Estimator, lambda: f64, horizon: usize, n: usize, d: usize) -> MetaConfig {
        MetaConfig {
            estimator,
            lambda_mode: LambdaMode::Fixed(lambda),
            horizon,
            n_tasks: n,
            params: ConfidenceParams::new(0.5, 2.0, 1.0, 0.1, d).unwrap(),
            gap: GapKind::PracticalBound,
            bias_update: BiasUpdate::Live,
        }
    }

    fn synthetic(d: usize, k: usize, horizon: usize, task_std: f64, noise_std: f64, seed: u64) -> SyntheticEnv {
        let mut mean = vec![0.0; d];
        mean[0] = 0.6;
        mean[1] = -0.4;
        SyntheticEnv::new(SyntheticEnvConfig {
            d,
            arms: k,
            horizon,
            mean,
            task_std,
            noise_mean: 0.0,
            noise_std,
            reward_mode: RewardMode::LinearNoisy,
            shift_scale: 1.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn avg_bias_examples() {
        let s = AvgBiasState::new(2);
        assert_eq!(avg_bias(&s), RealVector::zeros(2));

        let mut s = AvgBiasState::new(2);
        s.complete_task(&v(&[1.0, 2.0]), 10);
        assert_eq!(avg_bias(&s), v(&[1.0, 2.0]));

        let estimates = [v(&[1.0, 0.0]), v(&[0.5, -1.0]), v(&[2.0, 3.0])];
        let live = v(&[-1.0, 1.0]);
        let mut s = AvgBiasState::new(2);
        for w in &estimates {
            s.complete_task(w, 20);
        }
        s.set_live(live.clone(), 5);
        let expected0 = (20.0 * (1.0 + 0.5 + 2.0) + 5.0 * -1.0) / 65.0;
        let expected1 = (20.0 * (0.0 - 1.0 + 3.0) + 5.0 * 1.0) / 65.0;
        let got = avg_bias(&s);
        assert_relative_eq!(got[0], expected0, epsilon = 1e-14);
        assert_relative_eq!(got[1], expected1, epsilon = 1e-14);
        assert_eq!(s.total_weight(), 65);
    }

    #[test]
    fn global_rr_examples() {
        let s = GlobalRRState::new(3, 1.0).unwrap();
        assert_eq!(global_rr_bias(&s).unwrap(), RealVector::zeros(3));

        // Two tasks in 2-d; compare with one ridge over the stacked rows.
        let rows_a = [([1.0, 0.0], 1.0), ([0.5, 0.5], 0.2)];
        let rows_b = [([0.0, 1.0], -1.0), ([0.3, -0.8], 0.7), ([1.0, 1.0], 0.1)];
        let lambda = 0.7;
        let mut s = GlobalRRState::new(2, lambda).unwrap();
        for (x, y) in rows_a {
            s.observe(&v(&x), y);
        }
        s.complete_task();
        for (x, y) in rows_b {
            s.observe(&v(&x), y);
        }
        let (mut a, mut b, mut c, mut r0, mut r1) = (lambda, 0.0, lambda, 0.0, 0.0);
        for (x, y) in rows_a.iter().chain(rows_b.iter()) {
            a += x[0] * x[0];
            b += x[0] * x[1];
            c += x[1] * x[1];
            r0 += y * x[0];
            r1 += y * x[1];
        }
        let det = a * c - b * b;
        let got = global_rr_bias(&s).unwrap();
        assert_relative_eq!(got[0], (c * r0 - b * r1) / det, epsilon = 1e-12);
        assert_relative_eq!(got[1], (a * r1 - b * r0) / det, epsilon = 1e-12);
    }

    #[test]
    fn identical_tasks_pool_to_single_ridge() {
        let mut rng = rng::from_seed(3);
        let rows: Vec<(RealVector, f64)> = (0..8)
            .map(|_| (DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)), rng.random_range(-1.0..1.0)))
            .collect();
        let lambda = 0.5;
        let mut pooled = GlobalRRState::new(3, lambda).unwrap();
        let mut single = TaskState::new(3, lambda).unwrap();
        for _ in 0..4 {
            for (x, y) in &rows {
                pooled.observe(x, *y);
                single.update(x, *y).unwrap();
            }
            pooled.complete_task();
        }
        let diff = global_rr_bias(&pooled).unwrap() - single.ridge_estimate().unwrap();
        assert!(diff.amax() <= 1e-9);
    }

    #[test]
    fn lambda_schedule_examples() {
        assert_eq!(lambda_schedule(LambdaMode::Fixed(1.0), 50).unwrap(), 1.0);
        assert_eq!(lambda_schedule(LambdaMode::Fixed(100.0), 50).unwrap(), 100.0);
        assert_relative_eq!(lambda_schedule(LambdaMode::VarSchedule(0.02), 50).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(lambda_schedule(LambdaMode::VarSchedule(1e12), 50).unwrap(), LAMBDA_FLOOR);
        assert!(lambda_schedule(LambdaMode::VarSchedule(0.0), 50).is_err());
        assert!(lambda_schedule(LambdaMode::Fixed(-1.0), 50).is_err());
    }

    #[test]
    fn bennett_examples() {
        assert_eq!(bennett_bound(10, 0.0, 0.0, 0.1).unwrap(), 0.0);
        let a = bennett_bound(10, 2.0, 0.0, 0.1).unwrap();
        let b = bennett_bound(20, 2.0, 0.0, 0.1).unwrap();
        assert_relative_eq!(a, 2.0 * b, epsilon = 1e-15);
        let direct = 2.0 * (20f64).ln() / 100.0 + (2.0 * 20f64.ln() / 100.0).sqrt();
        assert_relative_eq!(bennett_bound(100, 1.0, 1.0, 0.1).unwrap(), direct, epsilon = 1e-15);
        assert!(bennett_bound(0, 1.0, 1.0, 0.1).is_err());
        assert!(bennett_bound(1, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn bennett_covers_gaussian_means() {
        // Zero-mean Gaussian in ℝ⁵ projected to the unit ball: S = 1, Var_0 ≤ 1.
        let cfg = SyntheticEnvConfig {
            d: 5,
            arms: 1,
            horizon: 1,
            mean: vec![0.0; 5],
            task_std: (1.0f64 / 5.0).sqrt(),
            noise_mean: 0.0,
            noise_std: 0.0,
            reward_mode: RewardMode::LinearNoisy,
            shift_scale: 1.0,
            seed: 0,
        };
        let bound = bennett_bound(100, 1.0, 1.0, 0.1).unwrap();
        let mut rng = rng::from_seed(5);
        let mut covered = 0;
        for _ in 0..1000 {
            let mut m = RealVector::zeros(5);
            for _ in 0..100 {
                let mut w = crate::env::sample_task(&cfg, &mut rng);
                let n = w.norm();
                if n > 1.0 {
                    w /= n;
                }
                m += w;
            }
            if (m / 100.0).norm() <= bound {
                covered += 1;
            }
        }
        assert!(covered >= 900, "covered {covered}/1000");
    }

    #[test]
    fn misalignment_examples() {
        let mut vj = SymMatrix::zeros(3);
        for x in [v(&[1.0, 0.0, 0.2]), v(&[0.0, 1.0, 0.5]), v(&[0.3, 0.3, 1.0])] {
            vj.add_outer(&x);
        }
        assert_relative_eq!(misalignment(&vj, &vj).unwrap(), 1.0, epsilon = 1e-9);
        let n = 7;
        let pooled = (0..n).fold(SymMatrix::zeros(3), |acc, _| acc.add(&vj));
        assert_relative_eq!(misalignment(&vj, &pooled).unwrap(), 1.0 / n as f64, epsilon = 1e-9);

        // d orthogonal tasks, each pulling its own basis arm T times, N = m·d.
        let (d, m, horizon) = (4, 3, 10.0);
        let per_task: Vec<SymMatrix> = (0..m * d)
            .map(|j| {
                let mut s = SymMatrix::zeros(d);
                s.add_outer(&(e(d, j % d) * f64::sqrt(horizon)));
                s
            })
            .collect();
        let pooled = per_task.iter().fold(SymMatrix::zeros(d), |acc, s| acc.add(s));
        let n = (m * d) as f64;
        for s in &per_task {
            assert!(misalignment(s, &pooled).unwrap() <= d as f64 / n + 1e-9);
        }
        assert!(matches!(
            misalignment(&vj, &SymMatrix::zeros(3)),
            Err(Error::SingularGlobalMatrix { .. })
        ));
    }

    #[test]
    fn incremental_average_equals_batch_every_round() {
        let env = synthetic(4, 3, 12, 0.3, 0.2, 8);
        let c = cfg(Estimator::Avg, 1.0, 12, 5, 4);
        let mut meta = MetaState::new(4, 1.0).unwrap();
        let mut finals: Vec<RealVector> = Vec::new();
        for j in 0..5 {
            let out = run_task(&env, j, &c, &mut meta).unwrap();
            // Replay the task, checking the bias used at each round.
            let mut state = TaskState::new(4, 1.0).unwrap();
            for (t, h) in out.bias_trajectory.iter().enumerate() {
                let mut sum = RealVector::zeros(4);
                for w in &finals {
                    sum += w * 12.0;
                }
                let weight = 12 * finals.len() + t;
                if t > 0 {
                    sum += state.ridge_estimate().unwrap() * t as f64;
                }
                let batch = if weight == 0 { sum } else { sum / weight as f64 };
                assert!((h - batch).amax() <= 1e-10, "task {j} round {t}");
                let (x, y) = &out.dataset[t];
                state.update(x, *y).unwrap();
            }
            finals.push(out.ridge_estimate.clone());
        }
    }

    #[test]
    fn pooling_equals_concatenated_ridge() {
        let env = synthetic(3, 3, 15, 0.3, 0.2, 4);
        let c = cfg(Estimator::GlobalRR, 0.8, 15, 4, 3);
        let run = run_meta(&env, &c, 0).unwrap();
        let mut concat = TaskState::new(3, 0.8).unwrap();
        for out in &run.train {
            for (x, y) in &out.dataset {
                concat.update(x, *y).unwrap();
            }
        }
        let diff = run.trained_bias - concat.ridge_estimate().unwrap();
        assert!(diff.amax() <= 1e-9);
        let b_sum = run
            .state
            .global
            .per_task_responses()
            .iter()
            .fold(RealVector::zeros(3), |acc, b| acc + b);
        assert!((b_sum - run.state.global.b_tilde()).amax() <= 1e-9);
    }

    #[test]
    fn oracle_dominates_at_high_lambda() {
        let env = synthetic(5, 4, 30, 0.0, 0.0, 2);
        let w = env.mean_task();
        let c = cfg(Estimator::Oracle(w.clone()), 1e6, 30, 1, 5);
        let mut meta = MetaState::new(5, 1e6).unwrap();
        let out = run_task(&env, 0, &c, &mut meta).unwrap();
        for (t, r) in out.rounds.iter().enumerate() {
            let ds = TaskEnvironment::decision_set(&env, 0, t).unwrap();
            assert_eq!(r.arm, bandit::oracle_select(&ds, &w).unwrap());
        }
    }

    #[test]
    fn point_mass_oracle_has_zero_regret() {
        for lambda in [1e4, 1e6] {
            let env = synthetic(5, 5, 50, 0.0, 0.0, 13);
            let c = cfg(Estimator::Oracle(env.mean_task()), lambda, 50, 1, 5);
            let run = run_meta(&env, &c, 1).unwrap();
            assert_eq!(run.test[0].cumulative_regret(), 0.0);
        }
    }

    #[test]
    fn itl_equals_zero_oracle() {
        let env = synthetic(4, 3, 20, 0.3, 0.3, 6);
        let a = run_meta(&env, &cfg(Estimator::Itl, 1.0, 20, 2, 4), 1).unwrap();
        let b = run_meta(&env, &cfg(Estimator::Oracle(RealVector::zeros(4)), 1.0, 20, 2, 4), 1).unwrap();
        for (x, y) in a.train.iter().chain(&a.test).zip(b.train.iter().chain(&b.test)) {
            assert_eq!(x.rounds, y.rounds);
        }
    }

    #[test]
    fn hand_simulated_episode() {
        // d = 2, K = 2, T = 3, noiseless, h = 0, λ = 1, δ = 1, R = 0.5, S = 1.
        let w = v(&[1.0, 0.2]);
        let sets = vec![
            DecisionSet::new(vec![v(&[1.0, 0.0]), v(&[0.0, 1.0])]).unwrap(),
            DecisionSet::new(vec![v(&[0.6, 0.8]), v(&[0.8, -0.6])]).unwrap(),
            DecisionSet::new(vec![v(&[0.0, 1.0]), v(&[-1.0, 0.0])]).unwrap(),
        ];
        let env = FixedEnv {
            tasks: vec![w.clone()],
            sets: sets.clone(),
            horizon: 3,
        };
        let mut c = cfg(Estimator::Itl, 1.0, 3, 1, 2);
        c.params = ConfidenceParams::new(0.5, 1.0, 1.0, 1.0, 2).unwrap();
        let mut meta = MetaState::new(2, 1.0).unwrap();
        let out = run_task(&env, 0, &c, &mut meta).unwrap();

        // Independent arithmetic with explicit 2×2 matrices.
        let (mut a, mut b, mut cc): (f64, f64, f64) = (1.0, 0.0, 1.0);
        let (mut r0, mut r1) = (0.0, 0.0);
        let mut expected_arms = Vec::new();
        let mut cum = 0.0;
        for ds in &sets {
            let det = a * cc - b * b;
            let inv = [[cc / det, -b / det], [-b / det, a / det]];
            let what = [inv[0][0] * r0 + inv[0][1] * r1, inv[1][0] * r0 + inv[1][1] * r1];
            let beta = 1.0 * (0.0 + 1.0) + 0.5 * det.ln().max(0.0).sqrt();
            let score = |x: &RealVector| {
                let q = x[0] * (inv[0][0] * x[0] + inv[0][1] * x[1]) + x[1] * (inv[1][0] * x[0] + inv[1][1] * x[1]);
                x[0] * what[0] + x[1] * what[1] + beta * q.sqrt()
            };
            let arm = if score(ds.arm(1)) > score(ds.arm(0)) { 1 } else { 0 };
            let x = ds.arm(arm);
            let y = x.dot(&w);
            let best = ds.arm(0).dot(&w).max(ds.arm(1).dot(&w));
            cum += best - y;
            a += x[0] * x[0];
            b += x[0] * x[1];
            cc += x[1] * x[1];
            r0 += y * x[0];
            r1 += y * x[1];
            expected_arms.push((arm, cum));
        }
        for (r, (arm, cum)) in out.rounds.iter().zip(expected_arms) {
            assert_eq!(r.arm, arm);
            assert_relative_eq!(r.cum_regret, cum, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_task_average_is_its_ridge_estimate() {
        let env = synthetic(4, 3, 10, 0.3, 0.3, 9);
        let run = run_meta(&env, &cfg(Estimator::Avg, 1.0, 10, 1, 4), 0).unwrap();
        assert!((run.trained_bias - &run.train[0].ridge_estimate).amax() <= 1e-12);
    }

    #[test]
    fn point_mass_average_approaches_mean() {
        let env = synthetic(3, 3, 40, 0.0, 0.0, 10);
        let wbar = env.mean_task();
        let run = run_meta(&env, &cfg(Estimator::Avg, 0.01, 40, 5, 3), 0).unwrap();
        let worst = run
            .train
            .iter()
            .map(|o| (&o.ridge_estimate - &wbar).norm())
            .fold(0.0, f64::max);
        let err = (&run.trained_bias - &wbar).norm();
        assert!(err <= worst + 1e-12);
        assert!(err <= 1e-2 * wbar.norm(), "error {err}");
    }

    #[test]
    fn oracle_bias_is_constant() {
        let env = synthetic(4, 3, 10, 0.3, 0.3, 12);
        let h = env.mean_task();
        let run = run_meta(&env, &cfg(Estimator::Oracle(h.clone()), 1.0, 10, 3, 4), 2).unwrap();
        for out in run.train.iter().chain(&run.test) {
            assert!(out.bias_trajectory.iter().all(|b| *b == h));
        }
    }

    #[test]
    fn frozen_bias_is_constant_within_task() {
        let env = synthetic(4, 3, 10, 0.3, 0.3, 12);
        let mut c = cfg(Estimator::Avg, 1.0, 10, 3, 4);
        c.bias_update = BiasUpdate::Frozen;
        let run = run_meta(&env, &c, 1).unwrap();
        for out in run.train.iter().chain(&run.test) {
            assert!(out.bias_trajectory.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn pseudo_regret_examples() {
        let ds = DecisionSet::new(vec![e(2, 0), e(2, 1)]).unwrap();
        let w = v(&[1.0, 0.5]);
        assert_eq!(pseudo_regret(&[0, 0], &[ds.clone(), ds.clone()], &w).unwrap(), vec![0.0, 0.0]);
        assert_eq!(pseudo_regret(&[1], &[ds.clone()], &w).unwrap(), vec![0.5]);
        let single = DecisionSet::new(vec![e(2, 1)]).unwrap();
        assert_eq!(pseudo_regret(&[0], &[single], &w).unwrap(), vec![0.0]);
    }

    #[test]
    fn episode_regret_matches_recomputation() {
        let env = synthetic(5, 4, 25, 0.3, 0.5, 77);
        let mut meta = MetaState::new(5, 1.0).unwrap();
        let out = run_task(&env, 0, &cfg(Estimator::Itl, 1.0, 25, 1, 5), &mut meta).unwrap();
        let sets: Vec<DecisionSet> = (0..25).map(|t| TaskEnvironment::decision_set(&env, 0, t).unwrap()).collect();
        let chosen: Vec<usize> = out.rounds.iter().map(|r| r.arm).collect();
        let recomputed = pseudo_regret(&chosen, &sets, &out.w_star).unwrap();
        let mut cum = 0.0;
        for (r, inst) in out.rounds.iter().zip(recomputed) {
            cum += inst;
            assert_relative_eq!(r.inst_regret, inst, epsilon = 1e-12);
            assert_relative_eq!(r.cum_regret, cum, epsilon = 1e-9);
        }
    }

    #[test]
    fn diagnostics_examples() {
        let env = synthetic(3, 3, 20, 0.0, 0.2, 5);
        let wbar = env.mean_task();
        let run = run_meta(&env, &cfg(Estimator::Avg, 1.0, 20, 4, 3), 0).unwrap();
        let d = transfer_diagnostics(&run.state, &wbar, &wbar).unwrap();
        assert_eq!(d.eps, 0.0);
        assert_eq!(d.h_rho, 0.0);
        assert_eq!(d.h_tilde_max, 0.0);
    }

    #[test]
    fn diagnostics_match_recomputation() {
        let env = synthetic(3, 3, 20, 0.4, 0.2, 15);
        let wbar = env.mean_task();
        let run = run_meta(&env, &cfg(Estimator::GlobalRR, 1.0, 20, 3, 3), 0).unwrap();
        let d = run.diagnostics;
        let h = &run.trained_bias;
        assert_relative_eq!(d.eps, (&wbar - h).norm_squared(), epsilon = 1e-12);

        let ws: Vec<&RealVector> = run.train.iter().map(|o| &o.w_star).collect();
        let mean = (ws[0] + ws[1] + ws[2]) / 3.0;
        assert_relative_eq!(d.h_rho, (&wbar - &mean).norm(), epsilon = 1e-12);

        let designs: Vec<nalgebra::DMatrix<f64>> = run
            .train
            .iter()
            .map(|o| o.dataset.iter().fold(nalgebra::DMatrix::zeros(3, 3), |acc, (x, _)| acc + x * x.transpose()))
            .collect();
        let pooled = &designs[0] + &designs[1] + &designs[2];
        let (nu, _) = linalg::eig_extremes(&SymMatrix::new(pooled.clone()).unwrap()).unwrap();
        assert_relative_eq!(d.nu_min, nu, epsilon = 1e-9);
        let inv = pooled.try_inverse().unwrap();
        let prefix = [ws[0].clone(), (ws[0] + ws[1]) / 2.0, mean.clone()];
        let mut max_mis: f64 = 0.0;
        let mut max_ht: f64 = 0.0;
        for j in 0..3 {
            let m = linalg::max_singular(&(&designs[j] * &inv)).unwrap();
            max_mis = max_mis.max(m);
            max_ht = max_ht.max(m * (ws[j] - &prefix[j]).norm());
        }
        assert_relative_eq!(d.max_misalignment, max_mis, epsilon = 1e-9);
        assert_relative_eq!(d.h_tilde_max, max_ht, epsilon = 1e-9);
    }

    #[test]
    fn variance_term_uses_oful_radius() {
        let mut v1 = SymMatrix::zeros(2);
        v1.add_outer(&v(&[1.0, 0.0]));
        let p = ConfidenceParams::new(0.5, 1.0, 1.0, 0.1, 2).unwrap();
        let got = avg_variance_term(&[v1], &[4], &p, 2.0).unwrap();
        let pd = ConfidenceParams { delta: 0.25, ..p };
        let expected = bandit::beta_oful(&pd, 2.0, 4).unwrap() / 2f64.sqrt();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
    }
}
