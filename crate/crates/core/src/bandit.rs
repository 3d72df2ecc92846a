//! Single-task linear bandit machinery: sufficient statistics, ridge and
//! biased-ridge centroids, confidence radii, optimistic arm selection and the
//! closed-form regret bound used as a test ceiling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, RealVector, SymMatrix};

/// Constants feeding the confidence radii.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceParams {
    /// Sub-gaussian scale `R` of the reward noise.
    pub noise_scale: f64,
    /// Norm bound `S` on task vectors and biases.
    pub norm_bound: f64,
    /// Norm bound `L` on arms.
    pub arm_bound: f64,
    /// Confidence level `δ`, in `(0, 1]`.
    pub delta: f64,
    pub dim: usize,
}

impl ConfidenceParams {
    pub fn new(noise_scale: f64, norm_bound: f64, arm_bound: f64, delta: f64, dim: usize) -> Result<Self> {
        let p = ConfidenceParams {
            noise_scale,
            norm_bound,
            arm_bound,
            delta,
            dim,
        };
        p.validate()?;
        Ok(p)
    }

    // δ = 1 is accepted: it is the degenerate level at which the log term vanishes.
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidParams(format!("R must be ≥ 0, got {}", self.noise_scale)));
        }
        if !(self.norm_bound > 0.0 && self.arm_bound > 0.0) {
            return Err(Error::InvalidParams("S and L must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::InvalidParams(format!("delta must lie in (0, 1], got {}", self.delta)));
        }
        if self.dim == 0 {
            return Err(Error::InvalidParams("dimension must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// The arms offered in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionSet {
    arms: Vec<RealVector>,
}

impl DecisionSet {
    pub fn new(arms: Vec<RealVector>) -> Result<Self> {
        let first = arms.first().ok_or(Error::EmptyDecisionSet)?;
        let d = first.len();
        if let Some(bad) = arms.iter().find(|a| a.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: bad.len(),
            });
        }
        Ok(DecisionSet { arms })
    }

    pub fn arms(&self) -> &[RealVector] {
        &self.arms
    }

    pub fn arm(&self, k: usize) -> &RealVector {
        &self.arms[k]
    }

    pub fn len(&self) -> usize {
        self.arms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.arms[0].len()
    }

    /// Checks `‖x‖₂ ≤ L + 1e-9` for every arm.
    pub fn check_bound(&self, arm_bound: f64) -> Result<()> {
        match self.arms.iter().map(|a| a.norm()).find(|n| *n > arm_bound + 1e-9) {
            Some(n) => Err(Error::InvalidParams(format!("arm norm {n} exceeds bound {arm_bound}"))),
            None => Ok(()),
        }
    }
}

/// How the bias-to-task gap `‖h − w*‖` enters the confidence radius.
#[derive(Debug, Clone, PartialEq)]
pub enum GapMode {
    /// Exact gap from the true task vector. Simulation only.
    OracleGap(RealVector),
    /// `‖h − w*‖ ≤ ‖h‖ + S`.
    PracticalBound,
}

/// Per-task sufficient statistics: `V = λI + Σ xxᵀ`, its inverse, `b = Σ y·x`.
#[derive(Debug, Clone)]
pub struct TaskState {
    lambda: f64,
    v: SymMatrix,
    v_inv: SymMatrix,
    b: RealVector,
    t: usize,
}

impl TaskState {
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParams(format!("lambda must be positive, got {lambda}")));
        }
        if dim == 0 {
            return Err(Error::InvalidParams("dimension must be ≥ 1".into()));
        }
        Ok(TaskState {
            lambda,
            v: SymMatrix::scaled_identity(dim, lambda),
            v_inv: SymMatrix::scaled_identity(dim, 1.0 / lambda),
            b: RealVector::zeros(dim),
            t: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn rounds(&self) -> usize {
        self.t
    }

    /// `V^λ = λI + Σ xxᵀ`.
    pub fn design(&self) -> &SymMatrix {
        &self.v
    }

    /// The Sherman–Morrison maintained `(V^λ)⁻¹`.
    pub fn design_inverse(&self) -> &SymMatrix {
        &self.v_inv
    }

    /// `Σ y·x`.
    pub fn response(&self) -> &RealVector {
        &self.b
    }

    /// `Σ xxᵀ` without the ridge term.
    pub fn raw_design(&self) -> SymMatrix {
        self.v.add(&SymMatrix::scaled_identity(self.dim(), -self.lambda))
    }

    /// Records one observation.
    pub fn update(&mut self, x: &RealVector, y: f64) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        linalg::rank_one_update_in_place(&mut self.v, &mut self.v_inv, x)?;
        if y != 0.0 {
            self.b.axpy(y, x, 1.0);
        }
        self.t += 1;
        Ok(())
    }

    /// `(V^λ)⁻¹ b`, the ridge minimizer of `‖Xw − y‖² + λ‖w‖²`.
    pub fn ridge_estimate(&self) -> Result<RealVector> {
        linalg::spd_solve(&self.v, &self.b)
    }

    /// Minimizer of `‖Xw − y‖² + λ‖w − h‖²`.
    ///
    /// `(V^λ)⁻¹ Xᵀ(Y − Xh) + h` simplifies to `(V^λ)⁻¹ (b + λh)` since
    /// `XᵀX = V^λ − λI`; the simplified form reduces to the ridge solve
    /// bit-for-bit at `h = 0`.
    pub fn biased_ridge_estimate(&self, h: &RealVector) -> Result<RealVector> {
        if h.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: h.len(),
            });
        }
        let rhs = &self.b + h * self.lambda;
        linalg::spd_solve(&self.v, &rhs)
    }

    /// Inverse recomputed from scratch. Test hook for the maintained inverse.
    pub fn refactorized_inverse(&self) -> Result<SymMatrix> {
        linalg::spd_inverse(&self.v)
    }

    pub fn check_invariants(&self) -> Result<()> {
        if !self.v.is_finite() || !self.v_inv.is_finite() || self.b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation("non-finite task statistics".into()));
        }
        let (min_eig, _) = linalg::eig_extremes(&self.v)?;
        if min_eig < self.lambda - 1e-8 * self.lambda.max(1.0) {
            return Err(Error::InvariantViolation(format!(
                "V − λI is not PSD: min eigenvalue {min_eig} < λ = {}",
                self.lambda
            )));
        }
        let product = self.v.as_matrix() * self.v_inv.as_matrix();
        let err = (product - nalgebra::DMatrix::identity(self.dim(), self.dim())).amax();
        if err > 1e-7 {
            return Err(Error::InvariantViolation(format!("V·V⁻¹ deviates from I by {err:e}")));
        }
        Ok(())
    }
}

/// OFUL radius `R·√(d·log((1 + tL²/λ)/δ)) + √λ·S`.
pub fn beta_oful(params: &ConfidenceParams, lambda: f64, t: usize) -> Result<f64> {
    params.validate()?;
    let arg = (1.0 + t as f64 * params.arm_bound.powi(2) / lambda) / params.delta;
    let log = arg.ln();
    if !(arg > 0.0) || !(log >= 0.0) || !log.is_finite() {
        return Err(Error::InvalidParams(format!("log argument {arg} out of range")));
    }
    Ok(params.noise_scale * (params.dim as f64 * log).sqrt() + lambda.sqrt() * params.norm_bound)
}

/// Radius of the confidence set centred at the biased-ridge estimate:
/// `√λ·gap + R·√(log det V^λ − d·log λ − 2·log δ)`.
pub fn beta_biased(state: &TaskState, params: &ConfidenceParams, h: &RealVector, mode: &GapMode) -> Result<f64> {
    params.validate()?;
    if h.len() != state.dim() {
        return Err(Error::DimensionMismatch {
            expected: state.dim(),
            found: h.len(),
        });
    }
    let gap = match mode {
        GapMode::OracleGap(w_star) => (h - w_star).norm(),
        GapMode::PracticalBound => h.norm() + params.norm_bound,
    };
    let log_det = linalg::log_det_ratio(&state.v, state.lambda, state.dim())?;
    let radicand = (log_det - 2.0 * params.delta.ln()).max(0.0);
    Ok(state.lambda.sqrt() * gap + params.noise_scale * radicand.sqrt())
}

fn argmax_lowest(scores: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, s) in scores.enumerate() {
        match best {
            Some((_, b)) if !(s > b) => {}
            _ => best = Some((k, s)),
        }
    }
    best.map(|(k, _)| k)
}

/// `argmax xᵀŵ + β·‖x‖_{V⁻¹}`, ties to the lowest index.
pub fn select_optimistic(ds: &DecisionSet, w_hat: &RealVector, beta: f64, v_inv: &SymMatrix) -> Result<usize> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidParams(format!("beta must be ≥ 0, got {beta}")));
    }
    if ds.is_empty() {
        return Err(Error::EmptyDecisionSet);
    }
    if ds.dim() != w_hat.len() || v_inv.dim() != w_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: w_hat.len(),
            found: ds.dim(),
        });
    }
    let scores = ds
        .arms()
        .iter()
        .map(|x| x.dot(w_hat) + beta * v_inv.quad_form(x).max(0.0).sqrt());
    argmax_lowest(scores).ok_or(Error::EmptyDecisionSet)
}

/// `argmax xᵀw*`, ties to the lowest index.
pub fn oracle_select(ds: &DecisionSet, w_star: &RealVector) -> Result<usize> {
    if ds.is_empty() {
        return Err(Error::EmptyDecisionSet);
    }
    if ds.dim() != w_star.len() {
        return Err(Error::DimensionMismatch {
            expected: w_star.len(),
            found: ds.dim(),
        });
    }
    argmax_lowest(ds.arms().iter().map(|x| x.dot(w_star))).ok_or(Error::EmptyDecisionSet)
}

/// One round of biased OFUL: centroid, radius, optimistic choice.
pub fn optimistic_choice(
    state: &TaskState,
    params: &ConfidenceParams,
    h: &RealVector,
    mode: &GapMode,
    ds: &DecisionSet,
) -> Result<usize> {
    let w_hat = state.biased_ridge_estimate(h)?;
    let beta = beta_biased(state, params, h, mode)?;
    select_optimistic(ds, &w_hat, beta, state.design_inverse())
}

/// High-probability regret ceiling of biased OFUL with a fixed bias:
/// `C·√(T·d·log(1 + TL/(λd)))·(√λ·gap + R·√(d·log(T + T²L/(λd))))`.
///
/// `gap = S` gives the independent-learning bound, `gap = 0` the oracle bound.
pub fn regret_bound_fixed_bias(params: &ConfidenceParams, lambda: f64, horizon: usize, gap: f64, c: f64) -> Result<f64> {
    params.validate()?;
    if horizon == 0 {
        return Err(Error::InvalidParams("horizon must be ≥ 1".into()));
    }
    if !(lambda >= 1.0) {
        return Err(Error::InvalidParams(format!("bound requires λ ≥ 1, got {lambda}")));
    }
    if !(gap >= 0.0 && c > 0.0) {
        return Err(Error::InvalidParams("gap must be ≥ 0 and C > 0".into()));
    }
    let t = horizon as f64;
    let d = params.dim as f64;
    let l = params.arm_bound;
    let width = (t * d * (1.0 + t * l / (lambda * d)).ln()).sqrt();
    let noise = params.noise_scale * (d * (t + t * t * l / (lambda * d)).ln()).sqrt();
    Ok(c * width * (lambda.sqrt() * gap + noise))
}
