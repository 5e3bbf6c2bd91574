//! Meta-level stochastic gradient descent over the transition matrix.
//!
//! Each epoch samples (section, operator) cells, has the caller apply and
//! score every edit in isolation against the same base prompt, and then
//! scales each sampled cell by `1 + alpha * norm`, where `norm` is the
//! relative change of the objective the edit produced.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::matrix::{MatrixError, SelectionMode, SelectionPair, TransitionMatrix};
use crate::Q_FLOOR;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MsgdError {
    #[error("baseline score is zero; relative change is undefined")]
    ZeroBaseline,
    #[error("learning rate must be finite and > 0, got {0}")]
    InvalidAlpha(f64),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Failure of one optimizer epoch: either the caller's edit evaluation or
/// the matrix bookkeeping.
#[derive(Debug, thiserror::Error)]
pub enum EpochError<E> {
    #[error("edit evaluation failed: {0}")]
    Evaluate(E),
    #[error("evaluator returned {got} score pairs for {expected} selections")]
    Arity { expected: usize, got: usize },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Msgd(#[from] MsgdError),
    #[error(transparent)]
    Sarsa(#[from] crate::sarsa::SarsaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// `q <- q * (1 + alpha * norm)`, norm = relative score change.
    #[default]
    Multiplicative,
    /// `q <- q + alpha * norm`, norm = relative loss change. Kept for study.
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsgdConfig {
    pub alpha: f64,
    pub rule: UpdateRule,
    pub q_floor: f64,
    pub pairs_per_epoch: usize,
    pub selection: SelectionMode,
}

impl Default for MsgdConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            rule: UpdateRule::Multiplicative,
            q_floor: Q_FLOOR,
            pairs_per_epoch: 2,
            selection: SelectionMode::ValueProportional,
        }
    }
}

/// Effect of one sampled edit on the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientObservation {
    pub pair: SelectionPair,
    pub score_prev: f64,
    pub score_cur: f64,
    pub gradient: f64,
}

impl GradientObservation {
    pub fn new(pair: SelectionPair, score_prev: f64, score_cur: f64) -> Self {
        Self { pair, score_prev, score_cur, gradient: score_cur - score_prev }
    }
}

/// Applies each selected edit to the epoch's base prompt in isolation and
/// reports `(score_prev, score_cur)` for it, in selection order.
pub trait EditEvaluator {
    type Error;

    fn evaluate_pairs(&mut self, pairs: &[SelectionPair]) -> Result<Vec<(f64, f64)>, Self::Error>;
}

/// Relative score change `(cur - prev) / prev`.
pub fn norm_delta(score_prev: f64, score_cur: f64) -> Result<f64, MsgdError> {
    if score_prev == 0.0 {
        return Err(MsgdError::ZeroBaseline);
    }
    Ok((score_cur - score_prev) / score_prev)
}

/// Relative loss change used by the additive rule.
pub fn loss_norm_delta(score_prev: f64, score_cur: f64) -> Result<f64, MsgdError> {
    norm_delta(1.0 - score_prev, 1.0 - score_cur)
}

/// Updated value of one cell; floors the result at `q_floor`.
pub fn updated_value(
    q: f64,
    norm: f64,
    alpha: f64,
    rule: UpdateRule,
    q_floor: f64,
) -> Result<f64, MsgdError> {
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(MsgdError::InvalidAlpha(alpha));
    }
    let next = match rule {
        UpdateRule::Multiplicative => q * (1.0 + alpha * norm),
        UpdateRule::Additive => q + alpha * norm,
    };
    Ok(if next.is_finite() { next.max(q_floor) } else { q_floor })
}

/// Rewrites the cell of `pair` in place. Every other cell is untouched.
pub fn msgd_update(
    m: &mut TransitionMatrix,
    pair: &SelectionPair,
    norm: f64,
    alpha: f64,
    rule: UpdateRule,
    q_floor: f64,
) -> Result<(), MsgdError> {
    let q = m.get(pair.row, pair.col);
    let next = updated_value(q, norm, alpha, rule, q_floor)?;
    m.set(pair.row, pair.col, next)?;
    Ok(())
}

/// Norm for an observation under the configured rule. A zero baseline falls
/// back to the raw difference.
pub fn observation_norm(obs: &GradientObservation, rule: UpdateRule) -> f64 {
    let relative = match rule {
        UpdateRule::Multiplicative => norm_delta(obs.score_prev, obs.score_cur),
        UpdateRule::Additive => loss_norm_delta(obs.score_prev, obs.score_cur),
    };
    relative.unwrap_or(match rule {
        UpdateRule::Multiplicative => obs.gradient,
        UpdateRule::Additive => -obs.gradient,
    })
}

/// Applies the observations sequentially in selection order.
pub fn apply_observations(
    m: &mut TransitionMatrix,
    observations: &[GradientObservation],
    cfg: &MsgdConfig,
) -> Result<(), MsgdError> {
    for obs in observations {
        let norm = observation_norm(obs, cfg.rule);
        msgd_update(m, &obs.pair, norm, cfg.alpha, cfg.rule, cfg.q_floor)?;
    }
    Ok(())
}

/// One MSGD epoch: sample, evaluate in isolation, then update.
pub fn msgd_epoch<E: EditEvaluator, R: Rng + ?Sized>(
    m: &mut TransitionMatrix,
    cfg: &MsgdConfig,
    evaluator: &mut E,
    rng: &mut R,
) -> Result<Vec<GradientObservation>, EpochError<E::Error>> {
    let pairs = m.select_pairs(cfg.pairs_per_epoch, cfg.selection, rng)?;
    let scores = evaluator.evaluate_pairs(&pairs).map_err(EpochError::Evaluate)?;
    if scores.len() != pairs.len() {
        return Err(EpochError::Arity { expected: pairs.len(), got: scores.len() });
    }
    let observations: Vec<GradientObservation> = pairs
        .into_iter()
        .zip(scores)
        .map(|(p, (prev, cur))| GradientObservation::new(p, prev, cur))
        .collect();
    apply_observations(m, &observations, cfg)?;
    Ok(observations)
}
