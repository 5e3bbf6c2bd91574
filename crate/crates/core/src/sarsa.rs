//! Sarsa updates over the transition matrix.
//!
//! Editing a section is treated as an action on the current prompt. After an
//! epoch of isolated edits, each sampled cell moves toward
//! `reward + gamma * q_next`, where the reward is the mean gradient of the
//! epoch and `q_next` is the provisional value of the cell after its own
//! edit, `q + gradient`.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::matrix::{MatrixError, SelectionMode, SelectionPair, TransitionMatrix};
use crate::msgd::{EditEvaluator, EpochError, GradientObservation};
use crate::Q_FLOOR;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SarsaError {
    #[error("reward needs at least one gradient")]
    EmptySample,
    #[error("invalid hyperparameter: alpha must lie in (0, 1] and gamma in [0, 1] (got alpha={alpha}, gamma={gamma})")]
    InvalidHyperparameter { alpha: f64, gamma: f64 },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// One shared reward per epoch: the mean of all sampled gradients.
    #[default]
    Mean,
    /// Each pair is rewarded with its own gradient.
    PerPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SarsaConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub q_floor: f64,
    pub pairs_per_epoch: usize,
    pub selection: SelectionMode,
    pub reward_mode: RewardMode,
}

impl Default for SarsaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 0.5,
            q_floor: Q_FLOOR,
            pairs_per_epoch: 5,
            selection: SelectionMode::ValueProportional,
            reward_mode: RewardMode::Mean,
        }
    }
}

/// One `(S, A, R, S', A')` record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub state_fingerprint: String,
    pub pair: SelectionPair,
    pub gradient: f64,
    /// The next action. Rows are self-contained: the bootstrap is the same
    /// cell after its own edit.
    pub next_pair: SelectionPair,
    pub q_next: f64,
    pub reward: f64,
    pub q_before: f64,
    pub q_after: f64,
}

/// Bootstrapped value of the cell after its edit.
pub fn provisional_next_q(q_current: f64, gradient: f64) -> f64 {
    q_current + gradient
}

pub fn mean_reward(gradients: &[f64]) -> Result<f64, SarsaError> {
    if gradients.is_empty() {
        return Err(SarsaError::EmptySample);
    }
    Ok(gradients.iter().sum::<f64>() / gradients.len() as f64)
}

/// `q + alpha * (reward + gamma * q_next - q)`, unfloored.
pub fn sarsa_update(
    q: f64,
    reward: f64,
    q_next: f64,
    alpha: f64,
    gamma: f64,
) -> Result<f64, SarsaError> {
    if !(alpha > 0.0 && alpha <= 1.0) || !(0.0..=1.0).contains(&gamma) {
        return Err(SarsaError::InvalidHyperparameter { alpha, gamma });
    }
    Ok(q + alpha * (reward + gamma * q_next - q))
}

/// Applies the epoch's observations to the matrix in selection order.
pub fn apply_observations(
    m: &mut TransitionMatrix,
    state_fingerprint: &str,
    observations: &[GradientObservation],
    cfg: &SarsaConfig,
) -> Result<Vec<TrajectoryStep>, SarsaError> {
    let gradients: Vec<f64> = observations.iter().map(|o| o.gradient).collect();
    let shared = mean_reward(&gradients)?;
    let mut steps = Vec::with_capacity(observations.len());
    for obs in observations {
        let q = m.get(obs.pair.row, obs.pair.col);
        let reward = match cfg.reward_mode {
            RewardMode::Mean => shared,
            RewardMode::PerPair => obs.gradient,
        };
        let q_next = provisional_next_q(q, obs.gradient);
        let raw = sarsa_update(q, reward, q_next, cfg.alpha, cfg.gamma)?;
        let q_after = if raw.is_finite() { raw.max(cfg.q_floor) } else { cfg.q_floor };
        m.set(obs.pair.row, obs.pair.col, q_after)?;
        steps.push(TrajectoryStep {
            state_fingerprint: state_fingerprint.into(),
            pair: obs.pair.clone(),
            gradient: obs.gradient,
            next_pair: obs.pair.clone(),
            q_next,
            reward,
            q_before: q,
            q_after,
        });
    }
    Ok(steps)
}

/// Observations and trajectory steps of one epoch.
pub type EpochOutcome = (Vec<GradientObservation>, Vec<TrajectoryStep>);

/// One Sarsa epoch: sample, evaluate every edit in isolation against the
/// same base, then update each sampled cell.
pub fn rl_epoch<E: EditEvaluator, R: Rng + ?Sized>(
    m: &mut TransitionMatrix,
    state_fingerprint: &str,
    cfg: &SarsaConfig,
    evaluator: &mut E,
    rng: &mut R,
) -> Result<EpochOutcome, EpochError<E::Error>> {
    if cfg.pairs_per_epoch == 0 {
        return Err(EpochError::Sarsa(SarsaError::EmptySample));
    }
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
    let steps = apply_observations(m, state_fingerprint, &observations, cfg)?;
    Ok((observations, steps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn provisional_examples() {
        assert!((provisional_next_q(0.0550, 0.0947) - 0.1497).abs() < 1e-12);
        assert!((provisional_next_q(0.0625, 0.0101) - 0.0726).abs() < 1e-12);
        assert_eq!(provisional_next_q(0.3, 0.0), 0.3);
    }

    #[test]
    fn mean_reward_examples() {
        let r = mean_reward(&[0.0101, -0.0012, 0.0947, -0.0143, -0.0020]).unwrap();
        assert!((r - 0.01746).abs() < 1e-12);
        assert_eq!(mean_reward(&[0.0]).unwrap(), 0.0);
        assert_eq!(mean_reward(&[0.2, -0.2]).unwrap(), 0.0);
        assert_eq!(mean_reward(&[]), Err(SarsaError::EmptySample));
    }

    #[test]
    fn sarsa_examples() {
        let a = sarsa_update(0.0550, 0.0174, 0.1497, 0.5, 0.5).unwrap();
        assert!((a - 0.0736).abs() < 1e-3);
        let b = sarsa_update(0.0625, 0.0174, 0.0726, 0.5, 0.5).unwrap();
        assert!((b - 0.0581).abs() < 1e-3);
        let c = sarsa_update(0.3, 0.9, 0.8, 1e-12, 0.5).unwrap();
        assert!((c - 0.3).abs() < 1e-11);
    }

    #[test]
    fn hyperparameters_checked() {
        assert!(sarsa_update(0.1, 0.0, 0.1, 0.0, 0.5).is_err());
        assert!(sarsa_update(0.1, 0.0, 0.1, 1.5, 0.5).is_err());
        assert!(sarsa_update(0.1, 0.0, 0.1, 0.5, -0.1).is_err());
        assert!(sarsa_update(0.1, 0.0, 0.1, 1.0, 1.0).is_ok());
    }

    #[test]
    fn fixed_point_at_half_gamma() {
        let q = 0.0625;
        assert_eq!(sarsa_update(q, 0.5 * q, q, 0.5, 0.5).unwrap(), q);
    }
}
