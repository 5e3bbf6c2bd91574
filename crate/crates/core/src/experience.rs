//! Persisted transition matrices for reuse across datasets.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::matrix::{MatrixError, TransitionMatrix};
use crate::operators::OperatorId;
use crate::task::TaskKind;

pub const EXPERIENCE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExperienceError {
    #[error("experience file version {found} is not supported (expected {EXPERIENCE_VERSION})")]
    VersionMismatch { found: u64 },
    #[error("corrupt experience file: {0}")]
    CorruptFile(String),
}

impl From<MatrixError> for ExperienceError {
    fn from(e: MatrixError) -> Self {
        ExperienceError::CorruptFile(e.to_string())
    }
}

/// Learned matrix labelled by section *names*, so it can be lined up with a
/// different prompt later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceStore {
    pub version: u32,
    pub task_kind: TaskKind,
    pub sections: Vec<String>,
    pub operators: Vec<OperatorId>,
    pub q: Vec<Vec<f64>>,
    pub epochs_trained: u64,
    pub created_at: String,
    pub updated_at: String,
}

impl ExperienceStore {
    /// `matrix` rows must already be section names.
    pub fn from_matrix(
        matrix: &TransitionMatrix,
        task_kind: TaskKind,
        epochs_trained: u64,
        created_at: String,
        updated_at: String,
    ) -> Self {
        Self {
            version: EXPERIENCE_VERSION,
            task_kind,
            sections: matrix.sections().to_vec(),
            operators: matrix.operators().to_vec(),
            q: matrix.values().to_vec(),
            epochs_trained,
            created_at,
            updated_at,
        }
    }

    pub fn matrix(&self) -> Result<TransitionMatrix, ExperienceError> {
        Ok(TransitionMatrix::from_values(
            self.sections.clone(),
            self.operators.clone(),
            self.q.clone(),
        )?)
    }

    pub fn parse(text: &str) -> Result<Self, ExperienceError> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| ExperienceError::CorruptFile(e.to_string()))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == EXPERIENCE_VERSION as u64 => {}
            Some(found) => return Err(ExperienceError::VersionMismatch { found }),
            None => return Err(ExperienceError::CorruptFile("missing version".into())),
        }
        let store: Self = serde_json::from_value(value)
            .map_err(|e| ExperienceError::CorruptFile(e.to_string()))?;
        store.matrix()?;
        Ok(store)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("store serialization is infallible");
        s.push('\n');
        s
    }

    /// Matrix for a run over `sections` x `operators`, seeded from this store.
    ///
    /// Cells known to the store are copied. A new operator gets the mean of
    /// the stored row; a new section gets the per-column mean over the rows
    /// that did match. With no matching rows at all the result is uniform.
    pub fn align(
        &self,
        sections: &[String],
        operators: &[OperatorId],
    ) -> Result<TransitionMatrix, ExperienceError> {
        if sections.is_empty() || operators.is_empty() {
            return Err(MatrixError::EmptyAxis.into());
        }
        let prior = self.matrix()?;
        let mut rows: Vec<Option<Vec<f64>>> = Vec::with_capacity(sections.len());
        for name in sections {
            let row = prior.section_index(name).map(|r| {
                let stored = &prior.values()[r];
                let row_mean = stored.iter().sum::<f64>() / stored.len() as f64;
                operators
                    .iter()
                    .map(|op| match prior.operator_index(*op) {
                        Some(c) => stored[c],
                        None => row_mean,
                    })
                    .collect::<Vec<f64>>()
            });
            rows.push(row);
        }
        let matched: Vec<&Vec<f64>> = rows.iter().flatten().collect();
        let q: Vec<Vec<f64>> = if matched.is_empty() {
            let v = 1.0 / (sections.len() * operators.len()) as f64;
            alloc::vec![alloc::vec![v; operators.len()]; sections.len()]
        } else {
            let n = matched.len() as f64;
            let col_means: Vec<f64> = (0..operators.len())
                .map(|c| matched.iter().map(|r| r[c]).sum::<f64>() / n)
                .collect();
            rows.into_iter().map(|r| r.unwrap_or_else(|| col_means.clone())).collect()
        };
        Ok(TransitionMatrix::from_values(sections.to_vec(), operators.to_vec(), q)?)
    }
}
