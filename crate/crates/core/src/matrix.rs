//! Section x operator transition matrix and pair sampling.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::operators::OperatorId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MatrixError {
    #[error("matrix needs at least one section and one operator")]
    EmptyAxis,
    #[error("matrix has zero total mass")]
    ZeroMass,
    #[error("softmax selection requested but the matrix has no logits")]
    MissingLogits,
    #[error("asked for {requested} pairs but only {available} cells exist")]
    CountTooLarge { requested: usize, available: usize },
    #[error("duplicate {0} label `{1}`")]
    DuplicateLabel(&'static str, String),
    #[error("value table shape does not match {rows}x{cols}")]
    Shape { rows: usize, cols: usize },
    #[error("cell ({0}, {1}) holds {2}, expected a finite value >= 0")]
    BadValue(usize, usize, f64),
    #[error("cell ({0}, {1}) is out of range")]
    OutOfRange(usize, usize),
}

/// How cell values turn into selection probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// `p_ij = q_ij / sum(q)`.
    #[default]
    ValueProportional,
    /// Whole-matrix softmax of the stored logits.
    SoftmaxLogits,
}

/// A sampled (section, operator) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPair {
    pub section: String,
    pub operator: OperatorId,
    pub row: usize,
    pub col: usize,
    pub q_at_selection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct TransitionMatrix {
    sections: Vec<String>,
    operators: Vec<OperatorId>,
    q: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logits: Option<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
struct RawMatrix {
    sections: Vec<String>,
    operators: Vec<OperatorId>,
    q: Vec<Vec<f64>>,
    #[serde(default)]
    logits: Option<Vec<Vec<f64>>>,
}

impl TryFrom<RawMatrix> for TransitionMatrix {
    type Error = MatrixError;

    fn try_from(raw: RawMatrix) -> Result<Self, Self::Error> {
        let mut m = TransitionMatrix::from_values(raw.sections, raw.operators, raw.q)?;
        if let Some(l) = raw.logits {
            m = m.with_logits(l)?;
        }
        Ok(m)
    }
}

impl TransitionMatrix {
    /// Every cell gets `1 / (rows * cols)`.
    pub fn init_uniform(
        sections: Vec<String>,
        operators: Vec<OperatorId>,
    ) -> Result<Self, MatrixError> {
        if sections.is_empty() || operators.is_empty() {
            return Err(MatrixError::EmptyAxis);
        }
        let v = 1.0 / (sections.len() * operators.len()) as f64;
        let q = vec![vec![v; operators.len()]; sections.len()];
        Self::from_values(sections, operators, q)
    }

    pub fn from_values(
        sections: Vec<String>,
        operators: Vec<OperatorId>,
        q: Vec<Vec<f64>>,
    ) -> Result<Self, MatrixError> {
        if sections.is_empty() || operators.is_empty() {
            return Err(MatrixError::EmptyAxis);
        }
        let mut seen = BTreeSet::new();
        for s in &sections {
            if !seen.insert(s.as_str()) {
                return Err(MatrixError::DuplicateLabel("section", s.clone()));
            }
        }
        let mut seen = BTreeSet::new();
        for o in &operators {
            if !seen.insert(*o) {
                return Err(MatrixError::DuplicateLabel("operator", String::from(o.as_str())));
            }
        }
        check_shape(&q, sections.len(), operators.len())?;
        for (i, row) in q.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(MatrixError::BadValue(i, j, v));
                }
            }
        }
        Ok(Self { sections, operators, q, logits: None })
    }

    /// Attaches raw selection scores (section-embedding x operator-embedding
    /// products) used by [`SelectionMode::SoftmaxLogits`].
    pub fn with_logits(mut self, logits: Vec<Vec<f64>>) -> Result<Self, MatrixError> {
        check_shape(&logits, self.rows(), self.cols())?;
        for (i, row) in logits.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(MatrixError::BadValue(i, j, v));
                }
            }
        }
        self.logits = Some(logits);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.sections.len()
    }

    pub fn cols(&self) -> usize {
        self.operators.len()
    }

    pub fn sections(&self) -> &[String] {
        &self.sections
    }

    pub fn operators(&self) -> &[OperatorId] {
        &self.operators
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.q
    }

    pub fn logits(&self) -> Option<&[Vec<f64>]> {
        self.logits.as_deref()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.q[row][col]
    }

    /// Writes one cell. Negative or non-finite values are rejected.
    pub fn set(&mut self, row: usize, col: usize, value: f64) -> Result<(), MatrixError> {
        if row >= self.rows() || col >= self.cols() {
            return Err(MatrixError::OutOfRange(row, col));
        }
        if !value.is_finite() || value < 0.0 {
            return Err(MatrixError::BadValue(row, col, value));
        }
        self.q[row][col] = value;
        Ok(())
    }

    pub fn section_index(&self, section: &str) -> Option<usize> {
        self.sections.iter().position(|s| s == section)
    }

    pub fn operator_index(&self, op: OperatorId) -> Option<usize> {
        self.operators.iter().position(|o| *o == op)
    }

    /// Cell value by labels.
    pub fn value(&self, section: &str, op: OperatorId) -> Option<f64> {
        Some(self.q[self.section_index(section)?][self.operator_index(op)?])
    }

    pub fn pair(&self, row: usize, col: usize) -> SelectionPair {
        SelectionPair {
            section: self.sections[row].clone(),
            operator: self.operators[col],
            row,
            col,
            q_at_selection: self.q[row][col],
        }
    }

    pub fn total(&self) -> f64 {
        self.q.iter().flatten().sum()
    }

    /// Row and column of the largest cell (first in row-major order on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        for (i, row) in self.q.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > self.q[best.0][best.1] {
                    best = (i, j);
                }
            }
        }
        best
    }

    /// Copy with every cell divided by the total mass.
    pub fn normalized(&self) -> Result<Self, MatrixError> {
        let total = self.total();
        if total <= 0.0 {
            return Err(MatrixError::ZeroMass);
        }
        let mut m = self.clone();
        for v in m.q.iter_mut().flatten() {
            *v /= total;
        }
        Ok(m)
    }

    /// Probability of picking each cell on a single draw.
    pub fn selection_distribution(&self, mode: SelectionMode) -> Result<Vec<Vec<f64>>, MatrixError> {
        match mode {
            SelectionMode::ValueProportional => {
                let total = self.total();
                if total <= 0.0 {
                    return Err(MatrixError::ZeroMass);
                }
                Ok(self.q.iter().map(|r| r.iter().map(|v| v / total).collect()).collect())
            }
            SelectionMode::SoftmaxLogits => {
                let logits = self.logits.as_ref().ok_or(MatrixError::MissingLogits)?;
                let max = logits.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<Vec<f64>> = logits
                    .iter()
                    .map(|r| r.iter().map(|v| libm::exp(v - max)).collect())
                    .collect();
                let total: f64 = exp.iter().flatten().sum();
                Ok(exp.into_iter().map(|r| r.into_iter().map(|v| v / total).collect()).collect())
            }
        }
    }

    /// Draws `count` distinct cells. Each draw is proportional to the
    /// selection distribution restricted to the cells not yet drawn; if the
    /// remaining mass is zero the draw is uniform over what is left.
    pub fn select_pairs<R: Rng + ?Sized>(
        &self,
        count: usize,
        mode: SelectionMode,
        rng: &mut R,
    ) -> Result<Vec<SelectionPair>, MatrixError> {
        let available = self.rows() * self.cols();
        if count > available {
            return Err(MatrixError::CountTooLarge { requested: count, available });
        }
        let dist = self.selection_distribution(mode)?;
        let mut weights: Vec<f64> = dist.into_iter().flatten().collect();
        let mut taken = vec![false; available];
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mass: f64 = weights.iter().sum();
            let pick = if mass > 0.0 {
                let mut target = rng.random::<f64>() * mass;
                let mut chosen = None;
                for (i, &w) in weights.iter().enumerate() {
                    if w <= 0.0 {
                        continue;
                    }
                    chosen = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
                chosen.expect("positive mass has a positive cell")
            } else {
                let free: Vec<usize> = (0..available).filter(|&i| !taken[i]).collect();
                free[rng.random_range(0..free.len())]
            };
            taken[pick] = true;
            weights[pick] = 0.0;
            out.push(self.pair(pick / self.cols(), pick % self.cols()));
        }
        Ok(out)
    }
}

fn check_shape(t: &[Vec<f64>], rows: usize, cols: usize) -> Result<(), MatrixError> {
    if t.len() != rows || t.iter().any(|r| r.len() != cols) {
        return Err(MatrixError::Shape { rows, cols });
    }
    Ok(())
}
