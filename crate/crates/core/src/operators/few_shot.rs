use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::prompt::{MetaPrompt, SectionId};
use crate::rng::seeded;

use super::OperatorError;

/// A labelled example available for demonstrations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotItem {
    pub id: String,
    pub input: String,
    /// Expected output, already in the prompt's output contract format.
    pub output: String,
    /// Stratification key; CLS items use their gold label.
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FewShotStrategy {
    #[default]
    Uniform,
    Stratified,
    HardCase,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FewShotError {
    #[error("no examples to sample from")]
    EmptyDataset,
    #[error("asked for {k} examples but only {available} exist")]
    KTooLarge { k: usize, available: usize },
    #[error("hard-case sampling needs a previous evaluation report")]
    MissingReport,
}

/// Indices of `k` distinct items chosen by `strategy`.
///
/// `stratified` cycles through labels in sorted order, drawing one random
/// unused item from each; `hard_case` takes the ids of the last report's bad
/// cases first and fills up uniformly.
pub fn few_shot_indices(
    items: &[FewShotItem],
    k: usize,
    strategy: FewShotStrategy,
    hard_ids: Option<&BTreeSet<String>>,
    seed: u64,
) -> Result<Vec<usize>, FewShotError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    if items.is_empty() {
        return Err(FewShotError::EmptyDataset);
    }
    if k > items.len() {
        return Err(FewShotError::KTooLarge { k, available: items.len() });
    }
    let mut rng = seeded(seed);
    let mut all: Vec<usize> = (0..items.len()).collect();
    match strategy {
        FewShotStrategy::Uniform => {
            all.shuffle(&mut rng);
            all.truncate(k);
            Ok(all)
        }
        FewShotStrategy::HardCase => {
            let hard_ids = hard_ids.ok_or(FewShotError::MissingReport)?;
            let (mut hard, mut rest): (Vec<usize>, Vec<usize>) =
                all.into_iter().partition(|&i| hard_ids.contains(&items[i].id));
            hard.shuffle(&mut rng);
            rest.shuffle(&mut rng);
            hard.extend(rest);
            hard.truncate(k);
            Ok(hard)
        }
        FewShotStrategy::Stratified => {
            let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, item) in items.iter().enumerate() {
                strata.entry(item.label.as_deref().unwrap_or("")).or_default().push(i);
            }
            for bucket in strata.values_mut() {
                bucket.shuffle(&mut rng);
            }
            let mut buckets: Vec<Vec<usize>> = strata.into_values().collect();
            let mut out = Vec::with_capacity(k);
            while out.len() < k {
                for bucket in buckets.iter_mut() {
                    if out.len() == k {
                        break;
                    }
                    if let Some(i) = bucket.pop() {
                        out.push(i);
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Demonstration text for the chosen items.
pub fn few_shot_block(items: &[&FewShotItem]) -> String {
    let mut s = String::new();
    for (n, item) in items.iter().enumerate() {
        if n > 0 {
            s.push_str("\n\n");
        }
        s.push_str(&format!("Example {}:\nInput: {}\nOutput: {}", n + 1, item.input, item.output));
    }
    s
}

/// Writes `block` into the prompt's `few_shot` section, or appends it to
/// `target` when the prompt has no such section.
pub fn apply_few_shot(
    prompt: &MetaPrompt,
    target: &SectionId,
    block: &str,
) -> Result<MetaPrompt, OperatorError> {
    if let Some(s) = prompt.section_by_name("few_shot") {
        if !s.editable {
            return Err(OperatorError::NotEditable(s.name.clone()));
        }
        return Ok(prompt.with_body(&s.id.clone(), block.into())?);
    }
    let s = prompt.section(target).ok_or_else(|| OperatorError::UnknownSection(target.0.clone()))?;
    if !s.editable {
        return Err(OperatorError::NotEditable(s.name.clone()));
    }
    let mut body = s.body.clone();
    if !body.is_empty() {
        body.push_str("\n\n");
    }
    body.push_str(block);
    Ok(prompt.with_body(target, body)?)
}
