use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::generation::GenerationRequest;
use crate::metrics::Objective;
use crate::prompt::{Candidate, MetaPrompt, SectionId};

use super::evolution::distinct_parents;
use super::{build_request, OperatorContext, OperatorError, OperatorId, TemplateSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// Per section, take the body from the best parent that changed it.
    #[default]
    Deterministic,
    /// Ask the model to merge each section whose bodies differ.
    Llm,
}

fn section_set(c: &Candidate) -> BTreeSet<&SectionId> {
    c.prompt.sections().iter().map(|s| &s.id).collect()
}

fn check_sections(parents: &[Candidate]) -> Result<(), OperatorError> {
    if parents.len() < 2 {
        return Err(OperatorError::MissingContext("merge needs at least two candidates"));
    }
    let first = section_set(&parents[0]);
    if parents[1..].iter().any(|p| section_set(p) != first) {
        return Err(OperatorError::SectionSetMismatch);
    }
    Ok(())
}

fn best_first(parents: &[Candidate], objective: Objective) -> Vec<&Candidate> {
    let mut ranked: Vec<&Candidate> = parents.iter().collect();
    ranked.sort_by(|a, b| {
        let sa = a.objective(objective).unwrap_or(0.0);
        let sb = b.objective(objective).unwrap_or(0.0);
        sb.partial_cmp(&sa).unwrap_or(core::cmp::Ordering::Equal)
    });
    ranked
}

/// Builds one prompt from the parents. Each editable section takes its body
/// from the parent whose lineage most recently edited that section with a
/// positive gain (ties go to the better parent); sections nobody improved
/// keep the highest-scoring parent's body. Order follows that parent.
pub fn merge_deterministic(
    parents: &[Candidate],
    objective: Objective,
) -> Result<MetaPrompt, OperatorError> {
    check_sections(parents)?;
    let ranked = best_first(parents, objective);
    let best = ranked[0];
    let mut merged = best.prompt.clone();
    for section in best.prompt.sections() {
        if !section.editable {
            continue;
        }
        let mut donor: Option<(u32, &Candidate)> = None;
        for p in &ranked {
            let last_gain = p
                .lineage
                .iter()
                .filter(|e| e.section == section.id && e.gain > 0.0)
                .map(|e| e.iteration)
                .max();
            if let Some(it) = last_gain {
                if donor.is_none_or(|(d, _)| it > d) {
                    donor = Some((it, p));
                }
            }
        }
        if let Some((_, donor)) = donor {
            let body = &donor.prompt.section(&section.id).expect("section sets match").body;
            if *body != section.body {
                merged = merged.with_body(&section.id, body.clone())?;
            }
        }
    }
    Ok(merged)
}

/// One merge request per editable section whose bodies differ across the
/// parents, paired with the section id.
pub fn merge_llm_requests(
    parents: &[Candidate],
    objective: Objective,
    templates: &TemplateSet,
) -> Result<Vec<(SectionId, GenerationRequest)>, OperatorError> {
    check_sections(parents)?;
    let best = best_first(parents, objective)[0];
    let mut out = Vec::new();
    for section in best.prompt.sections() {
        if !section.editable {
            continue;
        }
        match distinct_parents(parents, &section.id, objective) {
            Ok(_) => {}
            Err(OperatorError::IdenticalParents) => continue,
            Err(e) => return Err(e),
        }
        let mut ctx = OperatorContext::new(&best.prompt, &section.id);
        ctx.siblings = parents;
        ctx.objective = objective;
        out.push((section.id.clone(), build_request(OperatorId::Merge, &ctx, templates)?));
    }
    Ok(out)
}
