use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::generation::GenerationRequest;
use crate::metrics::Objective;
use crate::prompt::{Candidate, SectionId};

use super::{build_request, OperatorContext, OperatorError, OperatorId, TemplateSet};

/// (body, score) for each parent with a distinct target body, best first.
pub(crate) fn distinct_parents(
    parents: &[Candidate],
    target: &SectionId,
    objective: Objective,
) -> Result<Vec<(String, f64)>, OperatorError> {
    let mut scored: Vec<(String, f64)> = Vec::with_capacity(parents.len());
    for p in parents {
        let section = p
            .prompt
            .section(target)
            .ok_or_else(|| OperatorError::UnknownSection(target.0.clone()))?;
        scored.push((section.body.clone(), p.objective(objective).unwrap_or(0.0)));
    }
    // Stable: equal scores keep caller order.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
    let mut out: Vec<(String, f64)> = Vec::with_capacity(scored.len());
    for (body, score) in scored {
        if !out.iter().any(|(b, _)| *b == body) {
            out.push((body, score));
        }
    }
    if out.len() < 2 {
        return Err(OperatorError::IdenticalParents);
    }
    Ok(out)
}

pub fn format_parents(parents: &[(String, f64)]) -> String {
    let mut s = String::new();
    for (i, (body, score)) in parents.iter().enumerate() {
        if i > 0 {
            s.push_str("\n\n");
        }
        s.push_str(&format!("Variant {} (score {:.4}):\n{}", i + 1, score, body));
    }
    s
}

/// Request for a child body of `target` built from the parents' variants,
/// presented best first with their scores. The first parent supplies the
/// prompt the child will be written into.
pub fn diff_evolution(
    parents: &[Candidate],
    target: &SectionId,
    objective: Objective,
    templates: &TemplateSet,
) -> Result<GenerationRequest, OperatorError> {
    let base = parents
        .first()
        .ok_or(OperatorError::MissingContext("diff_evolution needs at least two candidates"))?;
    let mut ctx = OperatorContext::new(&base.prompt, target);
    ctx.siblings = parents;
    ctx.objective = objective;
    build_request(OperatorId::DiffEvolution, &ctx, templates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Scores;
    use crate::prompt::{MetaPrompt, TemplateFile, TemplateSection};
    use alloc::vec;

    fn cand(body: &str, score: f64) -> Candidate {
        let p = MetaPrompt::from_template(TemplateFile {
            sections: vec![
                TemplateSection { name: "rule".into(), body: body.into(), editable: true },
                TemplateSection { name: "io".into(), body: "{{Input}}".into(), editable: false },
            ],
            input_placeholder: "{{Input}}".into(),
            output_contract: "".into(),
        })
        .unwrap();
        let mut c = Candidate::new(p);
        c.record_score(0, Scores { precision: score, recall: score, f1: score }).unwrap();
        c
    }

    #[test]
    fn best_parent_listed_first() {
        let parents = [cand("weaker body", 0.5), cand("stronger body", 0.7)];
        let req = diff_evolution(&parents, &"s0".into(), Objective::F1, &TemplateSet::default()).unwrap();
        let text = &req.messages[0].content;
        assert!(text.find("stronger body").unwrap() < text.find("weaker body").unwrap());
        assert!(text.contains("(score 0.7000)"));
    }

    #[test]
    fn identical_bodies_rejected() {
        let parents = [cand("same", 0.5), cand("same", 0.7)];
        assert_eq!(
            diff_evolution(&parents, &"s0".into(), Objective::F1, &TemplateSet::default()),
            Err(OperatorError::IdenticalParents)
        );
    }

    #[test]
    fn three_parents_each_once() {
        let parents = [cand("alpha rule", 0.5), cand("beta rule", 0.6), cand("gamma rule", 0.4)];
        let req = diff_evolution(&parents, &"s0".into(), Objective::F1, &TemplateSet::default()).unwrap();
        let text = &req.messages[0].content;
        for b in ["alpha rule", "beta rule", "gamma rule"] {
            assert_eq!(text.matches(b).count(), 1, "{b}");
        }
    }
}
