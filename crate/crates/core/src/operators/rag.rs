use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::generation::GenerationRequest;
use crate::prompt::{MetaPrompt, SectionId};

use super::{build_request, OperatorContext, OperatorError, OperatorId, TemplateSet};

pub const RAG_TOP_K: usize = 3;

/// Source of reference passages for a query.
pub trait Retriever {
    fn retrieve(&self, query: &str, k: usize) -> Vec<String>;
}

/// Ranks documents by the number of distinct lowercase whitespace tokens
/// they share with the query. Ties keep corpus order, and documents with no
/// overlap still fill the remaining slots.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ToyRetriever {
    pub documents: Vec<String>,
}

impl ToyRetriever {
    pub fn new(documents: Vec<String>) -> Self {
        Self { documents }
    }
}

fn tokens(text: &str) -> BTreeSet<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

impl Retriever for ToyRetriever {
    fn retrieve(&self, query: &str, k: usize) -> Vec<String> {
        let q = tokens(query);
        let mut ranked: Vec<(usize, usize)> = self
            .documents
            .iter()
            .enumerate()
            .map(|(i, d)| (tokens(d).intersection(&q).count(), i))
            .collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        ranked.into_iter().take(k).map(|(_, i)| self.documents[i].clone()).collect()
    }
}

/// Retrieves passages for the target section body and builds the request
/// that folds them into the section.
pub fn rag_augment(
    prompt: &MetaPrompt,
    target: &SectionId,
    retriever: Option<&dyn Retriever>,
    templates: &TemplateSet,
) -> Result<GenerationRequest, OperatorError> {
    let retriever = retriever.ok_or(OperatorError::RetrieverUnavailable)?;
    let ctx = OperatorContext::new(prompt, target);
    let section = ctx.target_section()?;
    if !section.editable {
        return Err(OperatorError::NotEditable(section.name.clone()));
    }
    let query = if section.body.trim().is_empty() { &section.name } else { &section.body };
    let snippets = retriever.retrieve(query, RAG_TOP_K);
    let ctx = OperatorContext { snippets: &snippets, ..ctx };
    build_request(OperatorId::Rag, &ctx, templates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{TemplateFile, TemplateSection};
    use alloc::format;
    use alloc::vec;

    fn corpus() -> ToyRetriever {
        ToyRetriever::new(vec![
            "cats are small".into(),
            "dogs bark loudly".into(),
            "small dogs and small cats".into(),
            "nothing relevant".into(),
        ])
    }

    #[test]
    fn ranks_by_overlap_then_index() {
        let got = corpus().retrieve("Small cats", 3);
        assert_eq!(got, vec!["cats are small", "small dogs and small cats", "dogs bark loudly"]);
    }

    #[test]
    fn zero_overlap_documents_fill_slots() {
        let got = corpus().retrieve("zebra", 3);
        assert_eq!(got, vec!["cats are small", "dogs bark loudly", "small dogs and small cats"]);
    }

    #[test]
    fn spec_style_corpora() {
        let r = ToyRetriever::new(vec!["alpha beta".into(), "beta gamma".into()]);
        assert_eq!(r.retrieve("beta gamma", 3)[0], "beta gamma");
        assert!(ToyRetriever::default().retrieve("x", 3).is_empty());
        let five = ToyRetriever::new((0..5).map(|i| format!("d{i}")).collect());
        assert_eq!(five.retrieve("d1", RAG_TOP_K).len(), 3);
    }

    #[test]
    fn missing_retriever_is_an_error() {
        let p = MetaPrompt::from_template(TemplateFile {
            sections: vec![TemplateSection { name: "a".into(), body: "small cats {{Input}}".into(), editable: true }],
            input_placeholder: "{{Input}}".into(),
            output_contract: "".into(),
        })
        .unwrap();
        let t = TemplateSet::default();
        assert_eq!(rag_augment(&p, &"s0".into(), None, &t), Err(OperatorError::RetrieverUnavailable));
        let r = corpus();
        let req = rag_augment(&p, &"s0".into(), Some(&r), &t).unwrap();
        assert!(req.messages[0].content.contains("[1] cats are small\n[2] small dogs and small cats\n[3] dogs bark loudly"));
    }
}
