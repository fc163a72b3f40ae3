//! Instruction templates and relation-list parsing.
//!
//! Every rendered prompt stops where the model's output begins, so scoring a
//! continuation is plain concatenation and no mask token ever reaches a backend.

use crate::error::{Error, Result};
use crate::kg::{normalize_label, KnowledgeTriple};

use super::{QueryId, RenderedPrompt, TemplateId};

/// Separator between relations in the extraction output.
pub const RELATION_SEPARATOR: &str = "<sep>";

fn entity(label: &str, slot: &str) -> Result<String> {
    let normalized = normalize_label(label);
    if normalized.is_empty() {
        return Err(Error::Validation(format!("{slot} entity is empty")));
    }
    Ok(normalized)
}

/// Prompt asking the model for `k` relations between `subject` and `object`.
///
/// The count is substituted verbatim, so `k = 1` renders "1 types".
pub fn render_relation_extraction(
    query: &str,
    answer: &str,
    subject: &str,
    object: &str,
    k: usize,
) -> Result<RenderedPrompt> {
    if k < 1 {
        return Err(Error::Validation("K must be at least 1".into()));
    }
    let subject = entity(subject, "subject")?;
    let object = entity(object, "object")?;
    let text = format!(
        "Based on the provided query and answer, identify {k} types of relationships between the subject <subject> \
         and the object <object>, considering the context of the query and answer. \
         <query>: {query} <answer>: {answer} <subject>: {subject} <object>: {object} <relation>: "
    );
    Ok(RenderedPrompt {
        template: TemplateId::RelationExtraction,
        text,
        query_id: QueryId::of(query),
        triple: None,
    })
}

/// Prompt whose continuation is the relation needed to answer `query`.
pub fn render_retrieve(query: &str, subject: &str) -> Result<RenderedPrompt> {
    let subject = entity(subject, "query")?;
    Ok(RenderedPrompt {
        template: TemplateId::Retrieve,
        text: format!("To answer the query: {query}, I need information {subject} "),
        query_id: QueryId::of(query),
        triple: None,
    })
}

/// Prompt whose continuation is the answer to `query` given one retrieved fact.
pub fn render_reasoning(query: &str, triple: &KnowledgeTriple) -> RenderedPrompt {
    RenderedPrompt {
        template: TemplateId::Reasoning,
        text: format!(
            "Answer the query considering the user's personalized facts. <question>: {query} <facts>: {triple} <answer>: "
        ),
        query_id: QueryId::of(query),
        triple: Some(triple.clone()),
    }
}

/// Reasoning prompt used when nothing can be retrieved for the query entity.
pub fn render_unretrieved(query: &str) -> RenderedPrompt {
    RenderedPrompt {
        template: TemplateId::Reasoning,
        text: format!("Answer the query. <question>: {query} <answer>: "),
        query_id: QueryId::of(query),
        triple: None,
    }
}

/// Split a `r1 <sep> r2 <sep> ...` generation into at most `k` distinct relations.
pub fn parse_relation_list(raw: &str, k: usize) -> Result<Vec<String>> {
    let mut relations: Vec<String> = Vec::new();
    for item in raw.split(RELATION_SEPARATOR) {
        let label = normalize_label(item);
        if label.is_empty() || relations.contains(&label) {
            continue;
        }
        relations.push(label);
    }
    relations.truncate(k);
    if relations.is_empty() {
        return Err(Error::ExtractionFailure(format!(
            "no relations found in model output {raw:?}"
        )));
    }
    Ok(relations)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extraction_prompt_substitutes_all_slots_in_order() {
        let p = render_relation_extraction("What does my dog eat?", "vegetables", "Dog", "Vegetable", 5).unwrap();
        assert!(p.text.contains("identify 5 types of relationships"));
        let order = ["identify 5", "<query>: What does my dog eat?", "<answer>: vegetables", "<subject>: Dog", "<object>: Vegetable"];
        let positions: Vec<usize> = order.iter().map(|s| p.text.find(s).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert!(p.text.ends_with("<relation>: "));
        assert!(!p.text.contains("[MASK]"));
        assert_eq!(p.template, TemplateId::RelationExtraction);
    }

    #[test]
    fn extraction_prompt_k1_is_literal() {
        let p = render_relation_extraction("q", "a", "s", "o", 1).unwrap();
        assert!(p.text.contains("identify 1 types of relationships"));
    }

    #[test]
    fn extraction_prompt_rejects_k0_and_empty_entities() {
        assert!(matches!(render_relation_extraction("q", "a", "s", "o", 0), Err(Error::Validation(_))));
        assert!(render_relation_extraction("q", "a", " ", "o", 2).is_err());
    }

    #[test]
    fn rendering_is_pure() {
        let z = KnowledgeTriple::new("Dog", "Enjoy", "Vegetable").unwrap();
        assert_eq!(render_reasoning("q", &z), render_reasoning("q", &z));
        assert_eq!(render_retrieve("q", "Dog").unwrap(), render_retrieve("q", "Dog").unwrap());
        assert_eq!(
            render_relation_extraction("q", "a", "s", "o", 3).unwrap().text,
            render_relation_extraction("q", "a", "s", "o", 3).unwrap().text
        );
    }

    #[test]
    fn retrieve_prompt_text() {
        let p = render_retrieve("What food should I order for my dog?", "Dog").unwrap();
        assert_eq!(p.text, "To answer the query: What food should I order for my dog?, I need information Dog ");
        assert!(render_retrieve("q", "").is_err());
    }

    #[test]
    fn reasoning_prompt_serializes_triple() {
        let z = KnowledgeTriple::new("Dog", "Enjoy", "Vegetable").unwrap();
        let p = render_reasoning("What should I feed my dog?", &z);
        assert!(p.text.contains("<facts>: (Dog, Enjoy, Vegetable)"));
        assert!(p.text.ends_with("<answer>: "));
        let other = KnowledgeTriple::new("Dog", "Enjoy", "Meat").unwrap();
        assert_ne!(p.text, render_reasoning("What should I feed my dog?", &other).text);
    }

    #[test]
    fn relation_list_parsing() {
        assert_eq!(parse_relation_list("Enjoy <sep> Eats <sep> Prefers", 3).unwrap(), ["Enjoy", "Eats", "Prefers"]);
        assert_eq!(parse_relation_list("Enjoy <sep> Enjoy <sep> Eats", 3).unwrap(), ["Enjoy", "Eats"]);
        assert_eq!(parse_relation_list("a<sep>b<sep>c<sep>d", 2).unwrap(), ["a", "b"]);
        assert!(matches!(parse_relation_list("<sep><sep>", 4), Err(Error::ExtractionFailure(_))));
        assert!(parse_relation_list("", 1).is_err());
    }
}
