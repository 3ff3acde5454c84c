use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::BackendError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    AbstractGeneration,
    StrategyPlanning,
    ExplanationGeneration,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [
        PromptKind::AbstractGeneration,
        PromptKind::StrategyPlanning,
        PromptKind::ExplanationGeneration,
    ];

    pub fn template(self) -> &'static str {
        match self {
            Self::AbstractGeneration => ABSTRACT_TEMPLATE,
            Self::StrategyPlanning => STRATEGY_TEMPLATE,
            Self::ExplanationGeneration => EXPLANATION_TEMPLATE,
        }
    }

    /// Placeholder names appearing in the template, in first-use order.
    pub fn placeholders(self) -> Vec<&'static str> {
        let mut names = Vec::new();
        for seg in parse(self.template()) {
            if let Segment::Field(name) = seg {
                if !names.contains(&name) {
                    names.push(name);
                }
            }
        }
        names
    }
}

/// Named substitutions for a template.
pub type PromptFields = BTreeMap<String, String>;

/// Builds a [`PromptFields`] map from literal pairs.
pub fn fields<const N: usize>(pairs: [(&str, String); N]) -> PromptFields {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

const ABSTRACT_TEMPLATE: &str = "\
You are the on-device assistant of a recommender system. Prepare a short abstract of the user's \
situation for a remote planner. The planner must never see identifiers, item names, or the \
user's exact words.

1. Rewrite the request into a sanitized query that keeps its intent but drops identifiers and \
personal details. The identifier to remove is: {user_id}
2. Write a behavioral summary describing interaction sparsity, long-term preference trends and \
recent short-term interests. Do not mention any specific item.

Domain: {domain}
Request: {query}

History statistics:
- number of interactions: {interaction_count}
- most frequent tags: {dominant_tags}
- most recent tag: {recent_tag}
- days since last interaction: {days_since_last}

Interacted items, oldest first:
{history}

Reply with one JSON object: {\"sanitized_query\": \"...\", \"behavioral_summary\": \"...\"}
";

const STRATEGY_TEMPLATE: &str = "\
You are the planning agent of a cloud-device recommender. Read the user abstract and decide how \
each module runs.

Semantic user modeling: choose alpha in [0,1], the weight of the sanitized query against the \
behavioral summary. A clear query deserves more weight; rich and recent behavior deserves less.
Candidate retrieval: pick tag groups relevant to the user and how many items to retrieve from \
each. Use exactly 3, 5, 10 or 20 tags, with counts summing to exactly 500, 1000, 2000 or 5000. \
Vague intent or sparse history needs broad retrieval; clear intent with rich behavior needs a \
small focused pool. Dynamic domains favor larger, more diverse pools; static domains favor \
compact ones.
Structured user modeling: decide whether it is needed from interaction density and recency, \
and choose the encoder: \"attention\" for clear sequential patterns, \"graph\" for shifting \
interests and item-to-item transitions.
Final ranking: choose beta in [0,1], the weight of the semantic embedding against the \
structured one.

Domain: {domain} ({domain_character})
Sanitized query: {sanitized_query}
Behavioral summary: {behavioral_summary}
History density: {sparsity}; recency: {recency}
Available tags (most popular first): {tag_vocabulary}
Attribute vocabulary: {attribute_terms}

Reply with one JSON object and nothing else:
{\"alpha\": 0.5, \"beta\": 0.5, \"structured_enabled\": true, \"encoder\": \"attention\",
 \"tag_weights\": {\"tag\": 100},
 \"justifications\": {\"semantic_user_modeling\": \"...\", \"candidate_retrieval\": \"...\",
 \"structured_user_modeling\": \"...\", \"final_ranking\": \"...\"}}
";

const EXPLANATION_TEMPLATE: &str = "\
You are the on-device assistant of a recommender system. Explain to the user, in one sentence \
per item, why each recommended item was chosen. Base every sentence on the plan and its \
execution log. Keep the order of the list and write one line per item.

Plan:
{plan}

Execution log:
{execution_log}

Recommended items:
{recommendations}
";

enum Segment<'a> {
    Text(&'a str),
    Field(&'a str),
}

/// Splits a template into literal text and `{name}` placeholders. A brace not
/// followed by `[a-z_]+}` is literal.
fn parse(template: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let bytes = template.as_bytes();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j] == b'_') {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b'}' {
                if start < i {
                    out.push(Segment::Text(&template[start..i]));
                }
                out.push(Segment::Field(&template[i + 1..j]));
                i = j + 1;
                start = i;
                continue;
            }
        }
        i += 1;
    }
    if start < template.len() {
        out.push(Segment::Text(&template[start..]));
    }
    out
}

/// The exact prompt text for `kind`; a pure function of its inputs.
pub fn render_prompt(kind: PromptKind, fields: &PromptFields) -> Result<String, BackendError> {
    let mut out = String::with_capacity(kind.template().len() + 256);
    for seg in parse(kind.template()) {
        match seg {
            Segment::Text(t) => out.push_str(t),
            Segment::Field(name) => {
                let value = fields
                    .get(name)
                    .ok_or_else(|| BackendError::Template(name.to_string()))?;
                out.push_str(value);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(kind: PromptKind) -> PromptFields {
        kind.placeholders()
            .into_iter()
            .map(|n| (n.to_string(), format!("<{n}>")))
            .collect()
    }

    #[test]
    fn every_kind_renders_with_all_fields() {
        for kind in PromptKind::ALL {
            let text = render_prompt(kind, &full(kind)).unwrap();
            for name in kind.placeholders() {
                assert!(text.contains(&format!("<{name}>")));
            }
            assert_eq!(text, render_prompt(kind, &full(kind)).unwrap());
        }
    }

    #[test]
    fn json_braces_are_literal() {
        let names = PromptKind::StrategyPlanning.placeholders();
        assert!(!names.contains(&"tag"));
        let text = render_prompt(PromptKind::StrategyPlanning, &full(PromptKind::StrategyPlanning)).unwrap();
        assert!(text.contains("{\"alpha\": 0.5"));
    }

    #[test]
    fn missing_placeholder_is_named() {
        let mut f = full(PromptKind::AbstractGeneration);
        f.remove("history");
        match render_prompt(PromptKind::AbstractGeneration, &f) {
            Err(BackendError::Template(name)) => assert_eq!(name, "history"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
