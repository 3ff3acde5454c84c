//! Deterministic rule-based backend.
//!
//! Embeddings are bag-of-token vectors: every token maps to a fixed random
//! unit direction seeded from its SHA-256 digest, plus a small whole-text
//! component so distinct strings never collide. Completions are built from
//! the prompt fields with fixed rules, never from sampling.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{render_prompt, BackendError, PromptFields, PromptKind, RawVector, TextBackend};
use crate::domain::{apportion, tokenize, EncoderKind, SparsityLabel, ALLOWED_TAG_COUNTS, STAGES};

/// Embedding width of the stub.
pub const STUB_DIM: usize = 64;

/// Summary text used when a user has no interactions.
pub const EMPTY_SUMMARY: &str = "no interaction history";

const WHOLE_TEXT_WEIGHT: f64 = 0.25;

const STOPWORDS: &[&str] = &[
    "a",
    "about",
    "all",
    "am",
    "an",
    "and",
    "any",
    "are",
    "as",
    "at",
    "be",
    "by",
    "can",
    "could",
    "do",
    "for",
    "from",
    "get",
    "give",
    "hello",
    "hey",
    "hi",
    "i",
    "im",
    "in",
    "is",
    "it",
    "like",
    "looking",
    "me",
    "mine",
    "my",
    "need",
    "of",
    "on",
    "or",
    "please",
    "recommend",
    "request",
    "show",
    "some",
    "something",
    "suggest",
    "that",
    "the",
    "thanks",
    "this",
    "to",
    "user",
    "want",
    "we",
    "with",
    "would",
    "you",
];

#[derive(Debug, Clone, Default)]
pub struct StubBackend;

impl StubBackend {
    pub fn new() -> Self {
        Self
    }
}

fn seeded_direction(seed_text: &[u8], salt: &[u8]) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(salt);
    hasher.update(seed_text);
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..STUB_DIM).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

impl TextBackend for StubBackend {
    fn name(&self) -> &str {
        "stub"
    }

    fn embed_text(&self, text: &str) -> Result<RawVector, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::Input("cannot embed empty text".into()));
        }
        let mut acc = vec![0.0; STUB_DIM];
        for token in tokenize(text) {
            let dir = normalize(seeded_direction(token.as_bytes(), b"token:"));
            acc.iter_mut().zip(&dir).for_each(|(a, d)| *a += d);
        }
        let whole = normalize(seeded_direction(text.as_bytes(), b"text:"));
        acc.iter_mut()
            .zip(&whole)
            .for_each(|(a, d)| *a += WHOLE_TEXT_WEIGHT * d);
        Ok(RawVector(normalize(acc)))
    }

    fn complete(&self, kind: PromptKind, fields: &PromptFields) -> Result<String, BackendError> {
        // same placeholder contract as a remote call
        render_prompt(kind, fields)?;
        let get = |name: &str| fields.get(name).map(String::as_str).unwrap_or_default();
        match kind {
            PromptKind::AbstractGeneration => {
                let stats = HistoryStats::from_fields(fields)?;
                Ok(json!({
                    "sanitized_query": sanitize_query(get("query"), get("user_id")),
                    "behavioral_summary": summarize_stats(&stats),
                })
                .to_string())
            }
            PromptKind::StrategyPlanning => {
                let signals = PlanSignals {
                    sanitized_query: get("sanitized_query").to_string(),
                    behavioral_summary: get("behavioral_summary").to_string(),
                    sparsity: match get("sparsity") {
                        "dense" => SparsityLabel::Dense,
                        "medium" => SparsityLabel::Medium,
                        _ => SparsityLabel::Sparse,
                    },
                    dynamic_domain: get("domain_character") == "dynamic",
                    tag_vocabulary: split_list(get("tag_vocabulary")),
                    attribute_terms: get("attribute_terms").split_whitespace().map(String::from).collect(),
                };
                Ok(stub_plan(&signals).to_string())
            }
            PromptKind::ExplanationGeneration => explain(get("plan"), get("recommendations")),
        }
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty() && *t != "none")
        .map(String::from)
        .collect()
}

/// Query tokens that carry intent: no stopwords, numbers, or identifier tokens.
pub fn content_tokens(text: &str, user_id: &str) -> Vec<String> {
    let uid = user_id.to_lowercase();
    let uid_tokens = tokenize(user_id);
    let mut out: Vec<String> = Vec::new();
    for t in tokenize(text) {
        if STOPWORDS.contains(&t.as_str())
            || t.chars().all(|c| c.is_ascii_digit())
            || (!uid.is_empty() && (t == uid || t.contains(&uid) || uid_tokens.contains(&t)))
        {
            continue;
        }
        if !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

/// Keyword rewrite of a query that drops identifiers and filler words.
pub fn sanitize_query(query: &str, user_id: &str) -> String {
    let tokens = content_tokens(query, user_id);
    if tokens.is_empty() {
        "general recommendation request".to_string()
    } else {
        format!("request about {}", tokens.join(" "))
    }
}

/// Derived history statistics; the only history facts a prompt may carry.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryStats {
    pub interaction_count: usize,
    /// Most frequent tags, most frequent first.
    pub dominant_tags: Vec<String>,
    pub recent_tag: Option<String>,
    pub days_since_last: Option<i64>,
}

impl HistoryStats {
    pub fn from_fields(fields: &PromptFields) -> Result<Self, BackendError> {
        let get = |name: &str| fields.get(name).map(String::as_str).unwrap_or_default();
        let interaction_count = get("interaction_count")
            .trim()
            .parse()
            .map_err(|_| BackendError::Input(format!("bad interaction_count {:?}", get("interaction_count"))))?;
        let recent = get("recent_tag").trim();
        Ok(Self {
            interaction_count,
            dominant_tags: split_list(get("dominant_tags")),
            recent_tag: (!recent.is_empty() && recent != "none").then(|| recent.to_string()),
            days_since_last: get("days_since_last").trim().parse().ok(),
        })
    }

    pub fn to_fields(&self, fields: &mut PromptFields) {
        fields.insert("interaction_count".into(), self.interaction_count.to_string());
        fields.insert(
            "dominant_tags".into(),
            if self.dominant_tags.is_empty() {
                "none".into()
            } else {
                self.dominant_tags.join(", ")
            },
        );
        fields.insert(
            "recent_tag".into(),
            self.recent_tag.clone().unwrap_or_else(|| "none".into()),
        );
        fields.insert(
            "days_since_last".into(),
            self.days_since_last.map_or_else(|| "n/a".into(), |d| d.to_string()),
        );
    }
}

pub fn summarize_stats(stats: &HistoryStats) -> String {
    if stats.interaction_count == 0 {
        return EMPTY_SUMMARY.to_string();
    }
    let bucket = SparsityLabel::from_len(stats.interaction_count).as_str();
    let dominant = if stats.dominant_tags.is_empty() {
        "unclear".to_string()
    } else {
        stats.dominant_tags.join(", ")
    };
    let mut text = format!(
        "{bucket} history with {} interactions; long-term preferences: {dominant}",
        stats.interaction_count
    );
    if let Some(tag) = &stats.recent_tag {
        text.push_str(&format!("; recent interest: {tag}"));
    }
    if let Some(days) = stats.days_since_last {
        text.push_str(&format!("; last active {days} days ago"));
    }
    text
}

/// Tags mentioned in `text`, in order of first mention. Multi-word tags must
/// appear as a contiguous token run.
pub fn mentioned_tags(text: &str, vocabulary: &[String]) -> Vec<String> {
    let tokens = tokenize(text);
    let mut hits: Vec<(usize, usize, &String)> = Vec::new();
    for (order, tag) in vocabulary.iter().enumerate() {
        let tag_tokens = tokenize(tag);
        if tag_tokens.is_empty() || tag_tokens.len() > tokens.len() {
            continue;
        }
        if let Some(pos) = tokens
            .windows(tag_tokens.len())
            .position(|w| w == tag_tokens.as_slice())
        {
            hits.push((pos, order, tag));
        }
    }
    hits.sort();
    hits.into_iter().map(|(_, _, t)| t.clone()).collect()
}

/// Fraction of the query's content tokens found in the catalog's tag or
/// attribute vocabulary; zero for a query with no content tokens.
pub fn clarity(sanitized_query: &str, tag_vocabulary: &[String], attribute_terms: &[String]) -> f64 {
    let tokens = content_tokens(sanitized_query, "");
    if tokens.is_empty() {
        return 0.0;
    }
    let vocab: BTreeSet<String> = tag_vocabulary
        .iter()
        .flat_map(|t| tokenize(t))
        .chain(attribute_terms.iter().flat_map(|t| tokenize(t)))
        .collect();
    tokens.iter().filter(|t| vocab.contains(*t)).count() as f64 / tokens.len() as f64
}

/// Everything the stub planner looks at.
#[derive(Debug, Clone)]
pub struct PlanSignals {
    pub sanitized_query: String,
    pub behavioral_summary: String,
    pub sparsity: SparsityLabel,
    pub dynamic_domain: bool,
    pub tag_vocabulary: Vec<String>,
    pub attribute_terms: Vec<String>,
}

/// The stub planner's rule table.
///
/// Weights follow query clarity (α = β = 0.25 + 0.5·clarity). Retrieval
/// breadth follows history density: sparse → 20 tags / 5000, medium →
/// 10 / 2000, dense → 5 / 1000 when clear, 3 / 500 when clarity > 0.75 and
/// 10 / 2000 when vague. Dynamic domains get the graph encoder.
pub fn stub_plan(signals: &PlanSignals) -> serde_json::Value {
    let c = clarity(
        &signals.sanitized_query,
        &signals.tag_vocabulary,
        &signals.attribute_terms,
    );
    let alpha = 0.25 + 0.5 * c;
    let (want_tags, total) = match signals.sparsity {
        SparsityLabel::Sparse => (20, 5000),
        SparsityLabel::Medium => (10, 2000),
        SparsityLabel::Dense if c > 0.75 => (3, 500),
        SparsityLabel::Dense if c >= 0.5 => (5, 1000),
        SparsityLabel::Dense => (10, 2000),
    };
    let n_tags = ALLOWED_TAG_COUNTS
        .iter()
        .copied()
        .filter(|&n| n <= want_tags && n <= signals.tag_vocabulary.len())
        .max()
        .unwrap_or(0);

    let query_tags = mentioned_tags(&signals.sanitized_query, &signals.tag_vocabulary);
    let summary_tags = mentioned_tags(&signals.behavioral_summary, &signals.tag_vocabulary);
    let mut chosen: Vec<(String, f64)> = Vec::new();
    let ranked = query_tags
        .iter()
        .map(|t| (t, 3.0))
        .chain(summary_tags.iter().map(|t| (t, 2.0)))
        .chain(signals.tag_vocabulary.iter().map(|t| (t, 1.0)));
    for (tag, weight) in ranked {
        if chosen.len() == n_tags {
            break;
        }
        if !chosen.iter().any(|(t, _)| t == tag) {
            chosen.push((tag.clone(), weight));
        }
    }
    let weights: Vec<f64> = chosen.iter().map(|(_, w)| *w).collect();
    let counts = apportion(&weights, total);
    let tag_weights: serde_json::Map<String, serde_json::Value> = chosen
        .iter()
        .zip(counts)
        .map(|((t, _), c)| (t.clone(), json!(c)))
        .collect();

    let structured = signals.behavioral_summary.trim() != EMPTY_SUMMARY;
    let encoder = if signals.dynamic_domain {
        EncoderKind::Graph
    } else {
        EncoderKind::Attention
    };
    let justifications = json!({
        STAGES[0]: format!("query clarity {c:.2}, so the query gets weight {alpha:.2} against the behavioral summary"),
        STAGES[1]: format!(
            "{} history and clarity {c:.2}: {n_tags} tag groups, {total} candidates, led by {}",
            signals.sparsity.as_str(),
            chosen.first().map_or("none", |(t, _)| t.as_str())
        ),
        STAGES[2]: if structured {
            format!("history available; {} encoder for a {} domain", encoder.as_str(),
                if signals.dynamic_domain { "dynamic" } else { "static" })
        } else {
            "no interaction history, structured modeling skipped".to_string()
        },
        STAGES[3]: format!("semantic weight {alpha:.2} mirrors query clarity"),
    });
    json!({
        "alpha": alpha,
        "beta": alpha,
        "structured_enabled": structured,
        "encoder": encoder.as_str(),
        "tag_weights": tag_weights,
        "justifications": justifications,
    })
}

fn explain(plan: &str, recommendations: &str) -> Result<String, BackendError> {
    let plan: serde_json::Value =
        serde_json::from_str(plan).map_err(|e| BackendError::Input(format!("plan field is not JSON: {e}")))?;
    let justification = |stage: &str| {
        plan["justifications"][stage]
            .as_str()
            .unwrap_or("selected by the ranking stage")
            .to_string()
    };
    let plan_tags: Vec<String> = plan["tag_weights"]
        .as_object()
        .map(|m| m.keys().cloned().collect())
        .unwrap_or_default();
    let mut out = Vec::new();
    for line in recommendations.lines().filter(|l| !l.trim().is_empty()) {
        let (head, tags) = line.split_once(" | tags: ").unwrap_or((line, ""));
        let title = head.split_once(". ").map_or(head, |(_, t)| t).trim();
        let shared: Vec<&str> = tags
            .split(',')
            .map(str::trim)
            .filter(|t| plan_tags.iter().any(|p| p == t))
            .collect();
        if shared.is_empty() {
            out.push(format!("{title} ranks highly for you: {}.", justification(STAGES[3])));
        } else {
            out.push(format!(
                "{title} matches your interest in {}: {}.",
                shared.join(" and "),
                justification(STAGES[1])
            ));
        }
    }
    Ok(out.join("\n"))
}
