//! The device node: abstract generation, structured modeling, final ranking
//! and explanations. Raw history and the raw query never leave this module
//! except through [`Abstract`].

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

use crate::domain::{
    Abstract, CandidateSet, Catalog, DomainError, Query, RecencyLabel, RecommendationList, SparsityLabel, StrategyPlan,
    UserHistory,
};
use crate::encoders::{encode, EncoderError, EncoderParams};
use crate::lm::{
    fields, sanitize_query, summarize_stats, BackendError, HistoryStats, PromptKind, StubBackend, TextBackend,
    EMPTY_SUMMARY,
};
use crate::vecmath::{dot, fuse, top_k, Embedding, VecError};

const SECONDS_PER_DAY: i64 = 86_400;
const DOMINANT_TAGS: usize = 3;
const RECENT_WINDOW: usize = 5;
const GENERIC_QUERY: &str = "general recommendation request";
const GENERIC_SUMMARY: &str = "interaction history available";

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Vec(#[from] VecError),
    #[error("candidate {0:?} is not in the device catalog")]
    UnknownCandidate(String),
    #[error("explanations need at least one recommendation")]
    EmptyRecommendations,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("beta {0} out of [0,1]")]
    Weight(f64),
}

/// Strings that must never appear in a device→cloud payload: the history's
/// item ids and the raw query text. Strings equal to a catalog tag name are
/// public vocabulary and are left out.
pub fn privacy_terms(query: &Query, history: &UserHistory, catalog: &Catalog) -> BTreeSet<String> {
    history
        .item_ids()
        .map(str::to_string)
        .chain(std::iter::once(query.text.trim().to_string()))
        .filter(|t| !t.is_empty() && !catalog.vocab().contains(t))
        .collect()
}

/// Removes every occurrence of every term, longest first, until none is
/// left, then collapses whitespace.
pub fn scrub<S: AsRef<str>>(text: &str, terms: &[S]) -> String {
    let mut sorted: Vec<&str> = terms
        .iter()
        .map(AsRef::as_ref)
        .filter(|t| !t.trim().is_empty())
        .collect();
    sorted.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    let mut out = text.to_string();
    // each pass strictly shrinks the non-space content, so this terminates
    while sorted.iter().any(|t| out.contains(t)) {
        for term in &sorted {
            out = out.replace(term, " ");
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Counts derived from the history; item identities are not retained.
pub fn history_stats(history: &UserHistory, catalog: &Catalog, now: i64) -> HistoryStats {
    let items: Vec<_> = history.item_ids().filter_map(|id| catalog.get(id)).collect();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for item in &items {
        for tag in &item.tags {
            *counts.entry(tag.as_str()).or_insert(0) += 1;
        }
    }
    let vocab = catalog.vocab();
    let mut dominant: Vec<(&str, usize)> = counts.into_iter().collect();
    dominant.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then_with(|| vocab.popularity(b.0).cmp(&vocab.popularity(a.0)))
            .then_with(|| a.0.cmp(b.0))
    });

    // most frequent tag among the last few items; later mentions win ties
    let mut recent: Vec<(&str, usize, usize)> = Vec::new();
    let window = &items[items.len().saturating_sub(RECENT_WINDOW)..];
    for (pos, item) in window.iter().enumerate() {
        for tag in &item.tags {
            match recent.iter_mut().find(|(t, _, _)| t == tag) {
                Some(entry) => {
                    entry.1 += 1;
                    entry.2 = pos;
                }
                None => recent.push((tag, 1, pos)),
            }
        }
    }
    let recent_tag = recent
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(a.2.cmp(&b.2)))
        .map(|(t, _, _)| t.to_string());

    HistoryStats {
        interaction_count: history.len(),
        dominant_tags: dominant
            .iter()
            .take(DOMINANT_TAGS)
            .map(|(t, _)| t.to_string())
            .collect(),
        recent_tag,
        days_since_last: history
            .interactions()
            .last()
            .map(|i| ((now - i.timestamp) / SECONDS_PER_DAY).max(0)),
    }
}

pub fn recency_label(history: &UserHistory, now: i64, staleness_days: i64) -> RecencyLabel {
    match history.interactions().last() {
        Some(i) if now - i.timestamp <= staleness_days * SECONDS_PER_DAY => RecencyLabel::Recent,
        _ => RecencyLabel::Stale,
    }
}

#[derive(Debug, Deserialize)]
struct AbstractReply {
    sanitized_query: String,
    behavioral_summary: String,
}

fn parse_abstract_reply(text: &str) -> Option<AbstractReply> {
    let parsed = serde_json::from_str::<AbstractReply>(text.trim()).ok().or_else(|| {
        let (start, end) = (text.find('{')?, text.rfind('}')?);
        (start < end)
            .then(|| serde_json::from_str(&text[start..=end]).ok())
            .flatten()
    })?;
    (!parsed.sanitized_query.trim().is_empty() && !parsed.behavioral_summary.trim().is_empty()).then_some(parsed)
}

/// The abstract plus how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct AbstractOutcome {
    pub abstract_: Abstract,
    /// Set when the deterministic fallback replaced the backend's answer.
    pub fallback: Option<String>,
}

#[derive(Clone)]
pub struct DeviceAgent {
    backend: Arc<dyn TextBackend>,
    catalog: Arc<Catalog>,
    params: Arc<EncoderParams>,
    domain_tag: String,
}

impl DeviceAgent {
    pub fn new(
        backend: Arc<dyn TextBackend>,
        catalog: Arc<Catalog>,
        params: Arc<EncoderParams>,
        domain_tag: impl Into<String>,
    ) -> Self {
        Self {
            backend,
            catalog,
            params,
            domain_tag: domain_tag.into(),
        }
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    /// Builds the abstract with the device backend, then scrubs history item
    /// ids from both texts. A backend error, an unusable reply or a reply
    /// that still contains the raw query is replaced by the deterministic
    /// abstract built from history statistics.
    pub fn generate_abstract(
        &self,
        query: &Query,
        history: &UserHistory,
        now: i64,
        staleness_days: i64,
    ) -> Result<AbstractOutcome, DeviceError> {
        let catalog = &*self.catalog;
        let stats = history_stats(history, catalog, now);
        let ids: Vec<&str> = history.item_ids().collect();
        let raw_query = query.text.trim();
        let leaks_query = |s: &str| !catalog.vocab().contains(raw_query) && s.contains(raw_query);

        let mut prompt = fields([
            ("user_id", query.user_id.clone()),
            ("domain", self.domain_tag.clone()),
            ("query", query.text.clone()),
            (
                "history",
                history
                    .item_ids()
                    .map(|id| catalog.get(id).map_or_else(|| id.to_string(), |i| i.describe()))
                    .collect::<Vec<_>>()
                    .join("\n"),
            ),
        ]);
        stats.to_fields(&mut prompt);

        let reply = self
            .backend
            .complete(PromptKind::AbstractGeneration, &prompt)
            .map_err(|e| format!("abstract backend failed: {e}"))
            .and_then(|text| parse_abstract_reply(&text).ok_or_else(|| "unusable abstract reply".to_string()))
            .and_then(|r| {
                let q = scrub(&r.sanitized_query, &ids);
                let mut s = scrub(&r.behavioral_summary, &ids);
                if history.is_empty() {
                    s = EMPTY_SUMMARY.to_string();
                }
                if q.is_empty() || s.is_empty() {
                    Err("abstract empty after scrubbing item ids".to_string())
                } else if leaks_query(&q) || leaks_query(&s) {
                    Err("abstract repeats the raw query".to_string())
                } else {
                    Ok((q, s))
                }
            });

        match reply {
            Ok((sanitized_query, behavioral_summary)) => Ok(AbstractOutcome {
                abstract_: Abstract {
                    sanitized_query,
                    behavioral_summary,
                    domain_tag: query.domain_tag.clone(),
                    sparsity_label: SparsityLabel::from_len(history.len()),
                    recency_label: recency_label(history, now, staleness_days),
                },
                fallback: None,
            }),
            Err(reason) => {
                log::warn!("{reason}; using the deterministic abstract");
                Ok(AbstractOutcome {
                    abstract_: self.fallback_abstract(query, history, now, staleness_days),
                    fallback: Some(reason),
                })
            }
        }
    }

    /// Keyword rewrite of the query and a statistics-only summary, free of
    /// every privacy term.
    pub fn fallback_abstract(&self, query: &Query, history: &UserHistory, now: i64, staleness_days: i64) -> Abstract {
        let stats = history_stats(history, &self.catalog, now);
        let terms: Vec<String> = privacy_terms(query, history, &self.catalog).into_iter().collect();
        let mut q = sanitize_query(&query.text, &query.user_id);
        if terms.iter().any(|t| q.contains(t.as_str())) {
            q = GENERIC_QUERY.to_string();
        }
        let mut s = scrub(&summarize_stats(&stats), &terms);
        if s.is_empty() {
            s = GENERIC_SUMMARY.to_string();
        }
        Abstract {
            sanitized_query: q,
            behavioral_summary: s,
            domain_tag: query.domain_tag.clone(),
            sparsity_label: SparsityLabel::from_len(history.len()),
            recency_label: recency_label(history, now, staleness_days),
        }
    }

    pub fn structured_user_embedding(
        &self,
        history: &UserHistory,
        plan: &StrategyPlan,
    ) -> Result<(Option<Embedding>, Option<String>), DeviceError> {
        structured_user_embedding(history, plan, &self.params, &self.catalog)
    }

    pub fn final_rank(
        &self,
        sem: &Embedding,
        structured: Option<&Embedding>,
        beta: f64,
        candidates: &CandidateSet,
        k: usize,
    ) -> Result<(RecommendationList, Option<String>), DeviceError> {
        final_rank(sem, structured, beta, candidates, k, &self.params, &self.catalog)
    }

    /// One sentence per recommendation. Falls back to the built-in template
    /// when the backend fails.
    pub fn generate_explanation(
        &self,
        plan: &StrategyPlan,
        recs: &RecommendationList,
        execution_log: &str,
    ) -> Result<String, DeviceError> {
        if recs.ranked.is_empty() {
            return Err(DeviceError::EmptyRecommendations);
        }
        let plan_json = serde_json::to_string(plan).expect("plan serializes");
        let lines: Vec<String> = recs
            .ranked
            .iter()
            .enumerate()
            .map(|(n, (id, _))| match self.catalog.get(id) {
                Some(item) => format!("{}. {} | tags: {}", n + 1, item.title, item.tags.join(", ")),
                None => format!("{}. {id}", n + 1),
            })
            .collect();
        let prompt = fields([
            ("plan", plan_json),
            ("execution_log", execution_log.to_string()),
            ("recommendations", lines.join("\n")),
        ]);
        match self.backend.complete(PromptKind::ExplanationGeneration, &prompt) {
            Ok(text) if !text.trim().is_empty() => Ok(text.trim().to_string()),
            other => {
                if let Err(e) = other {
                    log::warn!("explanation backend failed: {e}; using the template");
                }
                Ok(StubBackend::new().complete(PromptKind::ExplanationGeneration, &prompt)?)
            }
        }
    }
}

/// `None` when the plan disables structured modeling. An empty history with
/// structured modeling enabled also yields `None`, with a warning.
pub fn structured_user_embedding(
    history: &UserHistory,
    plan: &StrategyPlan,
    params: &EncoderParams,
    catalog: &Catalog,
) -> Result<(Option<Embedding>, Option<String>), DeviceError> {
    if !plan.structured_enabled {
        return Ok((None, None));
    }
    if history.is_empty() {
        log::warn!("structured modeling enabled for an empty history");
        return Ok((
            None,
            Some("structured modeling enabled for an empty history; skipped".into()),
        ));
    }
    let rows = history.rows(catalog)?;
    Ok((Some(encode(plan.encoder, &rows, params)?), None))
}

/// Scores candidates against `β·sem + (1−β)·str` (or `sem` alone) and keeps
/// the top k. Ties go to the smaller item id.
pub fn final_rank(
    sem: &Embedding,
    structured: Option<&Embedding>,
    beta: f64,
    candidates: &CandidateSet,
    k: usize,
    params: &EncoderParams,
    catalog: &Catalog,
) -> Result<(RecommendationList, Option<String>), DeviceError> {
    if k == 0 {
        return Err(DeviceError::ZeroK);
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(DeviceError::Weight(beta));
    }
    if candidates.is_empty() {
        log::warn!("no candidates to rank");
        return Ok((
            RecommendationList { ranked: Vec::new(), k },
            Some("empty candidate set".into()),
        ));
    }
    let user = match structured {
        Some(s) => fuse(sem, s, beta)?,
        None => sem.clone(),
    };
    if user.dim() != params.dim() {
        return Err(VecError::Dimension {
            expected: params.dim(),
            got: user.dim(),
        }
        .into());
    }
    let scored: Vec<(&str, f64)> = candidates
        .item_ids
        .iter()
        .map(|id| {
            let row = catalog
                .row_of(id)
                .ok_or_else(|| DeviceError::UnknownCandidate(id.clone()))?;
            Ok((id.as_str(), dot(&user.0, params.item_table.row(row))))
        })
        .collect::<Result<_, DeviceError>>()?;
    let ranked = top_k(scored, k)
        .into_iter()
        .map(|(id, s)| (id.to_string(), s))
        .collect();
    Ok((RecommendationList { ranked, k }, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{EncoderKind, Interaction, ItemRecord};
    use crate::encoders::{encode_attention, encode_graph};
    use crate::vecmath::Matrix;
    use indexmap::IndexMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn catalog() -> Arc<Catalog> {
        let items = (0..6)
            .map(|i| ItemRecord {
                item_id: format!("it-{i:03}"),
                title: format!("Title {i}"),
                attributes: "acme".into(),
                tags: vec![format!("genre{}", i % 3)],
                geo: None,
            })
            .collect();
        Arc::new(Catalog::new(items).unwrap())
    }

    fn params() -> Arc<EncoderParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = Matrix::from_vec(6, 3, (0..18).map(|i| ((i * 5) % 7) as f64 / 7.0 - 0.4).collect()).unwrap();
        Arc::new(EncoderParams::init(table, 10, &mut rng))
    }

    fn history(n: usize) -> UserHistory {
        let inter = (0..n)
            .map(|i| Interaction::new(format!("it-{:03}", i % 6), 1000 * i as i64).unwrap())
            .collect();
        UserHistory::new("u1", inter, 200)
    }

    fn agent(backend: Arc<dyn TextBackend>) -> DeviceAgent {
        DeviceAgent::new(backend, catalog(), params(), "test")
    }

    fn plan(structured: bool, encoder: EncoderKind) -> StrategyPlan {
        StrategyPlan {
            alpha: 0.5,
            beta: 0.5,
            structured_enabled: structured,
            encoder,
            tag_weights: IndexMap::new(),
            justifications: Default::default(),
        }
    }

    #[test]
    fn scrub_removes_nested_terms() {
        assert_eq!(scrub("a it-001 b", &["it-001"]), "a b");
        // removal leaves a gap, so no new occurrence can form
        assert_eq!(scrub("it-0it-0011", &["it-001"]), "it-0 1");
        assert_eq!(scrub("xx it-0012 yy", &["it-001", "it-0012"]), "xx yy");
    }

    #[test]
    fn three_interactions_are_sparse() {
        let a = agent(Arc::new(StubBackend::new()));
        let q = Query::new("u1", "looking for genre1 things", "test").unwrap();
        let out = a.generate_abstract(&q, &history(3), 3000, 30).unwrap();
        assert_eq!(out.abstract_.sparsity_label, SparsityLabel::Sparse);
        assert_eq!(out.abstract_.recency_label, RecencyLabel::Recent);
        assert!(out.fallback.is_none());
        let stale = a
            .generate_abstract(&q, &history(3), 2000 + 31 * SECONDS_PER_DAY, 30)
            .unwrap();
        assert_eq!(stale.abstract_.recency_label, RecencyLabel::Stale);
    }

    #[test]
    fn empty_history_summary() {
        let a = agent(Arc::new(StubBackend::new()));
        let q = Query::new("u1", "anything good", "test").unwrap();
        let out = a.generate_abstract(&q, &UserHistory::empty("u1"), 0, 30).unwrap();
        assert_eq!(out.abstract_.behavioral_summary, EMPTY_SUMMARY);
    }

    struct Echo(String);

    impl TextBackend for Echo {
        fn name(&self) -> &str {
            "echo"
        }
        fn embed_text(&self, _: &str) -> Result<crate::lm::RawVector, BackendError> {
            Err(BackendError::Input("unused".into()))
        }
        fn complete(&self, _: PromptKind, _: &crate::lm::PromptFields) -> Result<String, BackendError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn item_ids_are_stripped_from_the_summary() {
        let reply =
            r#"{"sanitized_query":"request about genre1","behavioral_summary":"likes it-001 and it-002 a lot"}"#;
        let a = agent(Arc::new(Echo(reply.into())));
        let q = Query::new("u1", "looking for genre1 things", "test").unwrap();
        let out = a.generate_abstract(&q, &history(4), 4000, 30).unwrap();
        assert_eq!(out.abstract_.behavioral_summary, "likes and a lot");
        assert!(out.fallback.is_none());
    }

    #[test]
    fn raw_query_echo_triggers_fallback() {
        let reply = r#"{"sanitized_query":"request","behavioral_summary":"user said: looking for genre1 things"}"#;
        let a = agent(Arc::new(Echo(reply.into())));
        let q = Query::new("u1", "looking for genre1 things", "test").unwrap();
        let out = a.generate_abstract(&q, &history(4), 4000, 30).unwrap();
        assert!(out.fallback.is_some());
        assert_eq!(out.abstract_.sanitized_query, "request about genre1 things");
        assert!(!out.abstract_.behavioral_summary.contains("looking for genre1 things"));
    }

    #[test]
    fn fallback_query_never_contains_the_raw_query() {
        let a = agent(Arc::new(Echo("garbage".into())));
        let q = Query::new("u1", "zebra", "test").unwrap();
        let out = a.generate_abstract(&q, &history(2), 0, 30).unwrap();
        assert_eq!(out.abstract_.sanitized_query, GENERIC_QUERY);
    }

    #[test]
    fn structured_dispatch() {
        let (p, c) = (params(), catalog());
        let h = history(4);
        let rows = h.rows(&c).unwrap();
        let (att, _) = structured_user_embedding(&h, &plan(true, EncoderKind::Attention), &p, &c).unwrap();
        assert_eq!(att.unwrap(), encode_attention(&rows, &p).unwrap());
        let (gr, _) = structured_user_embedding(&h, &plan(true, EncoderKind::Graph), &p, &c).unwrap();
        assert_eq!(gr.unwrap(), encode_graph(&rows, &p).unwrap());
        let (none, warn) = structured_user_embedding(&h, &plan(false, EncoderKind::Graph), &p, &c).unwrap();
        assert!(none.is_none() && warn.is_none());
        let (none, warn) =
            structured_user_embedding(&UserHistory::empty("u"), &plan(true, EncoderKind::Graph), &p, &c).unwrap();
        assert!(none.is_none() && warn.is_some());
    }

    #[test]
    fn ranking_only_scores_candidates() {
        let (p, c) = (params(), catalog());
        let cands = CandidateSet {
            item_ids: vec!["it-004".into(), "it-001".into()],
            per_tag_counts: IndexMap::new(),
        };
        let sem = Embedding(vec![1.0, 0.0, 0.0]);
        let (list, _) = final_rank(&sem, None, 0.3, &cands, 10, &p, &c).unwrap();
        assert_eq!(list.ranked.len(), 2);
        assert!(list.ranked[0].1 >= list.ranked[1].1);
        let (empty, diag) = final_rank(&sem, None, 0.3, &CandidateSet::default(), 10, &p, &c).unwrap();
        assert!(empty.ranked.is_empty() && diag.is_some());
    }

    #[test]
    fn explanation_has_one_sentence_per_item() {
        let a = agent(Arc::new(StubBackend::new()));
        let recs = RecommendationList {
            ranked: vec![("it-001".into(), 1.0), ("it-002".into(), 0.5)],
            k: 2,
        };
        let text = a
            .generate_explanation(&plan(true, EncoderKind::Attention), &recs, "")
            .unwrap();
        assert_eq!(text.lines().count(), 2);
        let empty = RecommendationList { ranked: vec![], k: 2 };
        assert!(a
            .generate_explanation(&plan(true, EncoderKind::Attention), &empty, "")
            .is_err());
    }
}
