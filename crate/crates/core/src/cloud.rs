//! The cloud node: strategy planning, semantic user modeling and
//! tag-partitioned candidate retrieval.

use std::collections::HashSet;
use std::sync::Arc;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    default_plan, repair_plan, validate_plan, Abstract, CandidateSet, Catalog, DomainError, RawPlan, StrategyPlan,
    TagVocab, STAGES,
};
use crate::lm::{fields, BackendError, PromptKind, TextBackend};
use crate::vecmath::{dot, fuse, project, top_k, Embedding, Matrix, Projection, VecError};

#[derive(Debug, Error)]
pub enum CloudError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Vec(#[from] VecError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("tag {0:?} is not in the index vocabulary")]
    UnknownTag(String),
    #[error("weight {0} out of [0,1]")]
    Weight(f64),
    #[error("embedding matrix has {rows} rows for {items} catalog items")]
    Shape { rows: usize, items: usize },
}

/// Per-domain planner context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainProfile {
    pub domain_tag: String,
    /// Music/news-like domains with fast-moving interests.
    pub dynamic: bool,
}

impl DomainProfile {
    pub fn character(&self) -> &'static str {
        if self.dynamic {
            "dynamic"
        } else {
            "static"
        }
    }
}

/// Tag-partitioned view of the item embeddings.
#[derive(Debug, Clone)]
pub struct ItemIndex {
    item_ids: Arc<Vec<String>>,
    /// Posting lists sorted by item id, keyed in vocabulary popularity order.
    postings: IndexMap<String, Vec<usize>>,
    vocab: TagVocab,
    embeddings: Arc<Matrix>,
}

impl ItemIndex {
    /// Builds posting lists for every catalog tag; `embeddings` row `r`
    /// belongs to catalog row `r`.
    pub fn build(catalog: &Catalog, embeddings: Arc<Matrix>) -> Result<Self, CloudError> {
        if embeddings.rows() != catalog.len() {
            return Err(CloudError::Shape {
                rows: embeddings.rows(),
                items: catalog.len(),
            });
        }
        let vocab = catalog.vocab().clone();
        let mut postings: IndexMap<String, Vec<usize>> =
            vocab.by_popularity().iter().map(|t| (t.clone(), Vec::new())).collect();
        for (row, item) in catalog.items().iter().enumerate() {
            for tag in &item.tags {
                if let Some(list) = postings.get_mut(tag) {
                    if list.last() != Some(&row) {
                        list.push(row);
                    }
                }
            }
        }
        let items = catalog.items();
        for list in postings.values_mut() {
            list.sort_by(|&a, &b| items[a].item_id.cmp(&items[b].item_id));
        }
        Ok(Self {
            item_ids: Arc::new(items.iter().map(|i| i.item_id.clone()).collect()),
            postings,
            vocab,
            embeddings,
        })
    }

    pub fn vocab(&self) -> &TagVocab {
        &self.vocab
    }

    pub fn posting(&self, tag: &str) -> Option<&[usize]> {
        self.postings.get(tag).map(Vec::as_slice)
    }

    pub fn postings(&self) -> &IndexMap<String, Vec<usize>> {
        &self.postings
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn item_id(&self, row: usize) -> &str {
        &self.item_ids[row]
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }
}

/// Per-tag top-N by dot product against `user_emb`, merged in plan order.
///
/// Ties inside a tag go to the smaller item id. An item selected under
/// several tags is kept once, at its first position; `per_tag_counts` counts
/// what each tag returned before deduplication. The plan is not checked
/// against the allowed tag counts or totals, only against the vocabulary.
pub fn retrieve_candidates(
    user_emb: &Embedding,
    tag_weights: &IndexMap<String, u32>,
    index: &ItemIndex,
) -> Result<CandidateSet, CloudError> {
    let d = index.embeddings.cols();
    if user_emb.dim() != d {
        return Err(VecError::Dimension {
            expected: d,
            got: user_emb.dim(),
        }
        .into());
    }
    let lists: Vec<(&str, u32, &[usize])> = tag_weights
        .iter()
        .map(|(tag, &n)| {
            index
                .posting(tag)
                .map(|p| (tag.as_str(), n, p))
                .ok_or_else(|| CloudError::UnknownTag(tag.clone()))
        })
        .collect::<Result<_, _>>()?;

    let per_tag: Vec<Vec<usize>> = lists
        .par_iter()
        .map(|&(_, n, posting)| {
            // position in the posting list orders ties by item id
            let scored: Vec<(usize, f64)> = posting
                .iter()
                .enumerate()
                .map(|(pos, &row)| (pos, dot(&user_emb.0, index.embeddings.row(row))))
                .collect();
            top_k(scored, n as usize)
                .into_iter()
                .map(|(pos, _)| posting[pos])
                .collect()
        })
        .collect();

    let mut seen = HashSet::new();
    let mut out = CandidateSet::default();
    for ((tag, _, _), rows) in lists.iter().zip(per_tag) {
        out.per_tag_counts.insert(tag.to_string(), rows.len());
        for row in rows {
            if seen.insert(row) {
                out.item_ids.push(index.item_ids[row].clone());
            }
        }
    }
    Ok(out)
}

/// How a plan was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub plan: StrategyPlan,
    /// Number of backend calls made.
    pub attempts: u32,
    pub repaired: bool,
    /// Set when the default plan replaced the backend's answer.
    pub fallback: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticOutcome {
    pub embedding: Embedding,
    pub alpha_used: f64,
    pub warning: Option<String>,
}

/// The cloud-side agent for one domain.
#[derive(Clone)]
pub struct CloudAgent {
    backend: Arc<dyn TextBackend>,
    profile: DomainProfile,
    vocab: TagVocab,
    attribute_terms: Vec<String>,
    projection: Arc<Projection>,
    index: Arc<ItemIndex>,
}

impl CloudAgent {
    pub fn new(
        backend: Arc<dyn TextBackend>,
        profile: DomainProfile,
        catalog: &Catalog,
        projection: Arc<Projection>,
        index: Arc<ItemIndex>,
    ) -> Self {
        Self {
            backend,
            profile,
            vocab: catalog.vocab().clone(),
            attribute_terms: catalog.attribute_terms(),
            projection,
            index,
        }
    }

    pub fn index(&self) -> &ItemIndex {
        &self.index
    }

    pub fn vocab(&self) -> &TagVocab {
        &self.vocab
    }

    pub fn profile(&self) -> &DomainProfile {
        &self.profile
    }

    /// Asks the backend for a plan. An answer that fails validation gets
    /// one more prompt with the violations attached; a second failure is
    /// repaired when parseable. Backend errors and unparseable answers fall
    /// back to the default plan, noted in every justification.
    pub fn plan_strategy(&self, abs: &Abstract) -> Result<PlanOutcome, CloudError> {
        let mut prompt = fields([
            ("domain", abs.domain_tag.clone()),
            ("domain_character", self.profile.character().to_string()),
            ("sanitized_query", abs.sanitized_query.clone()),
            ("behavioral_summary", abs.behavioral_summary.clone()),
            ("sparsity", abs.sparsity_label.as_str().to_string()),
            ("recency", abs.recency_label.as_str().to_string()),
            ("tag_vocabulary", self.vocab.by_popularity().join(", ")),
            ("attribute_terms", self.attribute_terms.join(" ")),
        ]);

        let mut last_raw: Option<RawPlan> = None;
        let mut failure = String::new();
        for attempt in 1..=2u32 {
            let reply = match self.backend.complete(PromptKind::StrategyPlanning, &prompt) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("planner backend failed: {e}");
                    return self.fallback(attempt, format!("planner backend failed: {e}"));
                }
            };
            match RawPlan::parse(&reply) {
                Ok(raw) => match validate_plan(&raw, &self.vocab) {
                    Ok(plan) => {
                        return Ok(PlanOutcome {
                            plan,
                            attempts: attempt,
                            repaired: false,
                            fallback: None,
                        })
                    }
                    Err(violations) => {
                        failure = violations.to_string();
                        last_raw = Some(raw);
                    }
                },
                Err(e) => failure = format!("unparseable plan: {e}"),
            }
            log::warn!("plan attempt {attempt} rejected: {failure}");
            let summary = format!(
                "{}\n(The previous answer was rejected: {failure}. Reply with one valid JSON object.)",
                abs.behavioral_summary
            );
            prompt.insert("behavioral_summary".into(), summary);
        }

        match last_raw {
            Some(raw) => Ok(PlanOutcome {
                plan: repair_plan(&raw, &self.vocab)?,
                attempts: 2,
                repaired: true,
                fallback: None,
            }),
            None => self.fallback(2, failure),
        }
    }

    fn fallback(&self, attempts: u32, reason: String) -> Result<PlanOutcome, CloudError> {
        let mut plan = default_plan(&self.vocab)?;
        for stage in STAGES {
            plan.justifications
                .insert(stage.to_string(), format!("fallback to the default plan ({reason})"));
        }
        Ok(PlanOutcome {
            plan,
            attempts,
            repaired: false,
            fallback: Some(reason),
        })
    }

    pub fn embed_projected(&self, text: &str) -> Result<Embedding, CloudError> {
        let raw = self.backend.embed_text(text)?;
        Ok(project(&raw.0, &self.projection)?)
    }

    /// `α·P(query) + (1−α)·P(summary)`. A blank summary forces α = 1.
    pub fn semantic_user_embedding(&self, abs: &Abstract, alpha: f64) -> Result<SemanticOutcome, CloudError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CloudError::Weight(alpha));
        }
        let query = self.embed_projected(&abs.sanitized_query)?;
        if abs.behavioral_summary.trim().is_empty() {
            let warning = (alpha < 1.0).then(|| {
                log::warn!("empty behavioral summary; semantic embedding uses the query alone");
                format!("empty behavioral summary: alpha {alpha} replaced by 1")
            });
            return Ok(SemanticOutcome {
                embedding: query,
                alpha_used: 1.0,
                warning,
            });
        }
        let summary = self.embed_projected(&abs.behavioral_summary)?;
        Ok(SemanticOutcome {
            embedding: fuse(&query, &summary, alpha)?,
            alpha_used: alpha,
            warning: None,
        })
    }

    pub fn retrieve(
        &self,
        user_emb: &Embedding,
        tag_weights: &IndexMap<String, u32>,
    ) -> Result<CandidateSet, CloudError> {
        retrieve_candidates(user_emb, tag_weights, &self.index)
    }
}
