//! Core data types shared by the device and cloud agents.
//!
//! Everything here is an immutable value once constructed. Strategy plans
//! enter the system as [`RawPlan`] (whatever a language model produced) and
//! only become a [`StrategyPlan`] through [`validate_plan`] or
//! [`repair_plan`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default maximum history length kept per user.
pub const DEFAULT_MAX_LEN: usize = 200;

/// Allowed sizes of the weighted tag dictionary.
pub const ALLOWED_TAG_COUNTS: [usize; 4] = [3, 5, 10, 20];

/// Allowed candidate totals (sum of per-tag counts).
pub const ALLOWED_TOTALS: [u64; 4] = [500, 1000, 2000, 5000];

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate item_id {0}")]
    DuplicateItem(String),
    #[error("item {0} has no tags")]
    EmptyTags(String),
    #[error("invalid geo coordinate ({lat}, {lon})")]
    InvalidGeo { lat: f64, lon: f64 },
    #[error("negative timestamp {0}")]
    NegativeTimestamp(i64),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("query text is empty")]
    EmptyQuery,
    #[error("tag vocabulary has {0} tags; at least 3 are required to form a plan")]
    SmallVocabulary(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, DomainError> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(DomainError::InvalidGeo { lat, lon });
        }
        Ok(Self { lat, lon })
    }
}

/// One catalog entry. `geo` is only populated for location domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub title: String,
    pub attributes: String,
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo: Option<GeoPoint>,
}

impl ItemRecord {
    /// The text fed to the embedding backend for this item.
    pub fn text(&self) -> String {
        format!("{} {} {}", self.title, self.attributes, self.tags.join(" "))
    }

    /// Short human-readable description, used inside prompts.
    pub fn describe(&self) -> String {
        format!("{} ({}) [{}]", self.title, self.attributes, self.tags.join(", "))
    }
}

/// Tag names with their popularity (number of catalog items carrying the tag).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagVocab {
    /// Ordered by popularity descending, then name ascending.
    tags: Vec<String>,
    counts: BTreeMap<String, usize>,
}

impl TagVocab {
    pub fn from_counts(counts: BTreeMap<String, usize>) -> Self {
        let mut tags: Vec<String> = counts.keys().cloned().collect();
        tags.sort_by(|a, b| counts[b].cmp(&counts[a]).then_with(|| a.cmp(b)));
        Self { tags, counts }
    }

    pub fn from_tags<I, S>(tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut counts = BTreeMap::new();
        for t in tags {
            *counts.entry(t.into()).or_insert(0) += 1;
        }
        Self::from_counts(counts)
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.counts.contains_key(tag)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn popularity(&self, tag: &str) -> usize {
        self.counts.get(tag).copied().unwrap_or(0)
    }

    /// Tags ordered by popularity descending (ties by name).
    pub fn by_popularity(&self) -> &[String] {
        &self.tags
    }
}

/// A validated item catalog for one domain.
#[derive(Debug, Clone)]
pub struct Catalog {
    items: Vec<ItemRecord>,
    by_id: HashMap<String, usize>,
    vocab: TagVocab,
}

impl Catalog {
    pub fn new(items: Vec<ItemRecord>) -> Result<Self, DomainError> {
        let mut by_id = HashMap::with_capacity(items.len());
        let mut counts = BTreeMap::new();
        for (row, item) in items.iter().enumerate() {
            if item.tags.is_empty() {
                return Err(DomainError::EmptyTags(item.item_id.clone()));
            }
            if by_id.insert(item.item_id.clone(), row).is_some() {
                return Err(DomainError::DuplicateItem(item.item_id.clone()));
            }
            let mut seen = Vec::with_capacity(item.tags.len());
            for tag in &item.tags {
                if !seen.contains(&tag) {
                    seen.push(tag);
                    *counts.entry(tag.clone()).or_insert(0) += 1;
                }
            }
        }
        Ok(Self {
            items,
            by_id,
            vocab: TagVocab::from_counts(counts),
        })
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn row_of(&self, item_id: &str) -> Option<usize> {
        self.by_id.get(item_id).copied()
    }

    pub fn get(&self, item_id: &str) -> Option<&ItemRecord> {
        self.row_of(item_id).map(|r| &self.items[r])
    }

    pub fn item(&self, row: usize) -> &ItemRecord {
        &self.items[row]
    }

    pub fn vocab(&self) -> &TagVocab {
        &self.vocab
    }

    /// Distinct lowercase words appearing in item attribute blobs.
    pub fn attribute_terms(&self) -> Vec<String> {
        let mut terms: Vec<String> = self.items.iter().flat_map(|i| tokenize(&i.attributes)).collect();
        terms.sort();
        terms.dedup();
        terms
    }
}

/// Lowercase alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub item_id: String,
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo: Option<GeoPoint>,
}

impl Interaction {
    pub fn new(item_id: impl Into<String>, timestamp: i64) -> Result<Self, DomainError> {
        if timestamp < 0 {
            return Err(DomainError::NegativeTimestamp(timestamp));
        }
        Ok(Self {
            item_id: item_id.into(),
            timestamp,
            geo: None,
        })
    }

    pub fn with_geo(mut self, geo: GeoPoint) -> Self {
        self.geo = Some(geo);
        self
    }
}

/// Time-ordered interactions of one user, capped at a maximum length.
///
/// Construction sorts stably by timestamp (ties keep input order) and keeps
/// the most recent `max_len` interactions.
#[derive(Debug, Clone, PartialEq)]
pub struct UserHistory {
    user_id: String,
    interactions: Vec<Interaction>,
}

impl UserHistory {
    pub fn new(user_id: impl Into<String>, mut interactions: Vec<Interaction>, max_len: usize) -> Self {
        interactions.sort_by_key(|i| i.timestamp);
        if interactions.len() > max_len {
            interactions.drain(..interactions.len() - max_len);
        }
        Self {
            user_id: user_id.into(),
            interactions,
        }
    }

    pub fn empty(user_id: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            interactions: Vec::new(),
        }
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.interactions.iter().map(|i| i.item_id.as_str())
    }

    /// Most recent interaction with a location, if any.
    pub fn last_geo(&self) -> Option<GeoPoint> {
        self.interactions.iter().rev().find_map(|i| i.geo)
    }

    /// Row indices of every interacted item; fails on the first unknown item.
    pub fn rows(&self, catalog: &Catalog) -> Result<Vec<usize>, DomainError> {
        self.item_ids()
            .map(|id| {
                catalog
                    .row_of(id)
                    .ok_or_else(|| DomainError::UnknownItem(id.to_string()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub user_id: String,
    pub text: String,
    pub domain_tag: String,
}

impl Query {
    pub fn new(
        user_id: impl Into<String>,
        text: impl Into<String>,
        domain_tag: impl Into<String>,
    ) -> Result<Self, DomainError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DomainError::EmptyQuery);
        }
        Ok(Self {
            user_id: user_id.into(),
            text,
            domain_tag: domain_tag.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsityLabel {
    Sparse,
    Medium,
    Dense,
}

impl SparsityLabel {
    /// Fewer than 10 interactions is sparse, more than 50 is dense.
    pub fn from_len(len: usize) -> Self {
        match len {
            0..=9 => Self::Sparse,
            10..=50 => Self::Medium,
            _ => Self::Dense,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sparse => "sparse",
            Self::Medium => "medium",
            Self::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecencyLabel {
    Stale,
    Recent,
}

impl RecencyLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Stale => "stale",
            Self::Recent => "recent",
        }
    }
}

/// The only user description that leaves the device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Abstract {
    pub sanitized_query: String,
    pub behavioral_summary: String,
    pub domain_tag: String,
    pub sparsity_label: SparsityLabel,
    pub recency_label: RecencyLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Attention,
    Graph,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Attention => "attention",
            Self::Graph => "graph",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "attention" => Ok(Self::Attention),
            "graph" => Ok(Self::Graph),
            other => Err(format!("unknown encoder {other:?}")),
        }
    }
}

/// The four plannable stages; every plan carries a justification for each.
pub const STAGES: [&str; 4] = [
    "semantic_user_modeling",
    "candidate_retrieval",
    "structured_user_modeling",
    "final_ranking",
];

/// A per-user execution configuration produced by the cloud planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyPlan {
    pub alpha: f64,
    pub beta: f64,
    pub structured_enabled: bool,
    pub encoder: EncoderKind,
    pub tag_weights: IndexMap<String, u32>,
    pub justifications: BTreeMap<String, String>,
}

impl StrategyPlan {
    pub fn total(&self) -> u64 {
        self.tag_weights.values().map(|&c| u64::from(c)).sum()
    }

    pub fn to_raw(&self) -> RawPlan {
        RawPlan {
            alpha: Some(self.alpha),
            beta: Some(self.beta),
            structured_enabled: Some(self.structured_enabled),
            encoder: Some(self.encoder.as_str().to_string()),
            tag_weights: Some(
                self.tag_weights
                    .iter()
                    .map(|(t, &c)| (t.clone(), i64::from(c)))
                    .collect(),
            ),
            justifications: Some(self.justifications.clone()),
        }
    }
}

/// A candidate plan as emitted by a model; every field may be absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPlan {
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub structured_enabled: Option<bool>,
    #[serde(default)]
    pub encoder: Option<String>,
    #[serde(default)]
    pub tag_weights: Option<IndexMap<String, i64>>,
    #[serde(default)]
    pub justifications: Option<BTreeMap<String, String>>,
}

impl RawPlan {
    /// Parses model output, tolerating prose around a single JSON object.
    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        match serde_json::from_str(text.trim()) {
            Ok(plan) => Ok(plan),
            Err(err) => match (text.find('{'), text.rfind('}')) {
                (Some(start), Some(end)) if start < end => serde_json::from_str(&text[start..=end]),
                _ => Err(err),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanViolation {
    MissingField(&'static str),
    UnknownTag(String),
    TagCount(usize),
    Total(u64),
    NonPositiveCount { tag: String, count: i64 },
    AlphaRange(f64),
    BetaRange(f64),
    UnknownEncoder(String),
    MissingJustification(&'static str),
    UnknownStage(String),
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MissingField(name) => write!(f, "schema: missing field {name}"),
            Self::UnknownTag(tag) => write!(f, "vocabulary: unknown tag {tag:?}"),
            Self::TagCount(n) => write!(f, "tag count {n} ∉ {{3,5,10,20}}"),
            Self::Total(t) => write!(f, "candidate total {t} ∉ {{500,1000,2000,5000}}"),
            Self::NonPositiveCount { tag, count } => {
                write!(f, "count {count} for tag {tag:?} is not a positive integer")
            }
            Self::AlphaRange(a) => write!(f, "alpha out of [0,1] (got {a})"),
            Self::BetaRange(b) => write!(f, "beta out of [0,1] (got {b})"),
            Self::UnknownEncoder(e) => write!(f, "schema: unknown encoder {e:?}"),
            Self::MissingJustification(stage) => write!(f, "missing justification for {stage}"),
            Self::UnknownStage(stage) => write!(f, "justification for unknown stage {stage:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid plan: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct PlanViolations(pub Vec<PlanViolation>);

fn in_unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

/// Checks every plan invariant and reports all violations at once.
pub fn validate_plan(raw: &RawPlan, vocab: &TagVocab) -> Result<StrategyPlan, PlanViolations> {
    let mut violations = Vec::new();

    match raw.alpha {
        None => violations.push(PlanViolation::MissingField("alpha")),
        Some(a) if !in_unit(a) => violations.push(PlanViolation::AlphaRange(a)),
        _ => {}
    }
    match raw.beta {
        None => violations.push(PlanViolation::MissingField("beta")),
        Some(b) if !in_unit(b) => violations.push(PlanViolation::BetaRange(b)),
        _ => {}
    }
    if raw.structured_enabled.is_none() {
        violations.push(PlanViolation::MissingField("structured_enabled"));
    }
    let encoder = match raw.encoder.as_deref() {
        None => {
            violations.push(PlanViolation::MissingField("encoder"));
            None
        }
        Some(e) => match e.parse::<EncoderKind>() {
            Ok(kind) => Some(kind),
            Err(_) => {
                violations.push(PlanViolation::UnknownEncoder(e.to_string()));
                None
            }
        },
    };

    let mut tag_weights = IndexMap::new();
    match &raw.tag_weights {
        None => violations.push(PlanViolation::MissingField("tag_weights")),
        Some(weights) => {
            for (tag, &count) in weights {
                if !vocab.contains(tag) {
                    violations.push(PlanViolation::UnknownTag(tag.clone()));
                }
                match u32::try_from(count) {
                    Ok(c) if c > 0 => {
                        tag_weights.insert(tag.clone(), c);
                    }
                    _ => violations.push(PlanViolation::NonPositiveCount {
                        tag: tag.clone(),
                        count,
                    }),
                }
            }
            if !ALLOWED_TAG_COUNTS.contains(&weights.len()) {
                violations.push(PlanViolation::TagCount(weights.len()));
            }
            let total: i64 = weights.values().sum();
            if !ALLOWED_TOTALS.iter().any(|&t| t as i64 == total) {
                violations.push(PlanViolation::Total(total.max(0) as u64));
            }
        }
    }

    match &raw.justifications {
        None => violations.push(PlanViolation::MissingField("justifications")),
        Some(just) => {
            for stage in STAGES {
                if just.get(stage).is_none_or(|t| t.trim().is_empty()) {
                    violations.push(PlanViolation::MissingJustification(stage));
                }
            }
            for key in just.keys() {
                if !STAGES.contains(&key.as_str()) {
                    violations.push(PlanViolation::UnknownStage(key.clone()));
                }
            }
        }
    }

    if !violations.is_empty() {
        return Err(PlanViolations(violations));
    }
    Ok(StrategyPlan {
        alpha: raw.alpha.unwrap_or_default(),
        beta: raw.beta.unwrap_or_default(),
        structured_enabled: raw.structured_enabled.unwrap_or_default(),
        encoder: encoder.unwrap_or(EncoderKind::Attention),
        tag_weights,
        justifications: raw.justifications.clone().unwrap_or_default(),
    })
}

/// Splits `total` across `weights` proportionally using largest-remainder
/// rounding. The result sums to `total` exactly and every share is at least
/// one whenever `total >= weights.len()`. Remainder ties go to the earlier
/// position.
pub fn apportion(weights: &[f64], total: u64) -> Vec<u64> {
    if weights.is_empty() {
        return Vec::new();
    }
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| w / sum * total as f64).collect()
    } else {
        vec![total as f64 / weights.len() as f64; weights.len()]
    };
    let mut shares: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = shares.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned) as usize) {
        shares[i] += 1;
    }
    if total >= weights.len() as u64 {
        while let Some(zero) = shares.iter().position(|&s| s == 0) {
            let donor = (0..shares.len())
                .max_by(|&a, &b| shares[a].cmp(&shares[b]).then(b.cmp(&a)))
                .expect("non-empty");
            shares[donor] -= 1;
            shares[zero] += 1;
        }
    }
    shares
}

/// Closest allowed candidate total; ties resolve to the larger total.
fn nearest_total(sum: u64) -> u64 {
    ALLOWED_TOTALS
        .iter()
        .copied()
        .min_by(|&a, &b| a.abs_diff(sum).cmp(&b.abs_diff(sum)).then(b.cmp(&a)))
        .expect("non-empty")
}

const FILLED_JUSTIFICATION: &str = "no justification provided; default applied";

/// The neutral fallback plan: α = β = 0.5, attention encoder, the most
/// popular tags and 1000 candidates split evenly.
pub fn default_plan(vocab: &TagVocab) -> Result<StrategyPlan, DomainError> {
    let n = ALLOWED_TAG_COUNTS
        .iter()
        .copied()
        .filter(|&c| c <= 5 && c <= vocab.len())
        .max()
        .ok_or(DomainError::SmallVocabulary(vocab.len()))?;
    let tags = &vocab.by_popularity()[..n];
    let shares = apportion(&vec![1.0; n], 1000);
    Ok(StrategyPlan {
        alpha: 0.5,
        beta: 0.5,
        structured_enabled: true,
        encoder: EncoderKind::Attention,
        tag_weights: tags.iter().cloned().zip(shares.into_iter().map(|s| s as u32)).collect(),
        justifications: STAGES
            .iter()
            .map(|s| (s.to_string(), "default plan: balanced neutral setting".to_string()))
            .collect(),
    })
}

/// Deterministically turns any parseable candidate plan into a valid one.
///
/// Weights are clamped, unknown tags and non-positive counts dropped, the tag
/// set trimmed (or padded with popular tags) to an allowed size, and counts
/// rescaled to the nearest allowed total. Falls back to [`default_plan`] when
/// no usable tag survives.
pub fn repair_plan(raw: &RawPlan, vocab: &TagVocab) -> Result<StrategyPlan, DomainError> {
    let unit = |x: Option<f64>| match x {
        Some(v) if v.is_finite() => v.clamp(0.0, 1.0),
        _ => 0.5,
    };

    let usable: Vec<(String, i64)> = raw
        .tag_weights
        .iter()
        .flatten()
        .filter(|(tag, &count)| vocab.contains(tag) && count > 0 && count <= i64::from(u32::MAX))
        .map(|(t, &c)| (t.clone(), c))
        .collect();
    if usable.is_empty() {
        return default_plan(vocab);
    }

    let mut kept: Vec<(String, i64)> = match ALLOWED_TAG_COUNTS.iter().rev().find(|&&c| c <= usable.len()) {
        Some(&target) => {
            // keep the `target` heaviest tags, preserving their original order
            let mut by_weight: Vec<usize> = (0..usable.len()).collect();
            by_weight.sort_by(|&a, &b| usable[b].1.cmp(&usable[a].1).then(a.cmp(&b)));
            let mut chosen = by_weight[..target].to_vec();
            chosen.sort_unstable();
            chosen.into_iter().map(|i| usable[i].clone()).collect()
        }
        None => {
            let target = ALLOWED_TAG_COUNTS[0];
            if vocab.len() < target {
                return Err(DomainError::SmallVocabulary(vocab.len()));
            }
            let pad_weight = usable.iter().map(|(_, c)| *c).min().unwrap_or(1);
            let mut kept = usable.clone();
            for tag in vocab.by_popularity() {
                if kept.len() == target {
                    break;
                }
                if !kept.iter().any(|(t, _)| t == tag) {
                    kept.push((tag.clone(), pad_weight));
                }
            }
            kept
        }
    };

    let sum: u64 = kept.iter().map(|(_, c)| *c as u64).sum();
    let total = nearest_total(sum);
    let weights: Vec<f64> = kept.iter().map(|(_, c)| *c as f64).collect();
    for ((_, count), share) in kept.iter_mut().zip(apportion(&weights, total)) {
        *count = share as i64;
    }

    let given = raw.justifications.clone().unwrap_or_default();
    let justifications = STAGES
        .iter()
        .map(|&stage| {
            let text = given
                .get(stage)
                .filter(|t| !t.trim().is_empty())
                .cloned()
                .unwrap_or_else(|| FILLED_JUSTIFICATION.to_string());
            (stage.to_string(), text)
        })
        .collect();

    Ok(StrategyPlan {
        alpha: unit(raw.alpha),
        beta: unit(raw.beta),
        structured_enabled: raw.structured_enabled.unwrap_or(true),
        encoder: raw
            .encoder
            .as_deref()
            .and_then(|e| e.parse().ok())
            .unwrap_or(EncoderKind::Attention),
        tag_weights: kept.into_iter().map(|(t, c)| (t, c as u32)).collect(),
        justifications,
    })
}

/// Retrieved candidates in retrieval order, deduplicated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub item_ids: Vec<String>,
    pub per_tag_counts: IndexMap<String, usize>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }
}

/// Final top-k list; scores are non-increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationList {
    pub ranked: Vec<(String, f64)>,
    pub k: usize,
}

impl RecommendationList {
    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.ranked.iter().map(|(id, _)| id.as_str())
    }

    /// 1-based position of `item_id`, if present.
    pub fn rank_of(&self, item_id: &str) -> Option<usize> {
        self.ranked.iter().position(|(id, _)| id == item_id).map(|p| p + 1)
    }
}

fn parse_geo(lat: Option<&str>, lon: Option<&str>, line: usize) -> Result<Option<GeoPoint>, DomainError> {
    let parse = |s: &str| {
        s.trim().parse::<f64>().map_err(|e| DomainError::Parse {
            line,
            msg: format!("bad coordinate {s:?}: {e}"),
        })
    };
    match (lat, lon) {
        (None, None) => Ok(None),
        (Some(a), Some(b)) if a.trim().is_empty() && b.trim().is_empty() => Ok(None),
        (Some(a), Some(b)) => GeoPoint::new(parse(a)?, parse(b)?)
            .map(Some)
            .map_err(|e| DomainError::Parse {
                line,
                msg: e.to_string(),
            }),
        _ => Err(DomainError::Parse {
            line,
            msg: "latitude without longitude".into(),
        }),
    }
}

fn data_lines<R: BufRead>(reader: R) -> impl Iterator<Item = (usize, std::io::Result<String>)> {
    reader
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty() && !l.starts_with('#')))
}

/// Reads a tab-separated catalog: `item_id, title, attributes, tags[, lat, lon]`
/// with tags separated by `|`.
pub fn read_catalog<R: BufRead>(reader: R) -> Result<Catalog, DomainError> {
    let mut items = Vec::new();
    for (line, text) in data_lines(reader) {
        let text = text?;
        let fields: Vec<&str> = text.split('\t').collect();
        if fields.len() != 4 && fields.len() != 6 {
            return Err(DomainError::Parse {
                line,
                msg: format!("expected 4 or 6 tab-separated fields, found {}", fields.len()),
            });
        }
        if fields[0].trim().is_empty() {
            return Err(DomainError::Parse {
                line,
                msg: "empty item_id".into(),
            });
        }
        let tags: Vec<String> = fields[3]
            .split('|')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(String::from)
            .collect();
        if tags.is_empty() {
            return Err(DomainError::Parse {
                line,
                msg: format!("item {} has no tags", fields[0]),
            });
        }
        items.push(ItemRecord {
            item_id: fields[0].trim().to_string(),
            title: fields[1].to_string(),
            attributes: fields[2].to_string(),
            tags,
            geo: parse_geo(fields.get(4).copied(), fields.get(5).copied(), line)?,
        });
    }
    Catalog::new(items)
}

pub fn write_catalog<W: std::io::Write>(catalog: &Catalog, mut out: W) -> std::io::Result<()> {
    for item in catalog.items() {
        write!(
            out,
            "{}\t{}\t{}\t{}",
            item.item_id,
            item.title,
            item.attributes,
            item.tags.join("|")
        )?;
        if let Some(g) = item.geo {
            write!(out, "\t{}\t{}", g.lat, g.lon)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Raw interaction rows, one per line: `user_id, item_id, timestamp[, lat, lon]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InteractionLog {
    /// Per user, sorted by timestamp (stable), untruncated.
    pub users: BTreeMap<String, Vec<Interaction>>,
}

impl InteractionLog {
    pub fn from_rows<I>(rows: I) -> Self
    where
        I: IntoIterator<Item = (String, Interaction)>,
    {
        let mut users: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
        for (user, interaction) in rows {
            users.entry(user).or_default().push(interaction);
        }
        for seq in users.values_mut() {
            seq.sort_by_key(|i| i.timestamp);
        }
        Self { users }
    }

    pub fn num_interactions(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }

    pub fn history(&self, user_id: &str, max_len: usize) -> UserHistory {
        match self.users.get(user_id) {
            Some(seq) => UserHistory::new(user_id, seq.clone(), max_len),
            None => UserHistory::empty(user_id),
        }
    }

    pub fn check_items(&self, catalog: &Catalog) -> Result<(), DomainError> {
        for seq in self.users.values() {
            for i in seq {
                if catalog.row_of(&i.item_id).is_none() {
                    return Err(DomainError::UnknownItem(i.item_id.clone()));
                }
            }
        }
        Ok(())
    }
}

pub fn read_interactions<R: BufRead>(reader: R) -> Result<InteractionLog, DomainError> {
    let mut rows = Vec::new();
    for (line, text) in data_lines(reader) {
        let text = text?;
        let fields: Vec<&str> = text.split('\t').collect();
        if fields.len() != 3 && fields.len() != 5 {
            return Err(DomainError::Parse {
                line,
                msg: format!("expected 3 or 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let timestamp: i64 = fields[2].trim().parse().map_err(|e| DomainError::Parse {
            line,
            msg: format!("bad timestamp {:?}: {e}", fields[2]),
        })?;
        let mut interaction = Interaction::new(fields[1].trim(), timestamp).map_err(|e| DomainError::Parse {
            line,
            msg: e.to_string(),
        })?;
        interaction.geo = parse_geo(fields.get(3).copied(), fields.get(4).copied(), line)?;
        rows.push((fields[0].trim().to_string(), interaction));
    }
    Ok(InteractionLog::from_rows(rows))
}

pub fn write_interactions<W: std::io::Write>(log: &InteractionLog, mut out: W) -> std::io::Result<()> {
    for (user, seq) in &log.users {
        for i in seq {
            write!(out, "{user}\t{}\t{}", i.item_id, i.timestamp)?;
            if let Some(g) = i.geo {
                write!(out, "\t{}\t{}", g.lat, g.lon)?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn load_catalog(path: &Path) -> Result<Catalog, DomainError> {
    read_catalog(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn load_interactions(path: &Path) -> Result<InteractionLog, DomainError> {
    read_interactions(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(n: usize) -> TagVocab {
        // tag00 most popular, then tag01, ...
        TagVocab::from_counts((0..n).map(|i| (format!("tag{i:02}"), 100 - i)).collect())
    }

    fn raw(tags: &[(&str, i64)]) -> RawPlan {
        RawPlan {
            alpha: Some(0.5),
            beta: Some(0.5),
            structured_enabled: Some(true),
            encoder: Some("attention".into()),
            tag_weights: Some(tags.iter().map(|(t, c)| (t.to_string(), *c)).collect()),
            justifications: Some(STAGES.iter().map(|s| (s.to_string(), "because".into())).collect()),
        }
    }

    #[test]
    fn five_tags_summing_to_1000_is_valid() {
        let plan = raw(&[
            ("tag00", 200),
            ("tag01", 200),
            ("tag02", 200),
            ("tag03", 200),
            ("tag04", 200),
        ]);
        let valid = validate_plan(&plan, &vocab(10)).unwrap();
        assert_eq!(valid.total(), 1000);
        assert_eq!(valid.tag_weights.len(), 5);
    }

    #[test]
    fn seven_tags_is_a_count_violation() {
        let tags: Vec<(String, i64)> = (0..7)
            .map(|i| (format!("tag{i:02}"), if i == 0 { 400 } else { 100 }))
            .collect();
        let tags: Vec<(&str, i64)> = tags.iter().map(|(t, c)| (t.as_str(), *c)).collect();
        let err = validate_plan(&raw(&tags), &vocab(10)).unwrap_err();
        assert!(err.0.contains(&PlanViolation::TagCount(7)));
        assert!(err.to_string().contains("tag count 7 ∉ {3,5,10,20}"));
    }

    #[test]
    fn alpha_out_of_range_is_reported() {
        let mut plan = raw(&[("tag00", 200), ("tag01", 300), ("tag02", 500)]);
        plan.alpha = Some(1.2);
        let err = validate_plan(&plan, &vocab(10)).unwrap_err();
        assert_eq!(err.0, vec![PlanViolation::AlphaRange(1.2)]);
        assert!(err.to_string().contains("alpha out of [0,1]"));
    }

    #[test]
    fn missing_field_and_unknown_tag_are_named() {
        let mut plan = raw(&[("tag00", 200), ("nope", 300), ("tag02", 500)]);
        plan.beta = None;
        let err = validate_plan(&plan, &vocab(10)).unwrap_err();
        assert!(err.0.contains(&PlanViolation::MissingField("beta")));
        assert!(err.0.contains(&PlanViolation::UnknownTag("nope".into())));
    }

    #[test]
    fn repair_clamps_alpha() {
        let mut plan = raw(&[("tag00", 200), ("tag01", 300), ("tag02", 500)]);
        plan.alpha = Some(1.3);
        assert_eq!(repair_plan(&plan, &vocab(10)).unwrap().alpha, 1.0);
    }

    #[test]
    fn repair_four_tags_keeps_top_three_and_rescales() {
        // quotas: 300/800*1000 = 375, 375, 200/800*1000 = 250; exact, no remainder
        let plan = raw(&[("tag00", 300), ("tag01", 300), ("tag02", 200), ("tag03", 200)]);
        let repaired = repair_plan(&plan, &vocab(10)).unwrap();
        let got: Vec<(&str, u32)> = repaired.tag_weights.iter().map(|(t, c)| (t.as_str(), *c)).collect();
        assert_eq!(got, vec![("tag00", 375), ("tag01", 375), ("tag02", 250)]);
        assert!(validate_plan(&repaired.to_raw(), &vocab(10)).is_ok());
    }

    #[test]
    fn repair_with_remainders_uses_largest_remainder() {
        // sum 3 -> nearest total 500; quotas 166.67 each -> 167, 167, 166
        let plan = raw(&[("tag00", 1), ("tag01", 1), ("tag02", 1)]);
        let repaired = repair_plan(&plan, &vocab(10)).unwrap();
        let counts: Vec<u32> = repaired.tag_weights.values().copied().collect();
        assert_eq!(counts, vec![167, 167, 166]);
    }

    #[test]
    fn repair_empty_tags_gives_default_plan() {
        let plan = raw(&[]);
        let repaired = repair_plan(&plan, &vocab(10)).unwrap();
        assert_eq!(repaired, default_plan(&vocab(10)).unwrap());
        assert_eq!(repaired.alpha, 0.5);
        assert_eq!(repaired.beta, 0.5);
        assert_eq!(repaired.encoder, EncoderKind::Attention);
        assert_eq!(repaired.total(), 1000);
        let tags: Vec<&String> = repaired.tag_weights.keys().collect();
        assert_eq!(tags, vec!["tag00", "tag01", "tag02", "tag03", "tag04"]);
    }

    #[test]
    fn repair_pads_with_popular_tags() {
        let plan = raw(&[("tag07", 40)]);
        let repaired = repair_plan(&plan, &vocab(10)).unwrap();
        let tags: Vec<&String> = repaired.tag_weights.keys().collect();
        assert_eq!(tags, vec!["tag07", "tag00", "tag01"]);
        assert!(validate_plan(&repaired.to_raw(), &vocab(10)).is_ok());
    }

    #[test]
    fn small_vocabulary_cannot_form_a_plan() {
        assert!(matches!(
            repair_plan(&raw(&[]), &vocab(2)),
            Err(DomainError::SmallVocabulary(2))
        ));
    }

    #[test]
    fn apportion_preserves_total_and_minimum_one() {
        let shares = apportion(&[1000.0, 1.0, 1.0, 1.0, 1.0], 500);
        assert_eq!(shares.iter().sum::<u64>(), 500);
        assert!(shares.iter().all(|&s| s >= 1));
    }

    #[test]
    fn history_sort_is_stable_and_truncates() {
        let rows = vec![
            Interaction::new("a", 5).unwrap(),
            Interaction::new("b", 1).unwrap(),
            Interaction::new("c", 5).unwrap(),
            Interaction::new("d", 3).unwrap(),
        ];
        let h = UserHistory::new("u", rows.clone(), 200);
        assert_eq!(h.item_ids().collect::<Vec<_>>(), vec!["b", "d", "a", "c"]);
        let h = UserHistory::new("u", rows, 2);
        assert_eq!(h.item_ids().collect::<Vec<_>>(), vec!["a", "c"]);
    }

    #[test]
    fn sparsity_buckets() {
        assert_eq!(SparsityLabel::from_len(3), SparsityLabel::Sparse);
        assert_eq!(SparsityLabel::from_len(9), SparsityLabel::Sparse);
        assert_eq!(SparsityLabel::from_len(10), SparsityLabel::Medium);
        assert_eq!(SparsityLabel::from_len(50), SparsityLabel::Medium);
        assert_eq!(SparsityLabel::from_len(51), SparsityLabel::Dense);
    }

    #[test]
    fn catalog_rejects_duplicates_and_reports_lines() {
        let text = "a\tA\tbrand x\tt1|t2\nb\tB\tbrand y\tt2\n";
        let cat = read_catalog(text.as_bytes()).unwrap();
        assert_eq!(cat.len(), 2);
        assert_eq!(cat.vocab().by_popularity(), &["t2".to_string(), "t1".to_string()]);

        let dup = "a\tA\tx\tt1\na\tB\ty\tt2\n";
        assert!(matches!(read_catalog(dup.as_bytes()), Err(DomainError::DuplicateItem(id)) if id == "a"));

        let bad = "a\tA\tx\tt1\nb\tB\n";
        assert!(matches!(
            read_catalog(bad.as_bytes()),
            Err(DomainError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn interactions_parse_with_geo() {
        let text = "u1\ta\t10\t1.5\t2.5\nu1\tb\t5\nu2\ta\t1\n";
        let log = read_interactions(text.as_bytes()).unwrap();
        assert_eq!(log.num_interactions(), 3);
        let u1 = &log.users["u1"];
        assert_eq!(u1[0].item_id, "b");
        assert_eq!(u1[1].geo, Some(GeoPoint { lat: 1.5, lon: 2.5 }));
        assert!(read_interactions("u\ta\t-1\n".as_bytes()).is_err());
        assert!(read_interactions("u\ta\t1\t95\t0\n".as_bytes()).is_err());
    }

    #[test]
    fn plan_wire_form_rejects_unknown_fields() {
        let plan = default_plan(&vocab(10)).unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        assert_eq!(serde_json::from_str::<StrategyPlan>(&json).unwrap(), plan);
        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        value["extra"] = serde_json::json!(1);
        assert!(serde_json::from_value::<StrategyPlan>(value).is_err());
    }

    #[test]
    fn raw_plan_parse_tolerates_prose() {
        let text = "Here is the plan:\n{\"alpha\": 0.3}\nThanks";
        assert_eq!(RawPlan::parse(text).unwrap().alpha, Some(0.3));
    }
}
