//! Split protocol, ranking metrics, geo filtering and experiment drivers.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    apportion, CandidateSet, Catalog, EncoderKind, GeoPoint, Interaction, InteractionLog, RecommendationList,
    StrategyPlan, TagVocab, UserHistory, ALLOWED_TAG_COUNTS, DEFAULT_MAX_LEN, STAGES,
};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const DEFAULT_RADIUS_KM: f64 = 5.0;
pub const DEFAULT_FEWSHOT_FRACTION: f64 = 0.10;
pub const DEFAULT_FEWSHOT_INTERACTIONS: usize = 5;
pub const CUTOFFS: [usize; 2] = [5, 10];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("fraction {0} outside (0,1)")]
    Fraction(f64),
    #[error("unknown preset {0:?}; expected plan or v1..v7")]
    UnknownPreset(String),
    #[error("tag vocabulary has {0} tags; presets need at least 3")]
    SmallVocabulary(usize),
}

/// One user's leave-last-out split.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSplit {
    pub user_id: String,
    pub train: Vec<Interaction>,
    pub val: Interaction,
    pub test: Interaction,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitSpec {
    pub users: Vec<UserSplit>,
    /// Users with fewer than three interactions.
    pub excluded: Vec<String>,
    pub max_len: usize,
}

/// Leave-last-out: the last interaction is the test item, the one before it
/// the validation item, the rest the training prefix. Histories are first
/// cut to their most recent `max_len` interactions.
pub fn make_splits(log: &InteractionLog, max_len: usize) -> SplitSpec {
    let mut spec = SplitSpec {
        max_len,
        ..SplitSpec::default()
    };
    for user_id in log.users.keys() {
        let history = log.history(user_id, max_len);
        let items = history.interactions();
        if items.len() < 3 {
            spec.excluded.push(user_id.clone());
            continue;
        }
        let n = items.len();
        spec.users.push(UserSplit {
            user_id: user_id.clone(),
            train: items[..n - 2].to_vec(),
            val: items[n - 2].clone(),
            test: items[n - 1].clone(),
        });
    }
    spec
}

impl SplitSpec {
    pub fn default_len(log: &InteractionLog) -> Self {
        make_splits(log, DEFAULT_MAX_LEN)
    }

    /// Training sequences as catalog rows; unknown items are skipped.
    pub fn train_rows(&self, catalog: &Catalog) -> Vec<Vec<usize>> {
        self.users
            .iter()
            .map(|u| u.train.iter().filter_map(|i| catalog.row_of(&i.item_id)).collect())
            .collect()
    }
}

pub fn hr_at_k(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r >= 1 && r <= k => 1.0,
        _ => 0.0,
    }
}

/// Single-ground-truth NDCG: `1 / log2(rank + 1)` inside the cutoff.
pub fn ndcg_at_k(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r >= 1 && r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

/// Great-circle distance on a sphere of radius 6371 km.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Keeps candidates within `radius_km` of `user_geo`. Returns the filtered
/// set and how many candidates were dropped for lacking coordinates. An
/// infinite radius keeps everything.
pub fn geo_filter(
    candidates: &CandidateSet,
    user_geo: GeoPoint,
    radius_km: f64,
    catalog: &Catalog,
) -> (CandidateSet, usize) {
    if radius_km.is_infinite() && radius_km > 0.0 {
        return (candidates.clone(), 0);
    }
    let mut missing = 0;
    let item_ids = candidates
        .item_ids
        .iter()
        .filter(|id| match catalog.get(id).and_then(|i| i.geo) {
            Some(geo) => haversine_km(user_geo, geo) <= radius_km,
            None => {
                missing += 1;
                false
            }
        })
        .cloned()
        .collect();
    (
        CandidateSet {
            item_ids,
            per_tag_counts: candidates.per_tag_counts.clone(),
        },
        missing,
    )
}

/// History-length bucket names, shortest first.
pub const BUCKETS: [&str; 3] = ["short", "medium", "long"];

pub fn bucket_of(len: usize) -> &'static str {
    match len {
        0..=9 => BUCKETS[0],
        10..=50 => BUCKETS[1],
        _ => BUCKETS[2],
    }
}

/// One prediction to score: the history the pipeline sees and the item it
/// should rank.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub user_id: String,
    pub history: UserHistory,
    pub truth: String,
    /// Timestamp of the held-out interaction.
    pub at: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalTarget {
    Validation,
    #[default]
    Test,
}

/// Cases for every split user whose held-out item is in the catalog.
/// Returns the cases and the number skipped.
pub fn split_cases(spec: &SplitSpec, target: EvalTarget, catalog: &Catalog) -> (Vec<EvalCase>, usize) {
    let mut skipped = 0;
    let mut cases = Vec::new();
    for u in &spec.users {
        let (context, truth) = match target {
            EvalTarget::Validation => (u.train.clone(), &u.val),
            EvalTarget::Test => {
                let mut c = u.train.clone();
                c.push(u.val.clone());
                (c, &u.test)
            }
        };
        if catalog.get(&truth.item_id).is_none() {
            skipped += 1;
            continue;
        }
        cases.push(EvalCase {
            user_id: u.user_id.clone(),
            history: UserHistory::new(u.user_id.clone(), context, spec.max_len),
            truth: truth.item_id.clone(),
            at: truth.timestamp,
        });
    }
    (cases, skipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "HR@5")]
    pub hr5: f64,
    #[serde(rename = "NDCG@5")]
    pub ndcg5: f64,
    #[serde(rename = "HR@10")]
    pub hr10: f64,
    #[serde(rename = "NDCG@10")]
    pub ndcg10: f64,
    pub users: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    hr5: f64,
    ndcg5: f64,
    hr10: f64,
    ndcg10: f64,
    n: usize,
}

impl Sums {
    fn add(&mut self, rank: Option<usize>) {
        self.hr5 += hr_at_k(rank, 5);
        self.ndcg5 += ndcg_at_k(rank, 5);
        self.hr10 += hr_at_k(rank, 10);
        self.ndcg10 += ndcg_at_k(rank, 10);
        self.n += 1;
    }

    fn mean(&self) -> Metrics {
        let d = self.n.max(1) as f64;
        Metrics {
            hr5: self.hr5 / d,
            ndcg5: self.ndcg5 / d,
            hr10: self.hr10 / d,
            ndcg10: self.ndcg10 / d,
            users: self.n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub overall: Metrics,
    /// short (< 10), medium (10–50), long (> 50) histories.
    pub buckets: IndexMap<String, Metrics>,
    /// Cases whose held-out item is not in the catalog.
    pub skipped: usize,
    /// Cases whose pipeline run failed; scored as misses.
    pub failed: usize,
    /// Per-user rank of the held-out item within the top 10.
    pub ranks: BTreeMap<String, Option<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ms_per_sample: Option<f64>,
}

impl MetricsReport {
    /// Same report without timing, which is the only nondeterministic part.
    pub fn without_timing(&self) -> Self {
        Self {
            ms_per_sample: None,
            ..self.clone()
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.label);
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>8} {:>8} {:>8} {:>8}",
            "scope", "users", "HR@5", "NDCG@5", "HR@10", "NDCG@10"
        );
        let row = |out: &mut String, name: &str, m: &Metrics| {
            let _ = writeln!(
                out,
                "{:<10} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                name, m.users, m.hr5, m.ndcg5, m.hr10, m.ndcg10
            );
        };
        row(&mut out, "all", &self.overall);
        for (name, m) in &self.buckets {
            row(&mut out, name, m);
        }
        if let Some(ms) = self.ms_per_sample {
            let _ = writeln!(out, "ms/sample: {ms:.3}");
        }
        if self.skipped + self.failed > 0 {
            let _ = writeln!(out, "skipped: {}, failed: {}", self.skipped, self.failed);
        }
        out
    }
}

/// What a pipeline run returns for one case: the ranking and its
/// end-to-end milliseconds.
pub type CaseOutcome = Result<(RecommendationList, f64), String>;

/// Runs `pipeline` on every case in parallel and folds the results in case
/// order. The pipeline must rank at least 10 items for the @10 metrics.
pub fn evaluate<F>(label: &str, cases: &[EvalCase], skipped: usize, pipeline: F) -> MetricsReport
where
    F: Fn(&EvalCase) -> CaseOutcome + Sync,
{
    let outcomes: Vec<CaseOutcome> = cases.par_iter().map(&pipeline).collect();
    let mut overall = Sums::default();
    let mut buckets: IndexMap<String, Sums> = BUCKETS.iter().map(|b| (b.to_string(), Sums::default())).collect();
    let mut ranks = BTreeMap::new();
    let mut failed = 0;
    let mut ms_total = 0.0;
    let mut timed = 0usize;
    for (case, outcome) in cases.iter().zip(outcomes) {
        let rank = match outcome {
            Ok((list, ms)) => {
                ms_total += ms;
                timed += 1;
                list.rank_of(&case.truth)
            }
            Err(e) => {
                log::warn!("case {} failed: {e}", case.user_id);
                failed += 1;
                None
            }
        };
        overall.add(rank);
        buckets[bucket_of(case.history.len())].add(rank);
        ranks.insert(case.user_id.clone(), rank);
    }
    MetricsReport {
        label: label.to_string(),
        overall: overall.mean(),
        buckets: buckets.into_iter().map(|(k, s)| (k, s.mean())).collect(),
        skipped,
        failed,
        ranks,
        ms_per_sample: (timed > 0).then(|| ms_total / timed as f64),
    }
}

/// Seeded partition of `users` into (train, held out). Exactly
/// `round(fraction · n)` users are held out; both lists are sorted.
pub fn fewshot_holdout(users: &[String], fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>), EvalError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(EvalError::Fraction(fraction));
    }
    let mut sorted: Vec<String> = users.to_vec();
    sorted.sort();
    sorted.dedup();
    let held_n = (fraction * sorted.len() as f64).round() as usize;
    let mut shuffled = sorted.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held: HashSet<&String> = shuffled[..held_n].iter().collect();
    let (mut out, mut train) = (Vec::new(), Vec::new());
    for u in &sorted {
        if held.contains(u) {
            out.push(u.clone());
        } else {
            train.push(u.clone());
        }
    }
    Ok((train, out))
}

/// Few-shot cases: each held-out user's last interaction is the truth and
/// the `shots` interactions before it are the history.
pub fn fewshot_cases(
    log: &InteractionLog,
    held_out: &[String],
    shots: usize,
    catalog: &Catalog,
) -> (Vec<EvalCase>, usize) {
    let mut skipped = 0;
    let mut cases = Vec::new();
    for user in held_out {
        let history = log.history(user, DEFAULT_MAX_LEN);
        let items = history.interactions();
        let Some((truth, rest)) = items.split_last() else {
            skipped += 1;
            continue;
        };
        if rest.is_empty() || catalog.get(&truth.item_id).is_none() {
            skipped += 1;
            continue;
        }
        let context = rest[rest.len().saturating_sub(shots)..].to_vec();
        cases.push(EvalCase {
            user_id: user.clone(),
            history: UserHistory::new(user.clone(), context, DEFAULT_MAX_LEN),
            truth: truth.item_id.clone(),
            at: truth.timestamp,
        });
    }
    (cases, skipped)
}

/// Field-level agreement between two plans in [0,1]: the mean of
/// `1−|Δα|`, `1−|Δβ|`, encoder match, structured-flag match, Jaccard
/// similarity of the tag sets and `1 − |Δtotal| / 4500`.
pub fn plan_agreement(a: &StrategyPlan, b: &StrategyPlan) -> f64 {
    let ta: HashSet<&String> = a.tag_weights.keys().collect();
    let tb: HashSet<&String> = b.tag_weights.keys().collect();
    let union = ta.union(&tb).count();
    let jaccard = if union == 0 {
        1.0
    } else {
        ta.intersection(&tb).count() as f64 / union as f64
    };
    let total_gap = (a.total() as f64 - b.total() as f64).abs() / 4500.0;
    let parts = [
        1.0 - (a.alpha - b.alpha).abs(),
        1.0 - (a.beta - b.beta).abs(),
        f64::from(u8::from(a.encoder == b.encoder)),
        f64::from(u8::from(a.structured_enabled == b.structured_enabled)),
        jaccard,
        1.0 - total_gap.min(1.0),
    ];
    parts.iter().sum::<f64>() / parts.len() as f64
}

/// How plans are chosen in an evaluation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Ask the planner for every user.
    #[default]
    Plan,
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
    V7,
}

impl std::str::FromStr for Preset {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "plan" => Self::Plan,
            "v1" => Self::V1,
            "v2" => Self::V2,
            "v3" => Self::V3,
            "v4" => Self::V4,
            "v5" => Self::V5,
            "v6" => Self::V6,
            "v7" => Self::V7,
            _ => return Err(EvalError::UnknownPreset(s.to_string())),
        })
    }
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Plan => "plan",
            Self::V1 => "v1",
            Self::V2 => "v2",
            Self::V3 => "v3",
            Self::V4 => "v4",
            Self::V5 => "v5",
            Self::V6 => "v6",
            Self::V7 => "v7",
        }
    }

    /// The fixed plan of an ablation variant; `None` for [`Preset::Plan`].
    ///
    /// | variant | α | tags / total | encoder | β |
    /// |---|---|---|---|---|
    /// | v1 | 0.5 | 20 / 5000 | attention | 0.5 |
    /// | v2 | 1 | 20 / 5000 | attention | 0.5 |
    /// | v3 | 0 | 20 / 5000 | attention | 0.5 |
    /// | v4 | 0.5 | 3 / 500 | attention | 0.5 |
    /// | v5 | 0.5 | 20 / 5000 | graph | 0.5 |
    /// | v6 | 0.5 | 20 / 5000 | attention | 1 |
    /// | v7 | 0.5 | 20 / 5000 | attention | 0 |
    ///
    /// Tags are the most popular ones, capped at the largest allowed count
    /// the vocabulary can fill.
    pub fn fixed_plan(self, vocab: &TagVocab) -> Result<Option<StrategyPlan>, EvalError> {
        let (alpha, beta, encoder, tags, total) = match self {
            Self::Plan => return Ok(None),
            Self::V1 => (0.5, 0.5, EncoderKind::Attention, 20, 5000),
            Self::V2 => (1.0, 0.5, EncoderKind::Attention, 20, 5000),
            Self::V3 => (0.0, 0.5, EncoderKind::Attention, 20, 5000),
            Self::V4 => (0.5, 0.5, EncoderKind::Attention, 3, 500),
            Self::V5 => (0.5, 0.5, EncoderKind::Graph, 20, 5000),
            Self::V6 => (0.5, 1.0, EncoderKind::Attention, 20, 5000),
            Self::V7 => (0.5, 0.0, EncoderKind::Attention, 20, 5000),
        };
        let n = ALLOWED_TAG_COUNTS
            .iter()
            .copied()
            .filter(|&c| c <= tags && c <= vocab.len())
            .max()
            .ok_or(EvalError::SmallVocabulary(vocab.len()))?;
        let chosen = &vocab.by_popularity()[..n];
        let counts = apportion(&vec![1.0; n], total);
        Ok(Some(StrategyPlan {
            alpha,
            beta,
            structured_enabled: true,
            encoder,
            tag_weights: chosen
                .iter()
                .cloned()
                .zip(counts.into_iter().map(|c| c as u32))
                .collect(),
            justifications: STAGES
                .iter()
                .map(|s| (s.to_string(), format!("fixed preset {}", self.as_str())))
                .collect(),
        }))
    }
}

/// Candidate scope of an evaluation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Every tag at its full posting-list size: ranks against the whole corpus.
    #[default]
    FullCorpus,
    /// The plan's own tag counts.
    Serving,
}

/// Retrieval counts covering every item of every tag.
pub fn all_tags_plan(postings: &IndexMap<String, Vec<usize>>) -> IndexMap<String, u32> {
    postings
        .iter()
        .filter(|(_, p)| !p.is_empty())
        .map(|(t, p)| (t.clone(), p.len() as u32))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ItemRecord;

    fn log_with_lengths(lengths: &[usize]) -> InteractionLog {
        InteractionLog::from_rows(lengths.iter().enumerate().flat_map(|(u, &n)| {
            (0..n).map(move |i| (format!("u{u:02}"), Interaction::new(format!("i{i}"), i as i64).unwrap()))
        }))
    }

    #[test]
    fn five_interactions_split() {
        let spec = make_splits(&log_with_lengths(&[5, 2]), 200);
        assert_eq!(spec.users.len(), 1);
        assert_eq!(spec.excluded, vec!["u01"]);
        let u = &spec.users[0];
        assert_eq!(
            u.train.iter().map(|i| i.item_id.as_str()).collect::<Vec<_>>(),
            ["i0", "i1", "i2"]
        );
        assert_eq!(u.val.item_id, "i3");
        assert_eq!(u.test.item_id, "i4");
    }

    #[test]
    fn long_history_is_truncated() {
        let spec = make_splits(&log_with_lengths(&[250]), 200);
        let u = &spec.users[0];
        assert_eq!(u.train.len(), 198);
        assert_eq!(u.train[0].item_id, "i50");
        assert_eq!(u.test.item_id, "i249");
    }

    #[test]
    fn metric_values() {
        assert_eq!(hr_at_k(Some(1), 5), 1.0);
        assert_eq!(hr_at_k(Some(7), 5), 0.0);
        assert_eq!(hr_at_k(None, 10), 0.0);
        assert_eq!(ndcg_at_k(Some(1), 10), 1.0);
        assert!((ndcg_at_k(Some(2), 10) - 0.63093).abs() < 1e-5);
        assert_eq!(ndcg_at_k(Some(11), 10), 0.0);
    }

    #[test]
    fn haversine_one_degree() {
        let d = haversine_km(GeoPoint::new(0.0, 0.0).unwrap(), GeoPoint::new(0.0, 1.0).unwrap());
        assert!((d - 111.19).abs() < 0.01);
    }

    #[test]
    fn geo_filter_cases() {
        let item = |id: &str, geo: Option<(f64, f64)>| ItemRecord {
            item_id: id.into(),
            title: id.into(),
            attributes: String::new(),
            tags: vec!["poi".into()],
            geo: geo.map(|(a, b)| GeoPoint::new(a, b).unwrap()),
        };
        let cat = Catalog::new(vec![
            item("here", Some((0.0, 0.0))),
            item("far", Some((0.0, 1.0))),
            item("none", None),
        ])
        .unwrap();
        let cands = CandidateSet {
            item_ids: vec!["here".into(), "far".into(), "none".into()],
            per_tag_counts: IndexMap::new(),
        };
        let origin = GeoPoint::new(0.0, 0.0).unwrap();
        let (kept, missing) = geo_filter(&cands, origin, 5.0, &cat);
        assert_eq!(kept.item_ids, vec!["here"]);
        assert_eq!(missing, 1);
        let (all, missing) = geo_filter(&cands, origin, f64::INFINITY, &cat);
        assert_eq!(all, cands);
        assert_eq!(missing, 0);
    }

    fn case(user: &str, len: usize) -> EvalCase {
        EvalCase {
            user_id: user.into(),
            history: UserHistory::new(
                user,
                (0..len).map(|i| Interaction::new("x", i as i64).unwrap()).collect(),
                200,
            ),
            truth: "t".into(),
            at: 0,
        }
    }

    fn list_with_truth_at(rank: usize) -> RecommendationList {
        let ranked = (1..=10)
            .map(|r| {
                (
                    if r == rank { "t".to_string() } else { format!("o{r}") },
                    1.0 / r as f64,
                )
            })
            .collect();
        RecommendationList { ranked, k: 10 }
    }

    #[test]
    fn hand_fixture() {
        let cases = vec![case("a", 3), case("b", 20), case("c", 60)];
        let ranks: BTreeMap<&str, usize> = [("a", 1), ("b", 3), ("c", 12)].into_iter().collect();
        let report = evaluate("fixture", &cases, 0, |c| {
            Ok((list_with_truth_at(ranks[c.user_id.as_str()]), 1.0))
        });
        assert!((report.overall.hr10 - 2.0 / 3.0).abs() < 1e-9);
        assert!((report.overall.ndcg10 - 0.5).abs() < 1e-4);
        assert_eq!(report.buckets["short"].users, 1);
        assert_eq!(report.buckets["long"].hr10, 0.0);
        assert_eq!(report.ms_per_sample, Some(1.0));
    }

    #[test]
    fn holdout_is_exact_and_seeded() {
        let users: Vec<String> = (0..100).map(|i| format!("u{i:03}")).collect();
        let (train, held) = fewshot_holdout(&users, 0.10, 7).unwrap();
        assert_eq!(held.len(), 10);
        assert_eq!(train.len(), 90);
        assert!(held.iter().all(|h| !train.contains(h)));
        assert_eq!(fewshot_holdout(&users, 0.10, 7).unwrap().1, held);
        assert!(fewshot_holdout(&users, 1.0, 7).is_err());
    }

    fn plan() -> StrategyPlan {
        Preset::V1
            .fixed_plan(&TagVocab::from_tags((0..25).map(|i| format!("t{i:02}"))))
            .unwrap()
            .unwrap()
    }

    #[test]
    fn agreement_examples() {
        let a = plan();
        assert_eq!(plan_agreement(&a, &a), 1.0);
        let mut b = a.clone();
        b.encoder = EncoderKind::Graph;
        assert!((plan_agreement(&a, &b) - 5.0 / 6.0).abs() < 1e-12);
        let mut c = a.clone();
        c.alpha = 0.7;
        assert!((plan_agreement(&a, &c) - 0.9666666).abs() < 1e-6);
    }

    #[test]
    fn presets_follow_the_table() {
        let vocab = TagVocab::from_tags((0..25).map(|i| format!("t{i:02}")));
        let v4 = Preset::V4.fixed_plan(&vocab).unwrap().unwrap();
        assert_eq!((v4.tag_weights.len(), v4.total()), (3, 500));
        let v2 = Preset::V2.fixed_plan(&vocab).unwrap().unwrap();
        assert_eq!((v2.alpha, v2.tag_weights.len(), v2.total()), (1.0, 20, 5000));
        assert_eq!(
            Preset::V5.fixed_plan(&vocab).unwrap().unwrap().encoder,
            EncoderKind::Graph
        );
        let small = TagVocab::from_tags((0..10).map(|i| format!("t{i}")));
        assert_eq!(Preset::V1.fixed_plan(&small).unwrap().unwrap().tag_weights.len(), 10);
        assert!(Preset::Plan.fixed_plan(&vocab).unwrap().is_none());
        assert!("v9".parse::<Preset>().is_err());
    }
}
