//! Seeded synthetic corpus with a planted tag preference.
//!
//! Every user prefers one tag and draws each interaction from it with
//! probability `affinity`, otherwise from a uniformly random tag. Inside a
//! tag, items are drawn with Zipf popularity. Queries name the preferred tag.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Catalog, DomainError, GeoPoint, Interaction, InteractionLog, ItemRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub items: usize,
    pub tags: usize,
    pub users: usize,
    /// Probability an interaction comes from the user's preferred tag.
    pub affinity: f64,
    /// Zipf exponent of within-tag popularity.
    pub zipf: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability an item carries a second tag.
    pub second_tag: f64,
    /// Attach coordinates to items and interactions.
    pub geo: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            items: 2000,
            tags: 20,
            users: 300,
            affinity: 0.8,
            zipf: 1.0,
            min_len: 5,
            max_len: 80,
            second_tag: 0.2,
            geo: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub catalog: Catalog,
    pub log: InteractionLog,
    pub queries: BTreeMap<String, String>,
    pub preferred: BTreeMap<String, String>,
}

pub fn item_id(i: usize) -> String {
    format!("it-{i:05}")
}

pub fn tag_name(t: usize) -> String {
    format!("genre{t:02}")
}

pub fn user_id(u: usize) -> String {
    format!("user{u:04}")
}

const BRANDS: [&str; 8] = [
    "acme", "globex", "initech", "umbrella", "stark", "wayne", "hooli", "vandelay",
];
const NOUNS: [&str; 10] = [
    "lamp", "novel", "jacket", "album", "blender", "poster", "sneaker", "teapot", "camera", "puzzle",
];
const QUERY_TEMPLATES: [&str; 4] = [
    "looking for something in {tag} tonight",
    "i would like more {tag} picks please",
    "any good {tag} suggestions",
    "recommend me a {tag} item",
];

const BASE_TIME: i64 = 1_700_000_000;
const CENTER: (f64, f64) = (40.75, -73.99);

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus, DomainError> {
    assert!(cfg.tags >= 1 && cfg.items >= cfg.tags && cfg.min_len >= 1 && cfg.max_len >= cfg.min_len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter = |rng: &mut ChaCha8Rng| -> Result<GeoPoint, DomainError> {
        GeoPoint::new(
            CENTER.0 + rng.random_range(-0.05..0.05),
            CENTER.1 + rng.random_range(-0.05..0.05),
        )
    };

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cfg.tags];
    let mut items = Vec::with_capacity(cfg.items);
    for i in 0..cfg.items {
        let primary = i % cfg.tags;
        members[primary].push(i);
        let mut tags = vec![tag_name(primary)];
        if cfg.tags > 1 && rng.random_bool(cfg.second_tag) {
            let other = (primary + rng.random_range(1..cfg.tags)) % cfg.tags;
            tags.push(tag_name(other));
        }
        let brand = BRANDS[rng.random_range(0..BRANDS.len())];
        let noun = NOUNS[rng.random_range(0..NOUNS.len())];
        items.push(ItemRecord {
            item_id: item_id(i),
            title: format!("{brand} {noun} {i}"),
            attributes: format!("brand={brand};kind={noun}"),
            tags,
            geo: if cfg.geo { Some(jitter(&mut rng)?) } else { None },
        });
    }
    let catalog = Catalog::new(items)?;

    let zipf: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| WeightedIndex::new((0..m.len()).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf))).expect("nonempty tag"))
        .collect();

    let mut rows = Vec::new();
    let mut queries = BTreeMap::new();
    let mut preferred = BTreeMap::new();
    for u in 0..cfg.users {
        let uid = user_id(u);
        let pref = rng.random_range(0..cfg.tags);
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let home = if cfg.geo { Some(jitter(&mut rng)?) } else { None };
        let mut t = BASE_TIME + rng.random_range(0..86_400 * 30);
        for _ in 0..len {
            let tag = if rng.random_bool(cfg.affinity) {
                pref
            } else {
                rng.random_range(0..cfg.tags)
            };
            let item = members[tag][zipf[tag].sample(&mut rng)];
            t += rng.random_range(3_600..3 * 86_400);
            let mut interaction = Interaction::new(item_id(item), t)?;
            if let Some(g) = home {
                interaction = interaction.with_geo(g);
            }
            rows.push((uid.clone(), interaction));
        }
        let template = QUERY_TEMPLATES[rng.random_range(0..QUERY_TEMPLATES.len())];
        queries.insert(uid.clone(), template.replace("{tag}", &tag_name(pref)));
        preferred.insert(uid, tag_name(pref));
    }
    Ok(SynthCorpus {
        catalog,
        log: InteractionLog::from_rows(rows),
        queries,
        preferred,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            items: 200,
            tags: 10,
            users: 40,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.queries, b.queries);
        let c = generate(&SynthConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn affinity_is_planted() {
        let corpus = generate(&small()).unwrap();
        let (mut hits, mut total) = (0usize, 0usize);
        for (user, seq) in &corpus.log.users {
            let pref = &corpus.preferred[user];
            for i in seq {
                total += 1;
                hits += usize::from(corpus.catalog.get(&i.item_id).unwrap().tags[0] == *pref);
            }
        }
        let share = hits as f64 / total as f64;
        assert!(share > 0.75 && share < 0.9, "{share}");
    }

    #[test]
    fn queries_name_the_preferred_tag() {
        let corpus = generate(&small()).unwrap();
        for (user, q) in &corpus.queries {
            assert!(q.contains(&corpus.preferred[user]));
            assert!(q.split_whitespace().count() >= 3);
        }
    }
}
