//! Offline artifact building and evaluation wiring for a full system.

use std::collections::BTreeMap;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{CloudAgent, CloudError, DomainProfile, ItemIndex};
use crate::device::DeviceAgent;
use crate::domain::{Catalog, EncoderKind, Query};
use crate::encoders::{train, EncoderError, EncoderParams, TrainConfig};
use crate::eval::{all_tags_plan, evaluate, EvalCase, EvalError, MetricsReport, Preset, Scope};
use crate::lm::{BackendError, Backends, TextBackend};
use crate::orchestrator::{
    ChannelProfile, CloudNode, ExecutionMode, InProcessChannel, Session, SessionOptions, SystemClock,
};
use crate::vecmath::{fit_pca, project, Matrix, Projection, VecError};

/// Query used for users without a recorded request.
pub const DEFAULT_QUERY: &str = "recommend something I would enjoy next";

#[derive(Debug, Error)]
pub enum SystemError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Vec(#[from] VecError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("backend returned {got}-dim vectors after {expected}-dim ones")]
    RawDim { expected: usize, got: usize },
}

/// Item text embeddings before and after projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbeddings {
    pub raw: Matrix,
    pub projection: Projection,
    pub projected: Matrix,
}

/// Embeds every item's text, fits the projection on those vectors and
/// projects them to `d` dimensions.
pub fn embed_items(catalog: &Catalog, backend: &dyn TextBackend, d: usize) -> Result<ItemEmbeddings, SystemError> {
    let vectors: Vec<Vec<f64>> = catalog
        .items()
        .par_iter()
        .map(|item| backend.embed_text(&item.text()).map(|v| v.0))
        .collect::<Result<_, _>>()?;
    let d_raw = vectors.first().map_or(0, Vec::len);
    if let Some(bad) = vectors.iter().find(|v| v.len() != d_raw) {
        return Err(SystemError::RawDim {
            expected: d_raw,
            got: bad.len(),
        });
    }
    let raw = Matrix::from_rows(&vectors)?;
    let projection = fit_pca(&raw, d)?;
    let rows: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| project(v, &projection).map(|e| e.0))
        .collect::<Result<_, _>>()?;
    Ok(ItemEmbeddings {
        projected: Matrix::from_rows(&rows)?,
        raw,
        projection,
    })
}

/// Trains each encoder in `kinds` in turn, each continuing from the item
/// table the previous one left. Returns the parameters and one loss trace
/// per encoder.
pub fn train_encoders(
    sequences: &[Vec<usize>],
    item_table: Matrix,
    kinds: &[EncoderKind],
    cfg: &TrainConfig,
) -> Result<(EncoderParams, IndexMap<String, Vec<f64>>), EncoderError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = EncoderParams::init(item_table, cfg.max_len, &mut rng);
    let mut traces = IndexMap::new();
    for &kind in kinds {
        let out = train(sequences, params, kind, cfg)?;
        params = out.params;
        traces.insert(kind.as_str().to_string(), out.loss_trace);
    }
    Ok((params, traces))
}

/// Both agents of one domain, wired for in-process sessions.
pub struct System {
    pub node: Arc<CloudNode>,
    pub device: DeviceAgent,
    pub catalog: Arc<Catalog>,
    pub profile: DomainProfile,
}

impl System {
    /// The trained item table serves retrieval as well as ranking.
    pub fn new(
        backends: &Backends,
        catalog: Arc<Catalog>,
        projection: Arc<Projection>,
        params: Arc<EncoderParams>,
        profile: DomainProfile,
    ) -> Result<Self, SystemError> {
        let index = Arc::new(ItemIndex::build(&catalog, Arc::new(params.item_table.clone()))?);
        let agent = CloudAgent::new(backends.cloud.clone(), profile.clone(), &catalog, projection, index);
        let device = DeviceAgent::new(
            backends.device.clone(),
            catalog.clone(),
            params,
            profile.domain_tag.clone(),
        );
        Ok(Self {
            node: Arc::new(CloudNode::new(agent)),
            device,
            catalog,
            profile,
        })
    }

    pub fn channel(&self) -> InProcessChannel {
        InProcessChannel::new(self.node.clone())
    }
}

/// How an evaluation run drives sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub preset: Preset,
    pub scope: Scope,
    pub mode: ExecutionMode,
    pub channel: ChannelProfile,
    pub staleness_days: i64,
    pub geo_radius_km: Option<f64>,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            preset: Preset::Plan,
            scope: Scope::FullCorpus,
            mode: ExecutionMode::Parallel,
            channel: ChannelProfile::default(),
            staleness_days: 30,
            geo_radius_km: None,
        }
    }
}

/// Runs one session per case and scores the top 10. Each session uses the
/// user's query from `queries` or [`DEFAULT_QUERY`], and the held-out
/// interaction's timestamp as "now".
pub fn evaluate_system(
    system: &System,
    label: &str,
    cases: &[EvalCase],
    skipped: usize,
    queries: &BTreeMap<String, String>,
    spec: &RunSpec,
) -> Result<MetricsReport, SystemError> {
    let base = SessionOptions {
        k: 10,
        mode: spec.mode,
        channel: spec.channel,
        staleness_days: spec.staleness_days,
        plan_override: spec.preset.fixed_plan(system.catalog.vocab())?,
        retrieval_override: match spec.scope {
            Scope::FullCorpus => Some(all_tags_plan(system.node.agent().index().postings())),
            Scope::Serving => None,
        },
        geo_radius_km: spec.geo_radius_km,
        ..SessionOptions::default()
    };
    let channel = system.channel();
    let clock = SystemClock::default();
    let session = Session {
        device: &system.device,
        channel: &channel,
        clock: &clock,
    };
    Ok(evaluate(label, cases, skipped, |case| {
        let text = queries.get(&case.user_id).map_or(DEFAULT_QUERY, String::as_str);
        let query =
            Query::new(case.user_id.clone(), text, system.profile.domain_tag.clone()).map_err(|e| e.to_string())?;
        let opts = SessionOptions {
            now: case.at,
            ..base.clone()
        };
        let result = session.run(&query, &case.history, &opts).map_err(|e| e.to_string())?;
        Ok((result.recommendations, result.ledger.end_to_end_ms))
    }))
}
