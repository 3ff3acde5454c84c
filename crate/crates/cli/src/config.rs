//! TOML configuration. Every field has a default; command-line flags
//! override the file.

use std::path::Path;

use anyhow::{bail, Context, Result};
use cdrec::encoders::TrainConfig;
use cdrec::eval::{EvalTarget, Preset, Scope, DEFAULT_FEWSHOT_FRACTION, DEFAULT_FEWSHOT_INTERACTIONS};
use cdrec::lm::BackendConfig;
use cdrec::orchestrator::{ChannelProfile, ExecutionMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub domain: DomainConfig,
    pub backend: BackendConfig,
    pub embedding: EmbeddingConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub session: SessionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub tag: String,
    /// Fast-moving interests; the planner prefers the graph encoder.
    pub dynamic: bool,
    /// Radius of the location filter; unset for non-location domains.
    pub geo_radius_km: Option<f64>,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            tag: "general".into(),
            dynamic: false,
            geo_radius_km: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// Projected embedding width; capped at the backend's raw width.
    pub dim: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self { dim: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub preset: Preset,
    pub scope: Scope,
    pub target: EvalTarget,
    pub max_len: usize,
    pub fewshot_fraction: f64,
    pub fewshot_interactions: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Plan,
            scope: Scope::FullCorpus,
            target: EvalTarget::Test,
            max_len: cdrec::domain::DEFAULT_MAX_LEN,
            fewshot_fraction: DEFAULT_FEWSHOT_FRACTION,
            fewshot_interactions: DEFAULT_FEWSHOT_INTERACTIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub k: usize,
    pub explain: bool,
    pub mode: ExecutionMode,
    pub staleness_days: i64,
    pub channel: ChannelProfile,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            k: 10,
            explain: false,
            mode: ExecutionMode::Parallel,
            staleness_days: 30,
            channel: ChannelProfile::default(),
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Named channel profiles, or a custom `ONE_WAY_MS:BYTES_PER_MS` pair.
pub fn latency_profile(spec: &str) -> Result<ChannelProfile> {
    Ok(match spec {
        "instant" => ChannelProfile::INSTANT,
        "lan" => ChannelProfile::default(),
        "wan" => ChannelProfile {
            one_way_delay_ms: 40.0,
            bytes_per_ms: 100.0,
        },
        custom => {
            let Some((delay, rate)) = custom.split_once(':') else {
                bail!("unknown latency profile {custom:?}; use instant, lan, wan or ONE_WAY_MS:BYTES_PER_MS");
            };
            let profile = ChannelProfile {
                one_way_delay_ms: delay.trim().parse().context("one-way delay")?,
                bytes_per_ms: rate.trim().parse().context("bytes per ms")?,
            };
            if !(profile.one_way_delay_ms >= 0.0 && profile.bytes_per_ms >= 0.0) {
                bail!("latency profile values must be non-negative");
            }
            profile
        }
    })
}
