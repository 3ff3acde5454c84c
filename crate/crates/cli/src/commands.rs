use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cdrec::domain::{write_catalog, write_interactions, EncoderKind, InteractionLog, Query};
use cdrec::encoders::TrainConfig;
use cdrec::eval::{
    fewshot_cases, fewshot_holdout, make_splits, plan_agreement, split_cases, EvalTarget, MetricsReport, Scope,
};
use cdrec::lm::{Backends, TextBackend};
use cdrec::orchestrator::{
    serve, Channel, ExecutionMode, Session, SessionOptions, SessionResult, SystemClock, TcpChannel,
};
use cdrec::store::{projection_file, write_row_index, TensorFile};
use cdrec::synth::{generate, SynthConfig};
use cdrec::system::{embed_items, evaluate_system, train_encoders, RunSpec, System, DEFAULT_QUERY};
use indexmap::IndexMap;
use serde::Serialize;

use crate::config::Config;
use crate::data::{self, ensure_dir, write_json, write_queries, write_with, DataDir};

pub fn synth(out: &Path, synth: &SynthConfig) -> Result<()> {
    let corpus = generate(synth)?;
    ensure_dir(out)?;
    write_with(&out.join(data::CATALOG), |w| write_catalog(&corpus.catalog, w))?;
    write_with(&out.join(data::INTERACTIONS), |w| write_interactions(&corpus.log, w))?;
    write_with(&out.join(data::QUERIES), |w| write_queries(&corpus.queries, w))?;
    println!(
        "wrote {} items, {} users, {} interactions to {}",
        corpus.catalog.len(),
        corpus.log.users.len(),
        corpus.log.num_interactions(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct IngestReport {
    #[serde(rename = "#User")]
    pub users: usize,
    #[serde(rename = "#Item")]
    pub items: usize,
    #[serde(rename = "#Interactions")]
    pub interactions: usize,
    #[serde(rename = "#Tags")]
    pub tags: usize,
    /// Users too short for a train/validation/test split.
    pub users_below_three: usize,
    pub items_with_location: usize,
    pub queries: usize,
}

#[derive(Serialize)]
struct TagEntry<'a> {
    popularity: usize,
    items: Vec<&'a str>,
}

pub fn ingest(catalog: &Path, interactions: &Path, queries: Option<&Path>, out: &Path) -> Result<()> {
    let catalog = cdrec::domain::load_catalog(catalog).with_context(|| format!("catalog {}", catalog.display()))?;
    let log = cdrec::domain::load_interactions(interactions)
        .with_context(|| format!("interactions {}", interactions.display()))?;
    log.check_items(&catalog)?;
    let queries = match queries {
        Some(path) => data::read_queries(std::io::BufReader::new(std::fs::File::open(path)?))
            .with_context(|| format!("queries {}", path.display()))?,
        None => BTreeMap::new(),
    };

    let mut index: IndexMap<&str, TagEntry> = catalog
        .vocab()
        .by_popularity()
        .iter()
        .map(|t| {
            (
                t.as_str(),
                TagEntry {
                    popularity: catalog.vocab().popularity(t),
                    items: Vec::new(),
                },
            )
        })
        .collect();
    for item in catalog.items() {
        for tag in &item.tags {
            if let Some(entry) = index.get_mut(tag.as_str()) {
                entry.items.push(&item.item_id);
            }
        }
    }
    let report = IngestReport {
        users: log.users.len(),
        items: catalog.len(),
        interactions: log.num_interactions(),
        tags: catalog.vocab().len(),
        users_below_three: log.users.values().filter(|s| s.len() < 3).count(),
        items_with_location: catalog.items().iter().filter(|i| i.geo.is_some()).count(),
        queries: queries.len(),
    };

    ensure_dir(out)?;
    write_with(&out.join(data::CATALOG), |w| write_catalog(&catalog, w))?;
    write_with(&out.join(data::INTERACTIONS), |w| write_interactions(&log, w))?;
    if !queries.is_empty() {
        write_with(&out.join(data::QUERIES), |w| write_queries(&queries, w))?;
    }
    write_json(&out.join(data::TAG_INDEX), &index)?;
    write_json(&out.join(data::INGEST_REPORT), &report)?;
    println!("{:>8} {:>8} {:>14} {:>6}", "#User", "#Item", "#Interactions", "#Tags");
    println!(
        "{:>8} {:>8} {:>14} {:>6}",
        report.users, report.items, report.interactions, report.tags
    );
    if report.users_below_three > 0 {
        println!(
            "{} users have fewer than 3 interactions and are left out of evaluation",
            report.users_below_three
        );
    }
    Ok(())
}

pub fn embed_items_cmd(dir: &DataDir, cfg: &Config, backends: &Backends) -> Result<()> {
    let catalog = dir.catalog()?;
    if catalog.is_empty() {
        bail!("catalog is empty");
    }
    let backend: &dyn TextBackend = backends.cloud.as_ref();
    let d_raw = backend.embed_text(&catalog.item(0).text())?.dim();
    let mut dim = cfg.embedding.dim;
    if dim > d_raw {
        log::warn!("embedding dim {dim} exceeds the backend's {d_raw}; using {d_raw}");
        dim = d_raw;
    }
    let emb = embed_items(&catalog, backend, dim)?;
    let ids: Vec<&str> = catalog.items().iter().map(|i| i.item_id.as_str()).collect();
    TensorFile::new()
        .with("raw", emb.raw)
        .with("projected", emb.projected)
        .save(&dir.path(data::EMBEDDINGS))?;
    write_with(&dir.path(data::ITEM_INDEX), |w| write_row_index(&ids, w))?;
    projection_file(&emb.projection).save(&dir.path(data::PROJECTION))?;
    let total: f64 = emb.projection.explained_variance.iter().sum();
    println!(
        "embedded {} items: {d_raw} -> {dim} dims, captured variance {total:.4}",
        catalog.len()
    );
    Ok(())
}

pub fn parse_encoders(spec: &str) -> Result<Vec<EncoderKind>> {
    Ok(match spec {
        "attention" => vec![EncoderKind::Attention],
        "graph" => vec![EncoderKind::Graph],
        "both" => vec![EncoderKind::Attention, EncoderKind::Graph],
        other => bail!("unknown encoder {other:?}; use attention, graph or both"),
    })
}

fn train_on(
    catalog: &cdrec::domain::Catalog,
    log: &InteractionLog,
    item_table: cdrec::vecmath::Matrix,
    kinds: &[EncoderKind],
    cfg: &Config,
) -> Result<(cdrec::encoders::EncoderParams, IndexMap<String, Vec<f64>>)> {
    let spec = make_splits(log, cfg.eval.max_len);
    let rows = spec.train_rows(catalog);
    let train_cfg = TrainConfig {
        max_len: cfg.train.max_len.min(cfg.eval.max_len),
        ..cfg.train.clone()
    };
    Ok(train_encoders(&rows, item_table, kinds, &train_cfg)?)
}

pub fn train(dir: &DataDir, cfg: &Config, kinds: &[EncoderKind]) -> Result<()> {
    let catalog = dir.catalog()?;
    let log = dir.interactions()?;
    let item_table = dir.projected_items(&catalog)?;
    let (params, traces) = train_on(&catalog, &log, item_table, kinds, cfg)?;
    params.to_tensor_file().save(&dir.path(data::PARAMS))?;
    write_json(&dir.path(data::LOSS_TRACE), &traces)?;
    for (kind, trace) in &traces {
        println!(
            "{kind}: {} epochs, loss {:.4} -> {:.4}",
            trace.len(),
            trace.first().copied().unwrap_or(f64::NAN),
            trace.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn run_spec(cfg: &Config, mode: ExecutionMode) -> RunSpec {
    RunSpec {
        preset: cfg.eval.preset,
        scope: cfg.eval.scope,
        mode,
        channel: cfg.session.channel,
        staleness_days: cfg.session.staleness_days,
        geo_radius_km: cfg.domain.geo_radius_km,
    }
}

#[derive(Serialize)]
struct LatencyReport<'a> {
    label: &'a str,
    users: usize,
    ms_per_sample: Option<f64>,
    mode: ExecutionMode,
    channel: cdrec::orchestrator::ChannelProfile,
}

fn write_reports(
    report: &MetricsReport,
    metrics: &Path,
    latency: &Path,
    cfg: &Config,
    mode: ExecutionMode,
) -> Result<()> {
    write_json(metrics, &report.without_timing())?;
    write_json(
        latency,
        &LatencyReport {
            label: &report.label,
            users: report.overall.users,
            ms_per_sample: report.ms_per_sample,
            mode,
            channel: cfg.session.channel,
        },
    )?;
    print!("{}", report.to_table());
    Ok(())
}

pub struct EvalArgs {
    pub metrics: Option<PathBuf>,
    pub latency: Option<PathBuf>,
    pub mode: ExecutionMode,
}

fn label(cfg: &Config) -> String {
    let scope = match cfg.eval.scope {
        Scope::FullCorpus => "full corpus",
        Scope::Serving => "serving",
    };
    format!("{} / {} / {}", cfg.domain.tag, cfg.eval.preset.as_str(), scope)
}

pub fn eval(dir: &DataDir, cfg: &Config, backends: &Backends, args: &EvalArgs) -> Result<()> {
    let system = dir.system(cfg, backends)?;
    let log = dir.interactions()?;
    let spec = make_splits(&log, cfg.eval.max_len);
    let (cases, skipped) = split_cases(&spec, cfg.eval.target, &system.catalog);
    if !spec.excluded.is_empty() {
        log::info!("{} users with fewer than 3 interactions excluded", spec.excluded.len());
    }
    let report = evaluate_system(
        &system,
        &label(cfg),
        &cases,
        skipped,
        &dir.queries()?,
        &run_spec(cfg, args.mode),
    )?;
    let metrics = args.metrics.clone().unwrap_or_else(|| dir.path("metrics.json"));
    let latency = args.latency.clone().unwrap_or_else(|| dir.path("latency.json"));
    write_reports(&report, &metrics, &latency, cfg, args.mode)
}

pub fn fewshot(
    dir: &DataDir,
    cfg: &Config,
    backends: &Backends,
    kinds: &[EncoderKind],
    mode: ExecutionMode,
) -> Result<()> {
    let catalog = dir.catalog()?;
    let log = dir.interactions()?;
    let users: Vec<String> = log.users.keys().cloned().collect();
    let (train_users, held) = fewshot_holdout(&users, cfg.eval.fewshot_fraction, cfg.train.seed)?;
    let train_log = InteractionLog {
        users: train_users.iter().map(|u| (u.clone(), log.users[u].clone())).collect(),
    };
    let (params, _) = train_on(&catalog, &train_log, dir.projected_items(&catalog)?, kinds, cfg)?;
    let system = System::new(
        backends,
        std::sync::Arc::new(catalog),
        std::sync::Arc::new(dir.projection()?),
        std::sync::Arc::new(params),
        cdrec::cloud::DomainProfile {
            domain_tag: cfg.domain.tag.clone(),
            dynamic: cfg.domain.dynamic,
        },
    )?;
    let (cases, skipped) = fewshot_cases(&log, &held, cfg.eval.fewshot_interactions, &system.catalog);
    println!(
        "held out {} of {} users, {} interactions each at test time",
        held.len(),
        users.len(),
        cfg.eval.fewshot_interactions
    );
    let report = evaluate_system(
        &system,
        &format!("{} (few-shot)", label(cfg)),
        &cases,
        skipped,
        &dir.queries()?,
        &run_spec(cfg, mode),
    )?;
    write_reports(
        &report,
        &dir.path("fewshot_metrics.json"),
        &dir.path("fewshot_latency.json"),
        cfg,
        mode,
    )
}

#[derive(Serialize)]
struct AgreementReport {
    users: usize,
    mean_agreement: f64,
    per_user: BTreeMap<String, f64>,
}

/// Agreement between plans made from the generated abstract and from the
/// deterministic abstract computed directly from the raw history.
pub fn agreement(dir: &DataDir, cfg: &Config, backends: &Backends) -> Result<()> {
    let system = dir.system(cfg, backends)?;
    let log = dir.interactions()?;
    let spec = make_splits(&log, cfg.eval.max_len);
    let (cases, _) = split_cases(&spec, EvalTarget::Test, &system.catalog);
    let queries = dir.queries()?;
    let agent = system.node.agent();
    let mut per_user = BTreeMap::new();
    for case in &cases {
        let text = queries.get(&case.user_id).map_or(DEFAULT_QUERY, String::as_str);
        let query = Query::new(case.user_id.clone(), text, cfg.domain.tag.clone())?;
        let generated = system
            .device
            .generate_abstract(&query, &case.history, case.at, cfg.session.staleness_days)?
            .abstract_;
        let raw = system
            .device
            .fallback_abstract(&query, &case.history, case.at, cfg.session.staleness_days);
        let a = agent.plan_strategy(&generated)?.plan;
        let b = agent.plan_strategy(&raw)?.plan;
        per_user.insert(case.user_id.clone(), plan_agreement(&a, &b));
    }
    let mean = per_user.values().sum::<f64>() / per_user.len().max(1) as f64;
    let report = AgreementReport {
        users: per_user.len(),
        mean_agreement: mean,
        per_user,
    };
    write_json(&dir.path("agreement.json"), &report)?;
    println!("plan agreement over {} users: {mean:.4}", report.users);
    Ok(())
}

pub struct SimulateArgs {
    pub user: String,
    pub query: Option<String>,
    pub now: Option<i64>,
    pub cloud_addr: Option<SocketAddr>,
    pub mode: ExecutionMode,
}

pub fn simulate(dir: &DataDir, cfg: &Config, backends: &Backends, args: &SimulateArgs) -> Result<()> {
    let system = dir.system(cfg, backends)?;
    let log = dir.interactions()?;
    let history = log.history(&args.user, cfg.eval.max_len);
    if history.is_empty() {
        log::warn!("user {} has no interactions", args.user);
    }
    let text = match &args.query {
        Some(q) => q.clone(),
        None => dir
            .queries()?
            .remove(&args.user)
            .unwrap_or_else(|| DEFAULT_QUERY.to_string()),
    };
    let query = Query::new(args.user.clone(), text, cfg.domain.tag.clone())?;
    let opts = SessionOptions {
        k: cfg.session.k,
        explain: cfg.session.explain,
        mode: args.mode,
        channel: cfg.session.channel,
        now: args
            .now
            .or_else(|| history.interactions().last().map(|i| i.timestamp))
            .unwrap_or(0),
        staleness_days: cfg.session.staleness_days,
        plan_override: cfg.eval.preset.fixed_plan(system.catalog.vocab())?,
        retrieval_override: None,
        geo_radius_km: cfg.domain.geo_radius_km,
        device_cost_ms: 0,
    };
    let channel: Box<dyn Channel> = match args.cloud_addr {
        Some(addr) => Box::new(TcpChannel::connect(addr).with_context(|| format!("connecting to {addr}"))?),
        None => Box::new(system.channel()),
    };
    let clock = SystemClock::default();
    let session = Session {
        device: &system.device,
        channel: channel.as_ref(),
        clock: &clock,
    };
    let result = session.run(&query, &history, &opts)?;
    print!("{}", render_session(&system, &result));
    Ok(())
}

pub fn render_session(system: &System, result: &SessionResult) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let plan = &result.plan;
    let tags: Vec<String> = plan.tag_weights.iter().map(|(t, n)| format!("{t}:{n}")).collect();
    let _ = writeln!(
        out,
        "plan: alpha={:.2} beta={:.2} encoder={} structured={} tags=[{}]",
        plan.alpha,
        plan.beta,
        plan.encoder.as_str(),
        if plan.structured_enabled { "on" } else { "off" },
        tags.join(", ")
    );
    let _ = writeln!(out, "candidates: {}", result.candidates);
    let _ = writeln!(out, "recommendations:");
    for (rank, (id, score)) in result.recommendations.ranked.iter().enumerate() {
        let desc = system.catalog.get(id).map(|i| i.describe()).unwrap_or_default();
        let _ = writeln!(out, "  {:>2}. {id}  {score:>9.4}  {desc}", rank + 1);
    }
    let ledger = &result.ledger;
    let _ = writeln!(out, "latency (ms):");
    for (stage, ms) in &ledger.stages {
        let _ = writeln!(out, "  {stage:<20} {ms:>9.3}");
    }
    let _ = writeln!(
        out,
        "  {:<20} {:>9.3}  ({} messages)",
        "channel",
        ledger.channel_total_ms(),
        ledger.channel.len()
    );
    let _ = writeln!(
        out,
        "  {:<20} {:>9.3}",
        "concurrent segment", ledger.concurrent_segment_ms
    );
    let _ = writeln!(out, "  {:<20} {:>9.3}", "end to end", ledger.end_to_end_ms);
    for w in &result.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    if let Some(text) = &result.explanation {
        let _ = writeln!(out, "explanation:");
        for line in text.lines() {
            let _ = writeln!(out, "  {line}");
        }
    }
    out
}

pub fn serve_cloud(dir: &DataDir, cfg: &Config, backends: &Backends, listen: SocketAddr) -> Result<()> {
    let system = dir.system(cfg, backends)?;
    let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    println!("cloud node listening on {}", listener.local_addr()?);
    serve(listener, system.node.clone())?;
    Ok(())
}
