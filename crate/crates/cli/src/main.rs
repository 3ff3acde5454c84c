//! `cdrec`: ingest, embed, train, evaluate and simulate cloud–device
//! recommendation sessions.

mod commands;
mod config;
mod data;

use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Result;
use cdrec::eval::Preset;
use cdrec::lm::{BackendKind, Backends};
use cdrec::orchestrator::ExecutionMode;
use cdrec::synth::SynthConfig;
use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{EvalArgs, SimulateArgs};
use crate::config::Config;
use crate::data::DataDir;

#[derive(Debug, Parser)]
#[command(name = "cdrec", version, about = "Cloud-device collaborative recommendation")]
struct Cli {
    /// TOML configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Data directory holding ingested files and artifacts.
    #[arg(long, global = true, default_value = "data")]
    data: PathBuf,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    /// Seed for training and the synthetic generator.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Projected embedding width.
    #[arg(long, global = true)]
    dim: Option<usize>,
    /// Recommendations per session.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// `plan` asks the planner; v1..v7 use a fixed ablation plan.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    #[arg(long, global = true, value_enum)]
    explain: Option<OnOff>,
    /// instant, lan, wan or ONE_WAY_MS:BYTES_PER_MS.
    #[arg(long, global = true)]
    latency_profile: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Stub,
    Remote,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScopeArg {
    Full,
    Serving,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TargetArg {
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Parallel,
    Sequential,
}

impl From<ModeArg> for ExecutionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Parallel => Self::Parallel,
            ModeArg::Sequential => Self::Sequential,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus (catalog, interactions, queries).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        items: usize,
        #[arg(long, default_value_t = 10)]
        tags: usize,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 5)]
        min_len: usize,
        #[arg(long, default_value_t = 60)]
        max_len: usize,
        #[arg(long, default_value_t = 0.8)]
        affinity: f64,
        /// Give items and interactions coordinates.
        #[arg(long)]
        geo: bool,
    },
    /// Validate raw files and write the catalog, tag index and report.
    Ingest {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Embed item text, fit the projection and store both.
    EmbedItems,
    /// Train the structured encoders on the training split.
    Train {
        /// attention, graph or both.
        #[arg(long, default_value = "both")]
        encoder: String,
    },
    /// Leave-last-out evaluation.
    Eval {
        #[arg(long, value_enum)]
        scope: Option<ScopeArg>,
        #[arg(long, value_enum)]
        target: Option<TargetArg>,
        #[arg(long, value_enum, default_value = "parallel")]
        mode: ModeArg,
        /// Accuracy report path (default: <data>/metrics.json).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Timing report path (default: <data>/latency.json).
        #[arg(long)]
        latency: Option<PathBuf>,
    },
    /// Run one session and print the ranking and latency ledger.
    Simulate {
        #[arg(long)]
        user: String,
        #[arg(long)]
        query: Option<String>,
        /// Reference time in seconds; defaults to the user's last interaction.
        #[arg(long)]
        now: Option<i64>,
        /// Talk to a cloud node started with `serve-cloud`.
        #[arg(long)]
        cloud_addr: Option<SocketAddr>,
        #[arg(long, value_enum, default_value = "parallel")]
        mode: ModeArg,
    },
    /// Hold out a fraction of users, train without them and evaluate them
    /// from a short history.
    Fewshot {
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long, default_value = "both")]
        encoder: String,
        #[arg(long, value_enum, default_value = "parallel")]
        mode: ModeArg,
    },
    /// Compare plans from generated abstracts with plans from raw statistics.
    Agreement,
    /// Serve the cloud node over TCP.
    ServeCloud {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: SocketAddr,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn effective_config(cli: &Cli) -> Result<Config> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(b) = cli.backend {
        cfg.backend.kind = match b {
            BackendArg::Stub => BackendKind::Stub,
            BackendArg::Remote => BackendKind::Remote,
        };
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(dim) = cli.dim {
        cfg.embedding.dim = dim;
    }
    if let Some(k) = cli.k {
        cfg.session.k = k;
    }
    if let Some(p) = cli.preset {
        cfg.eval.preset = p;
    }
    if let Some(e) = cli.explain {
        cfg.session.explain = matches!(e, OnOff::On);
    }
    if let Some(spec) = &cli.latency_profile {
        cfg.session.channel = config::latency_profile(spec)?;
    }
    if let Command::Eval { scope, target, .. } = &cli.command {
        if let Some(s) = scope {
            cfg.eval.scope = match s {
                ScopeArg::Full => cdrec::eval::Scope::FullCorpus,
                ScopeArg::Serving => cdrec::eval::Scope::Serving,
            };
        }
        if let Some(t) = target {
            cfg.eval.target = match t {
                TargetArg::Val => cdrec::eval::EvalTarget::Validation,
                TargetArg::Test => cdrec::eval::EvalTarget::Test,
            };
        }
    }
    if let Command::Fewshot { fraction, shots, .. } = &cli.command {
        if let Some(f) = fraction {
            cfg.eval.fewshot_fraction = *f;
        }
        if let Some(s) = shots {
            cfg.eval.fewshot_interactions = *s;
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    let dir = DataDir::new(&cli.data);
    let backends = || Backends::from_config(&cfg.backend);
    match cli.command {
        Command::Synth {
            out,
            items,
            tags,
            users,
            min_len,
            max_len,
            affinity,
            geo,
        } => commands::synth(
            &out,
            &SynthConfig {
                items,
                tags,
                users,
                min_len,
                max_len,
                affinity,
                geo,
                seed: cfg.train.seed,
                ..SynthConfig::default()
            },
        ),
        Command::Ingest {
            catalog,
            interactions,
            queries,
        } => commands::ingest(&catalog, &interactions, queries.as_deref(), &cli.data),
        Command::EmbedItems => commands::embed_items_cmd(&dir, &cfg, &backends()?),
        Command::Train { encoder } => commands::train(&dir, &cfg, &commands::parse_encoders(&encoder)?),
        Command::Eval {
            mode, metrics, latency, ..
        } => commands::eval(
            &dir,
            &cfg,
            &backends()?,
            &EvalArgs {
                metrics,
                latency,
                mode: mode.into(),
            },
        ),
        Command::Simulate {
            user,
            query,
            now,
            cloud_addr,
            mode,
        } => commands::simulate(
            &dir,
            &cfg,
            &backends()?,
            &SimulateArgs {
                user,
                query,
                now,
                cloud_addr,
                mode: mode.into(),
            },
        ),
        Command::Fewshot { encoder, mode, .. } => commands::fewshot(
            &dir,
            &cfg,
            &backends()?,
            &commands::parse_encoders(&encoder)?,
            mode.into(),
        ),
        Command::Agreement => commands::agreement(&dir, &cfg, &backends()?),
        Command::ServeCloud { listen } => commands::serve_cloud(&dir, &cfg, &backends()?, listen),
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
