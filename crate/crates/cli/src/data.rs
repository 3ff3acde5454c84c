//! Data directory layout and artifact loading.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use cdrec::cloud::DomainProfile;
use cdrec::domain::{load_catalog, load_interactions, Catalog, InteractionLog};
use cdrec::encoders::EncoderParams;
use cdrec::lm::Backends;
use cdrec::store::{projection_from_file, read_row_index, TensorFile};
use cdrec::system::System;
use cdrec::vecmath::Projection;
use serde::Serialize;

use crate::config::Config;

pub const CATALOG: &str = "catalog.tsv";
pub const INTERACTIONS: &str = "interactions.tsv";
pub const QUERIES: &str = "queries.tsv";
pub const TAG_INDEX: &str = "tag_index.json";
pub const INGEST_REPORT: &str = "ingest_report.json";
pub const EMBEDDINGS: &str = "embeddings.bin";
pub const ITEM_INDEX: &str = "items.idx";
pub const PROJECTION: &str = "projection.bin";
pub const PARAMS: &str = "params.bin";
pub const LOSS_TRACE: &str = "loss_trace.json";

pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Path of an artifact that an earlier command must have produced.
    pub fn require(&self, name: &str, stage: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if !path.exists() {
            bail!("missing {} in {}; run `cdrec {stage}` first", name, self.root.display());
        }
        Ok(path)
    }

    pub fn catalog(&self) -> Result<Catalog> {
        let path = self.require(CATALOG, "ingest")?;
        load_catalog(&path).with_context(|| format!("loading {}", path.display()))
    }

    pub fn interactions(&self) -> Result<InteractionLog> {
        let path = self.require(INTERACTIONS, "ingest")?;
        load_interactions(&path).with_context(|| format!("loading {}", path.display()))
    }

    /// Per-user request text; empty when the corpus has none.
    pub fn queries(&self) -> Result<BTreeMap<String, String>> {
        let path = self.path(QUERIES);
        if !path.exists() {
            return Ok(BTreeMap::new());
        }
        read_queries(BufReader::new(File::open(&path)?)).with_context(|| format!("loading {}", path.display()))
    }

    pub fn projection(&self) -> Result<Projection> {
        let path = self.require(PROJECTION, "embed-items")?;
        Ok(projection_from_file(TensorFile::load(&path)?)?)
    }

    /// The projected item embeddings, checked against the catalog order.
    pub fn projected_items(&self, catalog: &Catalog) -> Result<cdrec::vecmath::Matrix> {
        let index_path = self.require(ITEM_INDEX, "embed-items")?;
        let ids = read_row_index(BufReader::new(File::open(&index_path)?))?;
        if ids.len() != catalog.len() || ids.iter().zip(catalog.items()).any(|(a, b)| *a != b.item_id) {
            bail!(
                "{} does not match the catalog; rerun `cdrec embed-items`",
                index_path.display()
            );
        }
        let mut file = TensorFile::load(&self.require(EMBEDDINGS, "embed-items")?)?;
        Ok(file.take("projected")?)
    }

    pub fn params(&self) -> Result<EncoderParams> {
        let path = self.require(PARAMS, "train")?;
        Ok(EncoderParams::from_tensor_file(TensorFile::load(&path)?)?)
    }

    pub fn system(&self, cfg: &Config, backends: &Backends) -> Result<System> {
        let catalog = self.catalog()?;
        let params = self.params()?;
        if params.num_items() != catalog.len() {
            bail!(
                "parameters cover {} items, catalog has {}; rerun `cdrec train`",
                params.num_items(),
                catalog.len()
            );
        }
        Ok(System::new(
            backends,
            Arc::new(catalog),
            Arc::new(self.projection()?),
            Arc::new(params),
            DomainProfile {
                domain_tag: cfg.domain.tag.clone(),
                dynamic: cfg.domain.dynamic,
            },
        )?)
    }
}

/// `user_id<TAB>query text` per line; blank and `#` lines are skipped.
pub fn read_queries<R: BufRead>(input: R) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((user, text)) = line.split_once('\t') else {
            bail!("line {}: expected user_id<TAB>query", n + 1);
        };
        if text.trim().is_empty() {
            bail!("line {}: empty query", n + 1);
        }
        out.insert(user.trim().to_string(), text.trim().to_string());
    }
    Ok(out)
}

pub fn write_queries<W: Write>(queries: &BTreeMap<String, String>, mut out: W) -> std::io::Result<()> {
    for (user, text) in queries {
        writeln!(out, "{user}\t{text}")?;
    }
    out.flush()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    f(&mut out).with_context(|| format!("writing {}", path.display()))?;
    out.flush()?;
    Ok(())
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}
