//! Binary tensor container used for item embeddings, projections and
//! encoder parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"CDRT"
//! version u32 = 1
//! count   u32              number of sections
//! section*:
//!   name_len u16, name (utf-8)
//!   rows u64, cols u64
//!   rows*cols f64, row-major
//! ```
//!
//! Item embeddings carry a sidecar text index (`item_id<TAB>row` per line).

use std::io::{self, BufRead, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::vecmath::{Matrix, Projection};

pub const MAGIC: &[u8; 4] = b"CDRT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic; not a tensor container")]
    Magic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("missing section {0:?}")]
    MissingSection(String),
    #[error("malformed container: {0}")]
    Malformed(String),
}

/// Ordered named matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub sections: Vec<(String, Matrix)>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, m: Matrix) -> Self {
        self.sections.push((name.to_string(), m));
        self
    }

    pub fn get(&self, name: &str) -> Result<&Matrix, StoreError> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| StoreError::MissingSection(name.to_string()))
    }

    pub fn take(&mut self, name: &str) -> Result<Matrix, StoreError> {
        let pos = self
            .sections
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| StoreError::MissingSection(name.to_string()))?;
        Ok(self.sections.remove(pos).1)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), StoreError> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.sections.len() as u32).to_le_bytes())?;
        for (name, m) in &self.sections {
            let name_len =
                u16::try_from(name.len()).map_err(|_| StoreError::Malformed("section name too long".into()))?;
            out.write_all(&name_len.to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(m.rows() as u64).to_le_bytes())?;
            out.write_all(&(m.cols() as u64).to_le_bytes())?;
            for v in m.as_slice() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, StoreError> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(StoreError::Magic);
        }
        let version = read_u32(&mut input)?;
        if version != VERSION {
            return Err(StoreError::Version(version));
        }
        let count = read_u32(&mut input)?;
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let mut len = [0u8; 2];
            input.read_exact(&mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| StoreError::Malformed(e.to_string()))?;
            let rows = read_u64(&mut input)? as usize;
            let cols = read_u64(&mut input)? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| StoreError::Malformed(format!("section {name} too large")))?;
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                input.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let m = Matrix::from_vec(rows, cols, data).map_err(|e| StoreError::Malformed(e.to_string()))?;
            sections.push((name, m));
        }
        Ok(Self { sections })
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let file = std::fs::File::create(path)?;
        self.write_to(io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        Self::read_from(io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_row_index<W: Write, S: AsRef<str>>(ids: &[S], mut out: W) -> io::Result<()> {
    for (row, id) in ids.iter().enumerate() {
        writeln!(out, "{}\t{row}", id.as_ref())?;
    }
    out.flush()
}

/// Reads a row index back as item ids ordered by row.
pub fn read_row_index<R: BufRead>(input: R) -> Result<Vec<String>, StoreError> {
    let mut pairs = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let (id, row) = line
            .split_once('\t')
            .ok_or_else(|| StoreError::Malformed(format!("index line {}", n + 1)))?;
        let row: usize = row
            .parse()
            .map_err(|_| StoreError::Malformed(format!("index line {}", n + 1)))?;
        pairs.push((row, id.to_string()));
    }
    pairs.sort();
    for (expect, (row, _)) in pairs.iter().enumerate() {
        if *row != expect {
            return Err(StoreError::Malformed(format!("row {expect} missing from index")));
        }
    }
    Ok(pairs.into_iter().map(|(_, id)| id).collect())
}

/// Sections `mean` (1 × d_raw), `components` and `explained_variance` (1 × d).
pub fn projection_file(p: &Projection) -> TensorFile {
    let row = |v: &[f64]| Matrix::from_vec(1, v.len(), v.to_vec()).expect("row vector");
    TensorFile::new()
        .with("mean", row(&p.mean))
        .with("components", p.components.clone())
        .with("explained_variance", row(&p.explained_variance))
}

pub fn projection_from_file(mut file: TensorFile) -> Result<Projection, StoreError> {
    let mean = file.take("mean")?;
    let components = file.take("components")?;
    let variance = file.take("explained_variance")?;
    if mean.rows() != 1
        || mean.cols() != components.rows()
        || variance.rows() != 1
        || variance.cols() != components.cols()
    {
        return Err(StoreError::Malformed("projection sections disagree in shape".into()));
    }
    Ok(Projection {
        mean: mean.as_slice().to_vec(),
        components,
        explained_variance: variance.as_slice().to_vec(),
    })
}
