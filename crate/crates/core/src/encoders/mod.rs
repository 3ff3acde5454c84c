//! Structured user modeling.
//!
//! Two single-block sequence encoders share one item table: a causal
//! self-attention encoder for clear sequential patterns and a
//! transition-graph encoder for shifting, relational interests. Both are
//! trained with a pairwise log-sigmoid ranking loss using hand-written
//! gradients, which [`grad_check`] verifies against finite differences.

mod attention;
mod gradcheck;
mod graph;
mod train;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{EncoderKind, DEFAULT_MAX_LEN};
use crate::store::{StoreError, TensorFile};
use crate::vecmath::{Embedding, Matrix};

pub use attention::{attention_outputs, encode_attention};
pub use gradcheck::{grad_check, random_instance, GradCheckInstance};
pub use graph::{encode_graph, transition_graph};
pub use train::{build_instances, train, TrainInstance, TrainOutcome};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("cannot encode an empty history")]
    EmptyHistory,
    #[error("item row {0} is outside the item table")]
    UnknownItem(usize),
    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite loss")]
    Divergence { epoch: usize, batch: usize },
    #[error("training split is empty")]
    EmptySplit,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("parameter shapes are inconsistent: {0}")]
    Shape(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Trainable parameters of both encoders plus the shared item table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// `|I| × d`, shared with retrieval and ranking.
    pub item_table: Matrix,
    /// `L_max × d`
    pub positional_table: Matrix,
    pub attn_query: Matrix,
    pub attn_key: Matrix,
    pub attn_value: Matrix,
    pub graph_self_weight: Matrix,
    pub graph_neigh_weight: Matrix,
}

const SECTIONS: [&str; 7] = [
    "item_table",
    "positional_table",
    "attn_query",
    "attn_key",
    "attn_value",
    "graph_self_weight",
    "graph_neigh_weight",
];

impl EncoderParams {
    /// Fresh parameters around a given item table. Projections start small,
    /// the graph self weight starts at identity.
    pub fn init<R: Rng>(item_table: Matrix, max_len: usize, rng: &mut R) -> Self {
        let d = item_table.cols();
        let mut gaussian = |rows: usize, cols: usize, std: f64| {
            let normal = Normal::new(0.0, std).expect("valid std");
            Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect()).expect("shape")
        };
        let proj_std = 1.0 / (d as f64).sqrt();
        let positional_table = gaussian(max_len, d, 0.01);
        let attn_query = gaussian(d, d, proj_std);
        let attn_key = gaussian(d, d, proj_std);
        let attn_value = gaussian(d, d, 0.1 * proj_std);
        let graph_neigh_weight = gaussian(d, d, 0.1 * proj_std);
        Self {
            item_table,
            positional_table,
            attn_query,
            attn_key,
            attn_value,
            graph_self_weight: Matrix::identity(d),
            graph_neigh_weight,
        }
    }

    pub fn zeros(num_items: usize, max_len: usize, d: usize) -> Self {
        Self {
            item_table: Matrix::zeros(num_items, d),
            positional_table: Matrix::zeros(max_len, d),
            attn_query: Matrix::zeros(d, d),
            attn_key: Matrix::zeros(d, d),
            attn_value: Matrix::zeros(d, d),
            graph_self_weight: Matrix::zeros(d, d),
            graph_neigh_weight: Matrix::zeros(d, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.num_items(), self.max_len(), self.dim())
    }

    pub fn dim(&self) -> usize {
        self.item_table.cols()
    }

    pub fn num_items(&self) -> usize {
        self.item_table.rows()
    }

    pub fn max_len(&self) -> usize {
        self.positional_table.rows()
    }

    pub fn tensors(&self) -> [&Matrix; 7] {
        [
            &self.item_table,
            &self.positional_table,
            &self.attn_query,
            &self.attn_key,
            &self.attn_value,
            &self.graph_self_weight,
            &self.graph_neigh_weight,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 7] {
        [
            &mut self.item_table,
            &mut self.positional_table,
            &mut self.attn_query,
            &mut self.attn_key,
            &mut self.attn_value,
            &mut self.graph_self_weight,
            &mut self.graph_neigh_weight,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    fn check(&self) -> Result<(), EncoderError> {
        let d = self.dim();
        for (name, t) in SECTIONS.iter().zip(self.tensors()).skip(1) {
            let rows_ok = *name == "positional_table" || t.rows() == d;
            if t.cols() != d || !rows_ok {
                return Err(EncoderError::Shape(format!(
                    "{name} is {}x{}, d = {d}",
                    t.rows(),
                    t.cols()
                )));
            }
        }
        Ok(())
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        SECTIONS
            .iter()
            .zip(self.tensors())
            .fold(TensorFile::new(), |f, (name, t)| f.with(name, t.clone()))
    }

    pub fn from_tensor_file(mut file: TensorFile) -> Result<Self, EncoderError> {
        let params = Self {
            item_table: file.take("item_table")?,
            positional_table: file.take("positional_table")?,
            attn_query: file.take("attn_query")?,
            attn_key: file.take("attn_key")?,
            attn_value: file.take("attn_value")?,
            graph_self_weight: file.take("graph_self_weight")?,
            graph_neigh_weight: file.take("graph_neigh_weight")?,
        };
        params.check()?;
        Ok(params)
    }

    pub fn item_embedding(&self, row: usize) -> Embedding {
        Embedding(self.item_table.row(row).to_vec())
    }
}

/// Hyperparameters for [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub dropout: f64,
    pub negatives_per_positive: usize,
    pub seed: u64,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0002,
            batch_size: 64,
            max_epochs: 20,
            dropout: 0.2,
            negatives_per_positive: 1,
            seed: 0,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(EncoderError::Config(format!("learning_rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.negatives_per_positive == 0 || self.max_len == 0 {
            return Err(EncoderError::Config(
                "batch_size, negatives and max_len must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::Config(format!("dropout {}", self.dropout)));
        }
        Ok(())
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pairwise ranking loss `−Σ_j log σ(pos − neg_j)`.
pub fn rec_loss(pos_score: f64, neg_scores: &[f64]) -> f64 {
    neg_scores.iter().map(|&n| softplus(n - pos_score)).sum()
}

/// Encodes a history (item rows, oldest first) with the chosen encoder.
pub fn encode(kind: EncoderKind, rows: &[usize], params: &EncoderParams) -> Result<Embedding, EncoderError> {
    match kind {
        EncoderKind::Attention => encode_attention(rows, params),
        EncoderKind::Graph => encode_graph(rows, params),
    }
}

/// Most recent `max_len` rows, validated against the item table.
pub(crate) fn window<'a>(rows: &'a [usize], params: &EncoderParams) -> Result<&'a [usize], EncoderError> {
    if rows.is_empty() {
        return Err(EncoderError::EmptyHistory);
    }
    if let Some(&bad) = rows.iter().find(|&&r| r >= params.num_items()) {
        return Err(EncoderError::UnknownItem(bad));
    }
    let keep = rows.len().min(params.max_len());
    Ok(&rows[rows.len() - keep..])
}

/// Training-time dropout: keeps each unit with probability `1 − rate` and
/// rescales survivors by `1 / (1 − rate)`.
pub(crate) struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

impl<R: Rng> Dropout<'_, R> {
    pub fn mask(&mut self, n: usize) -> Vec<f64> {
        let keep = 1.0 - self.rate;
        (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Gradient of the loss for one (history, positive, negatives) instance
/// with respect to the encoder output, accumulating item-table gradients for
/// the scored items into `grads`. Returns `(loss, d loss / d output)`.
pub(crate) fn score_backward(
    out: &[f64],
    pos: usize,
    negs: &[usize],
    params: &EncoderParams,
    grads: &mut EncoderParams,
) -> (f64, Vec<f64>) {
    use crate::vecmath::{axpy, dot};
    let pos_emb = params.item_table.row(pos);
    let s_pos = dot(out, pos_emb);
    let mut g_out = vec![0.0; out.len()];
    let mut loss = 0.0;
    for &neg in negs {
        let neg_emb = params.item_table.row(neg);
        let s_neg = dot(out, neg_emb);
        loss += softplus(s_neg - s_pos);
        // d/ds_neg softplus(s_neg - s_pos) = σ(s_neg - s_pos)
        let w = sigmoid(s_neg - s_pos);
        axpy(-w, pos_emb, &mut g_out);
        axpy(w, neg_emb, &mut g_out);
        axpy(-w, out, grads.item_table.row_mut(pos));
        axpy(w, out, grads.item_table.row_mut(neg));
    }
    (loss, g_out)
}
