use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{attention, graph, score_backward, Dropout, EncoderError, EncoderParams, TrainConfig};
use crate::domain::EncoderKind;

/// One next-item prediction: the history prefix and the item that followed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainInstance {
    pub user: usize,
    pub prefix: Vec<usize>,
    pub positive: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    /// Mean instance loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Every `(prefix, next item)` pair of every sequence; prefixes keep their
/// most recent `max_len` items.
pub fn build_instances(sequences: &[Vec<usize>], max_len: usize) -> Vec<TrainInstance> {
    let mut out = Vec::new();
    for (user, seq) in sequences.iter().enumerate() {
        for m in 1..seq.len() {
            let start = m.saturating_sub(max_len);
            out.push(TrainInstance {
                user,
                prefix: seq[start..m].to_vec(),
                positive: seq[m],
            });
        }
    }
    out
}

fn sample_negatives(rng: &mut ChaCha8Rng, seen: &HashSet<usize>, num_items: usize, n: usize) -> Vec<usize> {
    (0..n)
        .map(|_| loop {
            let cand = rng.random_range(0..num_items);
            if !seen.contains(&cand) {
                break cand;
            }
        })
        .collect()
}

/// Loss and gradients for one instance; gradients accumulate into `grads`.
pub(crate) fn instance_step<R: Rng>(
    kind: EncoderKind,
    prefix: &[usize],
    positive: usize,
    negatives: &[usize],
    params: &EncoderParams,
    grads: &mut EncoderParams,
    dropout: Option<&mut Dropout<'_, R>>,
) -> f64 {
    match kind {
        EncoderKind::Attention => {
            let cache = attention::forward(prefix, params, dropout);
            let (loss, g_out) = score_backward(&cache.out, positive, negatives, params, grads);
            attention::backward(&cache, &g_out, params, grads);
            loss
        }
        EncoderKind::Graph => {
            let cache = graph::forward(prefix, params, dropout);
            let (loss, g_out) = score_backward(&cache.out, positive, negatives, params, grads);
            graph::backward(&cache, &g_out, params, grads);
            loss
        }
    }
}

/// Mini-batch SGD on the pairwise ranking loss.
///
/// `sequences` holds each training user's item rows, oldest first.
/// Negatives are drawn uniformly from items the user never interacted with.
/// The item table and the chosen encoder's weights are updated jointly;
/// runs are bit-reproducible for a fixed seed.
pub fn train(
    sequences: &[Vec<usize>],
    init: EncoderParams,
    kind: EncoderKind,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, EncoderError> {
    cfg.validate()?;
    let max_len = cfg.max_len.min(init.max_len());
    let mut instances = build_instances(sequences, max_len);
    if instances.is_empty() {
        return Err(EncoderError::EmptySplit);
    }
    let num_items = init.num_items();
    if let Some(&bad) = sequences.iter().flatten().find(|&&r| r >= num_items) {
        return Err(EncoderError::UnknownItem(bad));
    }
    let seen: Vec<HashSet<usize>> = sequences.iter().map(|s| s.iter().copied().collect()).collect();
    // users who touched every item have no negatives to sample
    instances.retain(|inst| seen[inst.user].len() < num_items);
    if instances.is_empty() {
        return Err(EncoderError::EmptySplit);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut grads = params.zeros_like();
    let mut loss_trace = Vec::with_capacity(cfg.max_epochs);

    for epoch in 0..cfg.max_epochs {
        instances.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in instances.chunks(cfg.batch_size).enumerate() {
            let mut batch_loss = 0.0;
            for inst in batch {
                let negatives = sample_negatives(&mut rng, &seen[inst.user], num_items, cfg.negatives_per_positive);
                let mut dropout = Dropout {
                    rate: cfg.dropout,
                    rng: &mut rng,
                };
                batch_loss += instance_step(
                    kind,
                    &inst.prefix,
                    inst.positive,
                    &negatives,
                    &params,
                    &mut grads,
                    Some(&mut dropout),
                );
            }
            if !batch_loss.is_finite() {
                return Err(EncoderError::Divergence {
                    epoch: epoch + 1,
                    batch: batch_no + 1,
                });
            }
            epoch_loss += batch_loss;
            let step = cfg.learning_rate / batch.len() as f64;
            for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors_mut()) {
                for (pv, gv) in p.as_mut_slice().iter_mut().zip(g.as_mut_slice().iter_mut()) {
                    if step != 0.0 {
                        *pv -= step * *gv;
                    }
                    *gv = 0.0;
                }
            }
        }
        let mean = epoch_loss / instances.len() as f64;
        log::debug!("{} epoch {}: loss {mean:.6}", kind.as_str(), epoch + 1);
        loss_trace.push(mean);
    }

    Ok(TrainOutcome { params, loss_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecmath::Matrix;

    fn setup() -> (Vec<Vec<usize>>, EncoderParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let table = Matrix::from_vec(12, 4, (0..48).map(|_| rng.random_range(-0.3..0.3)).collect()).unwrap();
        let params = EncoderParams::init(table, 10, &mut rng);
        let seqs = vec![vec![0, 1, 2, 3, 4], vec![5, 6, 5, 6, 7], vec![8, 9, 10]];
        (seqs, params)
    }

    #[test]
    fn instances_cover_every_next_item() {
        let inst = build_instances(&[vec![1, 2, 3]], 200);
        assert_eq!(inst.len(), 2);
        assert_eq!(inst[1].prefix, vec![1, 2]);
        assert_eq!(inst[1].positive, 3);
        let inst = build_instances(&[vec![1, 2, 3, 4]], 2);
        assert_eq!(inst[2].prefix, vec![2, 3]);
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let (seqs, params) = setup();
        for kind in [EncoderKind::Attention, EncoderKind::Graph] {
            let cfg = TrainConfig {
                learning_rate: 0.0,
                max_epochs: 2,
                batch_size: 2,
                ..TrainConfig::default()
            };
            let out = train(&seqs, params.clone(), kind, &cfg).unwrap();
            assert_eq!(out.params, params);
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let (seqs, params) = setup();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            max_epochs: 3,
            batch_size: 2,
            seed: 7,
            ..TrainConfig::default()
        };
        let a = train(&seqs, params.clone(), EncoderKind::Graph, &cfg).unwrap();
        let b = train(&seqs, params, EncoderKind::Graph, &cfg).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn divergence_is_reported() {
        let (seqs, mut params) = setup();
        params.item_table.set(0, 0, f64::INFINITY);
        let cfg = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&seqs, params, EncoderKind::Attention, &cfg),
            Err(EncoderError::Divergence { epoch: 1, .. })
        ));
    }

    #[test]
    fn empty_split_is_an_error() {
        let (_, params) = setup();
        assert!(matches!(
            train(&[vec![1]], params, EncoderKind::Attention, &TrainConfig::default()),
            Err(EncoderError::EmptySplit)
        ));
    }
}
