use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::train::instance_step;
use super::{attention, graph, rec_loss, EncoderParams};
use crate::domain::EncoderKind;
use crate::vecmath::{dot, Matrix};

const STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
const MAGNITUDE_FLOOR: f64 = 1e-4;

/// A tiny training instance with its own parameters.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub params: EncoderParams,
    pub prefix: Vec<usize>,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Random parameters of width `d` over `num_items` items and a random
/// history of `len` items. All weights are drawn at unit-ish scale so every
/// path carries gradient.
pub fn random_instance(d: usize, len: usize, num_items: usize, seed: u64) -> GradCheckInstance {
    assert!(num_items >= 3 && len >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.5).expect("valid std");
    let mut gaussian = |rows: usize, cols: usize| {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(&mut rng)).collect()).expect("shape")
    };
    let params = EncoderParams {
        item_table: gaussian(num_items, d),
        positional_table: gaussian(len + 2, d),
        attn_query: gaussian(d, d),
        attn_key: gaussian(d, d),
        attn_value: gaussian(d, d),
        graph_self_weight: gaussian(d, d),
        graph_neigh_weight: gaussian(d, d),
    };
    let prefix: Vec<usize> = (0..len).map(|_| rng.random_range(0..num_items)).collect();
    let positive = rng.random_range(0..num_items);
    let negatives = (0..2)
        .map(|_| loop {
            let n = rng.random_range(0..num_items);
            if n != positive {
                break n;
            }
        })
        .collect();
    GradCheckInstance {
        params,
        prefix,
        positive,
        negatives,
    }
}

fn loss_at(kind: EncoderKind, inst: &GradCheckInstance, params: &EncoderParams) -> f64 {
    let out = match kind {
        EncoderKind::Attention => attention::forward::<ChaCha8Rng>(&inst.prefix, params, None).out,
        EncoderKind::Graph => graph::forward::<ChaCha8Rng>(&inst.prefix, params, None).out,
    };
    let pos = dot(&out, params.item_table.row(inst.positive));
    let negs: Vec<f64> = inst
        .negatives
        .iter()
        .map(|&n| dot(&out, params.item_table.row(n)))
        .collect();
    rec_loss(pos, &negs)
}

/// Analytic gradients of the instance loss for every parameter entry.
pub(crate) fn analytic(kind: EncoderKind, inst: &GradCheckInstance) -> EncoderParams {
    let mut grads = inst.params.zeros_like();
    instance_step::<ChaCha8Rng>(
        kind,
        &inst.prefix,
        inst.positive,
        &inst.negatives,
        &inst.params,
        &mut grads,
        None,
    );
    grads
}

/// Largest relative error between the analytic gradient and a central
/// finite difference (step 1e-5), over every entry of every tensor.
/// Relative error is `|a − n| / max(|a|, |n|, 1e-4)`.
pub fn grad_check(kind: EncoderKind, inst: &GradCheckInstance) -> f64 {
    let grads = analytic(kind, inst);
    let mut probe = inst.params.clone();
    let mut worst: f64 = 0.0;
    for t in 0..7 {
        let len = grads.tensors()[t].as_slice().len();
        for idx in 0..len {
            let orig = probe.tensors()[t].as_slice()[idx];
            probe.tensors_mut()[t].as_mut_slice()[idx] = orig + STEP;
            let up = loss_at(kind, inst, &probe);
            probe.tensors_mut()[t].as_mut_slice()[idx] = orig - STEP;
            let down = loss_at(kind, inst, &probe);
            probe.tensors_mut()[t].as_mut_slice()[idx] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let exact = grads.tensors()[t].as_slice()[idx];
            let denom = exact.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_gradients_match() {
        let inst = random_instance(4, 3, 6, 1);
        assert!(grad_check(EncoderKind::Attention, &inst) < 1e-4);
    }

    #[test]
    fn graph_gradients_match() {
        let inst = random_instance(4, 5, 6, 2);
        assert!(grad_check(EncoderKind::Graph, &inst) < 1e-4);
    }

    #[test]
    fn unused_positional_rows_get_no_gradient() {
        let mut inst = random_instance(4, 3, 6, 3);
        inst.params.attn_value = Matrix::zeros(4, 4);
        inst.params.graph_neigh_weight = Matrix::zeros(4, 4);
        for kind in [EncoderKind::Attention, EncoderKind::Graph] {
            let g = analytic(kind, &inst);
            for row in inst.prefix.len()..g.positional_table.rows() {
                assert!(g.positional_table.row(row).iter().all(|&v| v == 0.0));
            }
        }
        // the graph encoder never reads positions at all
        let g = analytic(EncoderKind::Graph, &inst);
        assert!(g.positional_table.as_slice().iter().all(|&v| v == 0.0));
    }
}
