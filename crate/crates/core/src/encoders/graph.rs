//! Transition-graph encoder.
//!
//! Nodes are the distinct items of the history; every consecutive pair adds
//! one to the weight of edge `prev → next`. Each node is updated once,
//! `h = tanh(Ws e + Wn n̄)` with `n̄` the weighted mean of its in-neighbors,
//! and node states are pooled with `softmax(h · q)` where `q` is the mean
//! embedding of the last five interactions.

use std::collections::BTreeMap;

use rand::Rng;

use super::{window, Dropout, EncoderError, EncoderParams};
use crate::vecmath::{axpy, dot, Embedding};

const RECENT: usize = 5;

/// Edge weights `(from, to) → count` over consecutive pairs of `items`.
pub fn transition_graph<T: Ord + Clone>(items: &[T]) -> BTreeMap<(T, T), u32> {
    let mut edges = BTreeMap::new();
    for pair in items.windows(2) {
        *edges.entry((pair[0].clone(), pair[1].clone())).or_insert(0) += 1;
    }
    edges
}

pub(crate) struct GraphCache {
    /// item row of each node, first-appearance order
    nodes: Vec<usize>,
    /// in-edges per node: (source node, weight)
    in_edges: Vec<Vec<(usize, f64)>>,
    in_total: Vec<f64>,
    neigh: Vec<Vec<f64>>,
    /// tanh outputs before dropout
    h: Vec<Vec<f64>>,
    /// dropout scales per node state
    keep: Vec<Vec<f64>>,
    /// node states after dropout
    hd: Vec<Vec<f64>>,
    recent: Vec<usize>,
    q: Vec<f64>,
    b: Vec<f64>,
    pub out: Vec<f64>,
}

pub(crate) fn forward<R: Rng>(
    rows: &[usize],
    params: &EncoderParams,
    mut dropout: Option<&mut Dropout<'_, R>>,
) -> GraphCache {
    let d = params.dim();
    let mut nodes: Vec<usize> = Vec::new();
    let mut node_of = BTreeMap::new();
    let seq: Vec<usize> = rows
        .iter()
        .map(|&r| {
            *node_of.entry(r).or_insert_with(|| {
                nodes.push(r);
                nodes.len() - 1
            })
        })
        .collect();
    let k = nodes.len();

    let mut in_edges: Vec<Vec<(usize, f64)>> = vec![Vec::new(); k];
    for ((from, to), w) in transition_graph(&seq) {
        in_edges[to].push((from, f64::from(w)));
    }
    let in_total: Vec<f64> = in_edges.iter().map(|es| es.iter().map(|(_, w)| w).sum()).collect();

    let mut neigh = Vec::with_capacity(k);
    let mut h = Vec::with_capacity(k);
    let mut keep = Vec::with_capacity(k);
    let mut hd = Vec::with_capacity(k);
    for node in 0..k {
        let mut nbar = vec![0.0; d];
        for &(src, w) in &in_edges[node] {
            axpy(w / in_total[node], params.item_table.row(nodes[src]), &mut nbar);
        }
        let mut z = params.graph_self_weight.mul_vec(params.item_table.row(nodes[node]));
        axpy(1.0, &params.graph_neigh_weight.mul_vec(&nbar), &mut z);
        let hk: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
        let mask = match dropout.as_deref_mut() {
            Some(dr) if dr.rate > 0.0 => dr.mask(d),
            _ => vec![1.0; d],
        };
        hd.push(hk.iter().zip(&mask).map(|(a, m)| a * m).collect::<Vec<f64>>());
        neigh.push(nbar);
        h.push(hk);
        keep.push(mask);
    }

    let r = rows.len().min(RECENT);
    let recent = rows[rows.len() - r..].to_vec();
    let mut q = vec![0.0; d];
    for &row in &recent {
        axpy(1.0 / r as f64, params.item_table.row(row), &mut q);
    }

    let logits: Vec<f64> = hd.iter().map(|hk| dot(hk, &q)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|c| (c - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    let b: Vec<f64> = exp.into_iter().map(|e| e / sum).collect();
    let mut out = vec![0.0; d];
    for (bk, hk) in b.iter().zip(&hd) {
        axpy(*bk, hk, &mut out);
    }

    GraphCache {
        nodes,
        in_edges,
        in_total,
        neigh,
        h,
        keep,
        hd,
        recent,
        q,
        b,
        out,
    }
}

#[allow(clippy::needless_range_loop)]
pub(crate) fn backward(cache: &GraphCache, g_out: &[f64], params: &EncoderParams, grads: &mut EncoderParams) {
    let d = params.dim();
    let k = cache.nodes.len();

    // pooling
    let db: Vec<f64> = cache.hd.iter().map(|hk| dot(g_out, hk)).collect();
    let mean_db: f64 = cache.b.iter().zip(&db).map(|(b, g)| b * g).sum();
    let mut dq = vec![0.0; d];
    let mut dhd: Vec<Vec<f64>> = Vec::with_capacity(k);
    for node in 0..k {
        let dc = cache.b[node] * (db[node] - mean_db);
        let mut g = g_out.iter().map(|v| v * cache.b[node]).collect::<Vec<f64>>();
        axpy(dc, &cache.q, &mut g);
        axpy(dc, &cache.hd[node], &mut dq);
        dhd.push(g);
    }
    let r = cache.recent.len() as f64;
    for &row in &cache.recent {
        axpy(1.0 / r, &dq, grads.item_table.row_mut(row));
    }

    // node update
    for node in 0..k {
        let dz: Vec<f64> = (0..d)
            .map(|i| dhd[node][i] * cache.keep[node][i] * (1.0 - cache.h[node][i] * cache.h[node][i]))
            .collect();
        let e = params.item_table.row(cache.nodes[node]).to_vec();
        grads.graph_self_weight.add_outer(1.0, &dz, &e);
        let de = params.graph_self_weight.tr_mul_vec(&dz);
        axpy(1.0, &de, grads.item_table.row_mut(cache.nodes[node]));
        if cache.in_edges[node].is_empty() {
            continue;
        }
        grads.graph_neigh_weight.add_outer(1.0, &dz, &cache.neigh[node]);
        let dn = params.graph_neigh_weight.tr_mul_vec(&dz);
        for &(src, w) in &cache.in_edges[node] {
            axpy(
                w / cache.in_total[node],
                &dn,
                grads.item_table.row_mut(cache.nodes[src]),
            );
        }
    }
}

/// Structured user embedding from the graph encoder.
pub fn encode_graph(rows: &[usize], params: &EncoderParams) -> Result<Embedding, EncoderError> {
    let rows = window(rows, params)?;
    Ok(Embedding(forward::<rand::rngs::ThreadRng>(rows, params, None).out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecmath::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn edge_counts() {
        let edges = transition_graph(&["a", "b", "a", "b"]);
        assert_eq!(edges[&("a", "b")], 2);
        assert_eq!(edges[&("b", "a")], 1);
        assert_eq!(edges.len(), 2);
    }

    #[test]
    fn single_item_is_tanh_of_self_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table = Matrix::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.1, 0.3, 0.3]).unwrap();
        let mut p = EncoderParams::init(table, 4, &mut rng);
        p.graph_self_weight = Matrix::from_vec(2, 2, vec![1.0, 2.0, -0.5, 0.25]).unwrap();
        let out = encode_graph(&[1], &p).unwrap();
        let z = p.graph_self_weight.mul_vec(p.item_table.row(1));
        let expect: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
        assert_eq!(out.0, expect);
        // repeats of one item add a self-loop but no other node
        let repeated = encode_graph(&[1, 1], &p).unwrap();
        assert_eq!(repeated.dim(), 2);
    }
}
