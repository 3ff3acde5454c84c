//! Single-block causal self-attention encoder.
//!
//! `x_m = item[i_m] + pos[m]`; the user representation is the last
//! position's output `x_n + Σ_j softmax_j(q·k_j / √d) v_j` with
//! `q = Wq x_n`, `k_j = Wk x_j`, `v_j = Wv x_j` and `j ≤ n`.

use rand::Rng;

use super::{window, Dropout, EncoderError, EncoderParams};
use crate::vecmath::{axpy, dot, Embedding};

pub(crate) struct AttnCache {
    rows: Vec<usize>,
    x: Vec<Vec<f64>>,
    q: Vec<f64>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// softmax weights before dropout
    a: Vec<f64>,
    /// dropout scale per weight (all ones at inference)
    keep: Vec<f64>,
    pub out: Vec<f64>,
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn inputs(rows: &[usize], params: &EncoderParams) -> Vec<Vec<f64>> {
    rows.iter()
        .enumerate()
        .map(|(m, &r)| {
            let mut x = params.item_table.row(r).to_vec();
            axpy(1.0, params.positional_table.row(m), &mut x);
            x
        })
        .collect()
}

pub(crate) fn forward<R: Rng>(
    rows: &[usize],
    params: &EncoderParams,
    dropout: Option<&mut Dropout<'_, R>>,
) -> AttnCache {
    let n = rows.len();
    let scale = 1.0 / (params.dim() as f64).sqrt();
    let x = inputs(rows, params);
    let last = &x[n - 1];
    let q = params.attn_query.mul_vec(last);
    let k: Vec<Vec<f64>> = x.iter().map(|xj| params.attn_key.mul_vec(xj)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|xj| params.attn_value.mul_vec(xj)).collect();
    let scores: Vec<f64> = k.iter().map(|kj| dot(&q, kj) * scale).collect();
    let a = softmax(&scores);
    let keep = match dropout {
        Some(d) if d.rate > 0.0 => d.mask(n),
        _ => vec![1.0; n],
    };
    let mut out = last.clone();
    for j in 0..n {
        axpy(a[j] * keep[j], &v[j], &mut out);
    }
    AttnCache {
        rows: rows.to_vec(),
        x,
        q,
        k,
        v,
        a,
        keep,
        out,
    }
}

pub(crate) fn backward(cache: &AttnCache, g_out: &[f64], params: &EncoderParams, grads: &mut EncoderParams) {
    let n = cache.rows.len();
    let d = params.dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut dx: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
    axpy(1.0, g_out, &mut dx[n - 1]);

    let mut da = vec![0.0; n];
    let value_back = params.attn_value.tr_mul_vec(g_out);
    for j in 0..n {
        let weight = cache.a[j] * cache.keep[j];
        // value path
        grads.attn_value.add_outer(weight, g_out, &cache.x[j]);
        axpy(weight, &value_back, &mut dx[j]);
        da[j] = dot(g_out, &cache.v[j]) * cache.keep[j];
    }
    let mean_da: f64 = cache.a.iter().zip(&da).map(|(a, g)| a * g).sum();
    let mut dq = vec![0.0; d];
    let key_back = params.attn_key.tr_mul_vec(&cache.q);
    for j in 0..n {
        let ds = cache.a[j] * (da[j] - mean_da) * scale;
        if ds == 0.0 {
            continue;
        }
        axpy(ds, &cache.k[j], &mut dq);
        grads.attn_key.add_outer(ds, &cache.q, &cache.x[j]);
        axpy(ds, &key_back, &mut dx[j]);
    }
    grads.attn_query.add_outer(1.0, &dq, &cache.x[n - 1]);
    let back = params.attn_query.tr_mul_vec(&dq);
    axpy(1.0, &back, &mut dx[n - 1]);

    for (m, (&row, g)) in cache.rows.iter().zip(&dx).enumerate() {
        axpy(1.0, g, grads.item_table.row_mut(row));
        axpy(1.0, g, grads.positional_table.row_mut(m));
    }
}

/// Structured user embedding from the attention encoder. Histories longer
/// than the positional table keep their most recent part.
pub fn encode_attention(rows: &[usize], params: &EncoderParams) -> Result<Embedding, EncoderError> {
    let rows = window(rows, params)?;
    Ok(Embedding(forward::<rand::rngs::ThreadRng>(rows, params, None).out))
}

/// Outputs at every position under the causal mask; the last entry equals
/// [`encode_attention`].
pub fn attention_outputs(rows: &[usize], params: &EncoderParams) -> Result<Vec<Embedding>, EncoderError> {
    let rows = window(rows, params)?;
    let scale = 1.0 / (params.dim() as f64).sqrt();
    let x = inputs(rows, params);
    let k: Vec<Vec<f64>> = x.iter().map(|xj| params.attn_key.mul_vec(xj)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|xj| params.attn_value.mul_vec(xj)).collect();
    Ok(x.iter()
        .enumerate()
        .map(|(m, xm)| {
            let q = params.attn_query.mul_vec(xm);
            let scores: Vec<f64> = k[..=m].iter().map(|kj| dot(&q, kj) * scale).collect();
            let a = softmax(&scores);
            let mut out = xm.clone();
            for (j, aj) in a.iter().enumerate() {
                axpy(*aj, &v[j], &mut out);
            }
            Embedding(out)
        })
        .collect())
}
