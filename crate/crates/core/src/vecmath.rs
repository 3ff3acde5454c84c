//! Dense vector math: PCA fitting and projection, weighted fusion,
//! dot-product scoring and deterministic top-k selection.

use std::cmp::Ordering;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VecError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("rank error: {n} samples cannot yield {d} components")]
    Rank { n: usize, d: usize },
    #[error("target dimension {d} exceeds input dimension {d_raw}")]
    TargetTooLarge { d: usize, d_raw: usize },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("fusion weight {0} outside [0,1]")]
    Weight(f64),
}

/// A user or item representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|v| v * c).collect())
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, VecError> {
        if data.len() != rows * cols {
            return Err(VecError::Dimension {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, VecError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(VecError::Dimension {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self · x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · x`
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr != 0.0 {
                axpy(xr, self.row(r), &mut out);
            }
        }
        out
    }

    /// `self += scale · a bᵀ`
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s != 0.0 {
                axpy(s, b, self.row_mut(r));
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Offline linear projection from the raw embedding space to `d` dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// `d_raw × d`; orthonormal columns ordered by descending variance.
    pub components: Matrix,
    /// Variance captured by each component (sample covariance, n − 1 denominator).
    pub explained_variance: Vec<f64>,
}

impl Projection {
    pub fn d_raw(&self) -> usize {
        self.components.rows()
    }

    pub fn dim(&self) -> usize {
        self.components.cols()
    }
}

/// Fits a PCA projection by exact eigen-decomposition of the covariance.
///
/// Each component's largest-magnitude entry is made positive so the result
/// is reproducible.
pub fn fit_pca(samples: &Matrix, d: usize) -> Result<Projection, VecError> {
    let (n, d_raw) = (samples.rows(), samples.cols());
    if d == 0 || n < d {
        return Err(VecError::Rank { n, d });
    }
    if d > d_raw {
        return Err(VecError::TargetTooLarge { d, d_raw });
    }
    if !samples.is_finite() {
        return Err(VecError::NonFinite);
    }

    let mut mean = vec![0.0; d_raw];
    for r in 0..n {
        axpy(1.0, samples.row(r), &mut mean);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, d_raw, |r, c| samples.get(r, c) - mean[c]);
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut cov = centered.transpose() * &centered / denom;
    // symmetrize against accumulated rounding
    let cov_t = cov.transpose();
    cov = (cov + cov_t) * 0.5;

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d_raw).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut components = Matrix::zeros(d_raw, d);
    let mut explained_variance = Vec::with_capacity(d);
    for (j, &src) in order.iter().take(d).enumerate() {
        let col = eig.eigenvectors.column(src);
        let pivot = (0..d_raw)
            .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d_raw {
            components.set(r, j, sign * col[r]);
        }
        explained_variance.push(eig.eigenvalues[src].max(0.0));
    }

    Ok(Projection {
        mean,
        components,
        explained_variance,
    })
}

/// `componentsᵀ · (raw − mean)`
pub fn project(raw: &[f64], p: &Projection) -> Result<Embedding, VecError> {
    if raw.len() != p.d_raw() {
        return Err(VecError::Dimension {
            expected: p.d_raw(),
            got: raw.len(),
        });
    }
    let centered: Vec<f64> = raw.iter().zip(&p.mean).map(|(x, m)| x - m).collect();
    Ok(Embedding(p.components.tr_mul_vec(&centered)))
}

/// `w·a + (1−w)·b`
pub fn fuse(a: &Embedding, b: &Embedding, w: f64) -> Result<Embedding, VecError> {
    if a.dim() != b.dim() {
        return Err(VecError::Dimension {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(VecError::Weight(w));
    }
    Ok(Embedding(
        a.0.iter().zip(&b.0).map(|(x, y)| w * x + (1.0 - w) * y).collect(),
    ))
}

pub fn dot_score(u: &[f64], i: &[f64]) -> Result<f64, VecError> {
    if u.len() != i.len() {
        return Err(VecError::Dimension {
            expected: u.len(),
            got: i.len(),
        });
    }
    Ok(dot(u, i))
}

/// Descending score, ascending key.
fn ranking_order<K: Ord>(a: &(K, f64), b: &(K, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// The `k` highest scores, descending; ties are broken by ascending key.
/// Fewer than `k` inputs returns all of them ranked.
pub fn top_k<K: Ord>(mut scores: Vec<(K, f64)>, k: usize) -> Vec<(K, f64)> {
    if k == 0 {
        return Vec::new();
    }
    if scores.len() > k {
        scores.select_nth_unstable_by(k - 1, ranking_order);
        scores.truncate(k);
    }
    scores.sort_by(ranking_order);
    scores
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rank_one_data_has_single_component() {
        let dir = [0.6, 0.8, 0.0];
        let mean = [1.0, -2.0, 3.0];
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = i as f64 - 9.5;
                (0..3).map(|c| mean[c] + t * dir[c]).collect()
            })
            .collect();
        let p = fit_pca(&Matrix::from_rows(&rows).unwrap(), 1).unwrap();
        for c in 0..3 {
            assert!((p.components.get(c, 0) - dir[c]).abs() < 1e-10);
            assert!((p.mean[c] - mean[c]).abs() < 1e-12);
        }
        let full = fit_pca(&Matrix::from_rows(&rows).unwrap(), 3).unwrap();
        let total: f64 = full.explained_variance.iter().sum();
        assert!((full.explained_variance[0] / total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn components_are_orthonormal_with_sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = random_matrix(&mut rng, 50, 8);
        let p = fit_pca(&samples, 5).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let v: f64 = (0..8).map(|r| p.components.get(r, a) * p.components.get(r, b)).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-8);
            }
            let col: Vec<f64> = (0..8).map(|r| p.components.get(r, a)).collect();
            let pivot = col
                .iter()
                .copied()
                .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(pivot > 0.0);
        }
        assert!(p.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn full_dimension_preserves_variance_and_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = random_matrix(&mut rng, 30, 6);
        let p = fit_pca(&samples, 6).unwrap();
        let mut total_in = 0.0;
        let mut total_out = 0.0;
        for r in 0..30 {
            let x = samples.row(r);
            let y = project(x, &p).unwrap();
            total_in += x.iter().zip(&p.mean).map(|(a, m)| (a - m).powi(2)).sum::<f64>();
            total_out += y.0.iter().map(|v| v * v).sum::<f64>();
            let back: Vec<f64> = p
                .components
                .mul_vec(&y.0)
                .iter()
                .zip(&p.mean)
                .map(|(a, m)| a + m)
                .collect();
            for (a, b) in back.iter().zip(x) {
                assert!((a - b).abs() < 1e-8);
            }
        }
        assert!((total_in - total_out).abs() < 1e-8);
    }

    #[test]
    fn pca_errors() {
        let m = Matrix::zeros(3, 5);
        assert_eq!(fit_pca(&m, 4), Err(VecError::Rank { n: 3, d: 4 }));
        assert_eq!(
            fit_pca(&Matrix::zeros(10, 5), 6),
            Err(VecError::TargetTooLarge { d: 6, d_raw: 5 })
        );
        let mut bad = Matrix::zeros(4, 2);
        bad.set(1, 1, f64::NAN);
        assert_eq!(fit_pca(&bad, 1), Err(VecError::NonFinite));
    }

    #[test]
    fn project_mean_is_zero_and_inverts_known_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = fit_pca(&random_matrix(&mut rng, 40, 7), 3).unwrap();
        let zero = project(&p.mean, &p).unwrap();
        assert!(zero.0.iter().all(|v| v.abs() < 1e-12));
        let x = [0.3, -1.1, 2.0];
        let raw: Vec<f64> = p
            .components
            .mul_vec(&x)
            .iter()
            .zip(&p.mean)
            .map(|(a, m)| a + m)
            .collect();
        let got = project(&raw, &p).unwrap();
        for (a, b) in got.0.iter().zip(x) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(matches!(
            project(&[1.0], &p),
            Err(VecError::Dimension { expected: 7, got: 1 })
        ));
    }

    #[test]
    fn fuse_cases() {
        let a = Embedding(vec![1.0, 0.0]);
        let b = Embedding(vec![0.0, 1.0]);
        assert_eq!(fuse(&a, &b, 1.0).unwrap(), a);
        assert_eq!(fuse(&a, &b, 0.0).unwrap(), b);
        assert_eq!(fuse(&a, &b, 0.5).unwrap(), Embedding(vec![0.5, 0.5]));
        assert_eq!(fuse(&a, &b, 1.5), Err(VecError::Weight(1.5)));
        assert!(fuse(&a, &Embedding(vec![1.0]), 0.5).is_err());
    }

    #[test]
    fn dot_cases() {
        assert_eq!(dot_score(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert_eq!(dot_score(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(dot_score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn top_k_cases() {
        let scores = vec![("a", 3.0), ("b", 1.0), ("c", 2.0)];
        let got: Vec<&str> = top_k(scores, 2).into_iter().map(|(k, _)| k).collect();
        assert_eq!(got, vec!["a", "c"]);
        let got = top_k(vec![("b", 1.0), ("a", 1.0)], 1);
        assert_eq!(got, vec![("a", 1.0)]);
        assert_eq!(top_k(vec![("x", 1.0)], 5).len(), 1);
    }
}
