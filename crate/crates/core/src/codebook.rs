//! Codebook embedding table and cosine change magnitude.

use rand::Rng;
use rand_distr::StandardNormal;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::grid::TokenId;
use crate::rng::{stream_rng, Stream};

pub const DEFAULT_K: usize = 8192;
pub const DEFAULT_DIM: usize = 384;

const NORM_TOLERANCE: f64 = 1e-6;

/// `k x dim` table of unit-norm embedding rows, stored row-major as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    embeddings: Vec<f32>,
    /// Round-robin cluster count when the table came from the clustered generator.
    n_clusters: Option<usize>,
}

impl Codebook {
    /// Wraps an existing table. Rows must already be unit norm (within 1e-6).
    pub fn new(k: usize, dim: usize, embeddings: Vec<f32>) -> Result<Self> {
        if k < 2 || dim < 2 {
            return Err(Error::param(
                "codebook",
                format!("need k >= 2 and dim >= 2, got k={k} dim={dim}"),
            ));
        }
        if k > TokenId::MAX as usize + 1 {
            return Err(Error::param("codebook", format!("k={k} exceeds 16-bit token ids")));
        }
        if embeddings.len() != k * dim {
            return Err(Error::DimensionMismatch {
                expected: format!("{} values ({k}x{dim})", k * dim),
                actual: format!("{} values", embeddings.len()),
            });
        }
        for (i, row) in embeddings.chunks_exact(dim).enumerate() {
            let norm = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::param("codebook", format!("row {i} has norm {norm}, expected 1")));
            }
        }
        Ok(Self {
            k,
            dim,
            embeddings,
            n_clusters: None,
        })
    }

    /// Normalizes `rows` (row-major `k x dim`) and wraps the result.
    pub fn from_unnormalized(k: usize, dim: usize, rows: &[f64]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("codebook", "dim must be positive"));
        }
        let unit = normalize_rows(rows, dim)?;
        Self::new(k, dim, unit.into_iter().map(|x| x as f32).collect())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn n_clusters(&self) -> Option<usize> {
        self.n_clusters
    }

    /// Cluster of `token` under round-robin assignment, if the table is clustered.
    pub fn cluster_of(&self, token: TokenId) -> Option<usize> {
        self.n_clusters.map(|c| token as usize % c)
    }

    pub fn row(&self, token: TokenId) -> Result<&[f32]> {
        self.check(token)?;
        Ok(self.row_unchecked(token))
    }

    #[inline]
    fn row_unchecked(&self, token: TokenId) -> &[f32] {
        let start = token as usize * self.dim;
        &self.embeddings[start..start + self.dim]
    }

    fn check(&self, token: TokenId) -> Result<()> {
        if (token as usize) < self.k {
            Ok(())
        } else {
            Err(Error::InvalidToken {
                token: token as u32,
                k: self.k,
            })
        }
    }

    /// `1 - <E[a], E[b]>`, clamped to `[0, 2]`.
    pub fn cosine_change(&self, a: TokenId, b: TokenId) -> Result<f64> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.cosine_change_unchecked(a, b))
    }

    /// Caller guarantees both ids are `< k`.
    #[inline]
    pub(crate) fn cosine_change_unchecked(&self, a: TokenId, b: TokenId) -> f64 {
        if a == b {
            return 0.0;
        }
        let dot = dot(self.row_unchecked(a), self.row_unchecked(b));
        (1.0 - dot).clamp(0.0, 2.0)
    }
}

/// Memoized [`Codebook::cosine_change`] for one clip's worth of work. Token pairs recur heavily
/// across the configurations of a sweep, and each lookup replaces two row fetches.
#[derive(Debug)]
pub struct ChangeCache<'a> {
    codebook: &'a Codebook,
    map: FxHashMap<u32, f64>,
}

impl<'a> ChangeCache<'a> {
    pub fn new(codebook: &'a Codebook) -> Self {
        Self {
            codebook,
            map: FxHashMap::default(),
        }
    }

    pub fn codebook(&self) -> &'a Codebook {
        self.codebook
    }

    /// Caller guarantees both ids are `< k`. Identical to the uncached value.
    #[inline]
    pub(crate) fn change(&mut self, a: TokenId, b: TokenId) -> f64 {
        if a == b {
            return 0.0;
        }
        let key = ((a.min(b) as u32) << 16) | a.max(b) as u32;
        let cb = self.codebook;
        *self.map.entry(key).or_insert_with(|| cb.cosine_change_unchecked(a, b))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Order-independent of argument swap: products are summed in the same lane order either way.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0f32; 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for i in 0..8 {
            acc[i] += ca[i] * cb[i];
        }
    }
    acc.iter().map(|&x| x as f64).sum::<f64>() + tail
}

/// Scales each row of a row-major matrix to unit l2 norm.
pub fn normalize_rows(rows: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !rows.len().is_multiple_of(dim) {
        return Err(Error::param(
            "matrix",
            format!("{} values do not form rows of width {dim}", rows.len()),
        ));
    }
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.chunks_exact(dim).enumerate() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::param("matrix", format!("row {i} has zero or non-finite norm")));
        }
        out.extend(row.iter().map(|x| x / norm));
    }
    Ok(out)
}

/// Synthetic stand-in for a learned codebook: `n_clusters` random unit centers,
/// tokens assigned round-robin, each row a jittered and renormalized center.
pub fn gen_clustered_codebook(k: usize, dim: usize, n_clusters: usize, spread: f64, seed: u64) -> Result<Codebook> {
    if n_clusters == 0 || n_clusters > k {
        return Err(Error::param(
            "n_clusters",
            format!("must be in 1..={k}, got {n_clusters}"),
        ));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::param("spread", format!("must be positive, got {spread}")));
    }
    if k < 2 || dim < 2 {
        return Err(Error::param(
            "codebook",
            format!("need k >= 2 and dim >= 2, got k={k} dim={dim}"),
        ));
    }
    let mut rng = stream_rng(seed, Stream::Codebook, 0);
    let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };

    let centers = normalize_rows(&gauss(n_clusters * dim), dim)?;
    let noise = gauss(k * dim);
    let mut rows = Vec::with_capacity(k * dim);
    for i in 0..k {
        let c = &centers[(i % n_clusters) * dim..][..dim];
        let n = &noise[i * dim..][..dim];
        rows.extend(c.iter().zip(n).map(|(c, n)| c + spread * n));
    }
    let mut cb = Codebook::from_unnormalized(k, dim, &rows)?;
    cb.n_clusters = Some(n_clusters);
    Ok(cb)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    fn axis_codebook() -> Codebook {
        // rows: e0, e1, -e0
        Codebook::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap()
    }

    #[test]
    fn cosine_change_reference_values() {
        let cb = axis_codebook();
        assert_eq!(cb.cosine_change(1, 1).unwrap(), 0.0);
        assert_abs_diff_eq!(cb.cosine_change(0, 1).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cb.cosine_change(0, 2).unwrap(), 2.0, epsilon = 1e-12);
        assert!(cb.cosine_change(0, 3).is_err());
    }

    #[test]
    fn normalize_rows_reference_values() {
        let out = normalize_rows(&[3.0, 4.0], 2).unwrap();
        assert_abs_diff_eq!(out[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 0.8, epsilon = 1e-15);

        let unit = [1.0, 0.0, 0.0, 0.6, 0.8, 0.0];
        let again = normalize_rows(&unit, 3).unwrap();
        for (a, b) in unit.iter().zip(&again) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        assert!(normalize_rows(&[1.0, 1.0, 0.0, 0.0], 2).is_err());
    }

    #[test]
    fn normalize_random_matrix() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m: Vec<f64> = (0..50 * 7).map(|_| rng.random_range(-5.0..5.0)).collect();
        let out = normalize_rows(&m, 7).unwrap();
        for row in out.chunks_exact(7) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert_abs_diff_eq!(n, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn rejects_non_unit_rows() {
        assert!(Codebook::new(2, 2, vec![1.0, 0.0, 0.5, 0.5]).is_err());
        assert!(Codebook::new(1, 2, vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn clustered_is_deterministic() {
        let a = gen_clustered_codebook(64, 16, 4, 0.2, 11).unwrap();
        let b = gen_clustered_codebook(64, 16, 4, 0.2, 11).unwrap();
        let c = gen_clustered_codebook(64, 16, 4, 0.2, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.cluster_of(5), Some(1));
    }

    #[test]
    fn single_tight_cluster_collapses() {
        let cb = gen_clustered_codebook(32, 8, 1, 1e-7, 5).unwrap();
        let mut worst = 0.0f64;
        for a in 0..32 {
            for b in 0..32 {
                worst = worst.max(cb.cosine_change(a, b).unwrap());
            }
        }
        assert!(worst < 1e-6, "max pairwise change {worst}");
    }

    #[test]
    fn clustered_generator_rejects_bad_counts() {
        assert!(gen_clustered_codebook(8, 4, 0, 0.1, 0).is_err());
        assert!(gen_clustered_codebook(8, 4, 9, 0.1, 0).is_err());
        assert!(gen_clustered_codebook(8, 4, 2, 0.0, 0).is_err());
        assert!(gen_clustered_codebook(8, 1, 2, 0.1, 0).is_err());
    }

    #[test]
    fn within_cluster_closer_than_across() {
        // Scaled-down instance of k=8192, dim=384, 64 clusters, spread 0.15.
        let cb = gen_clustered_codebook(256, 384, 64, 0.15, 1).unwrap();
        let (mut within, mut nw, mut across, mut na) = (0.0, 0u32, 0.0, 0u32);
        for a in 0..256u16 {
            for b in (a + 1)..256u16 {
                let m = cb.cosine_change(a, b).unwrap();
                if a % 64 == b % 64 {
                    within += m;
                    nw += 1;
                } else {
                    across += m;
                    na += 1;
                }
            }
        }
        let (within, across) = (within / nw as f64, across / na as f64);
        assert!(within < across, "within {within} across {across}");
    }
}
