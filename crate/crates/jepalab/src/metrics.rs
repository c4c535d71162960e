//! Representation-quality metrics: soft effective rank of the embedding
//! spectrum (RankMe) and the effective rank of a whitened between-class
//! scatter matrix over grouped views (LiDAR).

use nalgebra::{DMatrix, SymmetricEigen};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{build_context_input, build_inference_input};
use crate::data::TokenizedImage;
use crate::error::{Error, Result};
use crate::masking::MaskConfig;
use crate::model::{encode, ModelState};
use crate::numerics::{Graph, ParamNodes, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub rankme_eps: f64,
    pub lidar_delta: f64,
    pub lidar_views: usize,
    /// Embedding budget for metric evaluation (desk-scale stand-in for the
    /// references' 25600).
    pub sample_count: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            rankme_eps: 1e-7,
            lidar_delta: 1e-4,
            lidar_views: 4,
            sample_count: 1024,
        }
    }
}

/// N x d pooled representations, optionally grouped as n sources x q views.
#[derive(Clone, Debug)]
pub struct EmbeddingMatrix {
    pub z: Tensor<f32>,
    pub grouping: Option<(usize, usize)>,
}

impl EmbeddingMatrix {
    pub fn new(z: Tensor<f32>, grouping: Option<(usize, usize)>) -> Result<Self> {
        if z.rows() < 2 {
            return Err(Error::DegenerateEmbeddings(format!(
                "need at least 2 embeddings, got {}",
                z.rows()
            )));
        }
        if let Some((n, q)) = grouping {
            if q < 2 || n < 2 || n * q != z.rows() {
                return Err(Error::DegenerateEmbeddings(format!(
                    "grouping {n}x{q} does not cover {} rows",
                    z.rows()
                )));
            }
        }
        Ok(EmbeddingMatrix { z, grouping })
    }
}

fn to_dmatrix(z: &Tensor<f32>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(z.rows(), z.cols(), z.data().iter().map(|&v| v as f64))
}

fn entropy_rank(weights: &[f64], eps: f64) -> f64 {
    let total: f64 = weights.iter().sum();
    let mut entropy = 0.0;
    for &w in weights {
        let p = w / total + eps;
        entropy -= p * p.ln();
    }
    entropy.exp()
}

/// Soft effective rank: exp of the Shannon entropy of the L1-normalized
/// singular-value spectrum (with `eps` added to each probability).
pub fn rankme(z: &Tensor<f32>, eps: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::DegenerateEmbeddings("non-finite embeddings".into()));
    }
    if z.data().iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateEmbeddings("all-zero embedding matrix".into()));
    }
    let m = to_dmatrix(z);
    let sigma = m.singular_values();
    Ok(entropy_rank(sigma.as_slice(), eps))
}

/// Effective rank of `S_w^{-1/2} S_b S_w^{-1/2}` over grouped views:
/// between-class scatter of the group means, whitened by the regularized
/// within-class scatter.
pub fn lidar(emb: &EmbeddingMatrix, delta: f64, eps: f64) -> Result<f64> {
    let (n, q) = emb
        .grouping
        .ok_or_else(|| Error::DegenerateEmbeddings("lidar needs grouped embeddings".into()))?;
    if !emb.z.is_finite() {
        return Err(Error::DegenerateEmbeddings("non-finite embeddings".into()));
    }
    let d = emb.z.cols();
    let z = to_dmatrix(&emb.z);

    let mut means = DMatrix::<f64>::zeros(n, d);
    for i in 0..n {
        for v in 0..q {
            for c in 0..d {
                means[(i, c)] += z[(i * q + v, c)];
            }
        }
    }
    means /= q as f64;
    let grand = means.row_sum() / n as f64;

    let mut sigma_b = DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        let diff = means.row(i) - &grand;
        sigma_b += diff.transpose() * &diff;
    }
    sigma_b /= n as f64;

    let mut sigma_w = DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        for v in 0..q {
            let diff = z.row(i * q + v) - means.row(i);
            sigma_w += diff.transpose() * &diff;
        }
    }
    sigma_w /= (n * q) as f64;
    for c in 0..d {
        sigma_w[(c, c)] += delta;
    }

    // Symmetric inverse square root with eigenvalue clamp.
    let eig = SymmetricEigen::new(sigma_w);
    let mut inv_sqrt = DMatrix::<f64>::zeros(d, d);
    for c in 0..d {
        let lam = eig.eigenvalues[c].max(1e-10);
        let s = 1.0 / lam.sqrt();
        if !s.is_finite() {
            return Err(Error::DegenerateEmbeddings(
                "within-class scatter not invertible".into(),
            ));
        }
        let col = eig.eigenvectors.column(c);
        inv_sqrt += s * &col * col.transpose();
    }

    let lambda_mat = &inv_sqrt * sigma_b * &inv_sqrt;
    // symmetrize against round-off before the eigensolve
    let lambda_mat = (&lambda_mat + lambda_mat.transpose()) * 0.5;
    let eig = SymmetricEigen::new(lambda_mat);
    let lams: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    if lams.iter().sum::<f64>() == 0.0 {
        // zero between-class scatter: a single point has effective rank 1
        return Ok(1.0);
    }
    Ok(entropy_rank(&lams, eps))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    Student,
    Teacher,
}

impl EmbedMode {
    fn params<'a>(&self, state: &'a ModelState) -> &'a crate::numerics::ParamStore {
        match self {
            EmbedMode::Student => &state.student,
            EmbedMode::Teacher => &state.teacher,
        }
    }
}

/// One embedding row per image: inference-conditioned encode, then mean over
/// content-token outputs only.
pub fn embed_dataset(
    state: &ModelState,
    images: &[TokenizedImage],
    mode: EmbedMode,
    pool_kernel: usize,
    pool_stride: usize,
    conditioning: bool,
) -> Result<Tensor<f32>> {
    let d = state.enc.dim;
    let mut out = Vec::with_capacity(images.len() * d);
    let params = mode.params(state);
    for img in images {
        let input = build_inference_input(img, pool_kernel, pool_stride, conditioning)?;
        let mut g = Graph::<f32>::inference();
        let nodes = ParamNodes::register(&mut g, params)?;
        let z = encode(&mut g, &nodes, &state.enc, &input)?;
        let content = z.content(&mut g)?;
        let pooled = g.mean_rows(content)?;
        out.extend_from_slice(g.data(pooled));
    }
    Tensor::new(vec![images.len(), d], out)
}

/// Grouped views for LiDAR: q independent context masks per clean image,
/// encoded training-style (context only, conditioned), mean-pooled over
/// content outputs.
pub fn lidar_views(
    state: &ModelState,
    images: &[TokenizedImage],
    q: usize,
    rng: &mut ChaCha8Rng,
    mask_cfg: &MaskConfig,
    mode: EmbedMode,
    conditioning: bool,
) -> Result<EmbeddingMatrix> {
    let d = state.enc.dim;
    let mut out = Vec::with_capacity(images.len() * q * d);
    let params = mode.params(state);
    for img in images {
        for _ in 0..q {
            let spec = crate::masking::sample_masks(rng, img.grid, mask_cfg)?;
            let input = build_context_input(img, &spec, conditioning)?;
            let mut g = Graph::<f32>::inference();
            let nodes = ParamNodes::register(&mut g, params)?;
            let z = encode(&mut g, &nodes, &state.enc, &input)?;
            let content = z.content(&mut g)?;
            let pooled = g.mean_rows(content)?;
            out.extend_from_slice(g.data(pooled));
        }
    }
    EmbeddingMatrix::new(
        Tensor::new(vec![images.len() * q, d], out)?,
        Some((images.len(), q)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn rankme_identity_is_full_rank() {
        let mut data = vec![0f32; 32 * 32];
        for i in 0..32 {
            data[i * 32 + i] = 1.0;
        }
        let z = Tensor::new(vec![32, 32], data).unwrap();
        let r = rankme(&z, 1e-7).unwrap();
        assert!((r - 32.0).abs() < 0.1, "rankme {r}");
    }

    #[test]
    fn rankme_rank_one_is_near_one() {
        let u: Vec<f32> = (0..32).map(|i| (i as f32 * 0.37).sin()).collect();
        let v: Vec<f32> = (0..32).map(|i| 1.0 + (i as f32 * 0.11).cos()).collect();
        let mut data = vec![0f32; 32 * 32];
        for i in 0..32 {
            for j in 0..32 {
                data[i * 32 + j] = u[i] * v[j];
            }
        }
        let z = Tensor::new(vec![32, 32], data).unwrap();
        let r = rankme(&z, 1e-7).unwrap();
        assert!((r - 1.0).abs() < 0.1, "rankme {r}");
    }

    #[test]
    fn rankme_rejects_zero_matrix() {
        let z = Tensor::zeros(vec![8, 4]);
        assert!(matches!(rankme(&z, 1e-7), Err(Error::DegenerateEmbeddings(_))));
    }

    #[test]
    fn rankme_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..64 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = Tensor::new(vec![64, 32], data.clone()).unwrap();
        let scaled = Tensor::new(vec![64, 32], data.iter().map(|v| v * 37.5).collect()).unwrap();
        let a = rankme(&z, 1e-7).unwrap();
        let b = rankme(&scaled, 1e-7).unwrap();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn lidar_orthogonal_means_scores_n_minus_one() {
        // 5 groups, identical embeddings within each group, orthogonal
        // equal-norm means: S_w = delta*I and the centered means have rank 4.
        let (n, q, d) = (5, 3, 16);
        let mut data = vec![0f32; n * q * d];
        for i in 0..n {
            for v in 0..q {
                data[(i * q + v) * d + i] = 2.0;
            }
        }
        let emb = EmbeddingMatrix::new(Tensor::new(vec![n * q, d], data).unwrap(), Some((n, q))).unwrap();
        let score = lidar(&emb, 1e-4, 1e-7).unwrap();
        assert!((score - 4.0).abs() / 4.0 < 0.05, "lidar {score}");
    }

    #[test]
    fn lidar_identical_embeddings_returns_one() {
        let (n, q, d) = (4, 2, 8);
        let row: Vec<f32> = (0..d).map(|i| i as f32 * 0.1).collect();
        let mut data = Vec::new();
        for _ in 0..n * q {
            data.extend_from_slice(&row);
        }
        let emb = EmbeddingMatrix::new(Tensor::new(vec![n * q, d], data).unwrap(), Some((n, q))).unwrap();
        assert_eq!(lidar(&emb, 1e-4, 1e-7).unwrap(), 1.0);
    }

    #[test]
    fn lidar_rotation_invariance() {
        let (n, q, d) = (6, 3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..n * q * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = Tensor::new(vec![n * q, d], data).unwrap();

        // Random orthogonal matrix via Gram-Schmidt on a random square.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= dot * bi;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-3 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let mut rotated = vec![0f32; n * q * d];
        for r in 0..n * q {
            for c in 0..d {
                let mut acc = 0f64;
                for k in 0..d {
                    acc += z.data()[r * d + k] as f64 * basis[c][k];
                }
                rotated[r * d + c] = acc as f32;
            }
        }
        let a = lidar(&EmbeddingMatrix::new(z, Some((n, q))).unwrap(), 1e-4, 1e-7).unwrap();
        let b = lidar(
            &EmbeddingMatrix::new(Tensor::new(vec![n * q, d], rotated).unwrap(), Some((n, q))).unwrap(),
            1e-4,
            1e-7,
        )
        .unwrap();
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }

    #[test]
    fn embedding_matrix_validates() {
        assert!(EmbeddingMatrix::new(Tensor::zeros(vec![1, 4]), None).is_err());
        assert!(EmbeddingMatrix::new(Tensor::zeros(vec![6, 4]), Some((3, 2))).is_ok());
        assert!(EmbeddingMatrix::new(Tensor::zeros(vec![6, 4]), Some((6, 1))).is_err());
        assert!(EmbeddingMatrix::new(Tensor::zeros(vec![6, 4]), Some((2, 2))).is_err());
    }
}
