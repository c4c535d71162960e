//! Shared test support: independent linear-algebra oracles and small
//! configuration helpers. The oracles deliberately avoid the library's
//! implementation paths (nalgebra) — eigenvalues come from a hand-written
//! cyclic Jacobi sweep.

#![allow(dead_code)]

use jepalab::config::{DataKind, RunConfig};
use jepalab::numerics::Tensor;

/// Eigenvalues of a dense symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    for sweep in 0..200 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p][q] * m[p][q];
            }
        }
        if off < 1e-26 || sweep == 199 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

fn gram(z: &Tensor<f32>) -> Vec<Vec<f64>> {
    let (n, d) = (z.rows(), z.cols());
    let mut g = vec![vec![0.0f64; d]; d];
    for r in 0..n {
        let row = z.row(r);
        for i in 0..d {
            for j in i..d {
                g[i][j] += row[i] as f64 * row[j] as f64;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            g[i][j] = g[j][i];
        }
    }
    g
}

/// Singular values of Z (descending) via Jacobi on Z^T Z.
pub fn singular_values_oracle(z: &Tensor<f32>) -> Vec<f64> {
    let mut vals: Vec<f64> = jacobi_eigenvalues(&gram(z))
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect();
    vals.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    vals
}

fn entropy_rank(weights: &[f64], eps: f64) -> f64 {
    let total: f64 = weights.iter().sum();
    let mut h = 0.0;
    for &w in weights {
        let p = w / total + eps;
        h -= p * p.ln();
    }
    h.exp()
}

/// Soft effective rank recomputed from the Jacobi singular values.
pub fn rankme_oracle(z: &Tensor<f32>, eps: f64) -> f64 {
    entropy_rank(&singular_values_oracle(z), eps)
}

/// Full LDA effective-rank recomputation with the Jacobi eigensolver on
/// every step (whitening and final spectrum).
pub fn lidar_oracle(z: &Tensor<f32>, n: usize, q: usize, delta: f64, eps: f64) -> f64 {
    let d = z.cols();
    let at = |r: usize, c: usize| z.data()[r * d + c] as f64;
    let mut means = vec![vec![0.0f64; d]; n];
    for i in 0..n {
        for v in 0..q {
            for c in 0..d {
                means[i][c] += at(i * q + v, c);
            }
        }
        for c in 0..d {
            means[i][c] /= q as f64;
        }
    }
    let mut grand = vec![0.0f64; d];
    for m in &means {
        for (g, &v) in grand.iter_mut().zip(m) {
            *g += v;
        }
    }
    grand.iter_mut().for_each(|g| *g /= n as f64);

    let mut sb = vec![vec![0.0f64; d]; d];
    for m in &means {
        for i in 0..d {
            for j in 0..d {
                sb[i][j] += (m[i] - grand[i]) * (m[j] - grand[j]);
            }
        }
    }
    sb.iter_mut().flatten().for_each(|v| *v /= n as f64);

    let mut sw = vec![vec![0.0f64; d]; d];
    for i in 0..n {
        for v in 0..q {
            for a in 0..d {
                for b in 0..d {
                    sw[a][b] += (at(i * q + v, a) - means[i][a]) * (at(i * q + v, b) - means[i][b]);
                }
            }
        }
    }
    sw.iter_mut().flatten().for_each(|v| *v /= (n * q) as f64);
    for c in 0..d {
        sw[c][c] += delta;
    }

    // inverse square root by eigendecomposition: track eigenvectors with a
    // second Jacobi pass over an augmented identity
    let (vals, vecs) = jacobi_with_vectors(&sw);
    let mut w = vec![vec![0.0f64; d]; d];
    for k in 0..d {
        let s = 1.0 / vals[k].max(1e-10).sqrt();
        for i in 0..d {
            for j in 0..d {
                w[i][j] += s * vecs[i][k] * vecs[j][k];
            }
        }
    }
    let mut lam = vec![vec![0.0f64; d]; d];
    // lam = w * sb * w
    let mut tmp = vec![vec![0.0f64; d]; d];
    for i in 0..d {
        for k in 0..d {
            let wik = w[i][k];
            for j in 0..d {
                tmp[i][j] += wik * sb[k][j];
            }
        }
    }
    for i in 0..d {
        for k in 0..d {
            let tik = tmp[i][k];
            for j in 0..d {
                lam[i][j] += tik * w[k][j];
            }
        }
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let s = 0.5 * (lam[i][j] + lam[j][i]);
            lam[i][j] = s;
            lam[j][i] = s;
        }
    }
    let evs: Vec<f64> = jacobi_eigenvalues(&lam).into_iter().map(|l| l.max(0.0)).collect();
    if evs.iter().sum::<f64>() == 0.0 {
        return 1.0;
    }
    entropy_rank(&evs, eps)
}

/// Jacobi with accumulated eigenvectors (columns of the returned matrix).
pub fn jacobi_with_vectors(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m = a.to_vec();
    let mut v = vec![vec![0.0f64; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for sweep in 0..200 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p][q] * m[p][q];
            }
        }
        if off < 1e-26 || sweep == 199 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    ((0..n).map(|i| m[i][i]).collect(), v)
}

/// Small fast-training config used by integration tests.
pub fn tiny_run_config(out_dir: std::path::PathBuf) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.out_dir = out_dir;
    cfg.data.n = 48;
    cfg.data.eval_count = 8;
    cfg.data.image_size = 32;
    cfg.train.epochs = 4;
    cfg.train.warmup_epochs = 1;
    cfg.train.batch_size = 16;
    cfg.train.log_every = 1;
    cfg.train.checkpoint_every = 3;
    cfg.probe.epochs = 10;
    cfg
}

pub fn random_tensor(rows: usize, cols: usize, seed: u64, scale: f32) -> Tensor<f32> {
    use rand::Rng;
    let mut rng = jepalab::data::derive_rng(seed, 0x7e57);
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

pub fn dir_config(root: std::path::PathBuf, out: std::path::PathBuf) -> RunConfig {
    let mut cfg = tiny_run_config(out);
    cfg.data.kind = DataKind::Dir;
    cfg.data.path = Some(root);
    cfg
}
