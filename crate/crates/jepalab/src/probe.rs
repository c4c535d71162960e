//! Frozen-backbone linear probe: a batch-norm layer with non-learnable
//! affine parameters followed by a linear classifier, trained with LARS.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOptimizer {
    Lars,
    /// Preset used for out-of-distribution probing tables.
    SgdNesterov,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// LARS trust coefficient.
    pub eta: f64,
    pub weight_decay: f64,
    pub optimizer: ProbeOptimizer,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 50,
            batch_size: 256,
            lr: 0.05,
            momentum: 0.9,
            eta: 0.001,
            weight_decay: 0.0,
            optimizer: ProbeOptimizer::Lars,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

/// Normalization statistics plus the linear classifier.
#[derive(Clone, Debug)]
pub struct ProbeHead {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub weight: Tensor<f32>,
    pub bias: Vec<f32>,
    pub bn_eps: f64,
}

impl ProbeHead {
    pub fn classes(&self) -> usize {
        self.weight.cols()
    }

    fn normalize_eval(&self, row: &[f32], out: &mut [f32]) {
        for ((o, &x), (&m, &v)) in out
            .iter_mut()
            .zip(row)
            .zip(self.running_mean.iter().zip(&self.running_var))
        {
            *o = (x - m) / (v as f64 + self.bn_eps).sqrt() as f32;
        }
    }

    fn logits_row(&self, xhat: &[f32], out: &mut [f32]) {
        out.copy_from_slice(&self.bias);
        for (k, &x) in xhat.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.weight.row(k)) {
                *o += x * w;
            }
        }
    }

    /// Argmax class per row; ties resolve to the lowest class index.
    pub fn predict(&self, features: &Tensor<f32>) -> Vec<usize> {
        let d = features.cols();
        let c = self.classes();
        let mut xhat = vec![0f32; d];
        let mut logits = vec![0f32; c];
        let mut out = Vec::with_capacity(features.rows());
        for r in 0..features.rows() {
            self.normalize_eval(features.row(r), &mut xhat);
            self.logits_row(&xhat, &mut logits);
            let mut best = 0;
            for (j, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        out
    }
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

struct OptSlot {
    velocity: Vec<f32>,
}

fn apply_update(
    cfg: &ProbeConfig,
    param: &mut [f32],
    grad: &[f32],
    slot: &mut OptSlot,
) {
    match cfg.optimizer {
        ProbeOptimizer::Lars => {
            // trust-ratio scaled SGD with momentum; ratio falls back to 1
            // when either norm vanishes (zero-initialized weights).
            let wnorm = l2(param);
            let mut g: Vec<f64> = grad.iter().map(|&v| v as f64).collect();
            if cfg.weight_decay != 0.0 {
                for (gi, &p) in g.iter_mut().zip(param.iter()) {
                    *gi += cfg.weight_decay * p as f64;
                }
            }
            let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            let trust = if wnorm > 0.0 && gnorm > 0.0 {
                cfg.eta * wnorm / gnorm
            } else {
                1.0
            };
            let local_lr = cfg.lr * trust;
            for ((p, v), gi) in param.iter_mut().zip(&mut slot.velocity).zip(&g) {
                *v = (cfg.momentum * *v as f64 + local_lr * gi) as f32;
                *p -= *v;
            }
        }
        ProbeOptimizer::SgdNesterov => {
            for ((p, v), &graw) in param.iter_mut().zip(&mut slot.velocity).zip(grad) {
                let g = graw as f64 + cfg.weight_decay * *p as f64;
                let vnew = cfg.momentum * *v as f64 + g;
                *v = vnew as f32;
                *p -= (cfg.lr * (g + cfg.momentum * vnew)) as f32;
            }
        }
    }
}

/// Train normalization statistics plus the linear layer on frozen features.
pub fn train_probe(
    features: &Tensor<f32>,
    labels: &[usize],
    cfg: &ProbeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ProbeHead> {
    let n = features.rows();
    let d = features.cols();
    if labels.len() != n {
        return Err(Error::Invalid(format!(
            "{n} feature rows vs {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::Invalid("no training features".into()));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    if classes < 2 {
        return Err(Error::Invalid(format!("need at least 2 classes, got {classes}")));
    }

    let mut head = ProbeHead {
        running_mean: vec![0.0; d],
        running_var: vec![1.0; d],
        weight: Tensor::zeros(vec![d, classes]),
        bias: vec![0.0; classes],
        bn_eps: cfg.bn_eps,
    };
    let mut w_slot = OptSlot { velocity: vec![0.0; d * classes] };
    let mut b_slot = OptSlot { velocity: vec![0.0; classes] };

    let batch = cfg.batch_size.max(1).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rand::Rng::gen_range(rng, 0..=i));
        }
        for chunk in order.chunks(batch) {
            let b = chunk.len();
            // batch statistics (biased variance)
            let mut mean = vec![0f64; d];
            let mut var = vec![0f64; d];
            for &r in chunk {
                for (m, &x) in mean.iter_mut().zip(features.row(r)) {
                    *m += x as f64;
                }
            }
            mean.iter_mut().for_each(|m| *m /= b as f64);
            for &r in chunk {
                for ((v, &x), m) in var.iter_mut().zip(features.row(r)).zip(&mean) {
                    let dxy = x as f64 - m;
                    *v += dxy * dxy;
                }
            }
            var.iter_mut().for_each(|v| *v /= b as f64);

            for k in 0..d {
                head.running_mean[k] =
                    ((1.0 - cfg.bn_momentum) * head.running_mean[k] as f64 + cfg.bn_momentum * mean[k]) as f32;
                head.running_var[k] =
                    ((1.0 - cfg.bn_momentum) * head.running_var[k] as f64 + cfg.bn_momentum * var[k]) as f32;
            }

            // forward with batch stats and accumulate softmax CE gradients
            let mut dw = vec![0f32; d * classes];
            let mut db = vec![0f32; classes];
            let mut xhat = vec![0f32; d];
            let mut logits = vec![0f64; classes];
            for &r in chunk {
                for ((o, &x), (m, v)) in xhat
                    .iter_mut()
                    .zip(features.row(r))
                    .zip(mean.iter().zip(&var))
                {
                    *o = ((x as f64 - m) / (v + cfg.bn_eps).sqrt()) as f32;
                }
                for (j, l) in logits.iter_mut().enumerate() {
                    *l = head.bias[j] as f64;
                }
                for (k, &x) in xhat.iter().enumerate() {
                    for (l, &w) in logits.iter_mut().zip(head.weight.row(k)) {
                        *l += x as f64 * w as f64;
                    }
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut probs: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
                let sum: f64 = probs.iter().sum();
                probs.iter_mut().for_each(|p| *p /= sum);
                probs[labels[r]] -= 1.0;
                for (j, &p) in probs.iter().enumerate() {
                    let g = (p / b as f64) as f32;
                    db[j] += g;
                    for (k, &x) in xhat.iter().enumerate() {
                        dw[k * classes + j] += x * g;
                    }
                }
            }
            apply_update(cfg, head.weight.data_mut(), &dw, &mut w_slot);
            apply_update(cfg, &mut head.bias, &db, &mut b_slot);
        }
    }
    Ok(head)
}

/// Top-1 accuracy of the head on a labeled feature matrix.
pub fn evaluate_probe(head: &ProbeHead, features: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    if features.rows() == 0 {
        return Err(Error::Invalid("empty evaluation set".into()));
    }
    if labels.len() != features.rows() {
        return Err(Error::Invalid(format!(
            "{} feature rows vs {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let preds = head.predict(features);
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::derive_rng;
    use rand::Rng;

    fn gaussian_blobs(n_per: usize, d: usize, sep: f32, seed: u64) -> (Tensor<f32>, Vec<usize>) {
        let mut rng = derive_rng(seed, 0);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for class in 0..2 {
            for _ in 0..n_per {
                for k in 0..d {
                    let center = if k == 0 {
                        if class == 0 { -sep } else { sep }
                    } else {
                        0.0
                    };
                    data.push(center + rng.gen_range(-0.5f32..0.5));
                }
                labels.push(class);
            }
        }
        (Tensor::new(vec![2 * n_per, d], data).unwrap(), labels)
    }

    #[test]
    fn separable_blobs_reach_high_train_accuracy() {
        let (x, y) = gaussian_blobs(60, 8, 3.0, 1);
        let cfg = ProbeConfig { epochs: 30, batch_size: 32, ..ProbeConfig::default() };
        let head = train_probe(&x, &y, &cfg, &mut derive_rng(2, 0)).unwrap();
        let acc = evaluate_probe(&head, &x, &y).unwrap();
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn shuffled_labels_sit_at_chance() {
        let mut rng = derive_rng(3, 0);
        let n = 400;
        let d = 16;
        let c = 4;
        let data: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let x = Tensor::new(vec![n, d], data).unwrap();
        let cfg = ProbeConfig { epochs: 10, batch_size: 64, ..ProbeConfig::default() };
        let head = train_probe(&x, &labels, &cfg, &mut derive_rng(4, 0)).unwrap();

        // fresh random features, same label process: accuracy near 1/C
        let data2: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let labels2: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let x2 = Tensor::new(vec![n, d], data2).unwrap();
        let acc = evaluate_probe(&head, &x2, &labels2).unwrap();
        assert!((acc - 0.25).abs() <= 0.1, "chance-level accuracy {acc}");
    }

    #[test]
    fn zero_variance_feature_dim_is_finite() {
        let (mut x, y) = gaussian_blobs(20, 4, 2.0, 5);
        // clamp one dim to a constant
        let cols = x.cols();
        for r in 0..x.rows() {
            x.row_mut(r)[cols - 1] = 7.5;
        }
        let cfg = ProbeConfig { epochs: 5, batch_size: 16, ..ProbeConfig::default() };
        let head = train_probe(&x, &y, &cfg, &mut derive_rng(6, 0)).unwrap();
        assert!(head.weight.is_finite());
        let acc = evaluate_probe(&head, &x, &y).unwrap();
        assert!(acc.is_finite());
    }

    #[test]
    fn constant_head_on_balanced_set_scores_one_over_c() {
        let d = 4;
        let c = 4;
        let head = ProbeHead {
            running_mean: vec![0.0; d],
            running_var: vec![1.0; d],
            weight: Tensor::zeros(vec![d, c]),
            bias: vec![0.0; c],
            bn_eps: 1e-5,
        };
        // zero weights, zero bias: all logits tie, argmax is class 0
        let n = 40;
        let mut rng = derive_rng(7, 0);
        let data: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let x = Tensor::new(vec![n, d], data).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let acc = evaluate_probe(&head, &x, &labels).unwrap();
        assert_eq!(acc, 1.0 / c as f64);
    }

    #[test]
    fn empty_eval_set_errors() {
        let head = ProbeHead {
            running_mean: vec![0.0; 2],
            running_var: vec![1.0; 2],
            weight: Tensor::zeros(vec![2, 2]),
            bias: vec![0.0; 2],
            bn_eps: 1e-5,
        };
        assert!(evaluate_probe(&head, &Tensor::zeros(vec![0, 2]), &[]).is_err());
    }

    #[test]
    fn single_class_errors() {
        let x = Tensor::zeros(vec![4, 2]);
        let y = vec![0, 0, 0, 0];
        assert!(train_probe(&x, &y, &ProbeConfig::default(), &mut derive_rng(8, 0)).is_err());
    }

    #[test]
    fn positive_scaling_preserves_predictions() {
        let (x, y) = gaussian_blobs(40, 6, 2.5, 9);
        let scaled = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|v| v * 12.0).collect(),
        )
        .unwrap();
        let cfg = ProbeConfig { epochs: 20, batch_size: 32, ..ProbeConfig::default() };
        let h1 = train_probe(&x, &y, &cfg, &mut derive_rng(10, 0)).unwrap();
        let h2 = train_probe(&scaled, &y, &cfg, &mut derive_rng(10, 0)).unwrap();
        assert_eq!(h1.predict(&x), h2.predict(&scaled));
    }
}
